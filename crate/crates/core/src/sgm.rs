//! Scene-graph memory: a lifelong record of partial observations, with
//! hypothetical query edges and fixed-width feature vectors for prediction.
//!
//! The memory never forgets. Every node and edge the agent has ever seen stays
//! in the graph; observations only bump counters and timestamps. Inspecting a
//! furniture piece also produces negative evidence: edges that were observed
//! true before but are absent now are recorded as explicit false sightings.
//! Queries attach hypothetical edges drawn from the prior knowledge graph, so
//! even a never-seen object has candidate locations to rank.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::PriorsGraph;
use crate::scenegraph::Observation;
use crate::seed::{child_seed, rng_from, SeedHasher};
use crate::types::{NodeId, NodeType, Relation};

/// Width of a text embedding vector.
pub const EMBEDDING_DIM: usize = 96;

/// Width of a node feature vector: embedding, four dynamics scalars, and a
/// node-type one-hot.
pub const NODE_FEATURE_DIM: usize = EMBEDDING_DIM + 4 + 5;

/// Width of an edge feature vector: nine scalars and a relation one-hot.
pub const EDGE_FEATURE_DIM: usize = 9 + 4;

/// Scale applied to node temporal counters before concatenation.
pub const NODE_TEMPORAL_SCALE: f64 = 0.2;

/// Scale applied to edge temporal counters before concatenation.
pub const EDGE_TEMPORAL_SCALE: f64 = 0.5;

/// Default prior probability above which a hypothetical edge is attached.
pub const DEFAULT_HYPOTHETICAL_THRESHOLD: f64 = 0.05;

/// Default minimum number of candidate edges per query.
pub const DEFAULT_MIN_CANDIDATES: usize = 5;

/// A deterministic mapping from description strings to unit-norm embedding
/// vectors of [`EMBEDDING_DIM`] components.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Embeds a string by seeding a generator with a stable hash of the text and
/// drawing a standard-normal vector, normalized to unit length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    seed: u64,
}

impl HashEmbedder {
    pub fn new(seed: u64) -> Self {
        HashEmbedder { seed }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(0)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let seed = SeedHasher::new().u64(self.seed).str("embedding").str(text).finish();
        let mut rng = rng_from(seed);
        let mut v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        } else {
            v[0] = 1.0;
        }
        v
    }
}

/// Embeds strings from a precomputed label -> vector table, falling back to a
/// [`HashEmbedder`] for labels the table does not cover.
///
/// The table file is a JSON object mapping each label to an array of
/// [`EMBEDDING_DIM`] floats; vectors are normalized on load.
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    table: BTreeMap<String, Vec<f64>>,
    fallback: HashEmbedder,
}

impl TableEmbedder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        for (label, v) in &mut table {
            if v.len() != EMBEDDING_DIM {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("embedding for '{label}' has {} components, expected {EMBEDDING_DIM}", v.len()),
                ));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 0.0 || !norm.is_finite() {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("embedding for '{label}' is not normalizable"),
                ));
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        Ok(TableEmbedder { table, fallback: HashEmbedder::default() })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl EmbeddingProvider for TableEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        match self.table.get(text) {
            Some(v) => v.clone(),
            None => self.fallback.embed(text),
        }
    }
}

/// Identifier of a node in the memory graph.
///
/// Memory ids are assigned in first-encounter order and are unrelated to the
/// ids of the underlying scene: the agent cannot see those.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemId(pub u64);

impl fmt::Display for MemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Key of an edge in the memory graph: (parent, child, relation).
pub type EdgeKey = (MemId, MemId, Relation);

/// Last observed state of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeState {
    True,
    False,
    Unknown,
}

impl EdgeState {
    /// Feature encoding: true 1.0, false 0.0, never observed 0.5.
    pub fn as_feature(self) -> f64 {
        match self {
            EdgeState::True => 1.0,
            EdgeState::False => 0.0,
            EdgeState::Unknown => 0.5,
        }
    }
}

/// Which feature groups are populated; disabled groups are zeroed in place so
/// vector widths never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    /// Text embeddings and their cosine similarity.
    pub semantic: bool,
    /// Observation counters, timestamps, and last-state slots.
    pub temporal: bool,
    /// The edge prior-probability slot.
    pub priors: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags { semantic: true, temporal: true, priors: true }
    }
}

/// A node in the memory graph with its observation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SGMNode {
    pub id: MemId,
    /// Scene node this entry was bound to, absent for query nodes describing
    /// objects that have never been observed.
    pub scene_id: Option<NodeId>,
    pub node_type: NodeType,
    pub class_label: String,
    pub description: String,
    /// Set once the node has been the subject of a query; never cleared.
    pub is_query: bool,
    /// Unit-norm text embedding of the description. Recomputed from the
    /// provider on load rather than serialized.
    #[serde(skip)]
    pub embedding: Vec<f64>,
    pub last_observed_t: Option<u64>,
    pub times_observed: u64,
    /// Timestep of the most recent observed location change.
    pub last_moved_t: Option<u64>,
    pub times_moved: u64,
    /// Parent node and relation of the most recent sighting.
    pub last_location: Option<(MemId, Relation)>,
}

impl SGMNode {
    /// Observed moves per re-observation. Detecting a move takes two
    /// sightings, so the denominator is one less than the observation count.
    pub fn observed_move_frequency(&self) -> f64 {
        self.times_moved as f64 / self.times_observed.saturating_sub(1).max(1) as f64
    }

    /// The node feature vector at time `now`, always [`NODE_FEATURE_DIM`]
    /// wide: embedding (96), scaled time since last observed, scaled
    /// observation count, scaled time since last moved, observed move
    /// frequency, and a node-type one-hot (5). Never-observed timestamps use
    /// a `now + 1` sentinel, one step older than anything seen.
    pub fn features(&self, now: u64, flags: FeatureFlags) -> Vec<f64> {
        let mut out = Vec::with_capacity(NODE_FEATURE_DIM);
        if flags.semantic {
            assert_eq!(
                self.embedding.len(),
                EMBEDDING_DIM,
                "node {} has no embedding; memory snapshots must be rehydrated before featurizing",
                self.id
            );
            out.extend_from_slice(&self.embedding);
        } else {
            out.resize(EMBEDDING_DIM, 0.0);
        }
        if flags.temporal {
            out.push(NODE_TEMPORAL_SCALE * age(now, self.last_observed_t));
            out.push(NODE_TEMPORAL_SCALE * self.times_observed as f64);
            out.push(NODE_TEMPORAL_SCALE * age(now, self.last_moved_t));
            out.push(self.observed_move_frequency());
        } else {
            out.extend_from_slice(&[0.0; 4]);
        }
        let mut one_hot = [0.0; 5];
        one_hot[self.node_type.one_hot_index()] = 1.0;
        out.extend_from_slice(&one_hot);
        out
    }
}

/// An edge in the memory graph with its observation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SGMEdge {
    pub parent: MemId,
    pub child: MemId,
    pub relation: Relation,
    /// True when the edge was created from the priors for a query rather than
    /// from a sighting. The flag records provenance; counters update normally
    /// once the edge is actually observed.
    pub is_hypothetical: bool,
    pub times_observed: u64,
    pub times_true: u64,
    /// Number of observed true <-> false transitions.
    pub times_changed: u64,
    pub last_observed_t: Option<u64>,
    pub last_state_change_t: Option<u64>,
    pub last_state: EdgeState,
    pub prior_prob: f64,
}

impl SGMEdge {
    fn new(parent: MemId, child: MemId, relation: Relation, prior_prob: f64, is_hypothetical: bool) -> Self {
        SGMEdge {
            parent,
            child,
            relation,
            is_hypothetical,
            times_observed: 0,
            times_true: 0,
            times_changed: 0,
            last_observed_t: None,
            last_state_change_t: None,
            last_state: EdgeState::Unknown,
            prior_prob,
        }
    }

    /// Fraction of observations in which the edge was true, zero before any
    /// observation.
    pub fn true_frequency(&self) -> f64 {
        if self.times_observed == 0 {
            0.0
        } else {
            self.times_true as f64 / self.times_observed as f64
        }
    }

    /// The edge feature vector at time `now`, always [`EDGE_FEATURE_DIM`]
    /// wide: endpoint cosine similarity, scaled time since last observed,
    /// scaled time since last state change, scaled observation / true /
    /// change counts, true frequency, last state, prior probability, and a
    /// relation one-hot (4). Never-observed timestamps use a `now + 1`
    /// sentinel.
    pub fn features(&self, cosine: f64, now: u64, flags: FeatureFlags) -> Vec<f64> {
        let mut out = Vec::with_capacity(EDGE_FEATURE_DIM);
        out.push(if flags.semantic { cosine } else { 0.0 });
        if flags.temporal {
            out.push(EDGE_TEMPORAL_SCALE * age(now, self.last_observed_t));
            out.push(EDGE_TEMPORAL_SCALE * age(now, self.last_state_change_t));
            out.push(EDGE_TEMPORAL_SCALE * self.times_observed as f64);
            out.push(EDGE_TEMPORAL_SCALE * self.times_true as f64);
            out.push(self.true_frequency());
            out.push(EDGE_TEMPORAL_SCALE * self.times_changed as f64);
            out.push(self.last_state.as_feature());
        } else {
            out.extend_from_slice(&[0.0; 7]);
        }
        out.push(if flags.priors { self.prior_prob } else { 0.0 });
        let mut one_hot = [0.0; 4];
        one_hot[self.relation.one_hot_index()] = 1.0;
        out.extend_from_slice(&one_hot);
        out
    }
}

/// Serializable state of a [`SceneGraphMemory`], without embeddings and
/// without the priors or provider handles. Rehydrate with
/// [`SceneGraphMemory::from_snapshot`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub t: u64,
    pub nodes: BTreeMap<MemId, SGMNode>,
    #[serde(with = "crate::serde_util::vec_map")]
    pub edges: BTreeMap<EdgeKey, SGMEdge>,
    pub query_ids: BTreeSet<MemId>,
    /// Ground-truth edge labels, present only in recorded training data.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty", with = "crate::serde_util::vec_map")]
    pub labels: BTreeMap<EdgeKey, bool>,
}

/// The agent's accumulated graph memory of one environment.
#[derive(Clone)]
pub struct SceneGraphMemory {
    priors: Arc<PriorsGraph>,
    provider: Arc<dyn EmbeddingProvider>,
    t: u64,
    next_id: u64,
    nodes: BTreeMap<MemId, SGMNode>,
    edges: BTreeMap<EdgeKey, SGMEdge>,
    scene_to_mem: BTreeMap<NodeId, MemId>,
    query_ids: BTreeSet<MemId>,
    labels: BTreeMap<EdgeKey, bool>,
}

impl fmt::Debug for SceneGraphMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SceneGraphMemory")
            .field("t", &self.t)
            .field("nodes", &self.nodes.len())
            .field("edges", &self.edges.len())
            .field("queries", &self.query_ids.len())
            .finish_non_exhaustive()
    }
}

impl SceneGraphMemory {
    pub fn new(priors: Arc<PriorsGraph>, provider: Arc<dyn EmbeddingProvider>) -> Self {
        SceneGraphMemory {
            priors,
            provider,
            t: 0,
            next_id: 0,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            scene_to_mem: BTreeMap::new(),
            query_ids: BTreeSet::new(),
            labels: BTreeMap::new(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn priors(&self) -> &PriorsGraph {
        &self.priors
    }

    pub fn node(&self, id: MemId) -> Option<&SGMNode> {
        self.nodes.get(&id)
    }

    pub fn get(&self, id: MemId) -> Result<&SGMNode> {
        self.nodes.get(&id).ok_or_else(|| Error::Memory(format!("unknown memory node {id}")))
    }

    pub fn edge(&self, key: &EdgeKey) -> Option<&SGMEdge> {
        self.edges.get(key)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SGMNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &SGMEdge> {
        self.edges.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn query_ids(&self) -> &BTreeSet<MemId> {
        &self.query_ids
    }

    /// Memory node bound to a scene node, if that scene node has been seen.
    pub fn mem_id_of(&self, scene_id: NodeId) -> Option<MemId> {
        self.scene_to_mem.get(&scene_id).copied()
    }

    /// Lowest-id object node whose description matches exactly.
    pub fn find_object_by_description(&self, description: &str) -> Option<MemId> {
        self.nodes
            .values()
            .find(|n| n.node_type == NodeType::Object && n.description == description)
            .map(|n| n.id)
    }

    /// All furniture nodes currently in memory, ascending id.
    pub fn furniture_nodes(&self) -> impl Iterator<Item = &SGMNode> {
        self.nodes.values().filter(|n| n.node_type == NodeType::Furniture)
    }

    pub fn labels(&self) -> &BTreeMap<EdgeKey, bool> {
        &self.labels
    }

    /// Records a ground-truth label for an existing edge.
    pub fn set_label(&mut self, key: EdgeKey, value: bool) -> Result<()> {
        if !self.edges.contains_key(&key) {
            return Err(Error::Memory(format!(
                "cannot label absent edge ({}, {}, {})",
                key.0, key.1, key.2
            )));
        }
        self.labels.insert(key, value);
        Ok(())
    }

    pub fn clear_labels(&mut self) {
        self.labels.clear();
    }

    /// Moves the memory clock forward. Time never rewinds.
    pub fn advance_to(&mut self, t: u64) -> Result<()> {
        if t < self.t {
            return Err(Error::Memory(format!("cannot rewind memory from t={} to t={t}", self.t)));
        }
        self.t = t;
        Ok(())
    }

    /// Folds one observation into the memory.
    ///
    /// Visible rooms, furniture, and objects are upserted with their counters
    /// incremented once each. Visible location edges are recorded true. Every
    /// previously observed edge whose parent furniture was inspected but that
    /// is absent from the observation is recorded false. True <-> false
    /// transitions bump `times_changed`, and an object sighted at a different
    /// furniture than before bumps its move counter.
    pub fn integrate_observation(&mut self, o: &Observation) -> Result<()> {
        if o.t != self.t {
            return Err(Error::Memory(format!(
                "observation is for t={} but the memory clock is at t={}",
                o.t, self.t
            )));
        }
        let t = self.t;
        let priors = Arc::clone(&self.priors);
        let mut seen: BTreeSet<MemId> = BTreeSet::new();
        let mut room_class: BTreeMap<NodeId, String> = BTreeMap::new();
        let mut inspected: BTreeSet<MemId> = BTreeSet::new();

        for f in &o.furniture {
            let room_id = self.upsert_scene_node(&f.room);
            self.mark_observed(room_id, t, &mut seen);
            let furn_id = self.upsert_scene_node(&f.node);
            self.mark_observed(furn_id, t, &mut seen);
            inspected.insert(furn_id);
            room_class.insert(f.node.id, f.room.class_label.clone());
            let prior = priors
                .room_furniture_probs(&f.room.class_label)
                .into_iter()
                .find(|(label, _)| *label == f.node.class_label)
                .map(|(_, p)| p)
                .unwrap_or(0.0);
            self.observe_edge_true(room_id, furn_id, Relation::Contains, prior, t);
            self.update_location(furn_id, room_id, Relation::Contains, t);
        }

        let mut visible: BTreeSet<EdgeKey> = BTreeSet::new();
        for v in &o.objects {
            let furn_mem = self.scene_to_mem.get(&v.edge.parent).copied().ok_or_else(|| {
                Error::Memory(format!(
                    "object {} sits under furniture {} that is not part of the observation",
                    v.node.id, v.edge.parent
                ))
            })?;
            let room = room_class.get(&v.edge.parent).cloned().ok_or_else(|| {
                Error::Memory(format!("furniture {} has no room in the observation", v.edge.parent))
            })?;
            let obj_id = self.upsert_scene_node(&v.node);
            self.mark_observed(obj_id, t, &mut seen);
            let furn_label = self.nodes[&furn_mem].class_label.clone();
            let prior =
                priors.prior_prob_unchecked(&room, &furn_label, &v.node.class_label, v.edge.relation);
            self.observe_edge_true(furn_mem, obj_id, v.edge.relation, prior, t);
            self.update_location(obj_id, furn_mem, v.edge.relation, t);
            visible.insert((furn_mem, obj_id, v.edge.relation));
        }

        let absent: Vec<EdgeKey> = self
            .edges
            .iter()
            .filter(|(key, e)| {
                inspected.contains(&key.0) && e.times_observed > 0 && !visible.contains(key)
            })
            .map(|(key, _)| *key)
            .collect();
        for key in absent {
            self.record_edge_event(key, false, t);
        }
        Ok(())
    }

    /// Registers a query for an object description and attaches hypothetical
    /// location edges from the priors.
    ///
    /// The query binds to the lowest-id object node with the same description
    /// when one exists, so observation history carries over. A hypothetical
    /// edge is attached to every furniture node whose prior for the query's
    /// class is at least `threshold`; if fewer than `min_k` candidate edges
    /// result, the best-ranked remaining priors are added one furniture
    /// instance at a time until `min_k` is reached or the priors run out.
    pub fn add_query(&mut self, description: &str, threshold: f64, min_k: usize) -> MemId {
        let q = self.ensure_query_node(description);
        let priors = Arc::clone(&self.priors);
        let Some(class) = priors.object_class_of_description(description) else {
            return q;
        };

        let furniture = self.furniture_with_rooms();
        for (fid, room, fclass) in &furniture {
            for rel in Relation::ALL {
                let p = priors.prior_prob_unchecked(room, fclass, class, rel);
                if p > 0.0 && p >= threshold {
                    self.ensure_hypothetical(*fid, q, rel, p);
                }
            }
        }

        let mut count = self.candidate_count(q);
        if count < min_k {
            let ranked = priors.top_k_prior_locations(class, usize::MAX).unwrap_or_default();
            'fill: for (room, fclass, rel, p) in ranked {
                if p <= 0.0 {
                    break;
                }
                for (fid, froom, fc) in &furniture {
                    if *froom == room
                        && *fc == fclass
                        && !self.edges.contains_key(&(*fid, q, rel))
                    {
                        self.ensure_hypothetical(*fid, q, rel, p);
                        count += 1;
                        if count >= min_k {
                            break 'fill;
                        }
                    }
                }
            }
        }
        q
    }

    /// Like [`Self::add_query`] but picks the hypothetical edges uniformly at
    /// random instead of by prior rank, until the query has `k` candidates or
    /// the furniture pool is exhausted. Used by the prior-free model ablation.
    pub fn add_query_random(&mut self, description: &str, k: usize, seed: u64) -> MemId {
        let q = self.ensure_query_node(description);
        let priors = Arc::clone(&self.priors);
        let class: Option<String> = priors.object_class_of_description(description).map(str::to_owned);

        let mut pool: Vec<(MemId, Relation, f64)> = Vec::new();
        for (fid, room, fclass) in &self.furniture_with_rooms() {
            for rel in Relation::ALL {
                if self.edges.contains_key(&(*fid, q, rel)) {
                    continue;
                }
                let p = match &class {
                    Some(c) => priors.prior_prob_unchecked(room, fclass, c, rel),
                    None => 0.0,
                };
                pool.push((*fid, rel, p));
            }
        }

        let want = k.saturating_sub(self.candidate_count(q)).min(pool.len());
        let mut rng = rng_from(child_seed(seed, "hypothetical", description));
        for idx in rand::seq::index::sample(&mut rng, pool.len(), want) {
            let (fid, rel, p) = pool[idx];
            self.ensure_hypothetical(fid, q, rel, p);
        }
        q
    }

    /// The candidate location edges of a query, ascending (parent, relation).
    pub fn candidate_edges(&self, query: MemId) -> Result<Vec<EdgeKey>> {
        if !self.query_ids.contains(&query) {
            return Err(Error::Memory(format!("node {query} is not a registered query")));
        }
        Ok(self.edges.keys().filter(|(_, child, _)| *child == query).copied().collect())
    }

    /// The node feature vector of a memory node at the current time.
    pub fn node_features(&self, id: MemId, flags: FeatureFlags) -> Result<Vec<f64>> {
        Ok(self.get(id)?.features(self.t, flags))
    }

    /// The edge feature vector of a memory edge at the current time.
    pub fn edge_features(&self, key: &EdgeKey, flags: FeatureFlags) -> Result<Vec<f64>> {
        let e = self.edges.get(key).ok_or_else(|| {
            Error::Memory(format!("unknown memory edge ({}, {}, {})", key.0, key.1, key.2))
        })?;
        let cos = if flags.semantic {
            cosine(&self.get(e.parent)?.embedding, &self.get(e.child)?.embedding)
        } else {
            0.0
        };
        Ok(e.features(cos, self.t, flags))
    }

    /// Copies the serializable state out of the memory.
    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            t: self.t,
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            query_ids: self.query_ids.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Rebuilds a memory from a snapshot, revalidating it and recomputing the
    /// embeddings the snapshot does not carry.
    pub fn from_snapshot(
        snap: MemorySnapshot,
        priors: Arc<PriorsGraph>,
        provider: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self> {
        let next_id = snap.nodes.keys().next_back().map(|m| m.0 + 1).unwrap_or(0);
        let mut mem = SceneGraphMemory {
            priors,
            provider,
            t: snap.t,
            next_id,
            nodes: snap.nodes,
            edges: snap.edges,
            scene_to_mem: BTreeMap::new(),
            query_ids: snap.query_ids,
            labels: snap.labels,
        };
        for (id, node) in &mem.nodes {
            if let Some(scene_id) = node.scene_id {
                if let Some(other) = mem.scene_to_mem.insert(scene_id, *id) {
                    return Err(Error::Memory(format!(
                        "scene node {scene_id} is bound to both {other} and {id}"
                    )));
                }
            }
        }
        mem.validate()?;
        for node in mem.nodes.values_mut() {
            node.embedding = mem.provider.embed(&node.description);
        }
        Ok(mem)
    }

    /// Checks the structural and counter invariants of the memory.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Memory(msg));
        for (id, n) in &self.nodes {
            if *id != n.id {
                return fail(format!("node {} is stored under key {id}", n.id));
            }
            if n.times_observed >= 1 && n.last_observed_t.is_none() {
                return fail(format!("node {id} was observed but has no timestamp"));
            }
            if n.times_moved > n.times_observed.saturating_sub(1) {
                return fail(format!("node {id} moved more often than it was re-observed"));
            }
            if let Some((parent, _)) = n.last_location {
                if !self.nodes.contains_key(&parent) {
                    return fail(format!("node {id} was last seen at unknown node {parent}"));
                }
            }
        }
        for (key, e) in &self.edges {
            if *key != (e.parent, e.child, e.relation) {
                return fail(format!("edge ({}, {}, {}) is stored under the wrong key", e.parent, e.child, e.relation));
            }
            if !self.nodes.contains_key(&e.parent) || !self.nodes.contains_key(&e.child) {
                return fail(format!("edge ({}, {}, {}) has a missing endpoint", e.parent, e.child, e.relation));
            }
            if e.times_true > e.times_observed {
                return fail(format!("edge ({}, {}, {}) was true more often than observed", e.parent, e.child, e.relation));
            }
            if e.times_changed > e.times_observed.saturating_sub(1) {
                return fail(format!("edge ({}, {}, {}) changed more often than it was re-observed", e.parent, e.child, e.relation));
            }
            if e.times_observed >= 1 && e.last_observed_t.is_none() {
                return fail(format!("edge ({}, {}, {}) was observed but has no timestamp", e.parent, e.child, e.relation));
            }
        }
        for q in &self.query_ids {
            if !self.nodes.contains_key(q) {
                return fail(format!("query id {q} has no node"));
            }
        }
        for key in self.labels.keys() {
            if !self.edges.contains_key(key) {
                return fail(format!("label on absent edge ({}, {}, {})", key.0, key.1, key.2));
            }
        }
        Ok(())
    }

    fn alloc_id(&mut self) -> MemId {
        let id = MemId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Memory node for a scene node, creating it on first encounter. A fresh
    /// object binds to an existing unbound query node with the same
    /// description, so query history and observation history share one entry.
    fn upsert_scene_node(&mut self, n: &crate::scenegraph::SceneNode) -> MemId {
        if let Some(&id) = self.scene_to_mem.get(&n.id) {
            return id;
        }
        let description = n.description();
        if n.node_type == NodeType::Object {
            if let Some(id) = self.unbound_query_node(&description) {
                self.nodes.get_mut(&id).expect("query node exists").scene_id = Some(n.id);
                self.scene_to_mem.insert(n.id, id);
                return id;
            }
        }
        let id = self.alloc_id();
        let embedding = self.provider.embed(&description);
        self.nodes.insert(
            id,
            SGMNode {
                id,
                scene_id: Some(n.id),
                node_type: n.node_type,
                class_label: n.class_label.clone(),
                description,
                is_query: false,
                embedding,
                last_observed_t: None,
                times_observed: 0,
                last_moved_t: None,
                times_moved: 0,
                last_location: None,
            },
        );
        self.scene_to_mem.insert(n.id, id);
        id
    }

    fn unbound_query_node(&self, description: &str) -> Option<MemId> {
        self.nodes
            .values()
            .find(|n| {
                n.is_query
                    && n.scene_id.is_none()
                    && n.node_type == NodeType::Object
                    && n.description == description
            })
            .map(|n| n.id)
    }

    fn mark_observed(&mut self, id: MemId, t: u64, seen: &mut BTreeSet<MemId>) {
        if seen.insert(id) {
            let n = self.nodes.get_mut(&id).expect("node was just upserted");
            n.times_observed += 1;
            n.last_observed_t = Some(t);
        }
    }

    fn update_location(&mut self, id: MemId, parent: MemId, relation: Relation, t: u64) {
        let n = self.nodes.get_mut(&id).expect("node was just upserted");
        if n.node_type == NodeType::Object {
            if let Some((prev_parent, _)) = n.last_location {
                if prev_parent != parent {
                    n.last_moved_t = Some(t);
                    n.times_moved += 1;
                }
            }
        }
        n.last_location = Some((parent, relation));
    }

    fn observe_edge_true(&mut self, parent: MemId, child: MemId, relation: Relation, prior: f64, t: u64) {
        let key = (parent, child, relation);
        self.edges
            .entry(key)
            .or_insert_with(|| SGMEdge::new(parent, child, relation, prior, false));
        self.record_edge_event(key, true, t);
    }

    fn record_edge_event(&mut self, key: EdgeKey, observed_true: bool, t: u64) {
        let e = self.edges.get_mut(&key).expect("edge exists");
        e.times_observed += 1;
        if observed_true {
            e.times_true += 1;
        }
        let flipped = matches!(
            (e.last_state, observed_true),
            (EdgeState::True, false) | (EdgeState::False, true)
        );
        if flipped {
            e.times_changed += 1;
            e.last_state_change_t = Some(t);
        }
        e.last_state = if observed_true { EdgeState::True } else { EdgeState::False };
        e.last_observed_t = Some(t);
    }

    fn ensure_hypothetical(&mut self, parent: MemId, child: MemId, relation: Relation, prior: f64) {
        self.edges
            .entry((parent, child, relation))
            .or_insert_with(|| SGMEdge::new(parent, child, relation, prior, true));
    }

    fn ensure_query_node(&mut self, description: &str) -> MemId {
        if let Some(id) = self.find_object_by_description(description) {
            self.nodes.get_mut(&id).expect("node exists").is_query = true;
            self.query_ids.insert(id);
            return id;
        }
        let class = self
            .priors
            .object_class_of_description(description)
            .unwrap_or(description)
            .to_owned();
        let id = self.alloc_id();
        let embedding = self.provider.embed(description);
        self.nodes.insert(
            id,
            SGMNode {
                id,
                scene_id: None,
                node_type: NodeType::Object,
                class_label: class,
                description: description.to_owned(),
                is_query: true,
                embedding,
                last_observed_t: None,
                times_observed: 0,
                last_moved_t: None,
                times_moved: 0,
                last_location: None,
            },
        );
        self.query_ids.insert(id);
        id
    }

    /// Furniture nodes with the room class they were last seen in, ascending
    /// id. Furniture whose room is unknown (never the case for observations
    /// built by this crate) is skipped.
    fn furniture_with_rooms(&self) -> Vec<(MemId, String, String)> {
        self.nodes
            .values()
            .filter(|n| n.node_type == NodeType::Furniture)
            .filter_map(|n| {
                let (room_id, _) = n.last_location?;
                let room = self.nodes.get(&room_id)?;
                Some((n.id, room.class_label.clone(), n.class_label.clone()))
            })
            .collect()
    }

    fn candidate_count(&self, query: MemId) -> usize {
        self.edges.keys().filter(|(_, child, _)| *child == query).count()
    }
}

/// Timesteps since `last`, with `now + 1` standing in for "never".
fn age(now: u64, last: Option<u64>) -> f64 {
    match last {
        Some(t0) => now.saturating_sub(t0) as f64,
        None => (now + 1) as f64,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::{observe, SceneGraph};
    use proptest::prelude::*;
    use std::io::Write;

    struct TestWorld {
        sg: SceneGraph,
        shelf: NodeId,
        counter: NodeId,
        bed: NodeId,
        mug: NodeId,
        plate: NodeId,
    }

    /// Kitchen with a shelf and a counter top, bedroom with a bed; a mug on
    /// the shelf and a plate on the counter. All labels exist in the bundled
    /// priors so query tests can look them up.
    fn world() -> TestWorld {
        let mut sg = SceneGraph::new();
        let house = sg.add_house("house").unwrap();
        let floor = sg
            .add_child(house, Relation::Contains, NodeType::Floor, "floor", Vec::new())
            .unwrap();
        let kitchen = sg
            .add_child(floor, Relation::Contains, NodeType::Room, "kitchen", Vec::new())
            .unwrap();
        let bedroom = sg
            .add_child(floor, Relation::Contains, NodeType::Room, "bedroom", Vec::new())
            .unwrap();
        let shelf = sg
            .add_child(kitchen, Relation::Contains, NodeType::Furniture, "shelf", Vec::new())
            .unwrap();
        let counter = sg
            .add_child(kitchen, Relation::Contains, NodeType::Furniture, "counter top", Vec::new())
            .unwrap();
        let bed = sg
            .add_child(bedroom, Relation::Contains, NodeType::Furniture, "bed", Vec::new())
            .unwrap();
        let mug = sg
            .add_child(shelf, Relation::OnTop, NodeType::Object, "mug", Vec::new())
            .unwrap();
        let plate = sg
            .add_child(counter, Relation::OnTop, NodeType::Object, "plate", Vec::new())
            .unwrap();
        TestWorld { sg, shelf, counter, bed, mug, plate }
    }

    fn memory() -> SceneGraphMemory {
        let priors = Arc::new(PriorsGraph::bundled().clone());
        SceneGraphMemory::new(priors, Arc::new(HashEmbedder::default()))
    }

    fn look(mem: &mut SceneGraphMemory, sg: &SceneGraph, t: u64, ids: &[NodeId]) {
        let set: BTreeSet<NodeId> = ids.iter().copied().collect();
        mem.advance_to(t).unwrap();
        let o = observe(sg, t, &set, 0.0, 7).unwrap();
        mem.integrate_observation(&o).unwrap();
    }

    #[test]
    fn hash_embedder_is_deterministic_and_unit_norm() {
        let a = HashEmbedder::default();
        let b = HashEmbedder::default();
        let v1 = a.embed("ceramic mug");
        let v2 = b.embed("ceramic mug");
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), EMBEDDING_DIM);
        let norm = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_ne!(v1, a.embed("ceramic bowl"));
        assert_ne!(v1, HashEmbedder::new(1).embed("ceramic mug"));
    }

    #[test]
    fn table_embedder_loads_normalizes_and_falls_back() {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[0] = 2.0;
        let table = serde_json::json!({ "mug": v });
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, "{table}").unwrap();
        let emb = TableEmbedder::load(file.path()).unwrap();
        assert_eq!(emb.len(), 1);
        let mug = emb.embed("mug");
        assert!((mug[0] - 1.0).abs() < 1e-12);
        assert!(mug[1..].iter().all(|x| *x == 0.0));
        assert_eq!(emb.embed("bowl"), HashEmbedder::default().embed("bowl"));

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        write!(bad, "{}", serde_json::json!({ "mug": [1.0, 2.0] })).unwrap();
        assert!(matches!(TableEmbedder::load(bad.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn scripted_replay_matches_hand_counters() {
        let mut w = world();
        let mut mem = memory();

        look(&mut mem, &w.sg, 0, &[w.shelf, w.counter]);
        let shelf = mem.mem_id_of(w.shelf).unwrap();
        let counter = mem.mem_id_of(w.counter).unwrap();
        let mug = mem.mem_id_of(w.mug).unwrap();
        let on_shelf = (shelf, mug, Relation::OnTop);
        assert_eq!(mem.node(mug).unwrap().times_observed, 1);
        assert_eq!(mem.edge(&on_shelf).unwrap().times_true, 1);
        assert_eq!(mem.edge(&on_shelf).unwrap().last_state, EdgeState::True);

        // The mug moves to the counter; only the now-empty shelf is checked.
        w.sg.move_object(w.mug, w.counter, Relation::In).unwrap();
        look(&mut mem, &w.sg, 1, &[w.shelf]);
        let e = mem.edge(&on_shelf).unwrap();
        assert_eq!((e.times_observed, e.times_true, e.times_changed), (2, 1, 1));
        assert_eq!(e.last_state, EdgeState::False);
        assert_eq!(e.last_state_change_t, Some(1));
        let n = mem.node(mug).unwrap();
        assert_eq!(n.times_observed, 1);
        assert_eq!(n.last_moved_t, None);

        // Both kitchen furniture checked: the mug turns up at the counter.
        look(&mut mem, &w.sg, 2, &[w.shelf, w.counter]);
        let n = mem.node(mug).unwrap();
        assert_eq!(n.times_observed, 2);
        assert_eq!(n.last_moved_t, Some(2));
        assert_eq!(n.times_moved, 1);
        assert!((n.observed_move_frequency() - 1.0).abs() < 1e-12);
        let e = mem.edge(&on_shelf).unwrap();
        assert_eq!((e.times_observed, e.times_true, e.times_changed), (3, 1, 1));
        let in_counter = mem.edge(&(counter, mug, Relation::In)).unwrap();
        assert_eq!((in_counter.times_observed, in_counter.times_true), (1, 1));
        assert_eq!(mem.node(shelf).unwrap().times_observed, 3);

        mem.validate().unwrap();
    }

    #[test]
    fn true_and_false_counts_accumulate() {
        let mut w = world();
        let mut mem = memory();
        for t in 0..3 {
            look(&mut mem, &w.sg, t, &[w.shelf]);
        }
        w.sg.move_object(w.mug, w.counter, Relation::OnTop).unwrap();
        look(&mut mem, &w.sg, 3, &[w.shelf]);

        let shelf = mem.mem_id_of(w.shelf).unwrap();
        let mug = mem.mem_id_of(w.mug).unwrap();
        let e = mem.edge(&(shelf, mug, Relation::OnTop)).unwrap();
        assert_eq!((e.times_observed, e.times_true), (4, 3));
        assert!((e.true_frequency() - 0.75).abs() < 1e-12);
        assert_eq!(e.times_changed, 1);
    }

    #[test]
    fn move_across_sightings_sets_move_frequency() {
        let mut w = world();
        let mut mem = memory();
        mem.advance_to(1).unwrap();
        look(&mut mem, &w.sg, 1, &[w.shelf]);
        w.sg.move_object(w.mug, w.bed, Relation::Under).unwrap();
        look(&mut mem, &w.sg, 5, &[w.bed]);

        let mug = mem.mem_id_of(w.mug).unwrap();
        let n = mem.node(mug).unwrap();
        assert_eq!(n.last_moved_t, Some(5));
        assert!((n.observed_move_frequency() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clock_mismatch_and_rewind_are_rejected() {
        let w = world();
        let mut mem = memory();
        mem.advance_to(3).unwrap();
        assert!(matches!(mem.advance_to(2), Err(Error::Memory(_))));
        let o = observe(&w.sg, 1, &BTreeSet::from([w.shelf]), 0.0, 7).unwrap();
        assert!(matches!(mem.integrate_observation(&o), Err(Error::Memory(_))));
    }

    #[test]
    fn query_reuses_observed_node_and_keeps_its_edges() {
        let w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.shelf, w.counter, w.bed]);
        let mug = mem.mem_id_of(w.mug).unwrap();

        let q = mem.add_query("mug", DEFAULT_HYPOTHETICAL_THRESHOLD, DEFAULT_MIN_CANDIDATES);
        assert_eq!(q, mug);
        assert!(mem.node(q).unwrap().is_query);
        let shelf = mem.mem_id_of(w.shelf).unwrap();
        let got: BTreeSet<EdgeKey> = mem.candidate_edges(q).unwrap().into_iter().collect();
        assert!(got.contains(&(shelf, q, Relation::OnTop)));
        assert!(!mem.edge(&(shelf, q, Relation::OnTop)).unwrap().is_hypothetical);

        // With only three furniture pieces the prior pool may run dry before
        // min_k; in that case every nonzero prior plus the sighting must be
        // covered.
        let p = PriorsGraph::bundled();
        let mut possible: BTreeSet<EdgeKey> = BTreeSet::from([(shelf, q, Relation::OnTop)]);
        for n in mem.furniture_nodes() {
            let (room_id, _) = n.last_location.unwrap();
            let room = mem.node(room_id).unwrap().class_label.clone();
            for rel in Relation::ALL {
                if p.prior_prob_unchecked(&room, &n.class_label, "mug", rel) > 0.0 {
                    possible.insert((n.id, q, rel));
                }
            }
        }
        if possible.len() <= DEFAULT_MIN_CANDIDATES {
            assert_eq!(got, possible);
        } else {
            assert!(got.is_subset(&possible));
            assert!(got.len() >= DEFAULT_MIN_CANDIDATES);
        }
    }

    #[test]
    fn fresh_query_node_binds_to_first_matching_sighting() {
        let w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.bed]);
        let q = mem.add_query("mug", 0.05, 5);
        assert!(mem.node(q).unwrap().scene_id.is_none());

        look(&mut mem, &w.sg, 1, &[w.shelf]);
        assert_eq!(mem.mem_id_of(w.mug), Some(q));
        let n = mem.node(q).unwrap();
        assert!(n.is_query);
        assert_eq!(n.times_observed, 1);
        assert_eq!(n.scene_id, Some(w.mug));
    }

    #[test]
    fn threshold_zero_attaches_every_nonzero_prior() {
        let w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.shelf, w.counter, w.bed]);
        let q = mem.add_query("alarm clock", 0.0, 0);
        let p = PriorsGraph::bundled();

        let mut expected: BTreeSet<EdgeKey> = BTreeSet::new();
        for n in mem.furniture_nodes() {
            let (room_id, _) = n.last_location.unwrap();
            let room = mem.node(room_id).unwrap().class_label.clone();
            for rel in Relation::ALL {
                if p.prior_prob_unchecked(&room, &n.class_label, "alarm clock", rel) > 0.0 {
                    expected.insert((n.id, q, rel));
                }
            }
        }
        let got: BTreeSet<EdgeKey> = mem.candidate_edges(q).unwrap().into_iter().collect();
        assert_eq!(got, expected);
        assert!(!expected.is_empty());
    }

    #[test]
    fn unseen_class_query_is_purely_hypothetical() {
        let w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.shelf, w.counter, w.bed]);
        let q = mem.add_query("alarm clock", 0.05, 5);
        let candidates = mem.candidate_edges(q).unwrap();
        assert!(!candidates.is_empty());
        for key in &candidates {
            let e = mem.edge(key).unwrap();
            assert!(e.is_hypothetical);
            assert_eq!(e.times_observed, 0);
            assert_eq!(e.last_state, EdgeState::Unknown);
        }
    }

    #[test]
    fn impossible_threshold_yields_exactly_the_top_five_priors() {
        // A full sampled house gives the query enough furniture instances
        // that the min_k fill cannot run dry.
        let p = PriorsGraph::bundled();
        let env = crate::sim::make_env(p, &crate::sim::EnvConfig::default(), 404).unwrap();
        let mut mem = memory();
        let all: BTreeSet<NodeId> = env.scene.furniture_ids().into_iter().collect();
        let o = observe(&env.scene, 0, &all, 1.0, 0).unwrap();
        mem.integrate_observation(&o).unwrap();

        // Rank every (furniture instance, relation) pair the way a brute-force
        // sort of the priors would, then take the first five.
        let mut pairs: Vec<(f64, String, String, &'static str, MemId, Relation)> = Vec::new();
        for n in mem.furniture_nodes() {
            let (room_id, _) = n.last_location.unwrap();
            let room = mem.node(room_id).unwrap().class_label.clone();
            for rel in Relation::ALL {
                let prob = p.prior_prob_unchecked(&room, &n.class_label, "book", rel);
                if prob > 0.0 {
                    assert!(prob < 1.0, "test assumes no certain prior for book");
                    pairs.push((prob, room.clone(), n.class_label.clone(), rel.as_str(), n.id, rel));
                }
            }
        }
        assert!(pairs.len() >= 8, "house only offers {} book locations", pairs.len());
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
                .then_with(|| a.3.cmp(b.3))
                .then_with(|| a.4.cmp(&b.4))
        });
        let q = mem.add_query("book", 1.0, 5);
        let expected: BTreeSet<EdgeKey> =
            pairs.iter().take(5).map(|(_, _, _, _, fid, rel)| (*fid, q, *rel)).collect();
        let got: BTreeSet<EdgeKey> = mem.candidate_edges(q).unwrap().into_iter().collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 5);
    }

    #[test]
    fn candidates_are_ordered_and_unknown_queries_fail() {
        let w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.shelf, w.counter, w.bed]);
        let q = mem.add_query("mug", 0.01, 8);
        let c1 = mem.candidate_edges(q).unwrap();
        let c2 = mem.candidate_edges(q).unwrap();
        assert_eq!(c1, c2);
        let mut sorted = c1.clone();
        sorted.sort_by_key(|(parent, _, rel)| (*parent, rel.one_hot_index()));
        assert_eq!(c1, sorted);
        assert!(mem.candidate_edges(MemId(9999)).is_err());
    }

    #[test]
    fn random_hypotheticals_are_seeded_and_capped() {
        let w = world();
        let mut pristine = memory();
        look(&mut pristine, &w.sg, 0, &[w.shelf, w.counter, w.bed]);
        let mut m1 = pristine.clone();
        let mut m2 = pristine.clone();
        let q1 = m1.add_query_random("alarm clock", 5, 11);
        let q2 = m2.add_query_random("alarm clock", 5, 11);
        assert_eq!(m1.candidate_edges(q1).unwrap(), m2.candidate_edges(q2).unwrap());
        assert_eq!(m1.candidate_edges(q1).unwrap().len(), 5);

        // A single pair of seeds can collide on the same 5-of-12 draw, so
        // only require that a few consecutive seeds disagree somewhere.
        let picks: BTreeSet<Vec<EdgeKey>> = (12..15)
            .map(|seed| {
                let mut m = pristine.clone();
                let q = m.add_query_random("alarm clock", 5, seed);
                m.candidate_edges(q).unwrap()
            })
            .collect();
        assert!(picks.len() > 1 || !picks.contains(&m1.candidate_edges(q1).unwrap()));

        // The pool has 3 furniture x 4 relations; asking for more saturates.
        let mut m4 = memory();
        look(&mut m4, &w.sg, 0, &[w.shelf, w.counter, w.bed]);
        let q4 = m4.add_query_random("alarm clock", 100, 11);
        assert_eq!(m4.candidate_edges(q4).unwrap().len(), 12);
    }

    #[test]
    fn node_feature_frozen_examples() {
        let emb = HashEmbedder::default();
        let mut n = SGMNode {
            id: MemId(0),
            scene_id: None,
            node_type: NodeType::Object,
            class_label: "mug".into(),
            description: "mug".into(),
            is_query: false,
            embedding: emb.embed("mug"),
            last_observed_t: None,
            times_observed: 0,
            last_moved_t: None,
            times_moved: 0,
            last_location: None,
        };
        let f = n.features(0, FeatureFlags::default());
        assert_eq!(f.len(), NODE_FEATURE_DIM);
        assert_eq!(&f[96..100], &[0.2, 0.0, 0.2, 0.0]);
        assert_eq!(&f[100..105], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(&f[..96], n.embedding.as_slice());

        n.last_observed_t = Some(10);
        n.times_observed = 5;
        let f = n.features(10, FeatureFlags::default());
        assert_eq!(&f[96..100], &[0.0, 1.0, 2.2, 0.0]);
    }

    #[test]
    fn edge_feature_frozen_examples() {
        let mut e = SGMEdge::new(MemId(0), MemId(1), Relation::In, 0.3, true);
        let f = e.features(0.7, 0, FeatureFlags::default());
        assert_eq!(f.len(), EDGE_FEATURE_DIM);
        assert_eq!(f, vec![0.7, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.3, 1.0, 0.0, 0.0, 0.0]);

        e.times_observed = 1;
        e.times_true = 1;
        e.last_observed_t = Some(0);
        e.last_state = EdgeState::True;
        let f = e.features(0.7, 0, FeatureFlags::default());
        assert_eq!(f[3], 0.5);
        assert!((f[5] - 1.0).abs() < 1e-12);
        assert_eq!(f[7], 1.0);
    }

    #[test]
    fn feature_flags_zero_their_slots_without_changing_widths() {
        let emb = HashEmbedder::default();
        let n = SGMNode {
            id: MemId(0),
            scene_id: None,
            node_type: NodeType::Furniture,
            class_label: "shelf".into(),
            description: "shelf".into(),
            is_query: false,
            embedding: emb.embed("shelf"),
            last_observed_t: Some(3),
            times_observed: 4,
            last_moved_t: None,
            times_moved: 0,
            last_location: None,
        };
        let no_sem = n.features(5, FeatureFlags { semantic: false, ..Default::default() });
        assert_eq!(no_sem.len(), NODE_FEATURE_DIM);
        assert!(no_sem[..96].iter().all(|x| *x == 0.0));
        assert!(no_sem[96..100].iter().any(|x| *x != 0.0));
        let no_time = n.features(5, FeatureFlags { temporal: false, ..Default::default() });
        assert!(no_time[96..100].iter().all(|x| *x == 0.0));
        assert!(no_time[..96].iter().any(|x| *x != 0.0));

        let mut e = SGMEdge::new(MemId(0), MemId(1), Relation::OnTop, 0.4, false);
        e.times_observed = 2;
        e.times_true = 1;
        e.last_observed_t = Some(4);
        e.last_state = EdgeState::True;
        let no_time = e.features(0.9, 5, FeatureFlags { temporal: false, ..Default::default() });
        assert_eq!(no_time.len(), EDGE_FEATURE_DIM);
        assert!(no_time[1..8].iter().all(|x| *x == 0.0));
        assert_eq!(no_time[0], 0.9);
        assert_eq!(no_time[8], 0.4);
        let no_priors = e.features(0.9, 5, FeatureFlags { priors: false, ..Default::default() });
        assert_eq!(no_priors[8], 0.0);
        assert!(no_priors[1..8].iter().any(|x| *x != 0.0));
        let no_sem = e.features(0.9, 5, FeatureFlags { semantic: false, ..Default::default() });
        assert_eq!(no_sem[0], 0.0);
    }

    #[test]
    fn edge_cosine_uses_endpoint_embeddings() {
        let w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.shelf]);
        let shelf = mem.mem_id_of(w.shelf).unwrap();
        let mug = mem.mem_id_of(w.mug).unwrap();
        let f = mem.edge_features(&(shelf, mug, Relation::OnTop), FeatureFlags::default()).unwrap();
        let emb = HashEmbedder::default();
        let expected: f64 =
            emb.embed("shelf").iter().zip(emb.embed("mug")).map(|(a, b)| a * b).sum();
        assert!((f[0] - expected).abs() < 1e-12);
        assert!(f[0].abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn snapshot_roundtrips_through_json() {
        let mut w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.shelf, w.counter]);
        let q = mem.add_query("mug", 0.05, 5);
        w.sg.move_object(w.mug, w.counter, Relation::In).unwrap();
        look(&mut mem, &w.sg, 1, &[w.shelf, w.counter]);
        let first = mem.candidate_edges(q).unwrap()[0];
        mem.set_label(first, true).unwrap();

        let snap = mem.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let parsed: MemorySnapshot = serde_json::from_str(&json).unwrap();
        let restored = SceneGraphMemory::from_snapshot(
            parsed,
            Arc::new(PriorsGraph::bundled().clone()),
            Arc::new(HashEmbedder::default()),
        )
        .unwrap();

        assert_eq!(serde_json::to_string(&restored.snapshot()).unwrap(), json);
        assert_eq!(restored.labels().get(&first), Some(&true));
        for id in mem.nodes().map(|n| n.id) {
            assert_eq!(
                mem.node_features(id, FeatureFlags::default()).unwrap(),
                restored.node_features(id, FeatureFlags::default()).unwrap()
            );
        }
        assert_eq!(restored.mem_id_of(w.mug), mem.mem_id_of(w.mug));
    }

    #[test]
    fn snapshot_with_dangling_edge_is_rejected() {
        let w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.shelf]);
        let mut snap = mem.snapshot();
        let ghost = (MemId(50), MemId(51), Relation::In);
        snap.edges.insert(ghost, SGMEdge::new(ghost.0, ghost.1, ghost.2, 0.1, true));
        let err = SceneGraphMemory::from_snapshot(
            snap,
            Arc::new(PriorsGraph::bundled().clone()),
            Arc::new(HashEmbedder::default()),
        );
        assert!(matches!(err, Err(Error::Memory(_))));
    }

    #[test]
    fn labels_require_existing_edges() {
        let w = world();
        let mut mem = memory();
        look(&mut mem, &w.sg, 0, &[w.shelf]);
        let bogus = (MemId(40), MemId(41), Relation::In);
        assert!(mem.set_label(bogus, false).is_err());
    }

    /// One randomized step: a few scripted object moves followed by an
    /// observation of a random furniture subset.
    #[derive(Debug, Clone)]
    struct Step {
        moves: Vec<(usize, usize, usize)>,
        watch: Vec<usize>,
        dropout: bool,
        seed: u64,
    }

    fn step_strategy() -> impl Strategy<Value = Step> {
        (
            proptest::collection::vec((0..2usize, 0..3usize, 0..4usize), 0..3),
            proptest::collection::vec(0..3usize, 1..4),
            any::<bool>(),
            any::<u64>(),
        )
            .prop_map(|(moves, watch, dropout, seed)| Step { moves, watch, dropout, seed })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn random_histories_keep_invariants_and_replay_identically(
            steps in proptest::collection::vec(step_strategy(), 1..12)
        ) {
            let mut w = world();
            let furniture = [w.shelf, w.counter, w.bed];
            let objects = [w.mug, w.plate];
            let mut mem = memory();
            let mut recorded = Vec::new();
            let mut node_count = 0;
            let mut edge_count = 0;

            for (t, step) in steps.iter().enumerate() {
                let t = t as u64;
                for (obj, furn, rel) in &step.moves {
                    w.sg.move_object(objects[*obj], furniture[*furn], Relation::ALL[*rel]).unwrap();
                }
                let ids: BTreeSet<NodeId> = step.watch.iter().map(|i| furniture[*i]).collect();
                let dropout = if step.dropout { 0.25 } else { 0.0 };
                let o = observe(&w.sg, t, &ids, dropout, step.seed).unwrap();
                mem.advance_to(t).unwrap();
                mem.integrate_observation(&o).unwrap();
                recorded.push(o);

                mem.validate().unwrap();
                prop_assert!(mem.node_count() >= node_count);
                prop_assert!(mem.edge_count() >= edge_count);
                node_count = mem.node_count();
                edge_count = mem.edge_count();
            }

            let mut replayed = memory();
            for o in &recorded {
                replayed.advance_to(o.t).unwrap();
                replayed.integrate_observation(o).unwrap();
            }
            prop_assert_eq!(
                serde_json::to_string(&replayed.snapshot()).unwrap(),
                serde_json::to_string(&mem.snapshot()).unwrap()
            );
        }

        #[test]
        fn scaled_temporal_features_stay_bounded(
            last_obs in proptest::option::of(0u64..50),
            times_obs in 0u64..100,
            last_moved in proptest::option::of(0u64..50),
            times_moved in 0u64..99,
            now in 50u64..80
        ) {
            let n = SGMNode {
                id: MemId(0),
                scene_id: None,
                node_type: NodeType::Object,
                class_label: "mug".into(),
                description: "mug".into(),
                is_query: false,
                embedding: HashEmbedder::default().embed("mug"),
                last_observed_t: last_obs,
                times_observed: times_obs,
                last_moved_t: last_moved,
                times_moved: times_moved.min(times_obs.saturating_sub(1)),
                last_location: None,
            };
            let f = n.features(now, FeatureFlags::default());
            prop_assert_eq!(f.len(), NODE_FEATURE_DIM);
            let bound = NODE_TEMPORAL_SCALE * (now + 1) as f64;
            prop_assert!(f[96] >= 0.0 && f[96] <= bound);
            prop_assert!(f[98] >= 0.0 && f[98] <= bound);
            prop_assert!(f[99] >= 0.0 && f[99] <= 1.0);
            prop_assert_eq!(
                n.features(now, FeatureFlags::default()),
                n.features(now, FeatureFlags::default())
            );
        }
    }
}
