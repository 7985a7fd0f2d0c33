//! Dynamic household simulator.
//!
//! An environment instance is produced in three stages: class-level noise
//! perturbs the shared priors into environment-specific probabilities, a
//! concrete scene is sampled from those probabilities, and instance-level
//! noise turns class probabilities into per-object-instance location
//! dynamics. After setup, [`EnvInstance::evolve`] advances the scene one
//! timestep at a time: objects are removed, moved, and added while rooms and
//! furniture stay fixed.
//!
//! Every random decision draws from a ChaCha stream seeded by a named-stream
//! hash of (parent seed, stream, entity key), so results are independent of
//! map iteration order and reproducible across runs.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::priors::{FoKey, LabelKind, LabelMetadata, PriorsGraph};
use crate::scenegraph::SceneGraph;
use crate::seed::{child_seed, child_seed_u64, rng_from, SeedHasher};
use crate::types::{NodeId, NodeType, Relation};
use crate::{Error, Result};

/// Sum tolerance for per-group probability distributions.
const DIST_TOLERANCE: f64 = 1e-9;

/// Parameters of the zero/scale perturbation applied to probability groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Probability that an edge is zeroed out entirely.
    pub zero_prob: f64,
    /// Surviving edges are scaled by a factor uniform in
    /// `[1 - scale_limit, 1 + scale_limit]`.
    pub scale_limit: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { zero_prob: 0.25, scale_limit: 0.25 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("zero_prob", self.zero_prob), ("scale_limit", self.scale_limit)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Requested shape of a sampled scene: one floor holding `rooms`, a fixed
/// number of furniture pieces per room, and a fixed number of objects per
/// furniture piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDims {
    pub rooms: Vec<String>,
    pub furniture_per_room: usize,
    pub objects_per_furniture: usize,
}

impl Default for SceneDims {
    fn default() -> Self {
        SceneDims {
            rooms: ["kitchen", "living room", "bedroom", "bathroom"]
                .map(String::from)
                .to_vec(),
            furniture_per_room: 8,
            objects_per_furniture: 6,
        }
    }
}

/// Full environment-generation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub noise: NoiseSpec,
    pub dims: SceneDims,
    /// When false, evolution never adds or removes object nodes; objects only
    /// move between furniture.
    pub dynamic_nodes: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { noise: NoiseSpec::default(), dims: SceneDims::default(), dynamic_nodes: true }
    }
}

impl EnvConfig {
    pub fn validate(&self, p: &PriorsGraph) -> Result<()> {
        self.noise.validate()?;
        if self.dims.rooms.is_empty() {
            return Err(Error::InvalidConfig("scene needs at least one room".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for room in &self.dims.rooms {
            match p.metadata(room) {
                Some(m) if m.kind == LabelKind::Room => {}
                _ => return Err(Error::UnknownLabel(room.clone())),
            }
            if !seen.insert(room) {
                return Err(Error::InvalidConfig(format!("duplicate room '{room}'")));
            }
        }
        if self.dims.furniture_per_room == 0 || self.dims.objects_per_furniture == 0 {
            return Err(Error::InvalidConfig("per-room and per-furniture counts must be positive".into()));
        }
        Ok(())
    }
}

/// Environment-specific perturbation of the shared location priors.
///
/// Holds the same (room, object, furniture, relation) edge map as the priors
/// graph, renormalized per (room, object) group after noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvProbs {
    #[serde(with = "crate::serde_util::vec_map")]
    furniture_object: BTreeMap<FoKey, f64>,
}

impl EnvProbs {
    /// Edge probability, zero when the edge is absent.
    pub fn prob(&self, room: &str, furniture: &str, object: &str, relation: Relation) -> f64 {
        let key = (room.to_string(), object.to_string(), furniture.to_string(), relation);
        self.furniture_object.get(&key).copied().unwrap_or(0.0)
    }

    /// The (furniture, relation, probability) entries of one (room, object)
    /// group, ascending by (furniture, relation).
    pub fn object_group(&self, room: &str, object: &str) -> Vec<(&str, Relation, f64)> {
        self.furniture_object
            .range((room.to_string(), object.to_string(), String::new(), Relation::In)..)
            .take_while(|((r, o, _, _), _)| r == room && o == object)
            .map(|((_, _, f, rel), p)| (f.as_str(), *rel, *p))
            .collect()
    }

    /// The (object, relation, probability) entries hosted by one
    /// (room, furniture) pair.
    pub fn furniture_conditional(&self, room: &str, furniture: &str) -> Vec<(&str, Relation, f64)> {
        self.furniture_object
            .iter()
            .filter(|((r, _, f, _), _)| r == room && f == furniture)
            .map(|((_, o, _, rel), p)| (o.as_str(), *rel, *p))
            .collect()
    }

    /// All edges as (room, object, furniture, relation, probability).
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, &str, Relation, f64)> {
        self.furniture_object
            .iter()
            .map(|((r, o, f, rel), p)| (r.as_str(), o.as_str(), f.as_str(), *rel, *p))
    }

    #[cfg(test)]
    pub(crate) fn from_edges(edges: Vec<(FoKey, f64)>) -> Self {
        EnvProbs { furniture_object: edges.into_iter().collect() }
    }
}

/// One possible location of an object instance with its probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynEntry {
    pub furniture: NodeId,
    pub relation: Relation,
    pub prob: f64,
}

/// Per-instance location dynamics, keyed by full object description.
///
/// Instances sharing a description share a distribution. A description with
/// no entry keeps its current location when asked to move.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dynamics {
    entries: BTreeMap<String, Vec<DynEntry>>,
}

impl Dynamics {
    pub fn entry(&self, description: &str) -> Option<&[DynEntry]> {
        self.entries.get(description).map(|v| v.as_slice())
    }

    pub fn descriptions(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that every distribution sums to 1 within tolerance.
    pub fn validate(&self) -> Result<()> {
        for (desc, entries) in &self.entries {
            let sum: f64 = entries.iter().map(|e| e.prob).sum();
            if (sum - 1.0).abs() > DIST_TOLERANCE {
                return Err(Error::InvalidConfig(format!(
                    "dynamics for '{desc}' sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Counters describing one evolve step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvolveStats {
    pub removed: usize,
    /// Object count after removals, the base for the moved-object quota.
    pub count_before_moves: usize,
    /// Objects selected for movement (a selected object may re-draw its
    /// current location).
    pub moved_sampled: usize,
    /// Objects whose (furniture, relation) actually changed.
    pub moved_changed: usize,
    pub added: usize,
}

/// One concrete household: its probabilities, dynamics, and evolving scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInstance {
    pub env_probs: EnvProbs,
    pub dynamics: Dynamics,
    pub scene: SceneGraph,
    pub t: u64,
    pub initial_object_count: usize,
    pub rng_seed: u64,
    pub noise: NoiseSpec,
    pub dynamic_nodes: bool,
    pub last_stats: Option<EvolveStats>,
}

/// Lower bound on the object count: 95% of the initial count, rounded up.
fn min_object_count(initial: usize) -> usize {
    (initial * 95).div_ceil(100)
}

/// Upper bound on the object count: 105% of the initial count, rounded down.
fn max_object_count(initial: usize) -> usize {
    initial * 105 / 100
}

/// Moved-object quota: 5% of `count` rounded half up, at least 1.
fn moved_quota(count: usize) -> usize {
    ((count + 10) / 20).max(1)
}

/// Applies zero/scale noise to one probability, consuming draws from `rng`.
fn perturb(prob: f64, spec: &NoiseSpec, rng: &mut ChaCha12Rng) -> f64 {
    if rng.gen::<f64>() < spec.zero_prob {
        return 0.0;
    }
    if spec.scale_limit == 0.0 {
        prob
    } else {
        prob * rng.gen_range(1.0 - spec.scale_limit..=1.0 + spec.scale_limit)
    }
}

/// Divides a group by its sum unless it is already normalized, so identity
/// noise reproduces the input bit for bit.
fn normalize_group(values: &mut [f64], sum: f64) {
    if (sum - 1.0).abs() > 1e-12 {
        for v in values.iter_mut() {
            *v /= sum;
        }
    }
}

/// Derives environment-specific class-level probabilities from the priors.
///
/// Each furniture-object edge is independently zeroed or rescaled, then each
/// (room, object) group is renormalized. A group that loses all its mass is
/// restored to a point distribution on its highest-prior edge.
pub fn apply_class_noise(p: &PriorsGraph, spec: &NoiseSpec, seed: u64) -> EnvProbs {
    let mut out: BTreeMap<FoKey, f64> = BTreeMap::new();
    let mut group: Vec<(FoKey, f64, f64)> = Vec::new();

    let flush = |group: &mut Vec<(FoKey, f64, f64)>, out: &mut BTreeMap<FoKey, f64>| {
        if group.is_empty() {
            return;
        }
        let sum: f64 = group.iter().map(|(_, _, noisy)| noisy).sum();
        if sum > 0.0 {
            let mut values: Vec<f64> = group.iter().map(|(_, _, noisy)| *noisy).collect();
            normalize_group(&mut values, sum);
            for ((key, _, _), v) in group.drain(..).zip(values) {
                out.insert(key, v);
            }
        } else {
            // Entire group zeroed: keep the single most likely prior edge.
            let best = group
                .iter()
                .enumerate()
                .max_by(|(ia, (_, a, _)), (ib, (_, b, _))| {
                    a.partial_cmp(b).unwrap().then(ib.cmp(ia))
                })
                .map(|(i, _)| i)
                .unwrap();
            for (i, (key, _, _)) in group.drain(..).enumerate() {
                out.insert(key, if i == best { 1.0 } else { 0.0 });
            }
        }
    };

    let mut current: Option<(String, String)> = None;
    for (room, object, furniture, relation, prob) in p.object_edges() {
        let group_key = (room.to_string(), object.to_string());
        if current.as_ref() != Some(&group_key) {
            flush(&mut group, &mut out);
            current = Some(group_key);
        }
        let sub = SeedHasher::new()
            .u64(seed)
            .str("class-noise")
            .str(room)
            .str(object)
            .str(furniture)
            .str(relation.as_str())
            .finish();
        let noisy = perturb(prob, spec, &mut rng_from(sub));
        group.push(((room.to_string(), object.to_string(), furniture.to_string(), relation), prob, noisy));
    }
    flush(&mut group, &mut out);
    EnvProbs { furniture_object: out }
}

/// Draws an index from non-negative `weights`; `None` when all mass is zero.
pub(crate) fn weighted_index(weights: &[f64], rng: &mut ChaCha12Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return Some(i);
        }
    }
    // Float underflow can land exactly on the total; take the last nonzero.
    weights.iter().rposition(|w| *w > 0.0)
}

/// Draws an instance description: a uniform number of the label's adjective
/// categories, chosen without replacement, rendered in canonical category
/// order with one uniform adjective each.
fn draw_adjectives(p: &PriorsGraph, meta: &LabelMetadata, rng: &mut ChaCha12Rng) -> Vec<String> {
    let n = meta.adjective_categories.len();
    if n == 0 {
        return Vec::new();
    }
    let k = rng.gen_range(1..=n);
    let mut chosen = rand::seq::index::sample(rng, n, k).into_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| {
            let category = &meta.adjective_categories[i];
            let options = p.adjectives(category).expect("lexicon covers all categories");
            options[rng.gen_range(0..options.len())].clone()
        })
        .collect()
}

/// Samples a concrete scene from the environment probabilities.
///
/// Furniture is drawn per room with weights `room prior x sample_prob`, and
/// objects are drawn per furniture piece from the environment's
/// (room, furniture)-conditional distribution over (object, relation) pairs.
/// Scene-wide instance counts respect each label's `max_count`.
pub fn sample_scene(
    p: &PriorsGraph,
    ep: &EnvProbs,
    dims: &SceneDims,
    seed: u64,
) -> Result<SceneGraph> {
    let mut sg = SceneGraph::new();
    let house = sg.add_house("house")?;
    let floor = sg.add_child(house, Relation::Contains, NodeType::Floor, "floor", Vec::new())?;
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();

    for room_label in &dims.rooms {
        let room = sg.add_child(floor, Relation::Contains, NodeType::Room, room_label, Vec::new())?;
        let mut room_rng = rng_from(child_seed(seed, "furniture", room_label));
        let choices = p.room_furniture_probs(room_label);
        for slot in 0..dims.furniture_per_room {
            let weights: Vec<f64> = choices
                .iter()
                .map(|(label, prob)| {
                    let meta = p.metadata(label).expect("edge labels are validated");
                    if counts.get(*label).copied().unwrap_or(0) >= meta.max_count {
                        0.0
                    } else {
                        prob * meta.sample_prob
                    }
                })
                .collect();
            let pick = weighted_index(&weights, &mut room_rng).ok_or_else(|| Error::Sampling {
                room: room_label.clone(),
                message: format!("no furniture labels left for slot {slot}"),
            })?;
            let label = choices[pick].0;
            *counts.entry(label.to_string()).or_insert(0) += 1;
            let meta = p.metadata(label).unwrap();
            let fid = sg.add_child(room, Relation::Contains, NodeType::Furniture, label, Vec::new())?;
            let adjectives =
                draw_adjectives(p, meta, &mut rng_from(child_seed_u64(seed, "description", fid.0)));
            sg.node_mut(fid).adjectives = adjectives;

            let conditional = ep.furniture_conditional(room_label, label);
            let mut obj_rng = rng_from(child_seed_u64(seed, "objects", fid.0));
            for slot in 0..dims.objects_per_furniture {
                let weights: Vec<f64> = conditional
                    .iter()
                    .map(|(olabel, _, prob)| {
                        let meta = p.metadata(olabel).expect("edge labels are validated");
                        if counts.get(*olabel).copied().unwrap_or(0) >= meta.max_count {
                            0.0
                        } else {
                            *prob
                        }
                    })
                    .collect();
                let pick = weighted_index(&weights, &mut obj_rng).ok_or_else(|| Error::Sampling {
                    room: room_label.clone(),
                    message: format!("no object labels left for '{label}' slot {slot}"),
                })?;
                let (olabel, relation, _) = conditional[pick];
                *counts.entry(olabel.to_string()).or_insert(0) += 1;
                let oid = sg.add_child(fid, relation, NodeType::Object, olabel, Vec::new())?;
                let meta = p.metadata(olabel).unwrap();
                let adjectives =
                    draw_adjectives(p, meta, &mut rng_from(child_seed_u64(seed, "description", oid.0)));
                sg.node_mut(oid).adjectives = adjectives;
            }
        }
    }
    sg.validate()?;
    Ok(sg)
}

/// Furniture instance context used for building location candidate sets.
struct FurnitureIndex {
    /// (id, class label, room label), ascending by id.
    instances: Vec<(NodeId, String, String)>,
    /// Number of instances per (room label, class label).
    group_sizes: BTreeMap<(String, String), usize>,
}

impl FurnitureIndex {
    fn build(scene: &SceneGraph) -> Self {
        let mut instances = Vec::new();
        let mut group_sizes: BTreeMap<(String, String), usize> = BTreeMap::new();
        for fid in scene.furniture_ids() {
            let class = scene.node(fid).expect("listed id").class_label.clone();
            let room = scene.room_of(fid).expect("furniture has a room").class_label.clone();
            *group_sizes.entry((room.clone(), class.clone())).or_insert(0) += 1;
            instances.push((fid, class, room));
        }
        FurnitureIndex { instances, group_sizes }
    }

    /// Candidate (furniture instance, relation, weight) triples for an object
    /// class: every instance whose class has probability mass for the class,
    /// with the class mass split equally across same-class instances in the
    /// same room. Ascending by (id, relation).
    fn candidates(&self, ep: &EnvProbs, object_class: &str) -> Vec<(NodeId, Relation, f64)> {
        let mut out = Vec::new();
        for (fid, class, room) in &self.instances {
            let share = self.group_sizes[&(room.clone(), class.clone())] as f64;
            for rel in Relation::ALL {
                let q = ep.prob(room, class, object_class, rel);
                if q > 0.0 {
                    out.push((*fid, rel, q / share));
                }
            }
        }
        out
    }
}

/// Builds the location distribution of one object instance by perturbing its
/// candidate weights, keyed so equal descriptions always share a result.
fn instance_dynamics_entry(
    candidates: &[(NodeId, Relation, f64)],
    spec: &NoiseSpec,
    parent_seed: u64,
    description: &str,
) -> Vec<DynEntry> {
    let mut noisy: Vec<f64> = candidates
        .iter()
        .map(|(fid, rel, weight)| {
            let sub = SeedHasher::new()
                .u64(parent_seed)
                .str("instance-noise")
                .str(description)
                .u64(fid.0)
                .str(rel.as_str())
                .finish();
            perturb(*weight, spec, &mut rng_from(sub))
        })
        .collect();
    let sum: f64 = noisy.iter().sum();
    if sum > 0.0 {
        normalize_group(&mut noisy, sum);
    } else {
        // Entire distribution zeroed: keep the heaviest candidate.
        let best = candidates
            .iter()
            .enumerate()
            .max_by(|(ia, (_, _, a)), (ib, (_, _, b))| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap();
        for (i, v) in noisy.iter_mut().enumerate() {
            *v = if i == best { 1.0 } else { 0.0 };
        }
    }
    candidates
        .iter()
        .zip(noisy)
        .map(|((fid, rel, _), prob)| DynEntry { furniture: *fid, relation: *rel, prob })
        .collect()
}

/// Derives per-instance location dynamics for every object description in the
/// scene.
///
/// Candidates are restricted to furniture actually present in the scene. An
/// object class with no candidates gets no entry and simply stays put.
pub fn apply_instance_noise(
    ep: &EnvProbs,
    scene: &SceneGraph,
    spec: &NoiseSpec,
    seed: u64,
) -> Dynamics {
    let index = FurnitureIndex::build(scene);
    let mut entries: BTreeMap<String, Vec<DynEntry>> = BTreeMap::new();
    for node in scene.nodes_of_type(NodeType::Object) {
        let description = node.description();
        if entries.contains_key(&description) {
            continue;
        }
        let candidates = index.candidates(ep, &node.class_label);
        if candidates.is_empty() {
            continue;
        }
        let entry = instance_dynamics_entry(&candidates, spec, seed, &description);
        entries.insert(description, entry);
    }
    Dynamics { entries }
}

/// Builds a complete environment instance from one master seed.
pub fn make_env(p: &PriorsGraph, config: &EnvConfig, seed: u64) -> Result<EnvInstance> {
    config.validate(p)?;
    let env_probs = apply_class_noise(p, &config.noise, child_seed_u64(seed, "class-noise", 0));
    let scene = sample_scene(p, &env_probs, &config.dims, child_seed_u64(seed, "scene", 0))?;
    let dynamics =
        apply_instance_noise(&env_probs, &scene, &config.noise, child_seed_u64(seed, "instance-noise", 0));
    dynamics.validate()?;
    let initial_object_count = scene.object_count();
    Ok(EnvInstance {
        env_probs,
        dynamics,
        scene,
        t: 0,
        initial_object_count,
        rng_seed: seed,
        noise: config.noise,
        dynamic_nodes: config.dynamic_nodes,
        last_stats: None,
    })
}

impl EnvInstance {
    /// Seed under which all instance dynamics are derived; new instances use
    /// it so equal descriptions get equal dynamics at any timestep.
    fn instance_noise_seed(&self) -> u64 {
        child_seed_u64(self.rng_seed, "instance-noise", 0)
    }

    /// Advances the scene one timestep.
    ///
    /// Runs the removal, movement, and addition phases in order. With
    /// `dynamic_nodes` off only the movement phase runs. Returns the step's
    /// counters, which are also stored in `last_stats`.
    pub fn evolve(&mut self, p: &PriorsGraph, seed: u64) -> EvolveStats {
        let mut stats = EvolveStats::default();
        let min_count = min_object_count(self.initial_object_count);
        let max_count = max_object_count(self.initial_object_count);
        let rates = |class: &str| {
            p.metadata(class)
                .and_then(|m| m.rates)
                .expect("scene object classes carry rates")
        };

        if self.dynamic_nodes {
            let mut count = self.scene.object_count();
            for id in self.scene.object_ids() {
                let class = self.scene.node(id).expect("listed id").class_label.clone();
                let mut rng = rng_from(child_seed_u64(seed, "remove", id.0));
                if rng.gen::<f64>() < rates(&class).remove_prob && count > min_count {
                    self.scene.remove_object(id).expect("listed object id");
                    count -= 1;
                    stats.removed += 1;
                }
            }
        }

        let count = self.scene.object_count();
        stats.count_before_moves = count;
        let quota = moved_quota(count);
        let mut move_rng = rng_from(child_seed_u64(seed, "move", 0));
        let mut pool: Vec<(NodeId, f64)> = self
            .scene
            .object_ids()
            .into_iter()
            .map(|id| {
                let class = &self.scene.node(id).expect("listed id").class_label;
                (id, rates(class).move_frequency)
            })
            .filter(|(_, w)| *w > 0.0)
            .collect();
        for _ in 0..quota.min(pool.len()) {
            let weights: Vec<f64> = pool.iter().map(|(_, w)| *w).collect();
            let pick = match weighted_index(&weights, &mut move_rng) {
                Some(i) => i,
                None => break,
            };
            let (id, _) = pool.remove(pick);
            stats.moved_sampled += 1;
            let node = self.scene.node(id).expect("sampled id");
            let description = node.description();
            let Some(entries) = self.dynamics.entry(&description) else {
                continue;
            };
            let probs: Vec<f64> = entries.iter().map(|e| e.prob).collect();
            let choice = weighted_index(&probs, &mut move_rng).expect("distribution sums to 1");
            let target = entries[choice];
            let old = *self.scene.parent_edge(id).expect("objects have parents");
            if old.parent != target.furniture || old.relation != target.relation {
                self.scene
                    .move_object(id, target.furniture, target.relation)
                    .expect("dynamics reference scene furniture");
                stats.moved_changed += 1;
            }
        }

        if self.dynamic_nodes {
            let index = FurnitureIndex::build(&self.scene);
            let mut count = self.scene.object_count();
            let labels: Vec<String> = p
                .labels_of_kind(LabelKind::Object)
                .map(|m| m.label.clone())
                .collect();
            for label in labels {
                if count >= max_count {
                    break;
                }
                let mut rng = rng_from(child_seed(seed, "add", &label));
                if rng.gen::<f64>() >= rates(&label).add_prob {
                    continue;
                }
                let candidates = index.candidates(&self.env_probs, &label);
                let weights: Vec<f64> = candidates.iter().map(|(_, _, w)| *w).collect();
                let Some(pick) = weighted_index(&weights, &mut rng) else {
                    continue;
                };
                let (fid, relation, _) = candidates[pick];
                let oid = self
                    .scene
                    .add_child(fid, relation, NodeType::Object, &label, Vec::new())
                    .expect("furniture instance exists");
                let meta = p.metadata(&label).unwrap();
                let adjectives =
                    draw_adjectives(p, meta, &mut rng_from(child_seed_u64(seed, "description", oid.0)));
                self.scene.node_mut(oid).adjectives = adjectives;
                let description = self.scene.node(oid).unwrap().description();
                if self.dynamics.entry(&description).is_none() && !candidates.is_empty() {
                    let entry = instance_dynamics_entry(
                        &candidates,
                        &self.noise,
                        self.instance_noise_seed(),
                        &description,
                    );
                    self.dynamics.entries.insert(description, entry);
                }
                count += 1;
                stats.added += 1;
            }
        }

        self.t += 1;
        self.last_stats = Some(stats);
        stats
    }
}
