//! Architecture and forward pass of the node-edge predictor.
//!
//! Node and edge feature vectors pass through per-type MLP embedders; each
//! candidate edge becomes the mean of its endpoint embeddings concatenated
//! with its edge embedding. Candidates of one query form a sequence that a
//! masked transformer encoder evaluates jointly, so the model can trade the
//! candidates of one object off against each other. A final MLP head turns
//! each position into a logit.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{child_seed, rng_from};
use crate::sgm::{EdgeKey, FeatureFlags, MemId, SceneGraphMemory, EDGE_FEATURE_DIM, NODE_FEATURE_DIM};
use crate::tensor::{Matrix, Tape, TensorId};

/// Architecture knobs. The defaults are the reference configuration; widths
/// only shrink in tests that need fast gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NepConfig {
    /// Output width of the node and edge embedders.
    pub embed_width: usize,
    /// Layer count of the node and edge embedders.
    pub embed_layers: usize,
    /// Transformer encoder layers.
    pub encoder_layers: usize,
    /// Attention heads per encoder layer; must divide 2 * embed_width.
    pub heads: usize,
    /// Hidden width of the encoder feed-forward blocks.
    pub ff_width: usize,
    /// Graph-convolution layers applied after the node embedder; 0 disables.
    pub gcn_layers: usize,
    /// When false the encoder is skipped entirely (identity).
    pub use_transformer: bool,
    /// When true all candidates of one memory attend jointly instead of only
    /// within their own query.
    pub cross_query_attention: bool,
    /// Feature groups visible to the model; disabled groups read as zeros.
    pub features: FeatureFlags,
}

impl Default for NepConfig {
    fn default() -> Self {
        NepConfig {
            embed_width: 64,
            embed_layers: 2,
            encoder_layers: 2,
            heads: 2,
            ff_width: 64,
            gcn_layers: 0,
            use_transformer: true,
            cross_query_attention: false,
            features: FeatureFlags::default(),
        }
    }
}

impl NepConfig {
    /// Width of the fused per-candidate vector.
    pub fn model_width(&self) -> usize {
        2 * self.embed_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_width == 0 || self.embed_layers == 0 || self.ff_width == 0 {
            return Err(Error::Model("embedder widths must be positive".into()));
        }
        if self.use_transformer {
            if self.heads == 0 || self.encoder_layers == 0 {
                return Err(Error::Model("transformer needs at least one layer and head".into()));
            }
            if !self.model_width().is_multiple_of(self.heads) {
                return Err(Error::Model(format!(
                    "width {} is not divisible into {} heads",
                    self.model_width(),
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Model weights, addressed by layer-path names.
#[derive(Debug, Clone, PartialEq)]
pub struct NepParams {
    pub config: NepConfig,
    tensors: BTreeMap<String, Matrix>,
}

/// Shape table of every tensor a config requires: (name, rows, cols, fan_in).
/// Layer-norm scales and shifts carry fan_in 0 and initialize to 1 and 0.
fn shape_table(config: &NepConfig) -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    let e = config.embed_width;
    let d = config.model_width();
    let mut mlp = |prefix: &str, mut input: usize| {
        for i in 0..config.embed_layers {
            out.push((format!("{prefix}.{i}.w"), input, e, input));
            out.push((format!("{prefix}.{i}.b"), 1, e, input));
            input = e;
        }
    };
    mlp("node_mlp", NODE_FEATURE_DIM);
    mlp("edge_mlp", EDGE_FEATURE_DIM);
    for i in 0..config.gcn_layers {
        out.push((format!("gcn.{i}.w"), e, e, e));
    }
    if config.use_transformer {
        let dk = d / config.heads;
        for l in 0..config.encoder_layers {
            for h in 0..config.heads {
                for proj in ["wq", "wk", "wv"] {
                    out.push((format!("enc.{l}.attn.{h}.{proj}"), d, dk, d));
                }
                for proj in ["bq", "bk", "bv"] {
                    out.push((format!("enc.{l}.attn.{h}.{proj}"), 1, dk, d));
                }
            }
            out.push((format!("enc.{l}.attn.wo"), d, d, d));
            out.push((format!("enc.{l}.attn.bo"), 1, d, d));
            out.push((format!("enc.{l}.ln1.gamma"), 1, d, 0));
            out.push((format!("enc.{l}.ln1.beta"), 1, d, 0));
            out.push((format!("enc.{l}.ff.w1"), d, config.ff_width, d));
            out.push((format!("enc.{l}.ff.b1"), 1, config.ff_width, d));
            out.push((format!("enc.{l}.ff.w2"), config.ff_width, d, config.ff_width));
            out.push((format!("enc.{l}.ff.b2"), 1, d, config.ff_width));
            out.push((format!("enc.{l}.ln2.gamma"), 1, d, 0));
            out.push((format!("enc.{l}.ln2.beta"), 1, d, 0));
        }
    }
    let head = [(d, e), (e, e), (e, 1)];
    for (i, (rows, cols)) in head.iter().enumerate() {
        out.push((format!("head.{i}.w"), *rows, *cols, *rows));
        out.push((format!("head.{i}.b"), 1, *cols, *rows));
    }
    out
}

impl NepParams {
    /// Fresh parameters with entries drawn uniformly from
    /// [-1/sqrt(fan_in), +1/sqrt(fan_in)], each tensor on its own seed stream.
    pub fn init(config: NepConfig, seed: u64) -> Result<NepParams> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, rows, cols, fan_in) in shape_table(&config) {
            let value = if fan_in == 0 {
                let fill = if name.ends_with("gamma") { 1.0 } else { 0.0 };
                Matrix::from_fn(rows, cols, |_, _| fill)
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = rng_from(child_seed(seed, "init", &name));
                Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
            };
            tensors.insert(name, value);
        }
        Ok(NepParams { config, tensors })
    }

    /// Rebuilds parameters from named tensors, checking them against the
    /// config's shape table.
    pub fn from_tensors(config: NepConfig, tensors: BTreeMap<String, Matrix>) -> Result<NepParams> {
        config.validate()?;
        let expected = shape_table(&config);
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, rows, cols, _) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if (t.rows(), t.cols()) != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {}x{}, expected {rows}x{cols}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(NepParams { config, tensors })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Matrix> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.tensors[name]
    }
}

/// Scored candidates of one query, in the caller's candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub query: MemId,
    pub scores: Vec<(EdgeKey, f64)>,
}

/// Scores every candidate edge of the given queries; probabilities in (0,1).
pub fn forward(
    params: &NepParams,
    memory: &SceneGraphMemory,
    queries: &[MemId],
) -> Result<Vec<QueryScores>> {
    let requests: Vec<(MemId, Vec<EdgeKey>)> = queries
        .iter()
        .map(|&q| Ok((q, memory.candidate_edges(q)?)))
        .collect::<Result<_>>()?;
    forward_candidates(params, memory, &requests)
}

/// Scores explicit candidate lists, e.g. after excluding already-searched
/// locations. Candidate order is preserved in the output.
pub fn forward_candidates(
    params: &NepParams,
    memory: &SceneGraphMemory,
    requests: &[(MemId, Vec<EdgeKey>)],
) -> Result<Vec<QueryScores>> {
    let mut tape = Tape::new();
    let mut cache = ParamCache::new(params);
    let graph = build_forward(&mut tape, &mut cache, memory, requests)?;
    let probs = tape.sigmoid(graph.logits);
    let values = tape.value(probs);
    let mut out = Vec::with_capacity(requests.len());
    let mut at = 0;
    for (query, keys) in graph.groups {
        let scores = keys
            .into_iter()
            .map(|k| {
                let s = values.get(at, 0);
                at += 1;
                (k, s)
            })
            .collect();
        out.push(QueryScores { query, scores });
    }
    Ok(out)
}

/// Lazily registers parameter tensors as tape leaves so each is a single
/// node no matter how many times the forward pass uses it.
pub(crate) struct ParamCache<'a> {
    params: &'a NepParams,
    ids: BTreeMap<String, TensorId>,
}

impl<'a> ParamCache<'a> {
    pub(crate) fn new(params: &'a NepParams) -> Self {
        ParamCache { params, ids: BTreeMap::new() }
    }

    pub(crate) fn config(&self) -> &NepConfig {
        &self.params.config
    }

    /// Tape ids of every parameter touched by the forward passes, by name.
    pub(crate) fn touched(&self) -> &BTreeMap<String, TensorId> {
        &self.ids
    }

    fn get(&mut self, tape: &mut Tape, name: &str) -> TensorId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = tape.leaf(self.params.get(name).clone());
        self.ids.insert(name.to_owned(), id);
        id
    }
}

/// Logits for all requested candidates, grouped per query in input order.
pub(crate) struct ForwardGraph {
    pub(crate) groups: Vec<(MemId, Vec<EdgeKey>)>,
    /// Column vector with one logit per candidate, group after group.
    pub(crate) logits: TensorId,
}

/// Builds the forward computation for one memory on the given tape. Sequences
/// are padded to the longest candidate list in `requests`, and the attention
/// mask keeps padded slots inert; padding therefore never changes the scores,
/// it only aligns shapes within a batch.
pub(crate) fn build_forward(
    tape: &mut Tape,
    cache: &mut ParamCache,
    memory: &SceneGraphMemory,
    requests: &[(MemId, Vec<EdgeKey>)],
) -> Result<ForwardGraph> {
    let config = *cache.config();
    if requests.is_empty() {
        return Err(Error::Model("forward needs at least one query".into()));
    }
    for (query, keys) in requests {
        if keys.is_empty() {
            return Err(Error::Model(format!("query {query} has no candidate edges")));
        }
        for key in keys {
            if key.1 != *query {
                return Err(Error::Model(format!(
                    "candidate {} -[{}]-> {} does not target query {query}",
                    key.0, key.2, key.1
                )));
            }
        }
    }

    // Node embeddings for every node the candidates touch; with graph
    // convolutions enabled, for the whole memory so aggregation sees every
    // neighbor.
    let mut needed: BTreeSet<MemId> = BTreeSet::new();
    if config.gcn_layers > 0 {
        needed.extend(memory.nodes().map(|n| n.id));
    } else {
        for (query, keys) in requests {
            needed.insert(*query);
            needed.extend(keys.iter().map(|k| k.0));
        }
    }
    let index: BTreeMap<MemId, usize> =
        needed.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut node_rows = Vec::with_capacity(index.len());
    for &id in &needed {
        node_rows.push(memory.node_features(id, config.features)?);
    }
    let node_input = tape.leaf(Matrix::from_rows(&node_rows));
    let mut node_emb = mlp(tape, cache, node_input, "node_mlp", config.embed_layers);
    if config.gcn_layers > 0 {
        let agg = tape.leaf(mean_aggregation(memory, &index));
        for i in 0..config.gcn_layers {
            let w = cache.get(tape, &format!("gcn.{i}.w"));
            let mixed = tape.matmul(agg, node_emb);
            let projected = tape.matmul(mixed, w);
            node_emb = tape.relu(projected);
        }
    }

    // Edge embeddings and fused per-candidate vectors, all queries at once.
    let mut edge_rows = Vec::new();
    let mut parent_rows = Vec::new();
    let mut child_rows = Vec::new();
    for (query, keys) in requests {
        for key in keys {
            edge_rows.push(memory.edge_features(key, config.features)?);
            parent_rows.push(index[&key.0]);
            child_rows.push(index[query]);
        }
    }
    let edge_input = tape.leaf(Matrix::from_rows(&edge_rows));
    let edge_emb = mlp(tape, cache, edge_input, "edge_mlp", config.embed_layers);
    let parents = tape.gather_rows(node_emb, &parent_rows);
    let children = tape.gather_rows(node_emb, &child_rows);
    let summed = tape.add(parents, children);
    let mean = tape.scale(summed, 0.5);
    let fused = tape.concat_cols(mean, edge_emb);

    // Encode each query's candidate sequence with padding and masking, or all
    // candidates as one sequence when cross-query attention is on.
    let lengths: Vec<usize> = requests.iter().map(|(_, keys)| keys.len()).collect();
    let mut encoded_groups = Vec::with_capacity(requests.len());
    if config.use_transformer {
        if config.cross_query_attention {
            let total: usize = lengths.iter().sum();
            let mut block = fused;
            let mask = vec![true; total];
            for l in 0..config.encoder_layers {
                block = encoder_layer(tape, cache, block, &mask, l);
            }
            let mut at = 0;
            for len in &lengths {
                let rows: Vec<usize> = (at..at + len).collect();
                encoded_groups.push(tape.gather_rows(block, &rows));
                at += len;
            }
        } else {
            let pad_to = *lengths.iter().max().expect("nonempty requests");
            let mut at = 0;
            for &len in &lengths {
                let rows: Vec<usize> = (at..at + len).collect();
                let mut block = tape.gather_rows(fused, &rows);
                if len < pad_to {
                    let padding = tape.leaf(Matrix::zeros(pad_to - len, config.model_width()));
                    block = tape.concat_rows(&[block, padding]);
                }
                let mut mask = vec![true; len];
                mask.resize(pad_to, false);
                for l in 0..config.encoder_layers {
                    block = encoder_layer(tape, cache, block, &mask, l);
                }
                let kept: Vec<usize> = (0..len).collect();
                encoded_groups.push(tape.gather_rows(block, &kept));
                at += len;
            }
        }
    } else {
        let mut at = 0;
        for &len in &lengths {
            let rows: Vec<usize> = (at..at + len).collect();
            encoded_groups.push(tape.gather_rows(fused, &rows));
            at += len;
        }
    }

    let encoded = if encoded_groups.len() == 1 {
        encoded_groups[0]
    } else {
        tape.concat_rows(&encoded_groups)
    };
    let logits = head(tape, cache, encoded);
    Ok(ForwardGraph {
        groups: requests.to_vec(),
        logits,
    })
}

fn mlp(
    tape: &mut Tape,
    cache: &mut ParamCache,
    input: TensorId,
    prefix: &str,
    layers: usize,
) -> TensorId {
    let mut h = input;
    for i in 0..layers {
        let w = cache.get(tape, &format!("{prefix}.{i}.w"));
        let b = cache.get(tape, &format!("{prefix}.{i}.b"));
        let lin = tape.matmul(h, w);
        let lin = tape.add_row_broadcast(lin, b);
        h = tape.relu(lin);
    }
    h
}

fn head(tape: &mut Tape, cache: &mut ParamCache, input: TensorId) -> TensorId {
    let mut h = input;
    for i in 0..3 {
        let w = cache.get(tape, &format!("head.{i}.w"));
        let b = cache.get(tape, &format!("head.{i}.b"));
        let lin = tape.matmul(h, w);
        h = tape.add_row_broadcast(lin, b);
        if i < 2 {
            h = tape.relu(h);
        }
    }
    h
}

/// One post-norm encoder layer: masked multi-head self-attention and a ReLU
/// feed-forward block, each with a residual connection and layer norm.
fn encoder_layer(
    tape: &mut Tape,
    cache: &mut ParamCache,
    block: TensorId,
    mask: &[bool],
    layer: usize,
) -> TensorId {
    let config = *cache.config();
    let dk = config.model_width() / config.heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let name = |p: &str| format!("enc.{layer}.attn.{h}.{p}");
        let wq = cache.get(tape, &name("wq"));
        let bq = cache.get(tape, &name("bq"));
        let wk = cache.get(tape, &name("wk"));
        let bk = cache.get(tape, &name("bk"));
        let wv = cache.get(tape, &name("wv"));
        let bv = cache.get(tape, &name("bv"));
        let q = tape.matmul(block, wq);
        let q = tape.add_row_broadcast(q, bq);
        let k = tape.matmul(block, wk);
        let k = tape.add_row_broadcast(k, bk);
        let v = tape.matmul(block, wv);
        let v = tape.add_row_broadcast(v, bv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows_masked(scores, mask);
        heads.push(tape.matmul(attn, v));
    }
    let mut joined = heads[0];
    for &h in &heads[1..] {
        joined = tape.concat_cols(joined, h);
    }
    let wo = cache.get(tape, &format!("enc.{layer}.attn.wo"));
    let bo = cache.get(tape, &format!("enc.{layer}.attn.bo"));
    let projected = tape.matmul(joined, wo);
    let projected = tape.add_row_broadcast(projected, bo);
    let res = tape.add(block, projected);
    let g1 = cache.get(tape, &format!("enc.{layer}.ln1.gamma"));
    let b1 = cache.get(tape, &format!("enc.{layer}.ln1.beta"));
    let normed = tape.layer_norm(res, g1, b1);

    let w1 = cache.get(tape, &format!("enc.{layer}.ff.w1"));
    let fb1 = cache.get(tape, &format!("enc.{layer}.ff.b1"));
    let w2 = cache.get(tape, &format!("enc.{layer}.ff.w2"));
    let fb2 = cache.get(tape, &format!("enc.{layer}.ff.b2"));
    let ff = tape.matmul(normed, w1);
    let ff = tape.add_row_broadcast(ff, fb1);
    let ff = tape.relu(ff);
    let ff = tape.matmul(ff, w2);
    let ff = tape.add_row_broadcast(ff, fb2);
    let res = tape.add(normed, ff);
    let g2 = cache.get(tape, &format!("enc.{layer}.ln2.gamma"));
    let b2 = cache.get(tape, &format!("enc.{layer}.ln2.beta"));
    tape.layer_norm(res, g2, b2)
}

/// Row-normalized adjacency over self plus neighbors, restricted to the
/// indexed nodes. Every memory edge counts, hypothetical or not.
pub(crate) fn mean_aggregation(memory: &SceneGraphMemory, index: &BTreeMap<MemId, usize>) -> Matrix {
    let n = index.len();
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for edge in memory.edges() {
        if let (Some(&p), Some(&c)) = (index.get(&edge.parent), index.get(&edge.child)) {
            neighbors[p].insert(c);
            neighbors[c].insert(p);
        }
    }
    let mut agg = Matrix::zeros(n, n);
    for (v, adjacent) in neighbors.iter().enumerate() {
        let weight = 1.0 / (1.0 + adjacent.len() as f64);
        agg.set(v, v, weight);
        for &u in adjacent {
            agg.set(v, u, weight);
        }
    }
    agg
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::sync::Arc;

    use super::*;
    use crate::priors::PriorsGraph;
    use crate::scenegraph::observe;
    use crate::sgm::HashEmbedder;
    use crate::sim::{make_env, EnvConfig};
    use crate::types::NodeId;

    fn small_config() -> NepConfig {
        NepConfig {
            embed_width: 8,
            encoder_layers: 1,
            heads: 2,
            ff_width: 8,
            ..NepConfig::default()
        }
    }

    /// Memory over a sampled house with all furniture seen and two queries.
    fn query_memory() -> (SceneGraphMemory, Vec<MemId>) {
        let priors = Arc::new(PriorsGraph::bundled().clone());
        let env = make_env(&priors, &EnvConfig::default(), 404).unwrap();
        let mut mem = SceneGraphMemory::new(priors, Arc::new(HashEmbedder::default()));
        let all: BTreeSet<NodeId> = env.scene.furniture_ids().into_iter().collect();
        let o = observe(&env.scene, 0, &all, 1.0, 0).unwrap();
        mem.integrate_observation(&o).unwrap();
        let a = mem.add_query("book", 0.05, 5);
        let b = mem.add_query("cup", 0.05, 5);
        (mem, vec![a, b])
    }

    #[test]
    fn init_is_seeded_and_respects_fan_in_bounds() {
        let config = NepConfig::default();
        let a = NepParams::init(config, 1).unwrap();
        let b = NepParams::init(config, 1).unwrap();
        let c = NepParams::init(config, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, rows, _, fan_in) in shape_table(&config) {
            let t = a.get(&name);
            assert_eq!(t.rows(), rows);
            if fan_in == 0 {
                let expected = if name.ends_with("gamma") { 1.0 } else { 0.0 };
                assert!(t.data().iter().all(|v| *v == expected), "{name}");
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
                assert!(t.data().iter().any(|v| *v != 0.0), "{name}");
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_head_counts() {
        let bad = NepConfig { heads: 3, ..NepConfig::default() };
        assert!(bad.validate().is_err());
        assert!(NepParams::init(bad, 0).is_err());
        let ok = NepConfig { heads: 4, ..NepConfig::default() };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn forward_groups_probabilities_by_query() {
        let (mem, queries) = query_memory();
        let params = NepParams::init(small_config(), 3).unwrap();
        let out = forward(&params, &mem, &queries).unwrap();
        assert_eq!(out.len(), 2);
        for (scored, q) in out.iter().zip(&queries) {
            assert_eq!(scored.query, *q);
            assert_eq!(scored.scores.len(), mem.candidate_edges(*q).unwrap().len());
            assert!(scored.scores.iter().all(|(_, p)| *p > 0.0 && *p < 1.0));
        }
        let again = forward(&params, &mem, &queries).unwrap();
        assert_eq!(out, again, "inference is pure");
    }

    #[test]
    fn permuting_candidates_permutes_outputs() {
        let (mem, queries) = query_memory();
        let params = NepParams::init(small_config(), 3).unwrap();
        let keys = mem.candidate_edges(queries[0]).unwrap();
        assert!(keys.len() >= 3);
        let mut reversed = keys.clone();
        reversed.reverse();
        let base = forward_candidates(&params, &mem, &[(queries[0], keys)]).unwrap();
        let perm = forward_candidates(&params, &mem, &[(queries[0], reversed)]).unwrap();
        for (key, p) in &base[0].scores {
            let (_, q) = perm[0].scores.iter().find(|(k, _)| k == key).unwrap();
            assert!((p - q).abs() < 1e-9, "{key:?}: {p} vs {q}");
        }
    }

    #[test]
    fn padding_does_not_change_scores() {
        let (mem, queries) = query_memory();
        let params = NepParams::init(small_config(), 3).unwrap();
        let lens: Vec<usize> =
            queries.iter().map(|&q| mem.candidate_edges(q).unwrap().len()).collect();
        assert_ne!(lens[0], lens[1], "queries must need padding to exercise the mask");
        let batched = forward(&params, &mem, &queries).unwrap();
        for &q in &queries {
            let alone = forward(&params, &mem, &[q]).unwrap();
            let joint = batched.iter().find(|s| s.query == q).unwrap();
            for ((k1, p1), (k2, p2)) in joint.scores.iter().zip(&alone[0].scores) {
                assert_eq!(k1, k2);
                assert!((p1 - p2).abs() < 1e-9, "{k1:?}: {p1} vs {p2}");
            }
        }
    }

    #[test]
    fn queries_without_candidates_are_rejected() {
        let (mut mem, _) = query_memory();
        let empty = mem.add_query("vase", 2.0, 0);
        assert!(mem.candidate_edges(empty).unwrap().is_empty());
        let params = NepParams::init(small_config(), 3).unwrap();
        let err = forward(&params, &mem, &[empty]);
        assert!(matches!(err, Err(Error::Model(_))));
        let err = forward(&params, &mem, &[]);
        assert!(matches!(err, Err(Error::Model(_))));
    }

    #[test]
    fn encoder_ablation_and_cross_query_modes_run() {
        let (mem, queries) = query_memory();
        let base = forward(&NepParams::init(small_config(), 3).unwrap(), &mem, &queries).unwrap();

        let plain_config = NepConfig { use_transformer: false, ..small_config() };
        let plain = forward(&NepParams::init(plain_config, 3).unwrap(), &mem, &queries).unwrap();
        assert_eq!(plain.len(), base.len());
        assert!(plain[0].scores.iter().all(|(_, p)| *p > 0.0 && *p < 1.0));
        assert_ne!(
            base[0].scores, plain[0].scores,
            "identity encoder must change the computation"
        );

        let cross_config = NepConfig { cross_query_attention: true, ..small_config() };
        let cross = forward(&NepParams::init(cross_config, 3).unwrap(), &mem, &queries).unwrap();
        assert_eq!(cross[1].scores.len(), base[1].scores.len());
        assert!(cross.iter().all(|s| s.scores.iter().all(|(_, p)| *p > 0.0 && *p < 1.0)));
    }

    #[test]
    fn mean_aggregation_matches_hand_built_star() {
        let (mem, queries) = query_memory();
        let keys = mem.candidate_edges(queries[0]).unwrap();
        let mut ids: BTreeSet<MemId> = BTreeSet::new();
        ids.insert(queries[0]);
        ids.extend(keys.iter().map(|k| k.0));
        let index: BTreeMap<MemId, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let agg = mean_aggregation(&mem, &index);

        // The query is the star center: connected to every candidate parent
        // in the index, while the parents' own neighbors (rooms, other
        // objects) are outside it.
        let center = index[&queries[0]];
        let degree = keys.iter().map(|k| k.0).collect::<BTreeSet<_>>().len();
        let expected = 1.0 / (1.0 + degree as f64);
        assert!((agg.get(center, center) - expected).abs() < 1e-12);
        let row_sum: f64 = (0..agg.cols()).map(|c| agg.get(center, c)).sum();
        assert!((row_sum - 1.0).abs() < 1e-12);

        // A parent with a single in-index neighbor (the query) averages the
        // pair; isolated rows would collapse to the identity weight.
        let parent = index[&keys[0].0];
        assert!((agg.get(parent, center) - agg.get(parent, parent)).abs() < 1e-12);

        // An index without any connected pair leaves each node to itself.
        let lone: BTreeMap<MemId, usize> = [(keys[0].0, 0)].into_iter().collect();
        let isolated = mean_aggregation(&mem, &lone);
        assert_eq!(isolated.get(0, 0), 1.0);
    }

    #[test]
    fn gcn_layers_change_scores_but_keep_shapes() {
        let (mem, queries) = query_memory();
        let with = NepConfig { gcn_layers: 1, ..small_config() };
        let out = forward(&NepParams::init(with, 3).unwrap(), &mem, &queries).unwrap();
        let base = forward(&NepParams::init(small_config(), 3).unwrap(), &mem, &queries).unwrap();
        assert_eq!(out[0].scores.len(), base[0].scores.len());
        assert!(out[0].scores.iter().all(|(_, p)| *p > 0.0 && *p < 1.0));
        assert_ne!(out[0].scores, base[0].scores);
    }
}
