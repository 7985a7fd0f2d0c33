//! Heuristic scoring policies for object-location queries.
//!
//! Each policy maps a query and its candidate location edges to per-candidate
//! scores; `choose` then picks the argmax. Scores are only comparable within
//! a single call: the random policy emits uniform noise, the frequentist and
//! bayesian policies emit probabilities, and the myopic policy emits a single
//! certain entry. The oracle reads the hidden environment dynamics and exists
//! as an upper baseline.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{child_seed, rng_from};
use crate::sgm::{EdgeKey, MemId, SceneGraphMemory};
use crate::sim::EnvInstance;
use crate::types::NodeType;

/// Variance of the beta prior used by the bayesian policy.
pub const DEFAULT_BAYESIAN_VARIANCE: f64 = 0.05;

/// Prior means are clamped into [FLOOR, 1 - FLOOR] so the beta construction
/// never degenerates at the endpoints.
const PRIOR_MEAN_FLOOR: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Policy selection
// ---------------------------------------------------------------------------

/// The available scoring policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// I.i.d. uniform scores from the call seed.
    Random,
    /// Scores each candidate by its stored prior probability.
    Priors,
    /// Ratio of true sightings to total sightings per edge.
    Frequentist,
    /// Certainty on the edge where the object was last seen.
    Myopic,
    /// Beta-binomial posterior predictive seeded from the prior.
    Bayesian,
    /// Ground-truth instance dynamics; requires the environment.
    Oracle,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Random,
        PolicyKind::Priors,
        PolicyKind::Frequentist,
        PolicyKind::Myopic,
        PolicyKind::Bayesian,
        PolicyKind::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Priors => "priors",
            PolicyKind::Frequentist => "frequentist",
            PolicyKind::Myopic => "myopic",
            PolicyKind::Bayesian => "bayesian",
            PolicyKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy '{s}'")))
    }
}

/// Tunable knobs shared by the scoring policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    /// Variance of the beta prior in the bayesian policy.
    pub bayesian_variance: f64,
    /// When set, the oracle also scores the currently true location edges at
    /// 1.0 instead of only reading the movement distribution. Off by default;
    /// intended for upper-bound comparisons.
    pub oracle_cheats: bool,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams { bayesian_variance: DEFAULT_BAYESIAN_VARIANCE, oracle_cheats: false }
    }
}

// ---------------------------------------------------------------------------
// Beta-binomial belief
// ---------------------------------------------------------------------------

/// Parameters of a beta distribution over an edge's truth probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaBelief {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaBelief {
    pub fn mean(self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

/// Builds a beta belief with the given mean and variance via moment matching.
///
/// `mean` is clamped into [1e-4, 1 - 1e-4]. The variance of a beta with mean
/// mu is bounded by mu(1-mu); requests at or beyond half that bound are
/// clamped to mu(1-mu)/2 so both shape parameters stay positive.
pub fn beta_from_prior(mean: f64, variance: f64) -> BetaBelief {
    let mu = mean.clamp(PRIOR_MEAN_FLOOR, 1.0 - PRIOR_MEAN_FLOOR);
    let v = variance.clamp(1e-12, mu * (1.0 - mu) / 2.0);
    let alpha = mu * mu * ((1.0 - mu) / v - 1.0 / mu);
    let beta = alpha * (1.0 / mu - 1.0);
    BetaBelief { alpha, beta }
}

/// Mean of the posterior after observing `successes` true sightings out of
/// `trials`: (alpha + s) / (alpha + beta + n).
pub fn posterior_predictive(belief: BetaBelief, successes: u64, trials: u64) -> f64 {
    debug_assert!(successes <= trials, "successes {successes} > trials {trials}");
    (belief.alpha + successes as f64) / (belief.alpha + belief.beta + trials as f64)
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Scores the candidate edges of `query` under the given policy.
///
/// `candidates` must be existing memory edges pointing at `query`; the oracle
/// additionally needs `env`. Most policies return one score per candidate in
/// input order. The myopic policy is the exception: it always returns a single
/// entry, either the object's last sighted location when that is among the
/// candidates or one candidate picked uniformly at random otherwise.
pub fn score_candidates(
    kind: PolicyKind,
    memory: &SceneGraphMemory,
    env: Option<&EnvInstance>,
    query: MemId,
    candidates: &[EdgeKey],
    params: &PolicyParams,
    seed: u64,
) -> Result<Vec<(EdgeKey, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Model(format!("no candidate edges to score for query {query}")));
    }
    let query_node = memory.get(query)?;
    let mut edges = Vec::with_capacity(candidates.len());
    for key in candidates {
        if key.1 != query {
            return Err(Error::Model(format!(
                "candidate {} -[{}]-> {} does not target query {query}",
                key.0, key.2, key.1
            )));
        }
        let edge = memory.edge(key).ok_or_else(|| {
            Error::Model(format!("candidate {} -[{}]-> {} is not in memory", key.0, key.2, key.1))
        })?;
        edges.push(edge);
    }

    let scores: Vec<f64> = match kind {
        PolicyKind::Random => uniform_scores(kind, candidates.len(), seed),
        PolicyKind::Priors => edges.iter().map(|e| e.prior_prob).collect(),
        PolicyKind::Frequentist => {
            if edges.iter().all(|e| e.times_observed == 0) {
                uniform_scores(kind, candidates.len(), seed)
            } else {
                edges.iter().map(|e| e.true_frequency()).collect()
            }
        }
        PolicyKind::Myopic => {
            if let Some((parent, relation)) = query_node.last_location {
                let key = (parent, query, relation);
                if candidates.contains(&key) {
                    return Ok(vec![(key, 1.0)]);
                }
            }
            let mut rng = rng_from(child_seed(seed, "policy", kind.as_str()));
            let pick = rng.gen_range(0..candidates.len());
            return Ok(vec![(candidates[pick], 1.0)]);
        }
        PolicyKind::Bayesian => edges
            .iter()
            .map(|e| {
                let belief = beta_from_prior(e.prior_prob, params.bayesian_variance);
                posterior_predictive(belief, e.times_true, e.times_observed)
            })
            .collect(),
        PolicyKind::Oracle => {
            let env = env.ok_or_else(|| {
                Error::Model("oracle policy requires the environment ground truth".into())
            })?;
            oracle_scores(memory, env, &query_node.description, candidates, params)?
        }
    };

    Ok(candidates.iter().copied().zip(scores).collect())
}

/// Picks the highest-scoring edge; ties go to the smallest key in ascending
/// (parent, child, relation) order. Entries with a NaN score are skipped.
/// Returns `None` only for an empty or all-NaN list.
pub fn choose(scores: &[(EdgeKey, f64)]) -> Option<EdgeKey> {
    let mut best: Option<(EdgeKey, f64)> = None;
    for &(key, score) in scores {
        if score.is_nan() {
            continue;
        }
        best = match best {
            Some((bk, bs)) if score < bs || (score == bs && key >= bk) => Some((bk, bs)),
            _ => Some((key, score)),
        };
    }
    best.map(|(key, _)| key)
}

fn uniform_scores(kind: PolicyKind, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(child_seed(seed, "policy", kind.as_str()));
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// Scores each candidate by the queried object's movement distribution entry
/// for (candidate furniture, relation); candidates outside the distribution
/// score 0. With the cheating flag, currently true locations score 1.
fn oracle_scores(
    memory: &SceneGraphMemory,
    env: &EnvInstance,
    description: &str,
    candidates: &[EdgeKey],
    params: &PolicyParams,
) -> Result<Vec<f64>> {
    let entry = env.dynamics.entry(description);
    let mut scores = Vec::with_capacity(candidates.len());
    for key in candidates {
        let scene_id = memory.get(key.0)?.scene_id;
        let prob = match (entry, scene_id) {
            (Some(list), Some(sid)) => list
                .iter()
                .find(|d| d.furniture == sid && d.relation == key.2)
                .map_or(0.0, |d| d.prob),
            _ => 0.0,
        };
        scores.push(prob);
    }
    if params.oracle_cheats {
        let current: BTreeSet<_> = env
            .scene
            .nodes_of_type(NodeType::Object)
            .filter(|n| n.description() == description)
            .filter_map(|n| env.scene.parent_edge(n.id).map(|e| (e.parent, e.relation)))
            .collect();
        for (key, score) in candidates.iter().zip(scores.iter_mut()) {
            if let Some(sid) = memory.get(key.0)?.scene_id {
                if current.contains(&(sid, key.2)) {
                    *score = 1.0;
                }
            }
        }
    }
    Ok(scores)
}
