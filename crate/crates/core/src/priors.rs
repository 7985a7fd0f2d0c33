//! Probabilistic priors over where object classes live in a house.
//!
//! A [`PriorsGraph`] holds three label sets (rooms, furniture, objects) with
//! per-label metadata, two families of weighted edges (room to furniture, and
//! (room, furniture) to object with a spatial relation), and an adjective
//! lexicon used to build instance descriptions. Edge probabilities are
//! normalized per group: room->furniture probabilities sum to 1 for each room,
//! and (room, furniture, relation) probabilities sum to 1 for each
//! (room, object) pair that has any edges.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Relation;

/// Canonical adjective category order. A label with `n` possible adjectives
/// draws from the first `n` categories of this list.
pub const ADJECTIVE_CATEGORIES: [&str; 13] = [
    "size", "color", "material", "condition", "pattern", "age", "style", "brand", "texture",
    "finish", "weight", "shape", "origin",
];

/// Tolerance for accepting a nearly-normalized probability group at load time.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

const BUNDLED_PRIORS: &str = include_str!("../data/default_priors.toml");

/// Which label set a label belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Room,
    Furniture,
    Object,
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LabelKind::Room => "room",
            LabelKind::Furniture => "furniture",
            LabelKind::Object => "object",
        };
        f.write_str(s)
    }
}

/// Evolution rates attached to object labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectRates {
    pub move_frequency: f64,
    pub add_prob: f64,
    pub remove_prob: f64,
}

/// Metadata attached to every label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetadata {
    pub label: String,
    pub kind: LabelKind,
    /// Ordered prefix of [`ADJECTIVE_CATEGORIES`] this label may draw from.
    pub adjective_categories: Vec<String>,
    pub sample_prob: f64,
    pub max_count: u32,
    /// Present exactly when `kind` is `Object`.
    pub rates: Option<ObjectRates>,
}

/// Options controlling [`load_priors_with`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Drop furniture labels that host fewer than 3 object edges, then
    /// renormalize the affected groups. Off by default.
    pub filter_sparse_furniture: bool,
}

/// Key of a (room, furniture) -> object edge. Keyed with the object second so
/// that the entries of one (room, object) normalization group are contiguous.
pub type FoKey = (String, String, String, Relation);

/// The loaded, validated, and normalized priors graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorsGraph {
    labels: BTreeMap<String, LabelMetadata>,
    /// (room, furniture) -> probability, normalized per room.
    #[serde(with = "crate::serde_util::vec_map")]
    room_furniture: BTreeMap<(String, String), f64>,
    /// (room, object, furniture, relation) -> probability, normalized per
    /// (room, object).
    #[serde(with = "crate::serde_util::vec_map")]
    furniture_object: BTreeMap<FoKey, f64>,
    /// Category name -> adjectives, in canonical category order.
    lexicon: Vec<(String, Vec<String>)>,
}

impl PriorsGraph {
    /// The priors graph bundled with the crate.
    pub fn bundled() -> &'static PriorsGraph {
        static GRAPH: OnceLock<PriorsGraph> = OnceLock::new();
        GRAPH.get_or_init(|| {
            parse_priors(BUNDLED_PRIORS, "<bundled>", &LoadOptions::default())
                .expect("bundled priors file must be valid")
        })
    }

    pub fn metadata(&self, label: &str) -> Option<&LabelMetadata> {
        self.labels.get(label)
    }

    fn expect_kind(&self, label: &str, kind: LabelKind) -> Result<&LabelMetadata> {
        match self.labels.get(label) {
            Some(m) if m.kind == kind => Ok(m),
            _ => Err(Error::UnknownLabel(format!("{label} ({kind})"))),
        }
    }

    /// All labels of one kind, in lexicographic order.
    pub fn labels_of_kind(&self, kind: LabelKind) -> impl Iterator<Item = &LabelMetadata> {
        self.labels.values().filter(move |m| m.kind == kind)
    }

    /// Furniture choices for a room with their normalized probabilities.
    pub fn room_furniture_probs(&self, room: &str) -> Vec<(&str, f64)> {
        self.room_furniture
            .range((room.to_string(), String::new())..)
            .take_while(|((r, _), _)| r == room)
            .map(|((_, f), p)| (f.as_str(), *p))
            .collect()
    }

    /// The (furniture, relation, probability) entries of one (room, object)
    /// normalization group. Empty when the object has no edges in the room.
    pub fn object_group(&self, room: &str, object: &str) -> Vec<(&str, Relation, f64)> {
        self.furniture_object
            .range((room.to_string(), object.to_string(), String::new(), Relation::In)..)
            .take_while(|((r, o, _, _), _)| r == room && o == object)
            .map(|((_, _, f, rel), p)| (f.as_str(), *rel, *p))
            .collect()
    }

    /// The (object, relation, probability) entries conditioned on one
    /// (room, furniture) pair. Probabilities are the stored (room, object)
    /// group values, not renormalized.
    pub fn furniture_conditional(&self, room: &str, furniture: &str) -> Vec<(&str, Relation, f64)> {
        self.furniture_object
            .iter()
            .filter(|((r, _, f, _), _)| r == room && f == furniture)
            .map(|((_, o, _, rel), p)| (o.as_str(), *rel, *p))
            .collect()
    }

    /// Stored prior probability of an edge, zero when absent.
    ///
    /// Errors when any of the labels is unknown or of the wrong kind.
    pub fn prior_prob(&self, room: &str, furniture: &str, object: &str, relation: Relation) -> Result<f64> {
        self.expect_kind(room, LabelKind::Room)?;
        self.expect_kind(furniture, LabelKind::Furniture)?;
        self.expect_kind(object, LabelKind::Object)?;
        Ok(self.prior_prob_unchecked(room, furniture, object, relation))
    }

    /// Like [`Self::prior_prob`] but skips label validation; absent edges and
    /// unknown labels both read as zero.
    pub fn prior_prob_unchecked(&self, room: &str, furniture: &str, object: &str, relation: Relation) -> f64 {
        let key = (room.to_string(), object.to_string(), furniture.to_string(), relation);
        self.furniture_object.get(&key).copied().unwrap_or(0.0)
    }

    /// The `k` most probable (room, furniture, relation) locations for an
    /// object class, sorted by descending probability with ties broken
    /// lexicographically by (room, furniture, relation).
    pub fn top_k_prior_locations(&self, object: &str, k: usize) -> Result<Vec<(String, String, Relation, f64)>> {
        self.expect_kind(object, LabelKind::Object)?;
        let mut entries: Vec<(String, String, Relation, f64)> = self
            .furniture_object
            .iter()
            .filter(|((_, o, _, _), _)| o == object)
            .map(|((r, _, f, rel), p)| (r.clone(), f.clone(), *rel, *p))
            .collect();
        entries.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.as_str().cmp(b.2.as_str()))
        });
        entries.truncate(k);
        Ok(entries)
    }

    /// Iterate all furniture->object edges as (room, object, furniture,
    /// relation, probability).
    pub fn object_edges(&self) -> impl Iterator<Item = (&str, &str, &str, Relation, f64)> {
        self.furniture_object
            .iter()
            .map(|((r, o, f, rel), p)| (r.as_str(), o.as_str(), f.as_str(), *rel, *p))
    }

    /// Room labels in lexicographic order.
    pub fn room_labels(&self) -> Vec<&str> {
        self.labels_of_kind(LabelKind::Room).map(|m| m.label.as_str()).collect()
    }

    /// Adjectives of one category.
    pub fn adjectives(&self, category: &str) -> Option<&[String]> {
        self.lexicon
            .iter()
            .find(|(name, _)| name == category)
            .map(|(_, adjs)| adjs.as_slice())
    }

    /// The full lexicon in canonical category order.
    pub fn lexicon(&self) -> &[(String, Vec<String>)] {
        &self.lexicon
    }

    /// Override the evolution rates of an object label. Intended for
    /// experiment setup (for example, giving every object the same move
    /// frequency).
    pub fn set_object_rates(&mut self, label: &str, rates: ObjectRates) -> Result<()> {
        self.expect_kind(label, LabelKind::Object)?;
        self.labels.get_mut(label).unwrap().rates = Some(rates);
        Ok(())
    }

    /// The object class named by a description, matched as the longest known
    /// object label that is a suffix of the description.
    pub fn object_class_of_description<'a>(&'a self, description: &str) -> Option<&'a str> {
        self.labels_of_kind(LabelKind::Object)
            .map(|m| m.label.as_str())
            .filter(|label| {
                description == *label
                    || description.ends_with(&format!(" {label}"))
            })
            .max_by_key(|label| label.len())
    }
}

/// Loads a priors file with default options.
pub fn load_priors(path: impl AsRef<Path>) -> Result<PriorsGraph> {
    load_priors_with(path, &LoadOptions::default())
}

/// Loads a priors file, validating and normalizing it.
pub fn load_priors_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<PriorsGraph> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    parse_priors(&text, &display, opts)
}

// ---------------------------------------------------------------------------
// Raw file schema
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPriors {
    priors_format: u32,
    rooms: Vec<RawRoom>,
    furniture: Vec<RawFurniture>,
    objects: Vec<RawObject>,
    room_furniture_edges: Vec<RawRfEdge>,
    furniture_object_edges: Vec<RawFoEdge>,
    adjective_categories: Vec<RawCategory>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoom {
    label: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFurniture {
    label: String,
    adjective_count: usize,
    sample_prob: f64,
    max_count: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    label: String,
    adjective_count: usize,
    sample_prob: f64,
    max_count: u32,
    move_frequency: f64,
    add_prob: f64,
    remove_prob: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRfEdge {
    room: String,
    furniture: String,
    prob: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFoEdge {
    room: String,
    furniture: String,
    object: String,
    relation: String,
    prob: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCategory {
    name: String,
    adjectives: Vec<String>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidPriors(msg.into())
}

fn check_prob(value: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&value) || !value.is_finite() {
        return Err(invalid(format!("{what} must lie in [0, 1], got {value}")));
    }
    Ok(())
}

fn adjective_prefix(label: &str, count: usize) -> Result<Vec<String>> {
    if count == 0 || count > ADJECTIVE_CATEGORIES.len() {
        return Err(invalid(format!(
            "label '{label}' must use between 1 and {} adjective categories, got {count}",
            ADJECTIVE_CATEGORIES.len()
        )));
    }
    Ok(ADJECTIVE_CATEGORIES[..count].iter().map(|s| s.to_string()).collect())
}

fn parse_priors(text: &str, origin: &str, opts: &LoadOptions) -> Result<PriorsGraph> {
    let raw: RawPriors =
        toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
    if raw.priors_format != 1 {
        return Err(Error::parse(
            origin,
            format!("unsupported priors_format {} (expected 1)", raw.priors_format),
        ));
    }

    let mut labels: BTreeMap<String, LabelMetadata> = BTreeMap::new();
    let mut insert = |meta: LabelMetadata| -> Result<()> {
        if labels.contains_key(&meta.label) {
            return Err(invalid(format!("duplicate label '{}'", meta.label)));
        }
        labels.insert(meta.label.clone(), meta);
        Ok(())
    };

    for r in &raw.rooms {
        insert(LabelMetadata {
            label: r.label.clone(),
            kind: LabelKind::Room,
            adjective_categories: Vec::new(),
            sample_prob: 1.0,
            max_count: 1,
            rates: None,
        })?;
    }
    for f in &raw.furniture {
        check_prob(f.sample_prob, &format!("sample_prob of '{}'", f.label))?;
        if f.max_count == 0 {
            return Err(invalid(format!("max_count of '{}' must be at least 1", f.label)));
        }
        insert(LabelMetadata {
            label: f.label.clone(),
            kind: LabelKind::Furniture,
            adjective_categories: adjective_prefix(&f.label, f.adjective_count)?,
            sample_prob: f.sample_prob,
            max_count: f.max_count,
            rates: None,
        })?;
    }
    for o in &raw.objects {
        check_prob(o.sample_prob, &format!("sample_prob of '{}'", o.label))?;
        check_prob(o.move_frequency, &format!("move_frequency of '{}'", o.label))?;
        check_prob(o.add_prob, &format!("add_prob of '{}'", o.label))?;
        check_prob(o.remove_prob, &format!("remove_prob of '{}'", o.label))?;
        if o.max_count == 0 {
            return Err(invalid(format!("max_count of '{}' must be at least 1", o.label)));
        }
        insert(LabelMetadata {
            label: o.label.clone(),
            kind: LabelKind::Object,
            adjective_categories: adjective_prefix(&o.label, o.adjective_count)?,
            sample_prob: o.sample_prob,
            max_count: o.max_count,
            rates: Some(ObjectRates {
                move_frequency: o.move_frequency,
                add_prob: o.add_prob,
                remove_prob: o.remove_prob,
            }),
        })?;
    }

    // Lexicon: exactly the canonical categories, in order, each with enough
    // distinct adjectives to build varied descriptions.
    if raw.adjective_categories.len() != ADJECTIVE_CATEGORIES.len() {
        return Err(invalid(format!(
            "expected {} adjective categories, got {}",
            ADJECTIVE_CATEGORIES.len(),
            raw.adjective_categories.len()
        )));
    }
    let mut lexicon = Vec::new();
    for (i, cat) in raw.adjective_categories.iter().enumerate() {
        if cat.name != ADJECTIVE_CATEGORIES[i] {
            return Err(invalid(format!(
                "adjective category {} must be '{}', got '{}'",
                i, ADJECTIVE_CATEGORIES[i], cat.name
            )));
        }
        if cat.adjectives.len() < 4 {
            return Err(invalid(format!(
                "adjective category '{}' needs at least 4 adjectives",
                cat.name
            )));
        }
        let unique: BTreeSet<&String> = cat.adjectives.iter().collect();
        if unique.len() != cat.adjectives.len() || cat.adjectives.iter().any(|a| a.is_empty()) {
            return Err(invalid(format!(
                "adjective category '{}' has empty or duplicate entries",
                cat.name
            )));
        }
        lexicon.push((cat.name.clone(), cat.adjectives.clone()));
    }

    let kind_of = |label: &str| labels.get(label).map(|m| m.kind);
    let mut room_furniture: BTreeMap<(String, String), f64> = BTreeMap::new();
    for e in &raw.room_furniture_edges {
        if kind_of(&e.room) != Some(LabelKind::Room) {
            return Err(invalid(format!("edge references unknown room '{}'", e.room)));
        }
        if kind_of(&e.furniture) != Some(LabelKind::Furniture) {
            return Err(invalid(format!("edge references unknown furniture '{}'", e.furniture)));
        }
        check_prob(e.prob, &format!("prob of room edge ({}, {})", e.room, e.furniture))?;
        let key = (e.room.clone(), e.furniture.clone());
        if room_furniture.insert(key, e.prob).is_some() {
            return Err(invalid(format!("duplicate room edge ({}, {})", e.room, e.furniture)));
        }
    }

    let mut furniture_object: BTreeMap<FoKey, f64> = BTreeMap::new();
    for e in &raw.furniture_object_edges {
        if kind_of(&e.room) != Some(LabelKind::Room) {
            return Err(invalid(format!("edge references unknown room '{}'", e.room)));
        }
        if kind_of(&e.furniture) != Some(LabelKind::Furniture) {
            return Err(invalid(format!("edge references unknown furniture '{}'", e.furniture)));
        }
        if kind_of(&e.object) != Some(LabelKind::Object) {
            return Err(invalid(format!("edge references unknown object '{}'", e.object)));
        }
        let relation = Relation::parse(&e.relation).ok_or_else(|| {
            invalid(format!("unknown relation '{}' on edge ({}, {}, {})", e.relation, e.room, e.furniture, e.object))
        })?;
        check_prob(e.prob, &format!("prob of edge ({}, {}, {}, {})", e.room, e.furniture, e.object, e.relation))?;
        let key = (e.room.clone(), e.object.clone(), e.furniture.clone(), relation);
        if furniture_object.insert(key, e.prob).is_some() {
            return Err(invalid(format!(
                "duplicate edge ({}, {}, {}, {})",
                e.room, e.furniture, e.object, e.relation
            )));
        }
    }

    let mut graph = PriorsGraph { labels, room_furniture, furniture_object, lexicon };

    if opts.filter_sparse_furniture {
        filter_sparse_furniture(&mut graph)?;
        renormalize(&mut graph, f64::INFINITY)?;
    } else {
        renormalize(&mut graph, NORMALIZATION_TOLERANCE)?;
    }
    Ok(graph)
}

/// Renormalizes every probability group, rejecting groups whose sum deviates
/// from 1 by more than `tolerance`.
fn renormalize(graph: &mut PriorsGraph, tolerance: f64) -> Result<()> {
    let mut room_sums: BTreeMap<String, f64> = BTreeMap::new();
    for ((room, _), p) in &graph.room_furniture {
        *room_sums.entry(room.clone()).or_insert(0.0) += *p;
    }
    for (room, sum) in &room_sums {
        if (sum - 1.0).abs() > tolerance {
            return Err(invalid(format!(
                "furniture probabilities for room '{room}' sum to {sum}, expected 1"
            )));
        }
        if *sum <= 0.0 {
            return Err(invalid(format!("room '{room}' has zero total furniture probability")));
        }
    }
    for ((room, _), p) in graph.room_furniture.iter_mut() {
        *p /= room_sums[room];
    }

    let mut group_sums: BTreeMap<(String, String), f64> = BTreeMap::new();
    for ((room, object, _, _), p) in &graph.furniture_object {
        *group_sums.entry((room.clone(), object.clone())).or_insert(0.0) += *p;
    }
    for ((room, object), sum) in &group_sums {
        if (sum - 1.0).abs() > tolerance {
            return Err(invalid(format!(
                "location probabilities for object '{object}' in room '{room}' sum to {sum}, expected 1"
            )));
        }
        if *sum <= 0.0 {
            return Err(invalid(format!(
                "object '{object}' in room '{room}' has zero total location probability"
            )));
        }
    }
    for ((room, object, _, _), p) in graph.furniture_object.iter_mut() {
        *p /= group_sums[&(room.clone(), object.clone())];
    }
    Ok(())
}

/// Removes furniture labels hosting fewer than 3 object edges, together with
/// all their edges.
fn filter_sparse_furniture(graph: &mut PriorsGraph) -> Result<()> {
    let mut edge_counts: BTreeMap<String, usize> = BTreeMap::new();
    for (_, _, furniture, _) in graph.furniture_object.keys() {
        *edge_counts.entry(furniture.clone()).or_insert(0) += 1;
    }
    let sparse: BTreeSet<String> = graph
        .labels
        .values()
        .filter(|m| m.kind == LabelKind::Furniture)
        .map(|m| m.label.clone())
        .filter(|label| edge_counts.get(label).copied().unwrap_or(0) < 3)
        .collect();
    if sparse.is_empty() {
        return Ok(());
    }
    graph.labels.retain(|label, _| !sparse.contains(label));
    graph.room_furniture.retain(|(_, f), _| !sparse.contains(f));
    graph.furniture_object.retain(|(_, _, f, _), _| !sparse.contains(f));
    for room in graph
        .labels
        .values()
        .filter(|m| m.kind == LabelKind::Room)
        .map(|m| m.label.clone())
        .collect::<Vec<_>>()
    {
        if graph.room_furniture_probs(&room).is_empty() {
            return Err(invalid(format!(
                "filtering sparse furniture left room '{room}' with no furniture"
            )));
        }
    }
    Ok(())
}
