//! Shared vocabulary for the scene hierarchy: node identity, node types, and
//! the fixed set of spatial relations.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Identity of a node in a concrete scene graph.
///
/// Ids are assigned by the owning graph, never reused, and survive
/// serialization round trips unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Level of a node in the house hierarchy.
///
/// The declaration order is canonical: it is the order used for the node-type
/// one-hot block in feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    House,
    Floor,
    Room,
    Furniture,
    Object,
}

impl NodeType {
    pub const ALL: [NodeType; 5] = [
        NodeType::House,
        NodeType::Floor,
        NodeType::Room,
        NodeType::Furniture,
        NodeType::Object,
    ];

    /// Position of this type in the canonical one-hot ordering.
    pub fn one_hot_index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::House => "house",
            NodeType::Floor => "floor",
            NodeType::Room => "room",
            NodeType::Furniture => "furniture",
            NodeType::Object => "object",
        }
    }

    /// Hierarchy depth, house = 0 through object = 4.
    pub fn level(self) -> u8 {
        self.one_hot_index() as u8
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Spatial relation carried by an edge from a parent node to a child node.
///
/// The declaration order is canonical and is used both for the relation
/// one-hot block in edge features and for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "in")]
    In,
    #[serde(rename = "contains")]
    Contains,
    #[serde(rename = "onTop")]
    OnTop,
    #[serde(rename = "under")]
    Under,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::In,
        Relation::Contains,
        Relation::OnTop,
        Relation::Under,
    ];

    /// Position of this relation in the canonical one-hot ordering.
    pub fn one_hot_index(self) -> usize {
        Self::ALL.iter().position(|r| *r == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::In => "in",
            Relation::Contains => "contains",
            Relation::OnTop => "onTop",
            Relation::Under => "under",
        }
    }

    pub fn parse(s: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
