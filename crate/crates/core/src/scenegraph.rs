//! Ground-truth scene graphs and the partial-observation operator.
//!
//! A scene graph is a strict tree over the house hierarchy: one house node,
//! floors below it, then rooms, furniture, and finally objects. Simulator
//! mutations (removal, movement, addition of objects) go through the methods
//! here so the tree invariants hold at every step. Observation is a pure
//! function from a graph plus a furniture set to the subset an agent actually
//! sees after detection dropout.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::rng_from;
use crate::types::{NodeId, NodeType, Relation};
use crate::{Error, Result};

/// A node in a concrete scene: a physical entity with a class label and an
/// ordered list of identifying adjectives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneNode {
    pub id: NodeId,
    pub node_type: NodeType,
    pub class_label: String,
    /// Adjectives in description order, possibly empty.
    pub adjectives: Vec<String>,
}

impl SceneNode {
    /// Full natural-language identity of the node, adjectives first.
    ///
    /// Two objects with equal descriptions are indistinguishable to an agent.
    pub fn description(&self) -> String {
        if self.adjectives.is_empty() {
            self.class_label.clone()
        } else {
            format!("{} {}", self.adjectives.join(" "), self.class_label)
        }
    }
}

/// A directed edge from a parent node to a child exactly one level below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEdge {
    pub parent: NodeId,
    pub child: NodeId,
    pub relation: Relation,
}

/// A strict tree of scene nodes.
///
/// Every non-house node has exactly one parent edge, and parent levels are
/// exactly one above child levels. Node ids are assigned once and never
/// reused, so ids remain stable across removals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    nodes: std::collections::BTreeMap<NodeId, SceneNode>,
    /// Parent edge of each non-root node, keyed by child id.
    parents: std::collections::BTreeMap<NodeId, SceneEdge>,
    next_id: u64,
}

impl SceneGraph {
    pub fn new() -> Self {
        SceneGraph {
            nodes: std::collections::BTreeMap::new(),
            parents: std::collections::BTreeMap::new(),
            next_id: 0,
        }
    }

    fn allocate(&mut self, node_type: NodeType, class_label: &str, adjectives: Vec<String>) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(
            id,
            SceneNode { id, node_type, class_label: class_label.to_string(), adjectives },
        );
        id
    }

    /// Adds the house node. Valid only on an empty graph.
    pub fn add_house(&mut self, class_label: &str) -> Result<NodeId> {
        if !self.nodes.is_empty() {
            return Err(Error::InvalidScene("house must be the first node".into()));
        }
        Ok(self.allocate(NodeType::House, class_label, Vec::new()))
    }

    /// Adds a node one level below `parent` and connects it with `relation`.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        relation: Relation,
        node_type: NodeType,
        class_label: &str,
        adjectives: Vec<String>,
    ) -> Result<NodeId> {
        let parent_node = self.get(parent)?;
        if parent_node.node_type.level() + 1 != node_type.level() {
            return Err(Error::InvalidScene(format!(
                "cannot attach {} node under {} node {}",
                node_type, parent_node.node_type, parent
            )));
        }
        let id = self.allocate(node_type, class_label, adjectives);
        self.parents.insert(id, SceneEdge { parent, child: id, relation });
        Ok(id)
    }

    pub fn node(&self, id: NodeId) -> Option<&SceneNode> {
        self.nodes.get(&id)
    }

    pub fn get(&self, id: NodeId) -> Result<&SceneNode> {
        self.nodes.get(&id).ok_or(Error::UnknownNode(id))
    }

    /// Mutable node access for the simulator, which fills in adjectives after
    /// allocation. Identity fields must not change once a node is linked.
    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut SceneNode {
        self.nodes.get_mut(&id).expect("caller holds a freshly allocated id")
    }

    /// Edge connecting `child` to its parent, if the node has one.
    pub fn parent_edge(&self, child: NodeId) -> Option<&SceneEdge> {
        self.parents.get(&child)
    }

    /// All nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &SceneNode> {
        self.nodes.values()
    }

    /// All edges in ascending child-id order.
    pub fn edges(&self) -> impl Iterator<Item = &SceneEdge> {
        self.parents.values()
    }

    pub fn nodes_of_type(&self, node_type: NodeType) -> impl Iterator<Item = &SceneNode> {
        self.nodes.values().filter(move |n| n.node_type == node_type)
    }

    /// Ids of all furniture nodes, ascending.
    pub fn furniture_ids(&self) -> Vec<NodeId> {
        self.nodes_of_type(NodeType::Furniture).map(|n| n.id).collect()
    }

    /// Ids of all object nodes, ascending.
    pub fn object_ids(&self) -> Vec<NodeId> {
        self.nodes_of_type(NodeType::Object).map(|n| n.id).collect()
    }

    pub fn object_count(&self) -> usize {
        self.nodes_of_type(NodeType::Object).count()
    }

    /// Children of `parent` in ascending id order.
    pub fn children(&self, parent: NodeId) -> Vec<NodeId> {
        self.parents
            .values()
            .filter(|e| e.parent == parent)
            .map(|e| e.child)
            .collect()
    }

    /// Objects attached to a furniture node, with their edges, ascending by id.
    pub fn objects_under(&self, furniture: NodeId) -> Vec<(&SceneNode, &SceneEdge)> {
        self.parents
            .values()
            .filter(|e| e.parent == furniture)
            .filter_map(|e| self.nodes.get(&e.child).map(|n| (n, e)))
            .filter(|(n, _)| n.node_type == NodeType::Object)
            .collect()
    }

    /// The room containing a furniture node.
    pub fn room_of(&self, furniture: NodeId) -> Result<&SceneNode> {
        let node = self.get(furniture)?;
        if node.node_type != NodeType::Furniture {
            return Err(Error::NotFurniture(furniture));
        }
        let edge = self
            .parents
            .get(&furniture)
            .ok_or_else(|| Error::InvalidScene(format!("furniture {furniture} has no room")))?;
        self.get(edge.parent)
    }

    /// Removes an object node and its parent edge.
    pub fn remove_object(&mut self, id: NodeId) -> Result<SceneNode> {
        match self.nodes.get(&id) {
            None => return Err(Error::UnknownNode(id)),
            Some(n) if n.node_type != NodeType::Object => {
                return Err(Error::InvalidScene(format!("cannot remove non-object node {id}")));
            }
            Some(_) => {}
        }
        self.parents.remove(&id);
        Ok(self.nodes.remove(&id).expect("checked above"))
    }

    /// Reattaches an object to a new furniture parent under `relation`.
    pub fn move_object(&mut self, id: NodeId, new_parent: NodeId, relation: Relation) -> Result<()> {
        if self.get(id)?.node_type != NodeType::Object {
            return Err(Error::InvalidScene(format!("cannot move non-object node {id}")));
        }
        if self.get(new_parent)?.node_type != NodeType::Furniture {
            return Err(Error::NotFurniture(new_parent));
        }
        self.parents.insert(id, SceneEdge { parent: new_parent, child: id, relation });
        Ok(())
    }

    /// Checks the full set of tree invariants, for tests and load paths.
    pub fn validate(&self) -> Result<()> {
        let mut roots = 0usize;
        for node in self.nodes.values() {
            match self.parents.get(&node.id) {
                None => {
                    if node.node_type != NodeType::House {
                        return Err(Error::InvalidScene(format!(
                            "{} node {} has no parent",
                            node.node_type, node.id
                        )));
                    }
                    roots += 1;
                }
                Some(edge) => {
                    let parent = self.get(edge.parent)?;
                    if parent.node_type.level() + 1 != node.node_type.level() {
                        return Err(Error::InvalidScene(format!(
                            "edge {} -> {} skips a hierarchy level",
                            edge.parent, edge.child
                        )));
                    }
                }
            }
            if node.description().is_empty() {
                return Err(Error::InvalidScene(format!("node {} has empty description", node.id)));
            }
        }
        if roots != 1 {
            return Err(Error::InvalidScene(format!("expected exactly 1 house root, found {roots}")));
        }
        for edge in self.parents.values() {
            if !self.nodes.contains_key(&edge.child) {
                return Err(Error::InvalidScene(format!("edge to missing node {}", edge.child)));
            }
        }
        Ok(())
    }
}

impl Default for SceneGraph {
    fn default() -> Self {
        SceneGraph::new()
    }
}

/// A furniture node visible in an observation, with the room it sits in as
/// context metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedFurniture {
    pub node: SceneNode,
    pub room: SceneNode,
}

/// An object detected during an observation, together with its location edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleObject {
    pub node: SceneNode,
    pub edge: SceneEdge,
}

/// What an agent sees at one timestep: the furniture it inspected plus the
/// subset of attached objects that survived detection dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u64,
    pub furniture: Vec<ObservedFurniture>,
    pub objects: Vec<VisibleObject>,
}

impl Observation {
    pub fn furniture_ids(&self) -> BTreeSet<NodeId> {
        self.furniture.iter().map(|f| f.node.id).collect()
    }
}

/// Observes the given furniture nodes at timestep `t`.
///
/// Furniture nodes are always included. Each attached object is detected
/// independently with probability `1 - dropout`; the draws are consumed in
/// ascending (furniture id, object id) order so a fixed seed reproduces the
/// observation exactly.
pub fn observe(
    sg: &SceneGraph,
    t: u64,
    furniture_ids: &BTreeSet<NodeId>,
    dropout: f64,
    seed: u64,
) -> Result<Observation> {
    let mut rng = rng_from(seed);
    let mut furniture = Vec::with_capacity(furniture_ids.len());
    let mut objects = Vec::new();
    for &fid in furniture_ids {
        let node = sg.get(fid)?;
        if node.node_type != NodeType::Furniture {
            return Err(Error::NotFurniture(fid));
        }
        let room = sg.room_of(fid)?;
        furniture.push(ObservedFurniture { node: node.clone(), room: room.clone() });
        for (obj, edge) in sg.objects_under(fid) {
            if rng.gen::<f64>() >= dropout {
                objects.push(VisibleObject { node: obj.clone(), edge: *edge });
            }
        }
    }
    Ok(Observation { t, furniture, objects })
}

/// Furniture ids holding an object whose description matches `description`
/// exactly. Empty when no such object exists in the scene.
pub fn true_locations(sg: &SceneGraph, description: &str) -> BTreeSet<NodeId> {
    sg.edges()
        .filter(|e| {
            sg.node(e.child)
                .map(|n| n.node_type == NodeType::Object && n.description() == description)
                .unwrap_or(false)
        })
        .map(|e| e.parent)
        .collect()
}
