//! Prefix trees over interaction histories.
//!
//! A node at depth `k` stands for one history `(h^k, m^k)`; the root is the
//! empty history and is always present. Histories that are not nodes are
//! "off the tree", where structured models fall back to per-step tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::ProcessSpec;

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub depth: usize,
    pub parent: Option<NodeId>,
    /// `pair(h_k, m_k)` of the last step; `None` at the root.
    pub pair: Option<usize>,
    /// `(pair, child)` sorted by pair.
    children: Vec<(usize, NodeId)>,
}

impl TreeNode {
    pub fn children(&self) -> &[(usize, NodeId)] {
        &self.children
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawTree", into = "RawTree")]
pub struct PrefixTree {
    spec: ProcessSpec,
    nodes: Vec<TreeNode>,
    levels: Vec<Vec<NodeId>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawTree {
    spec: ProcessSpec,
    nodes: Vec<TreeNode>,
}

impl From<RawTree> for PrefixTree {
    fn from(raw: RawTree) -> Self {
        let mut tree = PrefixTree {
            spec: raw.spec,
            nodes: raw.nodes,
            levels: Vec::new(),
        };
        tree.reindex();
        tree
    }
}

impl From<PrefixTree> for RawTree {
    fn from(tree: PrefixTree) -> Self {
        RawTree {
            spec: tree.spec,
            nodes: tree.nodes,
        }
    }
}

impl PrefixTree {
    pub fn new(spec: ProcessSpec) -> Self {
        PrefixTree {
            spec,
            nodes: vec![TreeNode {
                depth: 0,
                parent: None,
                pair: None,
                children: Vec::new(),
            }],
            levels: Self::empty_levels(&spec, ROOT),
        }
    }

    fn empty_levels(spec: &ProcessSpec, root: NodeId) -> Vec<Vec<NodeId>> {
        let mut levels = vec![Vec::new(); spec.horizon + 1];
        levels[0].push(root);
        levels
    }

    fn reindex(&mut self) {
        let mut levels = vec![Vec::new(); self.spec.horizon + 1];
        for (id, node) in self.nodes.iter().enumerate() {
            levels[node.depth].push(id);
        }
        self.levels = levels;
    }

    pub fn spec(&self) -> ProcessSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Nodes at a given depth, in insertion order.
    pub fn level(&self, depth: usize) -> &[NodeId] {
        &self.levels[depth]
    }

    #[inline]
    pub fn child(&self, node: NodeId, pair: usize) -> Option<NodeId> {
        let children = &self.nodes[node].children;
        children
            .binary_search_by_key(&pair, |&(p, _)| p)
            .ok()
            .map(|i| children[i].1)
    }

    /// Inserts `(human, machine)` and all of its prefixes.
    pub fn insert(&mut self, human: &[usize], machine: &[usize]) -> Result<NodeId> {
        if human.len() != machine.len() || human.len() > self.spec.horizon {
            return Err(Error::Shape(format!(
                "cannot insert a history of lengths ({}, {}) into a tree of horizon {}",
                human.len(),
                machine.len(),
                self.spec.horizon
            )));
        }
        let mut node = ROOT;
        for (&h, &m) in human.iter().zip(machine) {
            if h >= self.spec.human_actions || m >= self.spec.machine_actions {
                return Err(Error::Shape(format!(
                    "history action ({h}, {m}) out of range"
                )));
            }
            node = self.insert_child(node, self.spec.pair(h, m));
        }
        Ok(node)
    }

    fn insert_child(&mut self, node: NodeId, pair: usize) -> NodeId {
        let children = &self.nodes[node].children;
        match children.binary_search_by_key(&pair, |&(p, _)| p) {
            Ok(i) => children[i].1,
            Err(i) => {
                let id = self.nodes.len();
                let depth = self.nodes[node].depth + 1;
                self.nodes[node].children.insert(i, (pair, id));
                self.nodes.push(TreeNode {
                    depth,
                    parent: Some(node),
                    pair: Some(pair),
                    children: Vec::new(),
                });
                self.levels[depth].push(id);
                id
            }
        }
    }

    /// The node for exactly `(human, machine)`, if present.
    pub fn locate(&self, human: &[usize], machine: &[usize]) -> Option<NodeId> {
        let mut node = ROOT;
        for (&h, &m) in human.iter().zip(machine) {
            node = self.child(node, self.spec.pair(h, m))?;
        }
        Some(node)
    }

    /// The history a node stands for.
    pub fn history(&self, mut id: NodeId) -> (Vec<usize>, Vec<usize>) {
        let depth = self.nodes[id].depth;
        let mut human = vec![0; depth];
        let mut machine = vec![0; depth];
        while let (Some(parent), Some(pair)) = (self.nodes[id].parent, self.nodes[id].pair) {
            let k = self.nodes[id].depth - 1;
            let (h, m) = self.spec.unpair(pair);
            human[k] = h;
            machine[k] = m;
            id = parent;
        }
        (human, machine)
    }

    /// Adds every node of `other` and returns, for each node of `other`, its
    /// id in `self`.
    pub fn merge(&mut self, other: &PrefixTree) -> Result<Vec<NodeId>> {
        if other.spec != self.spec {
            return Err(Error::SpecMismatch(
                "prefix trees built for different specs".into(),
            ));
        }
        let mut map = vec![ROOT; other.len()];
        for (id, node) in other.nodes.iter().enumerate().skip(1) {
            // Parents always precede children in insertion order.
            let parent = map[node.parent.expect("non-root node has a parent")];
            map[id] = self.insert_child(parent, node.pair.expect("non-root node has a pair"));
        }
        Ok(map)
    }

    /// For each node of `self`, the matching node of `other` if it exists.
    pub fn correspondence(&self, other: &PrefixTree) -> Vec<Option<NodeId>> {
        let mut map = vec![None; self.len()];
        map[ROOT] = Some(ROOT);
        for (id, node) in self.nodes.iter().enumerate().skip(1) {
            let parent = node.parent.expect("non-root node has a parent");
            map[id] = map[parent]
                .and_then(|p| other.child(p, node.pair.expect("non-root node has a pair")));
        }
        map
    }

    /// Whether every node of `other` is also a node of `self`.
    pub fn contains_tree(&self, other: &PrefixTree) -> bool {
        other.correspondence(self).iter().all(Option::is_some)
    }

    /// Number of nodes that store next-step conditionals (depth `< T`).
    pub fn internal_nodes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.depth < self.spec.horizon)
            .count()
    }
}
