//! The progressive hierarchical spatial-semantic scene graph.
//!
//! Nodes are scene objects (one node per object), edges are typed relations.
//! `On` and `Inside` edges are strong dependencies: the source is the parent
//! (the supporter or container), the destination is the dependent child.
//! Strong edges form a forest and each carries a [`RelativeTransform`] that
//! lets a parent's pose changes propagate to its subtree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotate_z, Vec3};

pub type Nid = u64;

/// Tolerance for treating roll and pitch as zero.
pub const UPRIGHT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectNode {
    pub nid: Nid,
    pub category: String,
    /// World-frame center, meters.
    pub pos: Vec3,
    /// (roll, pitch, yaw) in radians.
    pub rot: Vec3,
    pub scale: f64,
    /// Local half sizes before scale, meters.
    pub half_extents: Vec3,
}

impl ObjectNode {
    pub fn new(nid: Nid, category: impl Into<String>, half_extents: Vec3) -> Self {
        Self {
            nid,
            category: category.into(),
            pos: Vec3::zeros(),
            rot: Vec3::zeros(),
            scale: 1.0,
            half_extents,
        }
    }

    pub fn with_pos(mut self, pos: Vec3) -> Self {
        self.pos = pos;
        self
    }

    pub fn with_yaw(mut self, yaw: f64) -> Self {
        self.rot.z = yaw;
        self
    }

    pub fn with_rot(mut self, rot: Vec3) -> Self {
        self.rot = rot;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn yaw(&self) -> f64 {
        self.rot.z
    }

    pub fn is_upright(&self) -> bool {
        self.rot.x.abs() <= UPRIGHT_EPS && self.rot.y.abs() <= UPRIGHT_EPS
    }

    pub fn scaled_half_extents(&self) -> Vec3 {
        self.half_extents * self.scale
    }

    pub fn has_valid_geometry(&self) -> bool {
        self.scale.is_finite()
            && self.scale > 0.0
            && self.half_extents.iter().all(|h| h.is_finite() && *h > 0.0)
            && self.pos.iter().all(|v| v.is_finite())
            && self.rot.iter().all(|v| v.is_finite())
    }

    /// Full orientation, applied as yaw * pitch * roll.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.rot.x, self.rot.y, self.rot.z)
    }

    /// The eight posed, scaled corners of the node's box.
    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.scaled_half_extents();
        let r = self.rotation();
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *c = self.pos + r * Vec3::new(sx * h.x, sy * h.y, sz * h.z);
        }
        out
    }

    pub fn bottom(&self) -> f64 {
        self.pos.z - self.half_extents.z * self.scale
    }

    pub fn top(&self) -> f64 {
        self.pos.z + self.half_extents.z * self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationType {
    On,
    Inside,
    Adjacent,
    Facing,
    Under,
    Other(String),
}

impl RelationType {
    pub fn is_strong(&self) -> bool {
        matches!(self, RelationType::On | RelationType::Inside)
    }

    pub fn as_str(&self) -> &str {
        match self {
            RelationType::On => "On",
            RelationType::Inside => "Inside",
            RelationType::Adjacent => "Adjacent",
            RelationType::Facing => "Facing",
            RelationType::Under => "Under",
            RelationType::Other(s) => s,
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = std::convert::Infallible;

    /// Known names match case-insensitively; anything else is `Other`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "on" => RelationType::On,
            "inside" => RelationType::Inside,
            "adjacent" => RelationType::Adjacent,
            "facing" => RelationType::Facing,
            "under" => RelationType::Under,
            _ => RelationType::Other(s.to_string()),
        })
    }
}

impl Serialize for RelationType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RelationType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Err(serde::de::Error::custom("empty relation name"));
        }
        Ok(s.parse().unwrap_or_else(|never| match never {}))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationEdge {
    /// Depended-upon (parent) node.
    pub src: Nid,
    /// Dependent (child) node.
    pub dst: Nid,
    pub relation: RelationType,
}

impl RelationEdge {
    pub fn new(src: Nid, dst: Nid, relation: RelationType) -> Self {
        Self { src, dst, relation }
    }

    pub fn on(src: Nid, dst: Nid) -> Self {
        Self::new(src, dst, RelationType::On)
    }

    pub fn inside(src: Nid, dst: Nid) -> Self {
        Self::new(src, dst, RelationType::Inside)
    }
}

/// Child pose relative to its strong parent's yaw frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RelativeTransform {
    pub src: Nid,
    pub dst: Nid,
    /// Child center in the parent's (position, yaw) frame, meters.
    pub translation: Vec3,
    pub yaw_delta: f64,
    pub scale_ratio: f64,
}

impl RelativeTransform {
    pub fn between(parent: &ObjectNode, child: &ObjectNode) -> Self {
        Self {
            src: parent.nid,
            dst: child.nid,
            translation: rotate_z(child.pos - parent.pos, -parent.yaw()),
            yaw_delta: child.yaw() - parent.yaw(),
            scale_ratio: child.scale / parent.scale,
        }
    }

    /// Child world position and yaw implied by a parent pose.
    pub fn apply(&self, parent: &ObjectNode) -> (Vec3, f64) {
        (
            parent.pos + rotate_z(self.translation, parent.yaw()),
            parent.yaw() + self.yaw_delta,
        )
    }

    fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.yaw_delta.is_finite()
            && self.scale_ratio.is_finite()
            && self.scale_ratio > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("node {0} already exists")]
    DuplicateNid(Nid),
    #[error("node {0} has non-positive or non-finite geometry")]
    InvalidGeometry(Nid),
    #[error("unknown node {0}")]
    UnknownNid(Nid),
    #[error("edge from node {0} to itself")]
    SelfLoop(Nid),
    #[error("edge {src} -> {dst} ({relation}) already exists")]
    DuplicateEdge {
        src: Nid,
        dst: Nid,
        relation: RelationType,
    },
    #[error("node {child} already has strong parent {existing}; cannot attach to {attempted}")]
    StrongParentConflict {
        child: Nid,
        existing: Nid,
        attempted: Nid,
    },
    #[error("strong edge {src} -> {dst} would close a cycle")]
    StrongCycle { src: Nid, dst: Nid },
    #[error("node {0} takes part in an On relation and must have zero roll and pitch")]
    NotUpright(Nid),
    #[error("strong edge {src} -> {dst} has no recorded relative transform")]
    MissingRelTransform { src: Nid, dst: Nid },
}

/// A broken graph invariant, reported by [`SceneGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Violation {
    InvalidGeometry { nid: Nid },
    NotUpright { nid: Nid },
    SelfLoop { nid: Nid },
    DanglingEdge { src: Nid, dst: Nid },
    StrongParentConflict { child: Nid, parents: Vec<Nid> },
    StrongCycle { nids: Vec<Nid> },
    MissingRelTransform { src: Nid, dst: Nid },
    OrphanRelTransform { src: Nid, dst: Nid },
    InvalidRelTransform { src: Nid, dst: Nid },
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::InvalidGeometry { .. } => "InvalidGeometry",
            Violation::NotUpright { .. } => "NotUpright",
            Violation::SelfLoop { .. } => "SelfLoop",
            Violation::DanglingEdge { .. } => "DanglingEdge",
            Violation::StrongParentConflict { .. } => "StrongParentConflict",
            Violation::StrongCycle { .. } => "StrongCycle",
            Violation::MissingRelTransform { .. } => "MissingRelTransform",
            Violation::OrphanRelTransform { .. } => "OrphanRelTransform",
            Violation::InvalidRelTransform { .. } => "InvalidRelTransform",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidGeometry { nid } => write!(f, "InvalidGeometry: node {nid}"),
            Violation::NotUpright { nid } => write!(f, "NotUpright: node {nid}"),
            Violation::SelfLoop { nid } => write!(f, "SelfLoop: node {nid}"),
            Violation::DanglingEdge { src, dst } => write!(f, "DanglingEdge: {src} -> {dst}"),
            Violation::StrongParentConflict { child, parents } => {
                write!(f, "StrongParentConflict: node {child} has parents {parents:?}")
            }
            Violation::StrongCycle { nids } => write!(f, "StrongCycle: {nids:?}"),
            Violation::MissingRelTransform { src, dst } => {
                write!(f, "MissingRelTransform: {src} -> {dst}")
            }
            Violation::OrphanRelTransform { src, dst } => {
                write!(f, "OrphanRelTransform: {src} -> {dst}")
            }
            Violation::InvalidRelTransform { src, dst } => {
                write!(f, "InvalidRelTransform: {src} -> {dst}")
            }
        }
    }
}

/// Scene graph: nodes, typed edges and per-strong-edge relative transforms.
///
/// Cloning is the snapshot mechanism; a clone can be handed to another thread
/// while the owner keeps mutating.
#[derive(Debug, Clone, Default)]
pub struct SceneGraph {
    nodes: BTreeMap<Nid, ObjectNode>,
    edges: BTreeSet<RelationEdge>,
    rel_transforms: BTreeMap<(Nid, Nid), RelativeTransform>,
    // child -> parent over strong edges; first parent wins on conflict
    strong_parent: BTreeMap<Nid, Nid>,
    revision: u64,
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from raw parts without checking invariants beyond nid
    /// uniqueness. Use [`SceneGraph::validate`] afterwards.
    pub fn from_parts(
        nodes: impl IntoIterator<Item = ObjectNode>,
        edges: impl IntoIterator<Item = RelationEdge>,
        rel_transforms: impl IntoIterator<Item = RelativeTransform>,
        revision: u64,
    ) -> Result<Self, GraphError> {
        let mut g = SceneGraph {
            revision,
            ..Default::default()
        };
        for n in nodes {
            if g.nodes.contains_key(&n.nid) {
                return Err(GraphError::DuplicateNid(n.nid));
            }
            g.nodes.insert(n.nid, n);
        }
        for e in edges {
            if e.relation.is_strong() {
                g.strong_parent.entry(e.dst).or_insert(e.src);
            }
            g.edges.insert(e);
        }
        for t in rel_transforms {
            g.rel_transforms.insert((t.src, t.dst), t);
        }
        Ok(g)
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub(crate) fn set_revision(&mut self, revision: u64) {
        self.revision = revision;
    }

    pub(crate) fn bump_revision(&mut self) {
        self.revision += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, nid: Nid) -> Option<&ObjectNode> {
        self.nodes.get(&nid)
    }

    pub(crate) fn node_mut(&mut self, nid: Nid) -> Option<&mut ObjectNode> {
        self.nodes.get_mut(&nid)
    }

    pub fn contains(&self, nid: Nid) -> bool {
        self.nodes.contains_key(&nid)
    }

    /// Nodes in ascending nid order.
    pub fn nodes(&self) -> impl Iterator<Item = &ObjectNode> {
        self.nodes.values()
    }

    pub fn nids(&self) -> impl Iterator<Item = Nid> + '_ {
        self.nodes.keys().copied()
    }

    pub fn max_nid(&self) -> Option<Nid> {
        self.nodes.keys().next_back().copied()
    }

    /// Edges in (src, dst, relation) order.
    pub fn edges(&self) -> impl Iterator<Item = &RelationEdge> {
        self.edges.iter()
    }

    pub fn strong_edges(&self) -> impl Iterator<Item = &RelationEdge> {
        self.edges.iter().filter(|e| e.relation.is_strong())
    }

    pub fn rel_transforms(&self) -> impl Iterator<Item = &RelativeTransform> {
        self.rel_transforms.values()
    }

    pub fn rel_transform(&self, src: Nid, dst: Nid) -> Option<&RelativeTransform> {
        self.rel_transforms.get(&(src, dst))
    }

    pub(crate) fn set_rel_transform(&mut self, t: RelativeTransform) {
        self.rel_transforms.insert((t.src, t.dst), t);
    }

    /// Node contents, edges and transforms equal; revision ignored.
    pub fn content_eq(&self, other: &SceneGraph) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.rel_transforms == other.rel_transforms
    }

    pub fn strong_parent(&self, nid: Nid) -> Option<Nid> {
        self.strong_parent.get(&nid).copied()
    }

    /// The strong edge leading into `nid`, if any.
    pub fn strong_parent_edge(&self, nid: Nid) -> Option<&RelationEdge> {
        let parent = self.strong_parent(nid)?;
        self.edges_between(parent, nid).find(|e| e.relation.is_strong())
    }

    pub fn edges_from(&self, src: Nid) -> impl Iterator<Item = &RelationEdge> {
        let lo = RelationEdge::new(src, 0, RelationType::On);
        self.edges.range(lo..).take_while(move |e| e.src == src)
    }

    fn edges_between(&self, src: Nid, dst: Nid) -> impl Iterator<Item = &RelationEdge> {
        let lo = RelationEdge::new(src, dst, RelationType::On);
        self.edges
            .range(lo..)
            .take_while(move |e| e.src == src && e.dst == dst)
    }

    /// Strong children of `nid` in ascending nid order.
    pub fn strong_children(&self, nid: Nid) -> Vec<Nid> {
        let mut out: Vec<Nid> = self
            .edges_from(nid)
            .filter(|e| e.relation.is_strong())
            .map(|e| e.dst)
            .collect();
        out.dedup();
        out
    }

    /// Nodes without a strong parent, ascending.
    pub fn strong_roots(&self) -> Vec<Nid> {
        self.nodes
            .keys()
            .copied()
            .filter(|n| !self.strong_parent.contains_key(n))
            .collect()
    }

    /// Strong subtree below `nid` in parent-before-child (preorder) order,
    /// excluding `nid` itself.
    pub fn strong_descendants(&self, nid: Nid) -> Result<Vec<Nid>, GraphError> {
        if !self.contains(nid) {
            return Err(GraphError::UnknownNid(nid));
        }
        let mut out = Vec::new();
        let mut stack: Vec<Nid> = self.strong_children(nid).into_iter().rev().collect();
        let mut seen = BTreeSet::from([nid]);
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            out.push(n);
            stack.extend(self.strong_children(n).into_iter().rev());
        }
        Ok(out)
    }

    /// Number of strong ancestors of `nid`.
    pub fn strong_depth(&self, nid: Nid) -> usize {
        let mut depth = 0;
        let mut cur = nid;
        while let Some(p) = self.strong_parent(cur) {
            depth += 1;
            cur = p;
            if depth > self.nodes.len() {
                break;
            }
        }
        depth
    }

    pub fn add_node(&mut self, node: ObjectNode) -> Result<(), GraphError> {
        if self.nodes.contains_key(&node.nid) {
            return Err(GraphError::DuplicateNid(node.nid));
        }
        if !node.has_valid_geometry() {
            return Err(GraphError::InvalidGeometry(node.nid));
        }
        self.nodes.insert(node.nid, node);
        self.revision += 1;
        Ok(())
    }

    fn check_edge(&self, edge: &RelationEdge) -> Result<(), GraphError> {
        for nid in [edge.src, edge.dst] {
            if !self.contains(nid) {
                return Err(GraphError::UnknownNid(nid));
            }
        }
        if edge.src == edge.dst {
            return Err(GraphError::SelfLoop(edge.src));
        }
        if self.edges.contains(edge) {
            return Err(GraphError::DuplicateEdge {
                src: edge.src,
                dst: edge.dst,
                relation: edge.relation.clone(),
            });
        }
        if edge.relation == RelationType::On {
            for nid in [edge.src, edge.dst] {
                if !self.nodes[&nid].is_upright() {
                    return Err(GraphError::NotUpright(nid));
                }
            }
        }
        if edge.relation.is_strong() {
            if let Some(existing) = self.strong_parent(edge.dst) {
                return Err(GraphError::StrongParentConflict {
                    child: edge.dst,
                    existing,
                    attempted: edge.src,
                });
            }
            // walking up from src must not reach dst
            let mut cur = edge.src;
            let mut steps = 0;
            loop {
                if cur == edge.dst {
                    return Err(GraphError::StrongCycle {
                        src: edge.src,
                        dst: edge.dst,
                    });
                }
                match self.strong_parent(cur) {
                    Some(p) if steps <= self.nodes.len() => {
                        cur = p;
                        steps += 1;
                    }
                    _ => break,
                }
            }
        }
        Ok(())
    }

    /// Inserts an edge. Strong edges get their relative transform recorded
    /// from the current world poses.
    pub fn add_edge(&mut self, edge: RelationEdge) -> Result<(), GraphError> {
        self.check_edge(&edge)?;
        if edge.relation.is_strong() {
            let t = RelativeTransform::between(&self.nodes[&edge.src], &self.nodes[&edge.dst]);
            self.rel_transforms.insert((edge.src, edge.dst), t);
            self.strong_parent.insert(edge.dst, edge.src);
        }
        self.edges.insert(edge);
        self.revision += 1;
        Ok(())
    }

    pub fn remove_edge(&mut self, edge: &RelationEdge) -> Result<(), GraphError> {
        if !self.edges.remove(edge) {
            return Err(GraphError::UnknownNid(edge.dst));
        }
        if edge.relation.is_strong() {
            self.rel_transforms.remove(&(edge.src, edge.dst));
            if self.strong_parent.get(&edge.dst) == Some(&edge.src) {
                self.strong_parent.remove(&edge.dst);
            }
        }
        self.revision += 1;
        Ok(())
    }

    fn detach(&mut self, nid: Nid) {
        self.nodes.remove(&nid);
        self.edges.retain(|e| e.src != nid && e.dst != nid);
        self.rel_transforms
            .retain(|&(s, d), _| s != nid && d != nid);
        self.strong_parent.retain(|c, p| *c != nid && *p != nid);
    }

    /// Removes `nid` and every incident edge. With `cascade` the whole strong
    /// subtree goes too; otherwise strong children are re-attached to the
    /// removed node's strong parent (keeping their relation kind) or become
    /// roots. Returns the removed nids.
    pub fn remove_node(&mut self, nid: Nid, cascade: bool) -> Result<Vec<Nid>, GraphError> {
        if !self.contains(nid) {
            return Err(GraphError::UnknownNid(nid));
        }
        let mut removed = vec![nid];
        if cascade {
            removed.extend(self.strong_descendants(nid)?);
            for n in &removed {
                self.detach(*n);
            }
        } else {
            let grandparent = self.strong_parent(nid);
            let children: Vec<RelationEdge> = self
                .edges_from(nid)
                .filter(|e| e.relation.is_strong())
                .cloned()
                .collect();
            self.detach(nid);
            if let Some(gp) = grandparent {
                for e in children {
                    let edge = RelationEdge::new(gp, e.dst, e.relation);
                    let t = RelativeTransform::between(&self.nodes[&gp], &self.nodes[&e.dst]);
                    self.rel_transforms.insert((gp, e.dst), t);
                    self.strong_parent.insert(e.dst, gp);
                    self.edges.insert(edge);
                }
            }
        }
        self.revision += 1;
        Ok(removed)
    }

    /// Sets a node's world pose; its strong subtree follows rigidly. When the
    /// node itself has a strong parent, that edge's transform is re-recorded
    /// so the edit sticks.
    pub fn modify_node_pose(&mut self, nid: Nid, pos: Vec3, rot: Vec3) -> Result<(), GraphError> {
        if !self.contains(nid) {
            return Err(GraphError::UnknownNid(nid));
        }
        if !(pos.iter().all(|v| v.is_finite()) && rot.iter().all(|v| v.is_finite())) {
            return Err(GraphError::InvalidGeometry(nid));
        }
        let tilted = rot.x.abs() > UPRIGHT_EPS || rot.y.abs() > UPRIGHT_EPS;
        if tilted && self.takes_part_in_on(nid) {
            return Err(GraphError::NotUpright(nid));
        }
        let node = self.nodes.get_mut(&nid).expect("checked above");
        node.pos = pos;
        node.rot = rot;
        if let Some(parent) = self.strong_parent(nid) {
            let t = RelativeTransform::between(&self.nodes[&parent], &self.nodes[&nid]);
            self.rel_transforms.insert((parent, nid), t);
        }
        crate::layout::propagate_pose(self, nid)?;
        self.revision += 1;
        Ok(())
    }

    fn takes_part_in_on(&self, nid: Nid) -> bool {
        self.edges
            .iter()
            .any(|e| e.relation == RelationType::On && (e.src == nid || e.dst == nid))
    }

    /// Lists every broken invariant; empty iff the graph is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for n in self.nodes.values() {
            if !n.has_valid_geometry() {
                out.push(Violation::InvalidGeometry { nid: n.nid });
            }
        }
        let mut not_upright = BTreeSet::new();
        let mut parents: BTreeMap<Nid, Vec<Nid>> = BTreeMap::new();
        let mut strong_pairs = BTreeSet::new();
        for e in &self.edges {
            if e.src == e.dst {
                out.push(Violation::SelfLoop { nid: e.src });
                continue;
            }
            if !self.contains(e.src) || !self.contains(e.dst) {
                out.push(Violation::DanglingEdge {
                    src: e.src,
                    dst: e.dst,
                });
                continue;
            }
            if e.relation == RelationType::On {
                for nid in [e.src, e.dst] {
                    if !self.nodes[&nid].is_upright() {
                        not_upright.insert(nid);
                    }
                }
            }
            if e.relation.is_strong() {
                parents.entry(e.dst).or_default().push(e.src);
                strong_pairs.insert((e.src, e.dst));
            }
        }
        out.extend(not_upright.into_iter().map(|nid| Violation::NotUpright { nid }));
        for (child, ps) in &parents {
            let mut ps = ps.clone();
            ps.sort_unstable();
            ps.dedup();
            if ps.len() > 1 {
                out.push(Violation::StrongParentConflict {
                    child: *child,
                    parents: ps,
                });
            }
        }
        out.extend(
            find_cycles(&strong_pairs)
                .into_iter()
                .map(|nids| Violation::StrongCycle { nids }),
        );
        for &(src, dst) in &strong_pairs {
            match self.rel_transforms.get(&(src, dst)) {
                None => out.push(Violation::MissingRelTransform { src, dst }),
                Some(t) if !t.is_finite() => out.push(Violation::InvalidRelTransform { src, dst }),
                Some(_) => {}
            }
        }
        for &(src, dst) in self.rel_transforms.keys() {
            if !strong_pairs.contains(&(src, dst)) {
                out.push(Violation::OrphanRelTransform { src, dst });
            }
        }
        out
    }
}

/// Cycles in a directed graph given as (src, dst) pairs, each reported once as
/// the sorted list of its member nids. Uses iterative DFS back-edge detection.
fn find_cycles(pairs: &BTreeSet<(Nid, Nid)>) -> Vec<Vec<Nid>> {
    let mut adj: BTreeMap<Nid, Vec<Nid>> = BTreeMap::new();
    for &(s, d) in pairs {
        adj.entry(s).or_default().push(d);
        adj.entry(d).or_default();
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Grey,
        Black,
    }
    let mut color: BTreeMap<Nid, Color> = adj.keys().map(|&k| (k, Color::White)).collect();
    let mut found: BTreeSet<Vec<Nid>> = BTreeSet::new();
    let starts: Vec<Nid> = adj.keys().copied().collect();
    for start in starts {
        if color[&start] != Color::White {
            continue;
        }
        let mut path: Vec<Nid> = vec![start];
        let mut iters: Vec<usize> = vec![0];
        color.insert(start, Color::Grey);
        while let Some(&node) = path.last() {
            let i = *iters.last().unwrap();
            let next = adj[&node].get(i).copied();
            match next {
                Some(n) => {
                    *iters.last_mut().unwrap() += 1;
                    match color[&n] {
                        Color::White => {
                            color.insert(n, Color::Grey);
                            path.push(n);
                            iters.push(0);
                        }
                        Color::Grey => {
                            let at = path.iter().position(|&p| p == n).unwrap();
                            let mut cyc = path[at..].to_vec();
                            cyc.sort_unstable();
                            found.insert(cyc);
                        }
                        Color::Black => {}
                    }
                }
                None => {
                    color.insert(node, Color::Black);
                    path.pop();
                    iters.pop();
                }
            }
        }
    }
    found.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn box_node(nid: Nid) -> ObjectNode {
        ObjectNode::new(nid, format!("obj{nid}"), Vec3::new(0.5, 0.5, 0.5))
    }

    fn graph_with(n: Nid) -> SceneGraph {
        let mut g = SceneGraph::new();
        for nid in 1..=n {
            g.add_node(box_node(nid).with_pos(Vec3::new(nid as f64, 0.0, 0.0)))
                .unwrap();
        }
        g
    }

    #[test]
    fn add_node_base_case() {
        let mut g = SceneGraph::new();
        g.add_node(box_node(1)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.revision(), 1);
    }

    #[test]
    fn add_node_rejects_duplicates_and_bad_geometry() {
        let mut g = graph_with(2);
        assert_eq!(g.add_node(box_node(2)), Err(GraphError::DuplicateNid(2)));
        assert_eq!(
            g.add_node(box_node(3).with_scale(0.0)),
            Err(GraphError::InvalidGeometry(3))
        );
        let mut flat = box_node(4);
        flat.half_extents.z = -1.0;
        assert_eq!(g.add_node(flat), Err(GraphError::InvalidGeometry(4)));
        assert_eq!(g.revision(), 2);
    }

    #[test]
    fn add_strong_edge_records_transform() {
        let mut g = graph_with(2);
        g.add_edge(RelationEdge::on(1, 2)).unwrap();
        let t = g.rel_transform(1, 2).unwrap();
        assert_relative_eq!(t.translation, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(g.strong_parent(2), Some(1));
        assert!(g.validate().is_empty());
    }

    #[test]
    fn weak_edges_have_no_transform() {
        let mut g = graph_with(2);
        g.add_edge(RelationEdge::new(1, 2, RelationType::Adjacent))
            .unwrap();
        assert!(g.rel_transform(1, 2).is_none());
        assert!(g.validate().is_empty());
    }

    #[test]
    fn second_strong_parent_conflicts() {
        let mut g = graph_with(3);
        g.add_edge(RelationEdge::on(1, 2)).unwrap();
        assert_eq!(
            g.add_edge(RelationEdge::on(3, 2)),
            Err(GraphError::StrongParentConflict {
                child: 2,
                existing: 1,
                attempted: 3
            })
        );
    }

    #[test]
    fn closing_a_strong_cycle_is_rejected() {
        let mut g = graph_with(3);
        g.add_edge(RelationEdge::on(1, 2)).unwrap();
        g.add_edge(RelationEdge::on(2, 3)).unwrap();
        assert_eq!(
            g.add_edge(RelationEdge::on(3, 1)),
            Err(GraphError::StrongCycle { src: 3, dst: 1 })
        );
    }

    #[test]
    fn edge_errors() {
        let mut g = graph_with(2);
        assert_eq!(g.add_edge(RelationEdge::on(1, 9)), Err(GraphError::UnknownNid(9)));
        assert_eq!(g.add_edge(RelationEdge::on(1, 1)), Err(GraphError::SelfLoop(1)));
        g.add_edge(RelationEdge::on(1, 2)).unwrap();
        assert!(matches!(
            g.add_edge(RelationEdge::on(1, 2)),
            Err(GraphError::DuplicateEdge { .. })
        ));
    }

    #[test]
    fn on_requires_upright_nodes() {
        let mut g = SceneGraph::new();
        g.add_node(box_node(1)).unwrap();
        g.add_node(box_node(2).with_rot(Vec3::new(0.1, 0.0, 0.0))).unwrap();
        assert_eq!(g.add_edge(RelationEdge::on(1, 2)), Err(GraphError::NotUpright(2)));
        g.add_edge(RelationEdge::inside(1, 2)).unwrap();
    }

    fn chain() -> SceneGraph {
        let mut g = graph_with(3);
        g.add_edge(RelationEdge::on(1, 2)).unwrap();
        g.add_edge(RelationEdge::on(2, 3)).unwrap();
        g
    }

    #[test]
    fn descendants_of_chain_and_leaf() {
        let g = chain();
        assert_eq!(g.strong_descendants(1).unwrap(), vec![2, 3]);
        assert!(g.strong_descendants(3).unwrap().is_empty());
        assert_eq!(g.strong_descendants(7), Err(GraphError::UnknownNid(7)));
    }

    #[test]
    fn remove_leaf() {
        let mut g = chain();
        g.add_edge(RelationEdge::new(3, 1, RelationType::Facing)).unwrap();
        assert_eq!(g.remove_node(3, false).unwrap(), vec![3]);
        assert_eq!(g.nids().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(g.edges().count(), 1);
        assert!(g.validate().is_empty());
    }

    #[test]
    fn remove_cascade() {
        let mut g = chain();
        let removed = g.remove_node(2, true).unwrap();
        assert_eq!(removed, vec![2, 3]);
        assert_eq!(g.nids().collect::<Vec<_>>(), vec![1]);
        assert!(g.validate().is_empty());
    }

    #[test]
    fn remove_reparents_to_grandparent() {
        let mut g = SceneGraph::new();
        g.add_node(box_node(1).with_yaw(0.7)).unwrap();
        g.add_node(box_node(2).with_pos(Vec3::new(0.5, 0.2, 1.0)).with_yaw(1.1))
            .unwrap();
        g.add_node(box_node(3).with_pos(Vec3::new(0.1, 0.9, 2.0)).with_yaw(-0.4))
            .unwrap();
        g.add_edge(RelationEdge::on(1, 2)).unwrap();
        g.add_edge(RelationEdge::on(2, 3)).unwrap();
        g.remove_node(2, false).unwrap();
        assert_eq!(g.strong_parent(3), Some(1));
        // oracle: 3's pose in 1's frame straight from world poses
        let p = g.node(1).unwrap();
        let c = g.node(3).unwrap();
        let d = c.pos - p.pos;
        let (s, co) = (-p.yaw()).sin_cos();
        let expected = Vec3::new(co * d.x - s * d.y, s * d.x + co * d.y, d.z);
        let t = g.rel_transform(1, 3).unwrap();
        assert_relative_eq!(t.translation, expected, epsilon = 1e-12);
        assert_relative_eq!(t.yaw_delta, -0.4 - 0.7, epsilon = 1e-12);
        assert!(g.validate().is_empty());
    }

    #[test]
    fn remove_unknown() {
        let mut g = chain();
        assert_eq!(g.remove_node(99, true), Err(GraphError::UnknownNid(99)));
    }

    #[test]
    fn moving_a_lone_root_moves_only_it() {
        let mut g = graph_with(2);
        let before = g.node(2).unwrap().clone();
        g.modify_node_pose(1, Vec3::new(2.0, 0.0, 0.0), Vec3::zeros())
            .unwrap();
        assert_eq!(g.node(1).unwrap().pos, Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(g.node(2).unwrap(), &before);
    }

    #[test]
    fn moving_parent_translates_chain() {
        let mut g = chain();
        let before: Vec<Vec3> = (1..=3).map(|n| g.node(n).unwrap().pos).collect();
        let shift = Vec3::new(0.5, -1.0, 0.25);
        g.modify_node_pose(1, before[0] + shift, Vec3::zeros()).unwrap();
        for n in 1..=3u64 {
            assert_relative_eq!(
                g.node(n).unwrap().pos,
                before[(n - 1) as usize] + shift,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rotating_parent_swings_child() {
        let mut g = SceneGraph::new();
        g.add_node(box_node(1)).unwrap();
        g.add_node(box_node(2).with_pos(Vec3::new(1.0, 0.0, 1.0))).unwrap();
        g.add_edge(RelationEdge::on(1, 2)).unwrap();
        g.modify_node_pose(1, Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2))
            .unwrap();
        let child = g.node(2).unwrap();
        assert_relative_eq!(child.pos, Vec3::new(0.0, 1.0, 1.0), epsilon = 1e-12);
        assert_relative_eq!(child.yaw(), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn tilting_on_participant_is_rejected() {
        let mut g = chain();
        assert_eq!(
            g.modify_node_pose(2, Vec3::zeros(), Vec3::new(0.0, 0.3, 0.0)),
            Err(GraphError::NotUpright(2))
        );
    }

    #[test]
    fn validate_reports_two_strong_parents() {
        let nodes = (1..=3).map(box_node);
        let edges = [RelationEdge::on(1, 3), RelationEdge::inside(2, 3)];
        let ts = [
            RelativeTransform::between(&box_node(1), &box_node(3)),
            RelativeTransform::between(&box_node(2), &box_node(3)),
        ];
        let g = SceneGraph::from_parts(nodes, edges, ts, 0).unwrap();
        assert_eq!(
            g.validate(),
            vec![Violation::StrongParentConflict {
                child: 3,
                parents: vec![1, 2]
            }]
        );
    }

    #[test]
    fn validate_reports_cycles_once() {
        let nodes = (1..=3).map(box_node);
        let edges = [
            RelationEdge::on(1, 2),
            RelationEdge::on(2, 3),
            RelationEdge::on(3, 1),
        ];
        let ts: Vec<_> = edges
            .iter()
            .map(|e| RelativeTransform::between(&box_node(e.src), &box_node(e.dst)))
            .collect();
        let g = SceneGraph::from_parts(nodes, edges, ts, 0).unwrap();
        assert_eq!(g.validate(), vec![Violation::StrongCycle { nids: vec![1, 2, 3] }]);
    }

    #[test]
    fn relation_names_round_trip() {
        for r in ["On", "Inside", "Adjacent", "Facing", "Under", "NextTo"] {
            let parsed: RelationType = r.parse().unwrap();
            assert_eq!(parsed.to_string(), r);
        }
        assert_eq!("on".parse::<RelationType>().unwrap(), RelationType::On);
        assert!(RelationType::Inside.is_strong());
        assert!(!RelationType::Under.is_strong());
    }
}
