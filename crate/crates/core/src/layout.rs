//! Layout optimization over strong-dependency trees: recursive pose
//! propagation and stability correction for `On` edges.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{clamp_to_rect, rotate_z, top_surface, Vec2, Vec3};
use crate::graph::{GraphError, Nid, RelationEdge, RelationType, RelativeTransform, SceneGraph};

/// Moves at or below this norm are treated as no-ops.
pub const MOVE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("edge {src} -> {dst} is {relation}, expected On")]
    RelationMismatch {
        src: Nid,
        dst: Nid,
        relation: RelationType,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LayoutOptions {
    pub max_passes: u32,
    pub inset_ratio: f64,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        Self {
            max_passes: 8,
            inset_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionReason {
    Stability,
    Propagation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Correction {
    pub nid: Nid,
    pub delta_translation: Vec3,
    pub reason: CorrectionReason,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum LayoutWarning {
    /// Child footprint is wider than the supporting surface; its center is
    /// inside but the box hangs over.
    Overhang { parent: Nid, child: Nid },
    /// An `Inside` child whose center lies outside its container's box.
    NotContained { parent: Nid, child: Nid },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LayoutReport {
    pub corrections: Vec<Correction>,
    pub passes: u32,
    pub converged: bool,
    #[serde(default)]
    pub warnings: Vec<LayoutWarning>,
}

impl LayoutReport {
    pub fn stability_corrections(&self) -> impl Iterator<Item = &Correction> {
        self.corrections
            .iter()
            .filter(|c| c.reason == CorrectionReason::Stability)
    }
}

/// Re-records every strong edge's transform from current world poses.
pub fn record_relative_transforms(graph: &mut SceneGraph) {
    let pairs: Vec<(Nid, Nid)> = graph.strong_edges().map(|e| (e.src, e.dst)).collect();
    for (src, dst) in pairs {
        record_edge(graph, src, dst);
    }
}

fn record_edge(graph: &mut SceneGraph, src: Nid, dst: Nid) {
    if let (Some(p), Some(c)) = (graph.node(src), graph.node(dst)) {
        let t = RelativeTransform::between(p, c);
        graph.set_rel_transform(t);
    }
}

/// Re-poses the strong subtree under `nid` from the stored relative
/// transforms, parents first. Weak edges are ignored. Returns one
/// `Propagation` correction per descendant that actually moved.
pub fn propagate_pose(graph: &mut SceneGraph, nid: Nid) -> Result<Vec<Correction>, GraphError> {
    let order = graph.strong_descendants(nid)?;
    let mut moved = Vec::new();
    for child in order {
        let parent = graph
            .strong_parent(child)
            .expect("descendants always have a strong parent");
        let t = graph
            .rel_transform(parent, child)
            .ok_or(GraphError::MissingRelTransform {
                src: parent,
                dst: child,
            })?;
        let (pos, yaw) = t.apply(graph.node(parent).expect("edge endpoints exist"));
        let node = graph.node_mut(child).expect("edge endpoints exist");
        let delta = pos - node.pos;
        node.pos = pos;
        node.rot.z = yaw;
        if delta.norm() > 0.0 {
            moved.push(Correction {
                nid: child,
                delta_translation: delta,
                reason: CorrectionReason::Propagation,
            });
        }
    }
    Ok(moved)
}

/// Outcome of correcting one `On` edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCorrection {
    /// Horizontal world-frame translation applied to the child.
    pub delta: Vec2,
    /// Child move (if any) followed by moves of its strong subtree.
    pub corrections: Vec<Correction>,
    pub overhang: bool,
}

/// Clamps the child's center into the parent's top-surface rectangle, seats
/// its bottom face on that surface, drags the child's own subtree along and
/// re-records the edge transform.
pub fn stability_correct_edge(
    graph: &mut SceneGraph,
    edge: &RelationEdge,
    inset_ratio: f64,
) -> Result<EdgeCorrection, LayoutError> {
    if edge.relation != RelationType::On {
        return Err(LayoutError::RelationMismatch {
            src: edge.src,
            dst: edge.dst,
            relation: edge.relation.clone(),
        });
    }
    let parent = graph
        .node(edge.src)
        .ok_or(GraphError::UnknownNid(edge.src))?
        .clone();
    let child = graph
        .node(edge.dst)
        .ok_or(GraphError::UnknownNid(edge.dst))?
        .clone();

    let area = top_surface(&parent, inset_ratio);
    let local = rotate_z(child.pos - parent.pos, -parent.yaw());
    let in_rect = area.rect.to_local(local.xy());
    let (_, rect_delta) = clamp_to_rect(in_rect, area.rect.half_extents);
    let local_delta = crate::geometry::yaw_rotate(rect_delta, area.rect.yaw);
    let world_delta = crate::geometry::yaw_rotate(local_delta, parent.yaw());

    let child_half = child.scaled_half_extents();
    let seated_z = parent.pos.z + area.height + child_half.z;
    let mut target = child.pos;
    target.x += world_delta.x;
    target.y += world_delta.y;
    target.z = seated_z;

    let overhang = footprint_exceeds(&child, parent.yaw() + area.rect.yaw, area.rect.half_extents);

    let shift = target - child.pos;
    let mut corrections = Vec::new();
    let mut applied = Vec2::zeros();
    if shift.norm() > MOVE_EPS {
        graph.node_mut(edge.dst).expect("checked").pos = target;
        applied = world_delta;
        corrections.push(Correction {
            nid: edge.dst,
            delta_translation: shift,
            reason: CorrectionReason::Stability,
        });
        corrections.extend(propagate_pose(graph, edge.dst)?);
    }
    record_edge(graph, edge.src, edge.dst);
    Ok(EdgeCorrection {
        delta: applied,
        corrections,
        overhang,
    })
}

/// Whether the child's footprint, seen in a frame at `frame_yaw`, is wider
/// than `half` on either axis.
fn footprint_exceeds(child: &crate::graph::ObjectNode, frame_yaw: f64, half: Vec2) -> bool {
    let h = child.scaled_half_extents();
    let rel = child.yaw() - frame_yaw;
    let (s, c) = rel.sin_cos();
    let ext_x = (c * h.x).abs() + (s * h.y).abs();
    let ext_y = (s * h.x).abs() + (c * h.y).abs();
    ext_x > half.x + MOVE_EPS || ext_y > half.y + MOVE_EPS
}

/// Strong edges in processing order: roots by nid, each tree preorder with
/// children by nid.
fn strong_edges_in_order(graph: &SceneGraph) -> Vec<RelationEdge> {
    let mut out = Vec::new();
    for root in graph.strong_roots() {
        for nid in graph
            .strong_descendants(root)
            .expect("roots come from the graph")
        {
            if let Some(e) = graph.strong_parent_edge(nid) {
                out.push(e.clone());
            }
        }
    }
    out
}

/// Runs stability correction over every `On` edge until a full pass changes
/// nothing or `max_passes` is hit. Non-convergence is reported, not raised.
pub fn optimize_layout(graph: &mut SceneGraph, options: &LayoutOptions) -> Result<LayoutReport, LayoutError> {
    let order = strong_edges_in_order(graph);
    let mut report = LayoutReport::default();
    let mut overhangs = BTreeSet::new();
    for pass in 1..=options.max_passes.max(1) {
        report.passes = pass;
        let mut changed = false;
        for edge in order.iter().filter(|e| e.relation == RelationType::On) {
            let fix = stability_correct_edge(graph, edge, options.inset_ratio)?;
            if fix.overhang {
                overhangs.insert((edge.src, edge.dst));
            }
            changed |= !fix.corrections.is_empty();
            report.corrections.extend(fix.corrections);
        }
        if !changed {
            report.converged = true;
            break;
        }
    }
    report.warnings.extend(
        overhangs
            .into_iter()
            .map(|(parent, child)| LayoutWarning::Overhang { parent, child }),
    );
    report.warnings.extend(containment_warnings(graph));
    Ok(report)
}

fn containment_warnings(graph: &SceneGraph) -> Vec<LayoutWarning> {
    graph
        .strong_edges()
        .filter(|e| e.relation == RelationType::Inside)
        .filter_map(|e| {
            let p = graph.node(e.src)?;
            let c = graph.node(e.dst)?;
            let local = rotate_z(c.pos - p.pos, -p.yaw());
            let half = p.scaled_half_extents();
            let inside = (0..3).all(|i| local[i].abs() <= half[i] + MOVE_EPS);
            (!inside).then_some(LayoutWarning::NotContained {
                parent: e.src,
                child: e.dst,
            })
        })
        .collect()
}

/// `On` edges whose child center projects outside the parent's placement
/// rectangle by more than `tol`.
pub fn stability_violations(graph: &SceneGraph, inset_ratio: f64, tol: f64) -> Vec<(Nid, Nid)> {
    graph
        .strong_edges()
        .filter(|e| e.relation == RelationType::On)
        .filter(|e| {
            let (Some(p), Some(c)) = (graph.node(e.src), graph.node(e.dst)) else {
                return false;
            };
            let area = top_surface(p, inset_ratio);
            let local = rotate_z(c.pos - p.pos, -p.yaw());
            let q = area.rect.to_local(local.xy());
            q.x.abs() > area.rect.half_extents.x + tol || q.y.abs() > area.rect.half_extents.y + tol
        })
        .map(|e| (e.src, e.dst))
        .collect()
}
