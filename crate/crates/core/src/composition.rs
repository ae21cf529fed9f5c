//! Progressive evolution: local sub-scenes are fitted onto an anchor's
//! placement area and merged into the global graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align_scene, AlignReport};
use crate::geometry::{obb_of_nodes, rotate_z, OrientedBoundingBox, PlacementArea, Vec3};
use crate::graph::{GraphError, Nid, ObjectNode, RelationEdge, SceneGraph};
use crate::layout::{optimize_layout, record_relative_transforms, LayoutError, LayoutOptions, LayoutReport};

pub const FLOOR_CATEGORY: &str = "floor";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompositionError {
    #[error("local scene is empty")]
    EmptyScene,
    #[error("anchor {0} is not in the global graph")]
    UnknownAnchor(Nid),
    #[error("anchor {0} has a zero-area placement surface")]
    DegenerateAnchor(Nid),
    #[error("anchor {0} is not upright")]
    AnchorNotUpright(Nid),
    #[error("ran out of node identifiers")]
    NidOverflow,
    #[error("initial scene has no floor root")]
    MissingFloor,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// A sub-scene generated around one anchor, in its own coordinates.
#[derive(Debug, Clone, Default)]
pub struct LocalScene {
    pub graph: SceneGraph,
    pub anchor_category: String,
    pub step_index: u32,
}

/// `p -> translation + Rz(yaw) * (scale * p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimilarityTransform {
    pub translation: Vec3,
    pub yaw: f64,
    pub scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self {
            translation: Vec3::zeros(),
            yaw: 0.0,
            scale: 1.0,
        }
    }
}

impl SimilarityTransform {
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.translation + rotate_z(p * self.scale, self.yaw)
    }

    pub fn apply_node(&self, node: &mut ObjectNode) {
        node.pos = self.apply_point(node.pos);
        node.rot.z += self.yaw;
        node.scale *= self.scale;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MergeResult {
    /// Local nid to global nid, stored as `[local, global]` pairs.
    #[serde(with = "nid_pairs")]
    pub nid_map: BTreeMap<Nid, Nid>,
    pub applied_transform: SimilarityTransform,
    pub report: LayoutReport,
}

// Integer map keys do not survive serde's buffering inside tagged enums.
mod nid_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::graph::Nid;

    pub fn serialize<S: Serializer>(map: &BTreeMap<Nid, Nid>, s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<(Nid, Nid)> = map.iter().map(|(&a, &b)| (a, b)).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Nid, Nid>, D::Error> {
        Ok(Vec::<(Nid, Nid)>::deserialize(d)?.into_iter().collect())
    }
}

impl MergeResult {
    pub fn new_nids(&self) -> Vec<Nid> {
        self.nid_map.values().copied().collect()
    }
}

/// Box around every local node at the given yaw.
pub fn region_obb(local: &LocalScene, basis_yaw: f64) -> Result<OrientedBoundingBox, CompositionError> {
    obb_of_nodes(local.graph.nodes(), basis_yaw).map_err(|_| CompositionError::EmptyScene)
}

/// Transform that turns the local region (boxed at yaw 0) onto the anchor's
/// placement area: rotated to the area's heading, shrunk if its footprint is
/// larger than the area, centered over the area with its bottom on the
/// surface.
pub fn align_to_anchor(
    local: &LocalScene,
    anchor: &ObjectNode,
    area: &PlacementArea,
) -> Result<SimilarityTransform, CompositionError> {
    if !anchor.is_upright() {
        return Err(CompositionError::AnchorNotUpright(anchor.nid));
    }
    let half = area.rect.half_extents;
    if !(half.x > 0.0 && half.y > 0.0) {
        return Err(CompositionError::DegenerateAnchor(anchor.nid));
    }
    let obb = region_obb(local, 0.0)?;
    let scale = 1f64
        .min(half.x / obb.half_extents.x)
        .min(half.y / obb.half_extents.y);
    let area_yaw = anchor.yaw() + area.rect.yaw;
    let yaw = area_yaw - obb.yaw;

    let area_center_local = Vec3::new(area.rect.center.x, area.rect.center.y, area.height);
    let area_center = anchor.pos + rotate_z(area_center_local, anchor.yaw());
    let moved_center = rotate_z(obb.center * scale, yaw);
    let translation = Vec3::new(
        area_center.x - moved_center.x,
        area_center.y - moved_center.y,
        area_center.z - obb.bottom() * scale,
    );
    Ok(SimilarityTransform {
        translation,
        yaw,
        scale,
    })
}

/// Merges `local` under `anchor`: fresh nids, anchor alignment, an `On` edge
/// from the anchor to each local strong root, then global layout
/// optimization. On error `global` is left untouched.
pub fn merge(
    global: &mut SceneGraph,
    local: &LocalScene,
    anchor: Nid,
    options: &LayoutOptions,
) -> Result<MergeResult, CompositionError> {
    let anchor_node = global
        .node(anchor)
        .ok_or(CompositionError::UnknownAnchor(anchor))?
        .clone();
    if local.graph.is_empty() {
        global.bump_revision();
        return Ok(MergeResult {
            report: LayoutReport {
                converged: true,
                ..Default::default()
            },
            ..Default::default()
        });
    }
    let area = crate::geometry::top_surface(&anchor_node, options.inset_ratio);
    let transform = align_to_anchor(local, &anchor_node, &area)?;

    let mut next = global.max_nid().map_or(Some(0), |m| m.checked_add(1));
    let mut nid_map = BTreeMap::new();
    for nid in local.graph.nids() {
        let fresh = next.ok_or(CompositionError::NidOverflow)?;
        nid_map.insert(nid, fresh);
        next = fresh.checked_add(1);
    }

    let revision = global.revision();
    let mut work = global.clone();
    for node in local.graph.nodes() {
        let mut n = node.clone();
        n.nid = nid_map[&node.nid];
        transform.apply_node(&mut n);
        work.add_node(n)?;
    }
    for e in local.graph.edges() {
        work.add_edge(RelationEdge::new(nid_map[&e.src], nid_map[&e.dst], e.relation.clone()))?;
    }
    for root in local.graph.strong_roots() {
        work.add_edge(RelationEdge::on(anchor, nid_map[&root]))?;
    }
    let report = optimize_layout(&mut work, options)?;
    work.set_revision(revision + 1);
    *global = work;
    Ok(MergeResult {
        nid_map,
        applied_transform: transform,
        report,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InitialBuild {
    pub floor: Nid,
    pub alignment: AlignReport,
    pub report: LayoutReport,
    /// Region box at the dominant direction.
    pub region: Option<OrientedBoundingBox>,
}

/// Turns the first local scene into the global graph. The floor is the
/// anchor: every other strong root is put `On` it, orientations are snapped
/// to the dominant orthogonal family and the layout is optimized.
pub fn build_initial_global(
    local: &LocalScene,
    options: &LayoutOptions,
) -> Result<(SceneGraph, InitialBuild), CompositionError> {
    let floor = local
        .graph
        .strong_roots()
        .into_iter()
        .find(|&n| local.graph.node(n).is_some_and(|node| node.category == FLOOR_CATEGORY))
        .ok_or(CompositionError::MissingFloor)?;
    let mut g = local.graph.clone();
    for root in g.strong_roots() {
        if root != floor {
            g.add_edge(RelationEdge::on(floor, root))?;
        }
    }
    let alignment = align_scene(&mut g);
    record_relative_transforms(&mut g);
    let report = optimize_layout(&mut g, options)?;
    let region = alignment
        .basis
        .and_then(|b| obb_of_nodes(g.nodes(), b.d1.y.atan2(b.d1.x)).ok());
    g.set_revision(1);
    Ok((
        g,
        InitialBuild {
            floor,
            alignment,
            report,
            region,
        },
    ))
}
