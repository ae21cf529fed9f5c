//! Step orchestration: prompt assembly, backend adapters and the local
//! scene each step produces.

mod procedural;
mod remote;
mod session;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::CompositionError;
use crate::geometry::Vec3;
use crate::graph::{GraphError, Nid, ObjectNode, RelationEdge, SceneGraph};

pub use procedural::{catalog_entry, parse_object_list, CatalogEntry, ProceduralBackend, Role};
pub use remote::{external_adapter_config, Endpoint, RemoteBackend, RemoteConfig};
pub use session::{replay, LogEntry, ReplayError, SceneSession, StepOutcome, StepRecord};

/// Fixed step-0 fragment asking for a global, structure-revealing view.
pub const T_ISO: &str = "isometric view of the whole scene, all objects fully visible";
pub const DEFAULT_SEPARATOR: &str = "; ";
/// Extents of the floor injected at step 0, meters.
pub const FLOOR_EXTENTS: [f64; 3] = [6.0, 6.0, 0.1];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PromptBundle {
    pub iso: Option<String>,
    pub global: String,
    pub sd: String,
    pub step_index: u32,
}

impl PromptBundle {
    /// Bundle for step `n`; only step 0 carries the iso fragment.
    pub fn for_step(step_index: u32, global: impl Into<String>, sd: impl Into<String>) -> Self {
        PromptBundle {
            iso: (step_index == 0).then(|| T_ISO.to_string()),
            global: global.into(),
            sd: sd.into(),
            step_index,
        }
    }
}

/// Joins iso, global and sd in that order, skipping empty parts.
pub fn compose_prompt(bundle: &PromptBundle, separator: &str) -> Result<String, PipelineError> {
    let parts: Vec<&str> = [bundle.iso.as_deref(), Some(&bundle.global), Some(&bundle.sd)]
        .into_iter()
        .flatten()
        .filter(|p| !p.is_empty())
        .collect();
    if parts.is_empty() {
        return Err(PipelineError::AllEmpty);
    }
    Ok(parts.join(separator))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectSpec {
    pub category: String,
    /// Full box size, meters.
    #[serde(rename = "extents")]
    pub approx_extents: Vec3,
    pub count: u32,
}

impl ObjectSpec {
    pub fn new(category: impl Into<String>, extents: Vec3, count: u32) -> Self {
        ObjectSpec {
            category: category.into(),
            approx_extents: extents,
            count,
        }
    }

    pub fn floor() -> Self {
        ObjectSpec::new(crate::composition::FLOOR_CATEGORY, Vec3::from(FLOOR_EXTENTS), 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PerceivedObject {
    pub category: String,
    pub pos: Vec3,
    pub yaw: f64,
    pub half_extents: Vec3,
    pub scale: f64,
}

impl PerceivedObject {
    pub fn to_node(&self, nid: Nid) -> ObjectNode {
        ObjectNode::new(nid, self.category.clone(), self.half_extents)
            .with_pos(self.pos)
            .with_yaw(self.yaw)
            .with_scale(self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Stage {
    ObjectLister,
    ScenePrompter,
    ImageGenerator,
    Reconstructor,
    RelationEstimator,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::ObjectLister,
        Stage::ScenePrompter,
        Stage::ImageGenerator,
        Stage::Reconstructor,
        Stage::RelationEstimator,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::ObjectLister => "objectLister",
            Stage::ScenePrompter => "scenePrompter",
            Stage::ImageGenerator => "imageGenerator",
            Stage::Reconstructor => "reconstructor",
            Stage::RelationEstimator => "relationEstimator",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "camelCase")]
pub enum FailureCause {
    Timeout,
    BadSchema(String),
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{stage} failed: {cause:?}")]
pub struct AdapterFailure {
    pub stage: Stage,
    pub cause: FailureCause,
}

impl AdapterFailure {
    pub fn bad_schema(stage: Stage, msg: impl Into<String>) -> Self {
        AdapterFailure {
            stage,
            cause: FailureCause::BadSchema(msg.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("every prompt part is empty")]
    AllEmpty,
    #[error("anchor {0:?} is not in the scene")]
    UnknownAnchor(Option<Nid>),
    #[error(transparent)]
    Adapter(#[from] AdapterFailure),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Layout(#[from] crate::layout::LayoutError),
}

/// The five adapters of one step. Each call is deterministic in its seed.
pub trait Backend: Send + Sync {
    fn list_objects(&self, scene_text: &str, global_text: &str, seed: u64) -> Result<Vec<ObjectSpec>, AdapterFailure>;

    fn scene_prompt(&self, objects: &[ObjectSpec], constraints: &str, seed: u64) -> Result<String, AdapterFailure>;

    /// Returns an opaque artifact handle.
    fn generate_image(&self, prompt: &str, seed: u64) -> Result<String, AdapterFailure>;

    /// `objects` are the listed specs, passed as grounding hints.
    fn reconstruct(&self, artifact: &str, objects: &[ObjectSpec], seed: u64) -> Result<Vec<PerceivedObject>, AdapterFailure>;

    /// Edges index into `objects`.
    fn estimate_relations(
        &self,
        artifact: &str,
        objects: &[PerceivedObject],
        seed: u64,
    ) -> Result<Vec<RelationEdge>, AdapterFailure>;
}

/// Per-stage seed from the step seed (splitmix64 finalizer).
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let mut z = seed ^ (stage as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn check_object_specs(specs: &[ObjectSpec]) -> Result<(), AdapterFailure> {
    for (i, s) in specs.iter().enumerate() {
        let bad = |m: &str| AdapterFailure::bad_schema(Stage::ObjectLister, format!("objects[{i}]: {m}"));
        if s.category.trim().is_empty() {
            return Err(bad("empty category"));
        }
        if !s.approx_extents.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(bad("extents must be positive"));
        }
        if s.count == 0 {
            return Err(bad("count must be at least 1"));
        }
    }
    Ok(())
}

pub fn check_perceived(objects: &[PerceivedObject]) -> Result<(), AdapterFailure> {
    for (i, o) in objects.iter().enumerate() {
        if !o.to_node(i as Nid).has_valid_geometry() || o.category.trim().is_empty() {
            return Err(AdapterFailure::bad_schema(
                Stage::Reconstructor,
                format!("objects[{i}]: invalid geometry"),
            ));
        }
    }
    Ok(())
}

pub fn check_edges(edges: &[RelationEdge], len: usize) -> Result<(), AdapterFailure> {
    for (i, e) in edges.iter().enumerate() {
        if e.src as usize >= len || e.dst as usize >= len {
            return Err(AdapterFailure::bad_schema(
                Stage::RelationEstimator,
                format!("edges[{i}]: index out of range for {len} objects"),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Repair {
    SelfLoop { edge: RelationEdge },
    Duplicate { edge: RelationEdge },
    ParentConflict { edge: RelationEdge, kept: Nid },
    CycleBroken { edge: RelationEdge },
}

/// Builds the local graph (nid = list index) from estimator output, dropping
/// edges the graph cannot hold. Conflicting strong parents keep the smallest
/// src; each strong cycle loses the edge whose child nid is largest.
pub fn assemble_local(
    objects: &[PerceivedObject],
    edges: &[RelationEdge],
) -> Result<(SceneGraph, Vec<Repair>), GraphError> {
    let mut repairs = Vec::new();
    let mut seen = BTreeSet::new();
    let mut parent: BTreeMap<Nid, RelationEdge> = BTreeMap::new();
    let mut weak = Vec::new();
    for e in edges {
        if e.src == e.dst {
            repairs.push(Repair::SelfLoop { edge: e.clone() });
            continue;
        }
        if !seen.insert((e.src, e.dst, e.relation.clone())) {
            repairs.push(Repair::Duplicate { edge: e.clone() });
            continue;
        }
        if !e.relation.is_strong() {
            weak.push(e.clone());
            continue;
        }
        match parent.get(&e.dst) {
            Some(kept) if kept.src <= e.src => repairs.push(Repair::ParentConflict {
                edge: e.clone(),
                kept: kept.src,
            }),
            Some(kept) => {
                repairs.push(Repair::ParentConflict {
                    edge: kept.clone(),
                    kept: e.src,
                });
                parent.insert(e.dst, e.clone());
            }
            None => {
                parent.insert(e.dst, e.clone());
            }
        }
    }

    // Every child has at most one parent now, so cycles are disjoint rings.
    let mut state: BTreeMap<Nid, u8> = BTreeMap::new();
    let starts: Vec<Nid> = parent.keys().copied().collect();
    for start in starts {
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            match state.get(&cur) {
                Some(2) => break,
                Some(1) => {
                    let ring_from = path.iter().position(|&n| n == cur).unwrap();
                    let worst = *path[ring_from..].iter().max().unwrap();
                    let edge = parent.remove(&worst).unwrap();
                    repairs.push(Repair::CycleBroken { edge });
                    break;
                }
                _ => {}
            }
            state.insert(cur, 1);
            path.push(cur);
            match parent.get(&cur) {
                Some(e) => cur = e.src,
                None => break,
            }
        }
        for n in path {
            state.insert(n, 2);
        }
    }

    let mut g = SceneGraph::new();
    for (i, o) in objects.iter().enumerate() {
        g.add_node(o.to_node(i as Nid))?;
    }
    for e in parent.into_values() {
        g.add_edge(e)?;
    }
    for e in weak {
        g.add_edge(e)?;
    }
    Ok((g, repairs))
}
