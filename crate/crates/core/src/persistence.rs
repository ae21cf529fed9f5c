//! Versioned JSON scene and session files.
//!
//! Scene files round every float to 9 significant digits so golden files are
//! stable; a saved file re-saves byte for byte. Session logs keep exact floats
//! so replay can be compared bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::graph::{GraphError, ObjectNode, RelationEdge, RelativeTransform, SceneGraph};
use crate::pipeline::{replay, Backend, LogEntry, ReplayError, SceneSession};

pub const SCENE_VERSION: &str = "higs-scene/1";
pub const SESSION_VERSION: &str = "higs-session/1";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("expected version {expected:?}, found {found:?}")]
    SchemaVersionMismatch { expected: String, found: String },
    #[error("corrupt file at {path} (line {line}, column {column}): {message}")]
    CorruptFile {
        /// Field path such as `nodes[3].pos`, `.` for the document root.
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneMeta {
    /// Unix seconds, if the writer chose to stamp the file.
    #[serde(default)]
    pub created: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub step_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SceneFile {
    pub version: String,
    pub meta: SceneMeta,
    pub nodes: Vec<ObjectNode>,
    pub edges: Vec<RelationEdge>,
    pub rel_transforms: Vec<RelativeTransform>,
}

/// Nearest double to the 9-significant-digit decimal rendering of `x`.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn round_vec(v: Vec3) -> Vec3 {
    v.map(round_sig9)
}

fn round_node(n: &ObjectNode) -> ObjectNode {
    ObjectNode {
        pos: round_vec(n.pos),
        rot: round_vec(n.rot),
        scale: round_sig9(n.scale),
        half_extents: round_vec(n.half_extents),
        ..n.clone()
    }
}

fn round_transform(t: &RelativeTransform) -> RelativeTransform {
    RelativeTransform {
        translation: round_vec(t.translation),
        yaw_delta: round_sig9(t.yaw_delta),
        scale_ratio: round_sig9(t.scale_ratio),
        ..t.clone()
    }
}

impl SceneFile {
    pub fn from_graph(graph: &SceneGraph, meta: SceneMeta) -> Self {
        SceneFile {
            version: SCENE_VERSION.to_string(),
            meta,
            nodes: graph.nodes().map(round_node).collect(),
            edges: graph.edges().cloned().collect(),
            rel_transforms: graph.rel_transforms().map(round_transform).collect(),
        }
    }

    /// Revision is not stored; the graph comes back at revision 0.
    pub fn to_graph(&self) -> Result<SceneGraph, GraphError> {
        SceneGraph::from_parts(
            self.nodes.iter().cloned(),
            self.edges.iter().cloned(),
            self.rel_transforms.iter().cloned(),
            0,
        )
    }
}

/// The graph as it will look after a save/load cycle.
pub fn quantize(graph: &SceneGraph) -> SceneGraph {
    let mut g = SceneFile::from_graph(graph, SceneMeta::default())
        .to_graph()
        .expect("nids of an existing graph are unique");
    g.set_revision(graph.revision());
    g
}

pub fn scene_to_bytes(file: &SceneFile) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(file).expect("scene file serializes");
    out.push(b'\n');
    out
}

pub fn save_scene(graph: &SceneGraph, meta: SceneMeta) -> Vec<u8> {
    scene_to_bytes(&SceneFile::from_graph(graph, meta))
}

pub fn load_scene_file(bytes: &[u8]) -> Result<SceneFile, PersistError> {
    check_version(bytes, SCENE_VERSION)?;
    parse_with_path(bytes)
}

pub fn load_scene(bytes: &[u8]) -> Result<(SceneGraph, SceneMeta), PersistError> {
    let file = load_scene_file(bytes)?;
    let graph = file.to_graph()?;
    Ok((graph, file.meta))
}

pub fn read_scene(path: &Path) -> Result<(SceneGraph, SceneMeta), PersistError> {
    load_scene(&std::fs::read(path)?)
}

/// Graph contents at full precision.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GraphParts {
    pub nodes: Vec<ObjectNode>,
    pub edges: Vec<RelationEdge>,
    pub rel_transforms: Vec<RelativeTransform>,
}

impl GraphParts {
    pub fn exact(graph: &SceneGraph) -> Self {
        GraphParts {
            nodes: graph.nodes().cloned().collect(),
            edges: graph.edges().cloned().collect(),
            rel_transforms: graph.rel_transforms().cloned().collect(),
        }
    }

    pub fn to_graph(&self) -> Result<SceneGraph, GraphError> {
        SceneGraph::from_parts(
            self.nodes.iter().cloned(),
            self.edges.iter().cloned(),
            self.rel_transforms.iter().cloned(),
            0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SessionFile {
    pub version: String,
    pub session_id: String,
    /// Final scene at file precision.
    pub scene: SceneFile,
    /// Every operation at full precision.
    pub log: Vec<LogEntry>,
}

impl SessionFile {
    pub fn from_session(session: &SceneSession, meta: SceneMeta) -> Self {
        SessionFile {
            version: SESSION_VERSION.to_string(),
            session_id: session.session_id.clone(),
            scene: SceneFile::from_graph(&session.global, meta),
            log: session.log.clone(),
        }
    }

    /// Replays the log and checks the result against the embedded scene.
    pub fn replay(&self, backend: Option<&dyn Backend>) -> Result<SceneSession, ReplayError> {
        let mut s = replay(&self.log, backend)?;
        s.session_id = self.session_id.clone();
        let redone = SceneFile::from_graph(&s.global, self.scene.meta.clone());
        if redone != self.scene {
            return Err(ReplayError::Divergence {
                entry: self.log.len(),
                detail: "replayed scene differs from the embedded scene".into(),
            });
        }
        Ok(s)
    }
}

pub fn save_session(session: &SceneSession, meta: SceneMeta) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&SessionFile::from_session(session, meta)).expect("session serializes");
    out.push(b'\n');
    out
}

pub fn load_session_file(bytes: &[u8]) -> Result<SessionFile, PersistError> {
    check_version(bytes, SESSION_VERSION)?;
    let file: SessionFile = parse_with_path(bytes)?;
    if file.scene.version != SCENE_VERSION {
        return Err(PersistError::SchemaVersionMismatch {
            expected: SCENE_VERSION.into(),
            found: file.scene.version,
        });
    }
    Ok(file)
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<String>,
}

/// Rejects well-formed documents carrying another version. Malformed input
/// falls through so the full parse can report where it broke.
pub(crate) fn check_version(bytes: &[u8], expected: &str) -> Result<(), PersistError> {
    if let Ok(VersionProbe { version: Some(found) }) = serde_json::from_slice(bytes) {
        if found != expected {
            return Err(PersistError::SchemaVersionMismatch {
                expected: expected.to_string(),
                found,
            });
        }
    }
    Ok(())
}

pub(crate) fn parse_with_path<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, PersistError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        PersistError::CorruptFile {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| PersistError::CorruptFile {
        path: ".".into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RelationType;
    use crate::layout::record_relative_transforms;
    use proptest::prelude::*;

    fn desk_lamp() -> SceneGraph {
        let mut g = SceneGraph::new();
        g.add_node(ObjectNode::new(0, "desk", Vec3::new(0.6, 0.3, 0.375)).with_pos(Vec3::new(0.0, 0.0, 0.375)))
            .unwrap();
        g.add_node(
            ObjectNode::new(1, "lamp", Vec3::new(0.1, 0.1, 0.2))
                .with_pos(Vec3::new(0.1 + 0.2, 1.0 / 3.0, 0.95))
                .with_yaw(std::f64::consts::FRAC_PI_3),
        )
        .unwrap();
        g.add_edge(RelationEdge::on(0, 1)).unwrap();
        g.add_edge(RelationEdge::new(1, 0, RelationType::Facing)).unwrap();
        g
    }

    #[test]
    fn sig9_rounding() {
        assert_eq!(round_sig9(1.0 / 3.0), 0.333333333);
        assert_eq!(round_sig9(123456789.4), 123456789.0);
        assert_eq!(round_sig9(-2.0e-7 / 3.0), -6.66666667e-8);
        assert_eq!(round_sig9(0.0), 0.0);
        assert_eq!(round_sig9(0.30000000000000004), 0.3);
    }

    #[test]
    fn empty_graph_document() {
        let bytes = save_scene(&SceneGraph::new(), SceneMeta::default());
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"nodes\": []"));
        assert!(text.contains("\"edges\": []"));
        assert!(text.contains("\"relTransforms\": []"));
        let (g, _) = load_scene(&bytes).unwrap();
        assert!(g.is_empty());
        assert!(g.content_eq(&SceneGraph::new()));
    }

    #[test]
    fn field_order_is_fixed() {
        let text = String::from_utf8(save_scene(&desk_lamp(), SceneMeta::default())).unwrap();
        let at = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(at("version") < at("meta"));
        assert!(at("meta") < at("nodes"));
        assert!(at("nodes") < at("edges"));
        assert!(at("edges") < at("relTransforms"));
        assert!(text.contains("0.333333333"));
        assert!(!text.contains("0.3333333333"));
    }

    #[test]
    fn resave_is_byte_identical() {
        let meta = SceneMeta {
            created: None,
            seed: Some(42),
            step_count: 1,
        };
        let a = save_scene(&desk_lamp(), meta.clone());
        let (g, m) = load_scene(&a).unwrap();
        assert_eq!(m, meta);
        assert_eq!(save_scene(&g, m), a);
        assert!(g.content_eq(&quantize(&desk_lamp())));
        assert!(g.validate().is_empty());
    }

    #[test]
    fn version_mismatch() {
        let text = String::from_utf8(save_scene(&desk_lamp(), SceneMeta::default()))
            .unwrap()
            .replace(SCENE_VERSION, "higs-scene/2");
        match load_scene(text.as_bytes()) {
            Err(PersistError::SchemaVersionMismatch { found, .. }) => assert_eq!(found, "higs-scene/2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_names_field() {
        let bytes = save_scene(&desk_lamp(), SceneMeta::default());
        let cut = String::from_utf8(bytes).unwrap();
        let cut = &cut[..cut.find("\"halfExtents\"").unwrap() + 20];
        match load_scene(cut.as_bytes()) {
            Err(PersistError::CorruptFile { path, .. }) => {
                assert!(path.starts_with("nodes[0]"), "{path}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_names_field() {
        let text = String::from_utf8(save_scene(&desk_lamp(), SceneMeta::default()))
            .unwrap()
            .replacen("\"category\": \"lamp\"", "\"category\": 7", 1);
        match load_scene(text.as_bytes()) {
            Err(PersistError::CorruptFile { path, line, .. }) => {
                assert_eq!(path, "nodes[1].category");
                assert!(line > 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_nid_in_file() {
        let mut f = SceneFile::from_graph(&desk_lamp(), SceneMeta::default());
        f.nodes[1].nid = 0;
        assert!(matches!(
            load_scene(&scene_to_bytes(&f)),
            Err(PersistError::Graph(GraphError::DuplicateNid(0)))
        ));
    }

    #[test]
    fn loads_invalid_graph_for_diagnosis() {
        let mut f = SceneFile::from_graph(&desk_lamp(), SceneMeta::default());
        f.rel_transforms.clear();
        let (g, _) = load_scene(&scene_to_bytes(&f)).unwrap();
        assert_eq!(g.validate().len(), 1);
    }

    #[test]
    fn session_file_round_trip() {
        use crate::pipeline::ProceduralBackend;
        let b = ProceduralBackend::new();
        let mut s = SceneSession::new("rt");
        s.run_step(&b, None, "a small office", 5).unwrap();
        let desk = s.global.nodes().find(|n| n.category == "desk").unwrap().nid;
        s.run_step(&b, Some(desk), "a lamp and a mug", 6).unwrap();
        let n = s.global.node(desk).unwrap().clone();
        s.modify_node_pose(desk, n.pos + Vec3::new(0.25, 0.0, 0.0), n.rot).unwrap();
        let leaf = s.global.max_nid().unwrap();
        s.remove_node(leaf, false).unwrap();

        let bytes = save_session(&s, SceneMeta::default());
        let file = load_session_file(&bytes).unwrap();
        assert_eq!(file.log, s.log);
        let back = file.replay(Some(&b)).unwrap();
        assert!(back.global.content_eq(&s.global));
        assert_eq!(back.global.revision(), s.global.revision());
    }

    proptest! {
        #[test]
        fn random_chain_round_trip(
            poses in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64, 0.0..5.0f64, -3.1..3.1f64), 1..12)
        ) {
            let mut g = SceneGraph::new();
            for (i, (x, y, z, yaw)) in poses.iter().enumerate() {
                g.add_node(
                    ObjectNode::new(i as u64 * 3 + 1, "box", Vec3::new(0.4, 0.3, 0.2))
                        .with_pos(Vec3::new(*x, *y, *z))
                        .with_yaw(*yaw),
                ).unwrap();
            }
            let nids: Vec<_> = g.nids().collect();
            for w in nids.windows(2) {
                g.add_edge(RelationEdge::on(w[0], w[1])).unwrap();
            }
            record_relative_transforms(&mut g);
            let bytes = save_scene(&g, SceneMeta::default());
            let (back, _) = load_scene(&bytes).unwrap();
            prop_assert!(back.content_eq(&quantize(&g)));
            prop_assert_eq!(back.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
            for (a, b) in back.nodes().zip(g.nodes()) {
                prop_assert!((a.pos - b.pos).norm() <= 1e-7);
            }
            prop_assert_eq!(save_scene(&back, SceneMeta::default()), bytes);
        }
    }
}
