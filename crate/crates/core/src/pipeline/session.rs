use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    assemble_local, check_edges, check_object_specs, check_perceived, compose_prompt, stage_seed, Backend,
    ObjectSpec, PipelineError, PromptBundle, Repair, Stage, DEFAULT_SEPARATOR,
};
use crate::alignment::AlignReport;
use crate::composition::{build_initial_global, merge, LocalScene, MergeResult, SimilarityTransform};
use crate::geometry::Vec3;
use crate::graph::{Nid, SceneGraph};
use crate::layout::{optimize_layout, LayoutOptions, LayoutReport, MOVE_EPS};
use crate::persistence::GraphParts;

/// Everything needed to redo one generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepRecord {
    pub step_index: u32,
    /// `None` for step 0, which is anchored on the floor it creates.
    pub anchor_nid: Option<Nid>,
    pub user_text: String,
    pub seed: u64,
    pub prompt_bundle: PromptBundle,
    pub prompt: String,
    pub artifact: String,
    pub objects: Vec<ObjectSpec>,
    /// The local scene as handed to composition, exact floats.
    pub local_graph: GraphParts,
    pub repairs: Vec<Repair>,
    pub warnings: Vec<String>,
    pub merge_result: MergeResult,
    #[serde(default)]
    pub alignment: Option<AlignReport>,
    /// Free-text note on where the view was focused.
    pub viewpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "camelCase")]
pub enum LogEntry {
    Step(Box<StepRecord>),
    #[serde(rename_all = "camelCase")]
    EditPose {
        nid: Nid,
        pos: Vec3,
        rot: Vec3,
        report: LayoutReport,
    },
    #[serde(rename_all = "camelCase")]
    Remove {
        nid: Nid,
        cascade: bool,
        removed: Vec<Nid>,
    },
}

impl LogEntry {
    pub fn report(&self) -> Option<&LayoutReport> {
        match self {
            LogEntry::Step(r) => Some(&r.merge_result.report),
            LogEntry::EditPose { report, .. } => Some(report),
            LogEntry::Remove { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepOutcome {
    pub step_index: u32,
    pub new_nids: Vec<Nid>,
    pub report: LayoutReport,
    pub repairs: Vec<Repair>,
    pub warnings: Vec<String>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("log entry {entry} diverged: {detail}")]
    Divergence { entry: usize, detail: String },
    #[error("log entry {entry} is malformed: {detail}")]
    Malformed { entry: usize, detail: String },
    #[error("log entry {entry} failed: {error}")]
    Failed { entry: usize, error: PipelineError },
}

#[derive(Debug, Clone)]
pub struct SceneSession {
    pub session_id: String,
    pub global: SceneGraph,
    /// Style fragment taken from the step-0 request.
    pub style: String,
    pub log: Vec<LogEntry>,
    pub layout: LayoutOptions,
}

/// Words leading up to "style", e.g. "rustic cabin style".
pub fn style_fragment(text: &str) -> String {
    const STOP: &[&str] = &["a", "an", "the", "in", "with", "of", "and", "for", "to", "on"];
    let words: Vec<&str> = text
        .split(|c: char| c.is_whitespace() || c == ',' || c == ';' || c == '.')
        .filter(|w| !w.is_empty())
        .collect();
    let Some(end) = words.iter().position(|w| w.eq_ignore_ascii_case("style")) else {
        return String::new();
    };
    let start = words[..end]
        .iter()
        .rposition(|w| STOP.contains(&w.to_lowercase().as_str()))
        .map_or(0, |p| p + 1);
    words[start..=end].join(" ")
}

/// Categories of the strong roots and their direct children, in nid order.
pub fn context_summary(graph: &SceneGraph) -> String {
    let mut seen = Vec::new();
    for root in graph.strong_roots() {
        for nid in std::iter::once(root).chain(graph.strong_children(root)) {
            if let Some(n) = graph.node(nid) {
                if !seen.contains(&n.category) {
                    seen.push(n.category.clone());
                }
            }
        }
    }
    seen.join(", ")
}

/// Lowers every strong root so its bottom rests at z = 0, carrying its
/// subtree along.
fn settle_roots(g: &mut SceneGraph) -> Result<(), PipelineError> {
    for root in g.strong_roots() {
        let node = g.node(root).expect("root exists");
        let dz = -node.bottom();
        if dz.abs() > MOVE_EPS {
            let (pos, rot) = (node.pos + Vec3::new(0.0, 0.0, dz), node.rot);
            g.modify_node_pose(root, pos, rot)?;
        }
    }
    Ok(())
}

impl SceneSession {
    pub fn new(session_id: impl Into<String>) -> Self {
        SceneSession {
            session_id: session_id.into(),
            global: SceneGraph::new(),
            style: String::new(),
            log: Vec::new(),
            layout: LayoutOptions::default(),
        }
    }

    /// Number of generation steps run so far; the next step has this index.
    pub fn steps_done(&self) -> u32 {
        self.log.iter().filter(|e| matches!(e, LogEntry::Step(_))).count() as u32
    }

    pub fn last_step(&self) -> Option<&StepRecord> {
        self.log.iter().rev().find_map(|e| match e {
            LogEntry::Step(r) => Some(r.as_ref()),
            _ => None,
        })
    }

    pub fn global_context(&self, step_index: u32) -> String {
        if step_index == 0 {
            return self.style.clone();
        }
        let summary = context_summary(&self.global);
        match (self.style.is_empty(), summary.is_empty()) {
            (_, true) => self.style.clone(),
            (true, false) => format!("existing: {summary}"),
            (false, false) => format!("{}, existing: {summary}", self.style),
        }
    }

    /// Runs the adapters and builds the local scene without touching the
    /// session.
    pub fn prepare_step(
        &self,
        backend: &dyn Backend,
        anchor: Option<Nid>,
        text: &str,
        seed: u64,
    ) -> Result<StepRecord, PipelineError> {
        let n = self.steps_done();
        let anchor_nid = if n == 0 {
            None
        } else {
            match anchor {
                Some(a) if self.global.contains(a) => Some(a),
                other => return Err(PipelineError::UnknownAnchor(other)),
            }
        };
        let global_text = if n == 0 { style_fragment(text) } else { self.global_context(n) };

        let mut objects = backend.list_objects(text, &global_text, stage_seed(seed, Stage::ObjectLister))?;
        check_object_specs(&objects)?;
        let mut warnings = Vec::new();
        if objects.is_empty() {
            warnings.push(format!("no known objects in {text:?}"));
        }
        if n == 0 {
            objects.insert(0, ObjectSpec::floor());
        }
        let sd = backend.scene_prompt(&objects, &global_text, stage_seed(seed, Stage::ScenePrompter))?;
        let prompt_bundle = PromptBundle::for_step(n, global_text, sd);
        let prompt = compose_prompt(&prompt_bundle, DEFAULT_SEPARATOR)?;
        let artifact = backend.generate_image(&prompt, stage_seed(seed, Stage::ImageGenerator))?;
        let perceived = backend.reconstruct(&artifact, &objects, stage_seed(seed, Stage::Reconstructor))?;
        check_perceived(&perceived)?;
        let edges = backend.estimate_relations(&artifact, &perceived, stage_seed(seed, Stage::RelationEstimator))?;
        check_edges(&edges, perceived.len())?;

        let (mut local, repairs) = assemble_local(&perceived, &edges)?;
        for r in &repairs {
            log::warn!("step {n}: repaired relation output: {r:?}");
        }
        let viewpoint = match anchor_nid {
            None => "isometric overview".to_string(),
            Some(a) => format!("focused on {} #{a}", self.global.node(a).expect("checked").category),
        };
        if n > 0 {
            settle_roots(&mut local)?;
            optimize_layout(&mut local, &self.layout)?;
        }
        Ok(StepRecord {
            step_index: n,
            anchor_nid,
            user_text: text.to_string(),
            seed,
            prompt_bundle,
            prompt,
            artifact,
            objects,
            local_graph: GraphParts::exact(&local),
            repairs,
            warnings,
            merge_result: MergeResult::default(),
            alignment: None,
            viewpoint,
        })
    }

    /// Composes a prepared step into the global graph and logs it. Fills in
    /// the merge result of `record`.
    pub fn apply_step(&mut self, mut record: StepRecord) -> Result<StepOutcome, PipelineError> {
        let local = LocalScene {
            graph: record.local_graph.to_graph()?,
            anchor_category: String::new(),
            step_index: record.step_index,
        };
        let (global, merge_result, alignment) = match record.anchor_nid {
            None => {
                if record.step_index != 0 {
                    return Err(PipelineError::UnknownAnchor(None));
                }
                let (g, build) = build_initial_global(&local, &self.layout)?;
                let nid_map: BTreeMap<Nid, Nid> = g.nids().map(|n| (n, n)).collect();
                let result = MergeResult {
                    nid_map,
                    applied_transform: SimilarityTransform::default(),
                    report: build.report,
                };
                (g, result, Some(build.alignment))
            }
            Some(anchor) => {
                let mut g = self.global.clone();
                let result = merge(&mut g, &local, anchor, &self.layout)?;
                (g, result, None)
            }
        };
        record.merge_result = merge_result;
        record.alignment = alignment;
        if record.step_index == 0 {
            self.style = style_fragment(&record.user_text);
        }
        self.global = global;
        let mut warnings = record.warnings.clone();
        if !record.merge_result.report.converged {
            warnings.push("layout did not converge".into());
        }
        let outcome = StepOutcome {
            step_index: record.step_index,
            new_nids: record.merge_result.new_nids(),
            report: record.merge_result.report.clone(),
            repairs: record.repairs.clone(),
            warnings,
            revision: self.global.revision(),
        };
        self.log.push(LogEntry::Step(Box::new(record)));
        Ok(outcome)
    }

    /// One generation step. On error the session is unchanged.
    pub fn run_step(
        &mut self,
        backend: &dyn Backend,
        anchor: Option<Nid>,
        text: &str,
        seed: u64,
    ) -> Result<StepOutcome, PipelineError> {
        let record = self.prepare_step(backend, anchor, text, seed)?;
        let mut next = self.clone();
        let outcome = next.apply_step(record)?;
        *self = next;
        Ok(outcome)
    }

    /// Pose edit followed by a layout pass, as one revision.
    pub fn modify_node_pose(&mut self, nid: Nid, pos: Vec3, rot: Vec3) -> Result<LayoutReport, PipelineError> {
        let mut g = self.global.clone();
        let revision = g.revision();
        g.modify_node_pose(nid, pos, rot)?;
        let report = optimize_layout(&mut g, &self.layout)?;
        g.set_revision(revision + 1);
        self.global = g;
        self.log.push(LogEntry::EditPose {
            nid,
            pos,
            rot,
            report: report.clone(),
        });
        Ok(report)
    }

    pub fn remove_node(&mut self, nid: Nid, cascade: bool) -> Result<Vec<Nid>, PipelineError> {
        let mut g = self.global.clone();
        let revision = g.revision();
        let removed = g.remove_node(nid, cascade)?;
        g.set_revision(revision + 1);
        self.global = g;
        self.log.push(LogEntry::Remove {
            nid,
            cascade,
            removed: removed.clone(),
        });
        Ok(removed)
    }
}

/// Rebuilds the global graph from a log. With a backend every step is
/// regenerated and must match its record; without one the recorded local
/// scenes are composed again.
pub fn replay(log: &[LogEntry], backend: Option<&dyn Backend>) -> Result<SceneSession, ReplayError> {
    let mut s = SceneSession::new("replay");
    for (entry, e) in log.iter().enumerate() {
        let failed = |error| ReplayError::Failed { entry, error };
        match e {
            LogEntry::Step(rec) => {
                if rec.step_index != s.steps_done() {
                    return Err(ReplayError::Malformed {
                        entry,
                        detail: format!("step index {} where {} was expected", rec.step_index, s.steps_done()),
                    });
                }
                let mut bare = StepRecord::clone(rec);
                bare.merge_result = MergeResult::default();
                bare.alignment = None;
                if let Some(b) = backend {
                    let fresh = s.prepare_step(b, rec.anchor_nid, &rec.user_text, rec.seed).map_err(failed)?;
                    if fresh != bare {
                        return Err(ReplayError::Divergence {
                            entry,
                            detail: "regenerated local scene differs from the record".into(),
                        });
                    }
                }
                s.apply_step(bare).map_err(failed)?;
                let LogEntry::Step(redone) = s.log.last().expect("just pushed") else {
                    unreachable!()
                };
                if redone != rec {
                    return Err(ReplayError::Divergence {
                        entry,
                        detail: "composition result differs from the record".into(),
                    });
                }
            }
            LogEntry::EditPose { nid, pos, rot, report } => {
                let redone = s.modify_node_pose(*nid, *pos, *rot).map_err(failed)?;
                if &redone != report {
                    return Err(ReplayError::Divergence {
                        entry,
                        detail: "layout report differs from the record".into(),
                    });
                }
            }
            LogEntry::Remove { nid, cascade, removed } => {
                if &s.remove_node(*nid, *cascade).map_err(failed)? != removed {
                    return Err(ReplayError::Divergence {
                        entry,
                        detail: "removed set differs from the record".into(),
                    });
                }
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::stability_violations;
    use crate::pipeline::{AdapterFailure, FailureCause, PerceivedObject, ProceduralBackend};
    use crate::graph::RelationEdge;

    fn bedroom(seed: u64) -> SceneSession {
        let mut s = SceneSession::new("t");
        s.run_step(&ProceduralBackend::new(), None, "a cozy bedroom", seed).unwrap();
        s
    }

    #[test]
    fn style_extraction() {
        assert_eq!(style_fragment("a bedroom in rustic cabin style"), "rustic cabin style");
        assert_eq!(style_fragment("Scandinavian style, a desk"), "Scandinavian style");
        assert_eq!(style_fragment("a desk"), "");
    }

    #[test]
    fn bedroom_step_zero() {
        let s = bedroom(42);
        let g = &s.global;
        assert!(g.len() >= 4);
        assert_eq!(g.node(0).unwrap().category, "floor");
        assert_eq!(g.strong_roots(), vec![0]);
        assert!(g.validate().is_empty());
        assert!(stability_violations(g, 0.0, 1e-6).is_empty());
        assert_eq!(g.revision(), 1);
        assert_eq!(s.steps_done(), 1);
        let LogEntry::Step(rec) = &s.log[0] else { panic!() };
        assert!(rec.prompt.starts_with(super::super::T_ISO));
        assert!(rec.artifact.starts_with("proc-img:"));
    }

    #[test]
    fn later_prompt_has_no_iso() {
        let mut s = bedroom(1);
        let bed = s.global.nodes().find(|n| n.category == "bed").unwrap().nid;
        s.run_step(&ProceduralBackend::new(), Some(bed), "two pillows", 2).unwrap();
        let rec = s.last_step().unwrap();
        assert!(rec.prompt_bundle.iso.is_none());
        assert!(!rec.prompt.contains(super::super::T_ISO));
        assert!(rec.prompt_bundle.global.contains("existing: floor"));
        assert_eq!(rec.merge_result.nid_map.len(), 2);
        for nid in rec.merge_result.new_nids() {
            assert_eq!(s.global.strong_parent(nid), Some(bed));
        }
        assert_eq!(s.global.revision(), 2);
    }

    #[test]
    fn unknown_anchor_leaves_session() {
        let mut s = bedroom(3);
        let before = s.clone();
        let err = s.run_step(&ProceduralBackend::new(), Some(999), "a lamp", 4).unwrap_err();
        assert_eq!(err, PipelineError::UnknownAnchor(Some(999)));
        assert!(s.global.content_eq(&before.global));
        assert_eq!(s.log, before.log);
        assert_eq!(s.global.revision(), before.global.revision());
    }

    #[test]
    fn unknown_words_add_nothing() {
        let mut s = bedroom(5);
        let len = s.global.len();
        let out = s.run_step(&ProceduralBackend::new(), Some(0), "a flobnark", 6).unwrap();
        assert!(out.new_nids.is_empty());
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(s.global.len(), len);
        assert_eq!(s.global.revision(), 2);
    }

    #[test]
    fn same_seed_same_session() {
        let base = bedroom(9);
        let run = |mut s: SceneSession| {
            s.run_step(&ProceduralBackend::new(), Some(1), "a lamp and a book", 11).unwrap();
            serde_json::to_vec(&s.log).unwrap()
        };
        assert_eq!(run(base.clone()), run(base));
    }

    #[test]
    fn edit_and_remove_bump_once() {
        let mut s = bedroom(12);
        let bed = s.global.nodes().find(|n| n.category == "bed").unwrap().clone();
        let rev = s.global.revision();
        s.modify_node_pose(bed.nid, bed.pos + Vec3::new(0.5, 0.0, 0.0), bed.rot).unwrap();
        assert_eq!(s.global.revision(), rev + 1);
        s.remove_node(bed.nid, true).unwrap();
        assert_eq!(s.global.revision(), rev + 2);
        let replayed = replay(&s.log, Some(&ProceduralBackend::new())).unwrap();
        assert!(replayed.global.content_eq(&s.global));
        assert_eq!(replayed.global.revision(), s.global.revision());
    }

    #[test]
    fn replay_empty_and_one_step() {
        assert!(replay(&[], None).unwrap().global.is_empty());
        let s = bedroom(13);
        let r = replay(&s.log, None).unwrap();
        assert!(r.global.content_eq(&s.global));
    }

    #[test]
    fn replay_detects_tampering() {
        let mut s = bedroom(14);
        s.run_step(&ProceduralBackend::new(), Some(0), "a chair", 15).unwrap();
        let mut log = s.log.clone();
        let LogEntry::Step(rec) = &mut log[1] else { panic!() };
        rec.seed += 1;
        assert!(matches!(
            replay(&log, Some(&ProceduralBackend::new())),
            Err(ReplayError::Divergence { entry: 1, .. })
        ));
        let mut log = s.log.clone();
        let LogEntry::Step(rec) = &mut log[1] else { panic!() };
        rec.step_index = 5;
        assert!(matches!(replay(&log, None), Err(ReplayError::Malformed { entry: 1, .. })));
    }

    struct Broken;

    impl Backend for Broken {
        fn list_objects(&self, _: &str, _: &str, _: u64) -> Result<Vec<ObjectSpec>, AdapterFailure> {
            Ok(vec![ObjectSpec::new("desk", Vec3::new(1.0, 0.5, 0.7), 1)])
        }
        fn scene_prompt(&self, _: &[ObjectSpec], _: &str, _: u64) -> Result<String, AdapterFailure> {
            Ok("a desk".into())
        }
        fn generate_image(&self, _: &str, _: u64) -> Result<String, AdapterFailure> {
            Ok("img".into())
        }
        fn reconstruct(&self, _: &str, objs: &[ObjectSpec], _: u64) -> Result<Vec<PerceivedObject>, AdapterFailure> {
            Ok(objs
                .iter()
                .enumerate()
                .map(|(i, o)| PerceivedObject {
                    category: o.category.clone(),
                    pos: Vec3::new(i as f64, 0.0, 0.5),
                    yaw: 0.0,
                    half_extents: o.approx_extents / 2.0,
                    scale: 1.0,
                })
                .collect())
        }
        fn estimate_relations(&self, _: &str, _: &[PerceivedObject], _: u64) -> Result<Vec<RelationEdge>, AdapterFailure> {
            Err(AdapterFailure {
                stage: Stage::RelationEstimator,
                cause: FailureCause::Timeout,
            })
        }
    }

    #[test]
    fn adapter_failure_is_atomic() {
        let mut s = bedroom(16);
        let before = s.clone();
        let err = s.run_step(&Broken, Some(1), "a desk", 1).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Adapter(AdapterFailure {
                stage: Stage::RelationEstimator,
                cause: FailureCause::Timeout
            })
        ));
        assert!(s.global.content_eq(&before.global));
        assert_eq!(s.log, before.log);
    }
}
