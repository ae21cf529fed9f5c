//! Local coordinate system alignment.
//!
//! Horizontal forward vectors are clustered into two line directions with an
//! absolute-cosine K-Means, orthogonalized, and every object is snapped to the
//! nearest of the four resulting directions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Vec2, Vec3};
use crate::graph::{Nid, SceneGraph};
use crate::layout::record_relative_transforms;

/// Horizontal forward norms below this are degenerate.
pub const DEGENERATE_NORM: f64 = 1e-6;
pub const PARALLEL_EPS: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KMeansError {
    #[error("need at least two vectors, got {0}")]
    TooFewVectors(usize),
    /// All inputs lie on one line; `direction` is their sign-aligned mean.
    #[error("all vectors are parallel")]
    AllParallel { direction: Vec2 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionBasis {
    pub d1: Vec2,
    pub d2: Vec2,
}

impl DirectionBasis {
    /// Candidates in tie-break order: +d1, -d1, +d2, -d2.
    pub fn candidates(&self) -> [Vec2; 4] {
        [self.d1, -self.d1, self.d2, -self.d2]
    }
}

/// Node's local +X axis, rotated by its full orientation, projected onto the
/// ground plane and normalized. `None` when it points (nearly) vertically.
pub fn project_forward(node: &crate::graph::ObjectNode) -> Option<Vec2> {
    let f = node.rotation() * Vec3::x();
    let h = Vec2::new(f.x, f.y);
    let n = h.norm();
    (n >= DEGENERATE_NORM).then(|| h / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub c1: Vec2,
    pub c2: Vec2,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn aligned_mean(vectors: &[Vec2], reference: Vec2) -> Vec2 {
    let mut sum = Vec2::zeros();
    for v in vectors {
        if v.dot(&reference) < 0.0 {
            sum -= v;
        } else {
            sum += v;
        }
    }
    sum
}

/// Two-center K-Means on lines through the origin.
///
/// Assignment maximizes `|v . c|` (ties go to the first center); centers are
/// the normalized sum of sign-aligned members. Seeded deterministically with
/// the first vector and the vector most nearly perpendicular to it.
pub fn kmeans_abs_cosine(vectors: &[Vec2], max_iters: usize) -> Result<KMeansResult, KMeansError> {
    if vectors.len() < 2 {
        return Err(KMeansError::TooFewVectors(vectors.len()));
    }
    let mut c1 = vectors[0];
    let mut c2 = vectors[0];
    let mut least = f64::INFINITY;
    for v in vectors {
        let d = v.dot(&c1).abs();
        if d < least {
            least = d;
            c2 = *v;
        }
    }
    if least > 1.0 - PARALLEL_EPS {
        let m = aligned_mean(vectors, c1);
        return Err(KMeansError::AllParallel {
            direction: m / m.norm(),
        });
    }

    let mut assignment: Vec<usize> = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let next: Vec<usize> = vectors
            .iter()
            .map(|v| usize::from(v.dot(&c2).abs() > v.dot(&c1).abs()))
            .collect();
        let settled = next == assignment;
        assignment = next;
        if settled {
            break;
        }
        for (k, center) in [&mut c1, &mut c2].into_iter().enumerate() {
            let members: Vec<Vec2> = vectors
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == k)
                .map(|(v, _)| *v)
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = aligned_mean(&members, *center);
            let n = m.norm();
            if n > 0.0 {
                *center = m / n;
            }
        }
    }
    Ok(KMeansResult {
        c1,
        c2,
        assignment,
        iterations,
    })
}

/// d1 = c1; d2 = c2 with its d1 component removed, or c1 turned +90 degrees
/// when that residual is too short.
pub fn gram_schmidt(c1: Vec2, c2: Vec2) -> DirectionBasis {
    let d1 = c1 / c1.norm();
    let r = c2 - d1 * c2.dot(&d1);
    let n = r.norm();
    let d2 = if n < DEGENERATE_NORM {
        Vec2::new(-d1.y, d1.x)
    } else {
        let d2 = r / n;
        // one refinement step keeps |d1 . d2| at rounding level
        let d2 = d2 - d1 * d2.dot(&d1);
        d2 / d2.norm()
    };
    DirectionBasis { d1, d2 }
}

/// The candidate with the largest dot product against `f`; exact ties keep
/// the earlier candidate.
pub fn snap_direction(f: Vec2, basis: &DirectionBasis) -> Vec2 {
    let mut best = basis.d1;
    let mut best_dot = f.dot(&best);
    for c in basis.candidates().into_iter().skip(1) {
        let d = f.dot(&c);
        if d > best_dot {
            best = c;
            best_dot = d;
        }
    }
    best
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlignReport {
    pub basis: Option<DirectionBasis>,
    /// (nid, yaw before, yaw after) for every node whose yaw changed.
    pub snapped: Vec<(Nid, f64, f64)>,
    /// Nodes whose forward is vertical.
    pub skipped: Vec<Nid>,
    pub warning: Option<String>,
}

/// Estimates the dominant orthogonal direction pair of the scene's forwards.
pub fn scene_basis(graph: &SceneGraph) -> Option<DirectionBasis> {
    let forwards: Vec<Vec2> = graph.nodes().filter_map(project_forward).collect();
    basis_from_forwards(&forwards)
}

fn basis_from_forwards(forwards: &[Vec2]) -> Option<DirectionBasis> {
    match kmeans_abs_cosine(forwards, DEFAULT_MAX_ITERS) {
        Ok(k) => Some(gram_schmidt(k.c1, k.c2)),
        Err(KMeansError::AllParallel { direction }) => Some(gram_schmidt(direction, direction)),
        Err(KMeansError::TooFewVectors(_)) => None,
    }
}

/// Snaps every node with a non-degenerate forward onto the scene's dominant
/// orthogonal family. Only yaw changes; strong-edge transforms are
/// re-recorded afterwards. Fewer than two usable forwards is a no-op.
pub fn align_scene(graph: &mut SceneGraph) -> AlignReport {
    let mut report = AlignReport::default();
    let mut entries: Vec<(Nid, Vec2)> = Vec::new();
    for node in graph.nodes() {
        match project_forward(node) {
            Some(f) => entries.push((node.nid, f)),
            None => report.skipped.push(node.nid),
        }
    }
    let forwards: Vec<Vec2> = entries.iter().map(|(_, f)| *f).collect();
    let Some(basis) = basis_from_forwards(&forwards) else {
        report.warning = Some(format!(
            "alignment skipped: {} usable forward vector(s)",
            forwards.len()
        ));
        return report;
    };
    report.basis = Some(basis);

    for (nid, f) in entries {
        let target = snap_direction(f, &basis);
        let node = graph.node_mut(nid).expect("nid came from the graph");
        let current = f.y.atan2(f.x);
        let turn = wrap_angle(target.y.atan2(target.x) - current);
        if turn.abs() > 1e-12 {
            let before = node.rot.z;
            node.rot.z = before + turn;
            report.snapped.push((nid, before, node.rot.z));
        }
    }
    record_relative_transforms(graph);
    report
}
