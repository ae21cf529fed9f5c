//! Planar and boxed geometry used by layout and composition.
//!
//! Frames are right-handed with +Z up. Every "frame" in this crate is a
//! position plus a yaw about +Z; roll and pitch never enter a frame.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ObjectNode;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("cannot bound an empty set of nodes")]
    EmptySet,
}

/// Rotates `v` counterclockwise by `yaw` radians.
pub fn yaw_rotate(v: Vec2, yaw: f64) -> Vec2 {
    let (s, c) = yaw.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Rotates a 3-vector about +Z, leaving its z component untouched.
pub fn rotate_z(v: Vec3, yaw: f64) -> Vec3 {
    let xy = yaw_rotate(v.xy(), yaw);
    Vec3::new(xy.x, xy.y, v.z)
}

pub fn world_to_local(point: Vec2, frame_pos: Vec2, frame_yaw: f64) -> Vec2 {
    yaw_rotate(point - frame_pos, -frame_yaw)
}

pub fn local_to_world(point: Vec2, frame_pos: Vec2, frame_yaw: f64) -> Vec2 {
    frame_pos + yaw_rotate(point, frame_yaw)
}

/// Clamps `point` (already in the rectangle's local frame) into the closed box
/// `[-half, +half]`. Returns the clamped point and the translation that got it
/// there, which is the minimal-norm translation into the rectangle.
pub fn clamp_to_rect(point: Vec2, half_extents: Vec2) -> (Vec2, Vec2) {
    let clamped = Vec2::new(
        point.x.clamp(-half_extents.x, half_extents.x),
        point.y.clamp(-half_extents.y, half_extents.y),
    );
    (clamped, clamped - point)
}

/// A yawed rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Rect2 {
    pub center: Vec2,
    pub half_extents: Vec2,
    pub yaw: f64,
}

impl Rect2 {
    pub fn axis_aligned(center: Vec2, half_extents: Vec2) -> Self {
        Self {
            center,
            half_extents,
            yaw: 0.0,
        }
    }

    pub fn to_local(&self, point: Vec2) -> Vec2 {
        world_to_local(point, self.center, self.yaw)
    }

    pub fn to_parent(&self, point: Vec2) -> Vec2 {
        local_to_world(point, self.center, self.yaw)
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_extents.x * self.half_extents.y
    }
}

/// Closed-set membership: points on the boundary are inside.
pub fn point_in_rect(point: Vec2, rect: &Rect2) -> bool {
    let local = rect.to_local(point);
    local.x.abs() <= rect.half_extents.x && local.y.abs() <= rect.half_extents.y
}

/// Region of a supporting surface where dependents may rest, expressed in the
/// supporter's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlacementArea {
    pub rect: Rect2,
    /// Elevation of the top surface above the supporter's center.
    pub height: f64,
}

/// Top face of `node`, shrunk by `inset_ratio` on each horizontal axis.
///
/// `inset_ratio` must lie in `[0, 1)`.
pub fn top_surface(node: &ObjectNode, inset_ratio: f64) -> PlacementArea {
    debug_assert!((0.0..1.0).contains(&inset_ratio), "inset ratio {inset_ratio}");
    let keep = 1.0 - inset_ratio;
    let half = node.scaled_half_extents();
    PlacementArea {
        rect: Rect2::axis_aligned(Vec2::zeros(), Vec2::new(half.x * keep, half.y * keep)),
        height: half.z,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OrientedBoundingBox {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub yaw: f64,
}

impl OrientedBoundingBox {
    /// Expresses a world point in the box frame (box center at the origin).
    pub fn to_local(&self, point: Vec3) -> Vec3 {
        rotate_z(point - self.center, -self.yaw)
    }

    pub fn contains(&self, point: Vec3, tol: f64) -> bool {
        let local = self.to_local(point);
        (0..3).all(|i| local[i].abs() <= self.half_extents[i] + tol)
    }

    pub fn bottom(&self) -> f64 {
        self.center.z - self.half_extents.z
    }
}

/// Tightest box at the given yaw around every posed, scaled corner of `nodes`.
pub fn obb_of_nodes<'a, I>(nodes: I, yaw: f64) -> Result<OrientedBoundingBox, GeometryError>
where
    I: IntoIterator<Item = &'a ObjectNode>,
{
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for node in nodes {
        any = true;
        for corner in node.corners() {
            let local = rotate_z(corner, -yaw);
            lo = lo.inf(&local);
            hi = hi.sup(&local);
        }
    }
    if !any {
        return Err(GeometryError::EmptySet);
    }
    let mid = (lo + hi) * 0.5;
    Ok(OrientedBoundingBox {
        center: rotate_z(mid, yaw),
        half_extents: (hi - lo) * 0.5,
        yaw,
    })
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}
