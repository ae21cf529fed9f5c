//! Engine for building 3D scenes step by step as a progressive hierarchical
//! spatial-semantic graph.
//!
//! Each step generates a local sub-scene around an anchor object, optimizes
//! its layout and merges it into the global graph.

pub mod alignment;
pub mod composition;
pub mod geometry;
pub mod graph;
pub mod layout;
pub mod persistence;
pub mod pipeline;

pub use geometry::{Vec2, Vec3};
pub use graph::{Nid, ObjectNode, RelationEdge, RelationType, RelativeTransform, SceneGraph, Violation};
