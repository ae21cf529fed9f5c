use std::collections::BTreeSet;

use higs_core::geometry::{rotate_z, wrap_angle};
use higs_core::graph::{Nid, ObjectNode, RelationEdge, RelationType, SceneGraph, Violation};
use higs_core::persistence::{save_scene, SceneMeta};
use higs_core::Vec3;
use proptest::prelude::*;
use proptest::sample::Index;

#[derive(Debug, Clone)]
struct Spec {
    parent: Option<Index>,
    inside: bool,
    pos: [f64; 3],
    yaw: f64,
    half: [f64; 3],
}

fn spec() -> impl Strategy<Value = Spec> {
    (
        proptest::option::weighted(0.7, any::<Index>()),
        any::<bool>(),
        [-5.0..5.0f64, -5.0..5.0f64, 0.0..3.0f64],
        -3.2..3.2f64,
        [0.05..1.0f64, 0.05..1.0f64, 0.05..1.0f64],
    )
        .prop_map(|(parent, inside, pos, yaw, half)| Spec {
            parent,
            inside,
            pos,
            yaw,
            half,
        })
}

fn nid_of(i: usize) -> Nid {
    i as Nid * 3 + 2
}

fn build(specs: &[Spec]) -> SceneGraph {
    let mut g = SceneGraph::new();
    for (i, s) in specs.iter().enumerate() {
        g.add_node(
            ObjectNode::new(nid_of(i), format!("c{}", i % 4), Vec3::from(s.half))
                .with_pos(Vec3::from(s.pos))
                .with_yaw(s.yaw),
        )
        .unwrap();
        if let (Some(p), true) = (&s.parent, i > 0) {
            let rel = if s.inside { RelationType::Inside } else { RelationType::On };
            g.add_edge(RelationEdge::new(nid_of(p.index(i)), nid_of(i), rel)).unwrap();
        }
    }
    g
}

fn forest() -> impl Strategy<Value = Vec<Spec>> {
    prop::collection::vec(spec(), 1..25)
}

fn preorder(g: &SceneGraph, nid: Nid, out: &mut Vec<Nid>) {
    out.push(nid);
    let mut kids: Vec<Nid> = g.strong_edges().filter(|e| e.src == nid).map(|e| e.dst).collect();
    kids.sort();
    for k in kids {
        preorder(g, k, out);
    }
}

/// Pose of `nid` composed from the root through recorded transforms.
fn composed(g: &SceneGraph, nid: Nid) -> (Vec3, f64) {
    match g.strong_parent(nid) {
        None => {
            let n = g.node(nid).unwrap();
            (n.pos, n.yaw())
        }
        Some(p) => {
            let (pp, py) = composed(g, p);
            let t = g.rel_transform(p, nid).unwrap();
            (pp + rotate_z(t.translation, py), py + t.yaw_delta)
        }
    }
}

proptest! {
    #[test]
    fn random_forests_are_valid(specs in forest()) {
        let g = build(&specs);
        prop_assert!(g.validate().is_empty());
        prop_assert_eq!(g.len(), specs.len());
        let nids: BTreeSet<Nid> = g.nids().collect();
        prop_assert_eq!(nids.len(), specs.len());
        let mut children = BTreeSet::new();
        for e in g.strong_edges() {
            prop_assert!(children.insert(e.dst));
        }
        let mut seen = Vec::new();
        for r in g.strong_roots() {
            seen.push(r);
            seen.extend(g.strong_descendants(r).unwrap());
        }
        seen.sort();
        prop_assert_eq!(seen, nids.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn descendants_are_preorder_by_nid(specs in forest()) {
        let g = build(&specs);
        for nid in g.nids() {
            let mut want = Vec::new();
            preorder(&g, nid, &mut want);
            want.remove(0);
            prop_assert_eq!(g.strong_descendants(nid).unwrap(), want);
        }
    }

    #[test]
    fn add_then_cascade_remove_restores(specs in forest(), at in any::<Index>(), extra in 1usize..5) {
        let g = build(&specs);
        let before = save_scene(&g, SceneMeta::default());
        let mut h = g.clone();
        let anchor = nid_of(at.index(specs.len()));
        let base = h.max_nid().unwrap() + 1;
        for k in 0..extra as Nid {
            h.add_node(ObjectNode::new(base + k, "extra", Vec3::repeat(0.1))
                .with_pos(Vec3::new(k as f64, 0.0, 1.0))).unwrap();
            let parent = if k == 0 { anchor } else { base + k - 1 };
            h.add_edge(RelationEdge::on(parent, base + k)).unwrap();
        }
        h.add_edge(RelationEdge::new(base, anchor, RelationType::Facing)).unwrap();
        let removed = h.remove_node(base, true).unwrap();
        prop_assert_eq!(removed.len(), extra);
        prop_assert_eq!(save_scene(&h, SceneMeta::default()), before);
        prop_assert!(h.content_eq(&g));
    }

    #[test]
    fn moving_a_node_keeps_descendants_composed(specs in forest(), at in any::<Index>(), dx in -2.0..2.0f64, dyaw in -3.0..3.0f64) {
        let mut g = build(&specs);
        let nid = nid_of(at.index(specs.len()));
        let n = g.node(nid).unwrap().clone();
        g.modify_node_pose(nid, n.pos + Vec3::new(dx, -dx, 0.0), n.rot + Vec3::new(0.0, 0.0, dyaw)).unwrap();
        for d in g.strong_descendants(nid).unwrap() {
            let (pos, yaw) = composed(&g, d);
            let node = g.node(d).unwrap();
            prop_assert!((node.pos - pos).norm() <= 1e-9);
            prop_assert!(wrap_angle(node.yaw() - yaw).abs() <= 1e-9);
        }
    }

    #[test]
    fn validate_catches_each_corruption(specs in prop::collection::vec(spec(), 3..20), kind in 0usize..5) {
        let g = build(&specs);
        let nodes: Vec<ObjectNode> = g.nodes().cloned().collect();
        let mut edges: Vec<RelationEdge> = g.edges().cloned().collect();
        let mut transforms: Vec<_> = g.rel_transforms().cloned().collect();
        let (a, b) = (nid_of(0), nid_of(1));
        let expected = match kind {
            0 => {
                edges.push(RelationEdge::new(a, a, RelationType::Adjacent));
                "SelfLoop"
            }
            1 => {
                edges.push(RelationEdge::new(a, 9_999, RelationType::Adjacent));
                "DanglingEdge"
            }
            2 => {
                // two strong parents for node 2 (its real one, if any, plus a and b)
                let c = nid_of(2);
                edges.retain(|e| !(e.relation.is_strong() && e.dst == c));
                transforms.retain(|t| t.dst != c);
                for p in [a, b] {
                    edges.push(RelationEdge::inside(p, c));
                    transforms.push(higs_core::RelativeTransform::between(g.node(p).unwrap(), g.node(c).unwrap()));
                }
                "StrongParentConflict"
            }
            3 => {
                match edges.iter().position(|e| e.relation.is_strong()) {
                    Some(i) => {
                        let e = edges[i].clone();
                        transforms.retain(|t| (t.src, t.dst) != (e.src, e.dst));
                        "MissingRelTransform"
                    }
                    None => {
                        transforms.push(higs_core::RelativeTransform::between(&nodes[0], &nodes[1]));
                        "OrphanRelTransform"
                    }
                }
            }
            _ => {
                // ring a -> b -> a over fresh strong edges
                for c in [a, b] {
                    edges.retain(|e| !(e.relation.is_strong() && e.dst == c));
                    transforms.retain(|t| t.dst != c);
                }
                edges.push(RelationEdge::inside(a, b));
                edges.push(RelationEdge::inside(b, a));
                transforms.push(higs_core::RelativeTransform::between(&nodes[0], &nodes[1]));
                transforms.push(higs_core::RelativeTransform::between(&nodes[1], &nodes[0]));
                "StrongCycle"
            }
        };
        let bad = SceneGraph::from_parts(nodes, edges, transforms, 0).unwrap();
        let found: Vec<&str> = bad.validate().iter().map(Violation::name).collect();
        prop_assert!(found.contains(&expected), "{expected} not in {found:?}");
    }
}
