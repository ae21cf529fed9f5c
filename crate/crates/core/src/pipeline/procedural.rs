//! Seeded stand-in for the language/vision stack.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{AdapterFailure, Backend, ObjectSpec, PerceivedObject};
use crate::composition::FLOOR_CATEGORY;
use crate::geometry::{world_to_local, yaw_rotate, Vec2, Vec3};
use crate::graph::{RelationEdge, RelationType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Floor,
    /// Stands on the floor.
    Furniture,
    /// Rests on furniture.
    Item,
}

#[derive(Debug, Clone, Copy)]
pub struct CatalogEntry {
    pub name: &'static str,
    /// Full size, meters.
    pub extents: [f64; 3],
    pub role: Role,
    /// Items may rest on it.
    pub surface: bool,
    /// Supporter categories tried first, in order.
    pub prefers: &'static [&'static str],
}

const fn furniture(name: &'static str, extents: [f64; 3], surface: bool) -> CatalogEntry {
    CatalogEntry {
        name,
        extents,
        role: Role::Furniture,
        surface,
        prefers: &[],
    }
}

const fn item(name: &'static str, extents: [f64; 3], prefers: &'static [&'static str]) -> CatalogEntry {
    CatalogEntry {
        name,
        extents,
        role: Role::Item,
        surface: false,
        prefers,
    }
}

const CATALOG: &[CatalogEntry] = &[
    furniture("bed", [2.0, 1.6, 0.5], true),
    furniture("nightstand", [0.5, 0.4, 0.55], true),
    furniture("wardrobe", [1.2, 0.6, 2.0], false),
    furniture("dresser", [1.2, 0.5, 0.9], true),
    furniture("desk", [1.2, 0.6, 0.75], true),
    furniture("table", [1.4, 0.9, 0.75], true),
    furniture("coffee table", [1.1, 0.6, 0.45], true),
    furniture("chair", [0.5, 0.5, 0.9], false),
    furniture("armchair", [0.9, 0.85, 0.9], false),
    furniture("sofa", [2.0, 0.9, 0.8], true),
    furniture("bookshelf", [0.9, 0.35, 1.8], false),
    furniture("cabinet", [0.8, 0.45, 0.9], true),
    furniture("tv stand", [1.5, 0.4, 0.5], true),
    furniture("counter", [2.0, 0.6, 0.9], true),
    furniture("fridge", [0.8, 0.7, 1.8], false),
    furniture("bench", [1.5, 0.4, 0.45], true),
    furniture("tent", [2.2, 2.0, 1.3], false),
    furniture("campfire", [0.8, 0.8, 0.3], false),
    furniture("log", [1.5, 0.3, 0.3], true),
    furniture("cooler", [0.6, 0.4, 0.4], true),
    item("lamp", [0.3, 0.3, 0.5], &["nightstand", "desk", "table", "dresser"]),
    item("book", [0.22, 0.15, 0.04], &["desk", "nightstand", "coffee table", "table"]),
    item("laptop", [0.35, 0.25, 0.03], &["desk", "table"]),
    item("monitor", [0.55, 0.2, 0.45], &["desk"]),
    item("keyboard", [0.45, 0.15, 0.03], &["desk"]),
    item("mug", [0.09, 0.09, 0.1], &["table", "desk", "counter", "coffee table"]),
    item("bowl", [0.2, 0.2, 0.08], &["counter", "table"]),
    item("plate", [0.25, 0.25, 0.02], &["table", "counter"]),
    item("vase", [0.15, 0.15, 0.3], &["table", "coffee table", "dresser"]),
    item("plant", [0.3, 0.3, 0.5], &["coffee table", "table", "desk"]),
    item("clock", [0.25, 0.08, 0.25], &["nightstand", "dresser", "desk"]),
    item("candle", [0.08, 0.08, 0.15], &["table", "coffee table", "nightstand"]),
    item("pillow", [0.5, 0.35, 0.12], &["bed", "sofa"]),
    item("tv", [1.2, 0.1, 0.7], &["tv stand"]),
    item("lantern", [0.2, 0.2, 0.35], &["cooler", "log"]),
    item("bottle", [0.08, 0.08, 0.3], &["table", "counter", "cooler"]),
];

/// Trigger words and the objects they imply, with counts.
type Template = (&'static [&'static str], &'static [(&'static str, u32)]);

const TEMPLATES: &[Template] = &[
    (
        &["bedroom"],
        &[("bed", 1), ("nightstand", 2), ("wardrobe", 1), ("lamp", 1), ("book", 1), ("pillow", 2)],
    ),
    (
        &["office", "study"],
        &[("desk", 1), ("chair", 1), ("bookshelf", 1), ("monitor", 1), ("keyboard", 1), ("lamp", 1)],
    ),
    (
        &["living"],
        &[("sofa", 1), ("coffee table", 1), ("tv stand", 1), ("tv", 1), ("armchair", 1), ("plant", 1)],
    ),
    (
        &["kitchen"],
        &[("counter", 1), ("fridge", 1), ("table", 1), ("chair", 2), ("bowl", 1), ("mug", 1)],
    ),
    (&["dining"], &[("table", 1), ("chair", 4), ("plate", 2), ("vase", 1)]),
    (
        &["camp", "campsite", "camping"],
        &[("tent", 1), ("campfire", 1), ("log", 2), ("cooler", 1), ("lantern", 1)],
    ),
];

pub fn catalog_entry(category: &str) -> Option<&'static CatalogEntry> {
    CATALOG.iter().find(|e| e.name == category)
}

fn role_of(category: &str, extents: Vec3) -> Role {
    if category == FLOOR_CATEGORY {
        return Role::Floor;
    }
    match catalog_entry(category) {
        Some(e) => e.role,
        None if extents.z >= 0.4 || extents.x * extents.y >= 0.5 => Role::Furniture,
        None => Role::Item,
    }
}

fn is_surface(category: &str, role: Role) -> bool {
    match role {
        Role::Floor => true,
        Role::Item => false,
        Role::Furniture => catalog_entry(category).is_none_or(|e| e.surface),
    }
}

fn count_word(w: &str) -> Option<u32> {
    let n = match w {
        "a" | "an" | "one" | "single" => 1,
        "two" | "pair" => 2,
        "three" | "several" => 3,
        "four" => 4,
        "five" => 5,
        "six" => 6,
        "seven" => 7,
        "eight" => 8,
        "nine" => 9,
        "ten" => 10,
        _ => return w.parse().ok().filter(|n| (1..=50).contains(n)),
    };
    Some(n)
}

fn singular(w: &str) -> Vec<String> {
    let mut out = vec![w.to_string()];
    if let Some(s) = w.strip_suffix("ves") {
        out.push(format!("{s}f"));
    }
    if let Some(s) = w.strip_suffix("es") {
        out.push(s.to_string());
    }
    if let Some(s) = w.strip_suffix('s') {
        out.push(s.to_string());
    }
    out
}

fn match_at(tokens: &[&str], i: usize) -> Option<(&'static CatalogEntry, usize)> {
    if i + 1 < tokens.len() {
        for tail in singular(tokens[i + 1]) {
            if let Some(e) = catalog_entry(&format!("{} {tail}", tokens[i])) {
                return Some((e, 2));
            }
        }
    }
    singular(tokens[i]).iter().find_map(|w| catalog_entry(w)).map(|e| (e, 1))
}

fn add_spec(specs: &mut Vec<ObjectSpec>, entry: &CatalogEntry, count: u32, merge_max: bool) {
    if let Some(s) = specs.iter_mut().find(|s| s.category == entry.name) {
        s.count = if merge_max { s.count.max(count) } else { s.count + count };
    } else {
        specs.push(ObjectSpec::new(entry.name, Vec3::from(entry.extents), count));
    }
}

/// Object list for a free-text request: room templates first, then every
/// catalog noun with its leading count word. Unknown words are ignored.
pub fn parse_object_list(text: &str) -> Vec<ObjectSpec> {
    let lower = text.to_lowercase();
    let tokens: Vec<&str> = lower
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();

    let mut specs = Vec::new();
    for (keys, items) in TEMPLATES {
        if tokens.iter().any(|t| keys.contains(t)) {
            for (name, count) in *items {
                add_spec(&mut specs, catalog_entry(name).expect("template noun in catalog"), *count, true);
            }
        }
    }

    let mut explicit = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match match_at(&tokens, i) {
            Some((entry, used)) => {
                let count = i.checked_sub(1).and_then(|p| count_word(tokens[p])).unwrap_or(1);
                add_spec(&mut explicit, entry, count, false);
                i += used;
            }
            None => i += 1,
        }
    }
    for s in explicit {
        let entry = catalog_entry(&s.category).expect("parsed from catalog");
        add_spec(&mut specs, entry, s.count, true);
    }
    specs
}

/// Deterministic backend built on the catalog above. Reconstructions carry
/// yaw jitter, hover above their supports, and one supported object is
/// pushed past its supporter's edge.
#[derive(Debug, Clone)]
pub struct ProceduralBackend {
    /// Yaw jitter bound, radians.
    pub yaw_jitter: f64,
    /// Hover above the support surface, meters.
    pub max_hover: f64,
    /// How far past the edge the misplaced object lands, meters.
    pub push_range: (f64, f64),
    /// Horizontal slack when deciding what supports what, meters.
    pub support_margin: f64,
}

impl Default for ProceduralBackend {
    fn default() -> Self {
        ProceduralBackend {
            yaw_jitter: 10f64.to_radians(),
            max_hover: 0.3,
            push_range: (0.02, 0.3),
            support_margin: 0.35,
        }
    }
}

const ROW_WIDTH: f64 = 4.5;
const GAP: f64 = 0.5;
const FLOOR_BORDER: f64 = 0.6;

struct Instance {
    category: String,
    extents: Vec3,
    role: Role,
    prefers: &'static [&'static str],
}

impl ProceduralBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn jitter(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(-self.yaw_jitter..=self.yaw_jitter)
    }

    fn hover(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(0.0..=self.max_hover)
    }
}

fn expand(objects: &[ObjectSpec]) -> Vec<Instance> {
    let mut out = Vec::new();
    for s in objects {
        let role = role_of(&s.category, s.approx_extents);
        let prefers = catalog_entry(&s.category).map_or(&[][..], |e| e.prefers);
        for _ in 0..s.count {
            out.push(Instance {
                category: s.category.clone(),
                extents: s.approx_extents,
                role,
                prefers,
            });
        }
    }
    out
}

fn top_of(o: &PerceivedObject) -> f64 {
    o.pos.z + o.half_extents.z * o.scale
}

fn bottom_of(o: &PerceivedObject) -> f64 {
    o.pos.z - o.half_extents.z * o.scale
}

/// Offset of `p` in `o`'s yaw frame, horizontal part only.
fn local_xy(o: &PerceivedObject, p: Vec3) -> Vec2 {
    world_to_local(p.xy(), o.pos.xy(), o.yaw)
}

impl Backend for ProceduralBackend {
    fn list_objects(&self, scene_text: &str, _global_text: &str, _seed: u64) -> Result<Vec<ObjectSpec>, AdapterFailure> {
        Ok(parse_object_list(scene_text))
    }

    fn scene_prompt(&self, objects: &[ObjectSpec], _constraints: &str, _seed: u64) -> Result<String, AdapterFailure> {
        let list: Vec<String> = objects.iter().map(|o| format!("{} {}", o.count, o.category)).collect();
        if list.is_empty() {
            return Ok(String::new());
        }
        Ok(format!("a scene with {}, each object resting on its support", list.join(", ")))
    }

    fn generate_image(&self, prompt: &str, seed: u64) -> Result<String, AdapterFailure> {
        let mut h = Sha256::new();
        h.update(prompt.as_bytes());
        h.update(seed.to_le_bytes());
        Ok(format!("proc-img:{}", hex::encode(h.finalize())))
    }

    fn reconstruct(&self, _artifact: &str, objects: &[ObjectSpec], seed: u64) -> Result<Vec<PerceivedObject>, AdapterFailure> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = expand(objects);
        let mut out: Vec<Option<PerceivedObject>> = (0..inst.len()).map(|_| None).collect();
        // supporter index per object, if any
        let mut support: Vec<Option<usize>> = vec![None; inst.len()];
        // heading before jitter
        let mut base = vec![0.0f64; inst.len()];
        let floor = inst.iter().position(|o| o.role == Role::Floor);

        // Furniture: shelf-pack rows at quarter-turn headings.
        let mut placed = Vec::new();
        let (mut x, mut y, mut row_depth) = (0.0f64, 0.0f64, 0.0f64);
        for (i, o) in inst.iter().enumerate() {
            if o.role != Role::Furniture {
                continue;
            }
            let quarter = rng.gen_range(0..4u8);
            let (w, d) = if quarter % 2 == 0 {
                (o.extents.x, o.extents.y)
            } else {
                (o.extents.y, o.extents.x)
            };
            if x > 0.0 && x + w > ROW_WIDTH {
                x = 0.0;
                y += row_depth + GAP;
                row_depth = 0.0;
            }
            placed.push((i, Vec2::new(x + w / 2.0, y + d / 2.0), f64::from(quarter) * FRAC_PI_2));
            x += w + GAP;
            row_depth = row_depth.max(d);
        }
        let (lo, hi) = placed.iter().fold(
            (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY)),
            |(lo, hi), (i, c, yaw)| {
                let h = yaw_rotate(inst[*i].extents.xy() / 2.0, *yaw).abs();
                (lo.inf(&(c - h)), hi.sup(&(c + h)))
            },
        );
        let shift = if placed.is_empty() { Vec2::zeros() } else { (lo + hi) / 2.0 };
        let half_span = if placed.is_empty() { Vec2::zeros() } else { (hi - lo) / 2.0 };

        if let Some(f) = floor {
            let e = inst[f].extents / 2.0;
            let half = Vec3::new(
                e.x.max(half_span.x + FLOOR_BORDER),
                e.y.max(half_span.y + FLOOR_BORDER),
                e.z,
            );
            out[f] = Some(PerceivedObject {
                category: inst[f].category.clone(),
                pos: Vec3::new(0.0, 0.0, -half.z),
                yaw: 0.0,
                half_extents: half,
                scale: 1.0,
            });
        }
        for (i, c, yaw) in placed {
            let half = inst[i].extents / 2.0;
            let xy = c - shift;
            out[i] = Some(PerceivedObject {
                category: inst[i].category.clone(),
                pos: Vec3::new(xy.x, xy.y, half.z + self.hover(&mut rng)),
                yaw: yaw + self.jitter(&mut rng),
                half_extents: half,
                scale: 1.0,
            });
            support[i] = floor;
            base[i] = yaw;
        }

        // Items: onto a preferred surface, any surface, or a loose row.
        let surfaces: Vec<usize> = (0..inst.len())
            .filter(|&i| inst[i].role == Role::Furniture && is_surface(&inst[i].category, inst[i].role))
            .collect();
        let mut row_x = 0.0;
        let mut loose = Vec::new();
        for i in 0..inst.len() {
            if inst[i].role != Role::Item {
                continue;
            }
            let preferred = inst[i].prefers.iter().find_map(|p| {
                let hits: Vec<usize> = surfaces.iter().copied().filter(|&s| inst[s].category == *p).collect();
                (!hits.is_empty()).then(|| hits[rng.gen_range(0..hits.len())])
            });
            let target = preferred
                .or_else(|| (!surfaces.is_empty()).then(|| surfaces[rng.gen_range(0..surfaces.len())]))
                .or(floor);
            let half = inst[i].extents / 2.0;
            let quarter = f64::from(rng.gen_range(0..4u8)) * FRAC_PI_2;
            match target {
                Some(s) => {
                    let sup = out[s].as_ref().expect("supporters placed first");
                    let room = (sup.half_extents.xy() * sup.scale * 0.8).map(|h| h.max(0.0));
                    let local = Vec2::new(rng.gen_range(-room.x..=room.x), rng.gen_range(-room.y..=room.y));
                    let xy = sup.pos.xy() + yaw_rotate(local, sup.yaw);
                    let z = top_of(sup) + half.z + self.hover(&mut rng);
                    out[i] = Some(PerceivedObject {
                        category: inst[i].category.clone(),
                        pos: Vec3::new(xy.x, xy.y, z),
                        yaw: base[s] + quarter + self.jitter(&mut rng),
                        half_extents: half,
                        scale: 1.0,
                    });
                    support[i] = Some(s);
                }
                None => {
                    loose.push(i);
                    out[i] = Some(PerceivedObject {
                        category: inst[i].category.clone(),
                        pos: Vec3::new(row_x + half.x, 0.0, half.z + self.hover(&mut rng)),
                        yaw: quarter + self.jitter(&mut rng),
                        half_extents: half,
                        scale: 1.0,
                    });
                    row_x += 2.0 * half.x + 0.15;
                }
            }
        }
        let loose_shift = row_x.max(0.15) / 2.0 - 0.075;
        for i in loose {
            if let Some(o) = out[i].as_mut() {
                o.pos.x -= loose_shift;
            }
        }

        // One supported object lands past its supporter's edge.
        let supported: Vec<usize> = (0..inst.len()).filter(|&i| support[i].is_some()).collect();
        if !supported.is_empty() {
            let i = supported[rng.gen_range(0..supported.len())];
            let s = support[i].unwrap();
            let sup = out[s].clone().expect("placed");
            let axis = rng.gen_range(0..2usize);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let over = rng.gen_range(self.push_range.0..=self.push_range.1);
            let o = out[i].as_mut().expect("placed");
            let mut local = local_xy(&sup, o.pos);
            local[axis] = sign * (sup.half_extents[axis] * sup.scale + over);
            let shift = sup.pos.xy() + yaw_rotate(local, sup.yaw) - o.pos.xy();
            // whatever rests on it comes along
            for j in (0..inst.len()).filter(|&j| j == i || support[j] == Some(i)) {
                let o = out[j].as_mut().expect("placed");
                o.pos.x += shift.x;
                o.pos.y += shift.y;
            }
        }

        Ok(out.into_iter().map(|o| o.expect("every instance placed")).collect())
    }

    fn estimate_relations(
        &self,
        _artifact: &str,
        objects: &[PerceivedObject],
        _seed: u64,
    ) -> Result<Vec<RelationEdge>, AdapterFailure> {
        let roles: Vec<Role> = objects
            .iter()
            .map(|o| role_of(&o.category, o.half_extents * 2.0))
            .collect();
        let mut edges = Vec::new();

        for (i, o) in objects.iter().enumerate() {
            if roles[i] == Role::Floor {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, s) in objects.iter().enumerate() {
                if i == j || !is_surface(&s.category, roles[j]) || (roles[i] == Role::Furniture && roles[j] != Role::Floor) {
                    continue;
                }
                let top = top_of(s);
                if bottom_of(o) < top - 0.05 {
                    continue;
                }
                let local = local_xy(s, o.pos);
                let reach = s.half_extents.xy() * s.scale + Vec2::repeat(self.support_margin);
                if local.x.abs() > reach.x || local.y.abs() > reach.y {
                    continue;
                }
                if best.is_none_or(|(_, t)| top > t) {
                    best = Some((j, top));
                }
            }
            if let Some((j, _)) = best {
                edges.push(RelationEdge::on(j as u64, i as u64));
            }
        }

        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                if roles[i] != Role::Furniture || roles[j] != Role::Furniture {
                    continue;
                }
                let d = (objects[i].pos.xy() - objects[j].pos.xy()).norm();
                if d <= 1.6 {
                    edges.push(RelationEdge::new(i as u64, j as u64, RelationType::Adjacent));
                }
            }
        }
        for (i, o) in objects.iter().enumerate() {
            if !matches!(o.category.as_str(), "chair" | "armchair" | "sofa") {
                continue;
            }
            let target = objects
                .iter()
                .enumerate()
                .filter(|(j, t)| {
                    *j != i && matches!(t.category.as_str(), "desk" | "table" | "coffee table" | "tv stand")
                })
                .map(|(j, t)| (j, (t.pos.xy() - o.pos.xy()).norm()))
                .filter(|(_, d)| *d <= 2.0)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, _)) = target {
                edges.push(RelationEdge::new(i as u64, j as u64, RelationType::Facing));
            }
        }
        Ok(edges)
    }
}
