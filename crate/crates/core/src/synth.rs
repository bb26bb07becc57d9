//! Seeded synthetic floorplans and geometric augmentation.
//!
//! Each symbol is a small parametric template whose primitives touch
//! end-to-end, placed with continuous rotation and no overlap. Short isolated
//! lines act as unlabeled clutter.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Vec2;
use crate::io::{write_atomic, IoError};
use crate::vgio::{serialize_document, Category, Document, Geometry, Primitive};

/// Template names, things first.
pub const THING_NAMES: [&str; 6] = ["door", "window", "table", "chair", "sink", "lamp"];
pub const STUFF_NAMES: [&str; 2] = ["wall", "railing"];
const THING_COLORS: [&str; 6] = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4"];
const STUFF_COLORS: [&str; 2] = ["#404040", "#bfa000"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub thing_classes: usize,
    pub stuff_classes: usize,
    pub symbols_min: usize,
    pub symbols_max: usize,
    pub canvas: f64,
    pub clutter: usize,
    /// Symbol size multiplier range.
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            thing_classes: 6,
            stuff_classes: 2,
            symbols_min: 3,
            symbols_max: 5,
            canvas: 200.0,
            clutter: 4,
            scale_min: 0.8,
            scale_max: 1.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.thing_classes > THING_NAMES.len() || self.stuff_classes > STUFF_NAMES.len() {
            return Err(format!(
                "at most {} thing and {} stuff classes are available",
                THING_NAMES.len(),
                STUFF_NAMES.len()
            ));
        }
        if self.thing_classes + self.stuff_classes == 0 {
            return Err("at least one class is required".into());
        }
        if self.symbols_min > self.symbols_max {
            return Err("symbols_min exceeds symbols_max".into());
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err("scale range must be positive and ordered".into());
        }
        if !(self.canvas >= 4.0 * BASE_SIZE * self.scale_max) {
            return Err(format!("canvas must be at least {} px", 4.0 * BASE_SIZE * self.scale_max));
        }
        Ok(())
    }

    /// Category ids `1..`: things, then stuff.
    pub fn categories(&self) -> Vec<Category> {
        let things = (0..self.thing_classes).map(|i| (THING_NAMES[i], true, THING_COLORS[i]));
        let stuff = (0..self.stuff_classes).map(|i| (STUFF_NAMES[i], false, STUFF_COLORS[i]));
        things
            .chain(stuff)
            .enumerate()
            .map(|(i, (name, is_thing, color))| Category {
                id: i as i64 + 1,
                name: name.into(),
                is_thing,
                color: color.into(),
            })
            .collect()
    }

    /// Per-document seed derived from the master seed and the document index.
    pub fn doc_seed(&self, index: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng.gen()
    }
}

/// Template size at unit scale, px.
pub const BASE_SIZE: f64 = 20.0;

fn line(a: (f64, f64), b: (f64, f64)) -> Geometry {
    Geometry::Line {
        v1: Vec2::new(a.0, a.1),
        v2: Vec2::new(b.0, b.1),
    }
}

fn rect(w: f64, h: f64) -> Vec<Geometry> {
    vec![
        line((0.0, 0.0), (w, 0.0)),
        line((w, 0.0), (w, h)),
        line((w, h), (0.0, h)),
        line((0.0, h), (0.0, 0.0)),
    ]
}

/// Primitive geometry of a template in local coordinates (size `s`), centered
/// roughly at the origin. Stuff templates draw their length from `rng`.
pub fn template(name: &str, s: f64, rng: &mut impl Rng) -> Vec<Geometry> {
    let mut g = match name {
        "door" => vec![
            line((0.0, 0.0), (0.0, s)),
            Geometry::Arc {
                center: Vec2::ZERO,
                radius: s,
                a0: 0.0,
                a1: FRAC_PI_2,
            },
            line((0.0, 0.0), (s, 0.0)),
        ],
        "window" => {
            let (w, h) = (1.5 * s, 0.4 * s);
            vec![
                line((0.0, 0.0), (w, 0.0)),
                line((w, 0.0), (w, h / 2.0)),
                line((w, h / 2.0), (w, h)),
                line((w, h), (0.0, h)),
                line((0.0, h), (0.0, h / 2.0)),
                line((0.0, h / 2.0), (0.0, 0.0)),
                line((0.0, h / 2.0), (w, h / 2.0)),
            ]
        }
        "table" => {
            let (w, h) = (1.2 * s, 0.8 * s);
            let mut r = rect(w, h);
            r.push(line((0.0, 0.0), (w, h)));
            r.push(line((w, 0.0), (0.0, h)));
            r
        }
        "chair" => {
            let a = 0.6 * s;
            let mut r = rect(a, a);
            r.push(Geometry::Arc {
                center: Vec2::new(a / 2.0, a),
                radius: a / 2.0,
                a0: 0.0,
                a1: PI,
            });
            r
        }
        "sink" => vec![
            Geometry::Ellipse {
                center: Vec2::ZERO,
                rx: 0.6 * s,
                ry: 0.4 * s,
                rotation: 0.0,
            },
            Geometry::Circle {
                center: Vec2::ZERO,
                radius: 0.12 * s,
            },
        ],
        "lamp" => {
            let r = 0.3 * s;
            let mut v = vec![Geometry::Circle {
                center: Vec2::ZERO,
                radius: r,
            }];
            for k in 0..4 {
                let t = k as f64 * FRAC_PI_2 + PI / 4.0;
                v.push(line((0.0, 0.0), (1.6 * r * t.cos(), 1.6 * r * t.sin())));
            }
            v
        }
        "wall" => {
            let segs = rng.gen_range(2..=3);
            let len = s * rng.gen_range(2.5..4.0);
            let t = 0.3 * s;
            let step = len / segs as f64;
            let mut v = vec![line((0.0, 0.0), (0.0, t)), line((len, 0.0), (len, t))];
            for k in 0..segs {
                let (x0, x1) = (k as f64 * step, (k + 1) as f64 * step);
                v.push(line((x0, 0.0), (x1, 0.0)));
                v.push(line((x0, t), (x1, t)));
            }
            v
        }
        "railing" => {
            let segs = rng.gen_range(3..=4);
            let step = 0.8 * s;
            let mut v = Vec::new();
            for k in 0..segs {
                let (x0, x1) = (k as f64 * step, (k + 1) as f64 * step);
                v.push(line((x0, 0.0), (x1, 0.0)));
            }
            for k in 0..=segs {
                let x = k as f64 * step;
                v.push(line((x, 0.0), (x, 0.25 * s)));
            }
            v
        }
        _ => panic!("unknown template {name}"),
    };
    // center on the bounding box
    let (lo, hi) = bounds(&g);
    let c = lo.midpoint(hi);
    for p in &mut g {
        *p = p.transformed(|v| v - c, |l| l, |a| a);
    }
    g
}

fn extreme_points(g: &Geometry) -> Vec<Vec2> {
    match *g {
        Geometry::Line { v1, v2 } => vec![v1, v2],
        Geometry::Arc { center, radius, .. } | Geometry::Circle { center, radius } => vec![
            center + Vec2::new(radius, radius),
            center - Vec2::new(radius, radius),
        ],
        Geometry::Ellipse { center, rx, ry, .. } => {
            let r = rx.max(ry);
            vec![center + Vec2::new(r, r), center - Vec2::new(r, r)]
        }
    }
}

fn bounds(gs: &[Geometry]) -> (Vec2, Vec2) {
    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in gs.iter().flat_map(extreme_points) {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (lo, hi)
}

fn radius_of(gs: &[Geometry]) -> f64 {
    gs.iter()
        .flat_map(extreme_points)
        .map(Vec2::norm)
        .fold(0.0, f64::max)
}

/// Clearance kept between placed items, px.
const MARGIN: f64 = 3.0;
const MAX_TRIES: usize = 200;

/// Result of generating one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub document: Document,
    /// Symbols that could not be placed.
    pub dropped: usize,
}

pub fn generate_document(cfg: &SynthConfig, id: &str, doc_seed: u64) -> Result<Generated, String> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(doc_seed);
    let cats = cfg.categories();
    let count = rng.gen_range(cfg.symbols_min..=cfg.symbols_max);
    let mut placed: Vec<(Vec2, f64)> = Vec::new();
    let mut prims = Vec::new();
    let mut next_instance = vec![0i64; cats.len()];
    let mut dropped = 0;
    for _ in 0..count {
        let ci = rng.gen_range(0..cats.len());
        let cat = &cats[ci];
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let local = template(&cat.name, BASE_SIZE * scale, &mut rng);
        let r = radius_of(&local);
        let theta = rng.gen_range(0.0..TAU);
        let Some(pos) = place(&mut rng, cfg.canvas, r, &placed) else {
            dropped += 1;
            continue;
        };
        placed.push((pos, r));
        let instance = if cat.is_thing {
            next_instance[ci] += 1;
            next_instance[ci] - 1
        } else {
            -1
        };
        for g in &local {
            let g = g.transformed(|v| pos + v.rotate(theta), |l| l, |a| a + theta);
            prims.push(Primitive::new(g, Some(cat.id), instance)?);
        }
    }
    for _ in 0..cfg.clutter {
        let len = rng.gen_range(3.0..8.0);
        let Some(pos) = place(&mut rng, cfg.canvas, len / 2.0, &placed) else {
            dropped += 1;
            continue;
        };
        placed.push((pos, len / 2.0));
        let d = Vec2::from_polar(len / 2.0, rng.gen_range(0.0..TAU));
        prims.push(Primitive::new(Geometry::Line { v1: pos - d, v2: pos + d }, None, -1)?);
    }
    if dropped > 0 {
        log::warn!("document {id}: {dropped} items could not be placed");
    }
    Ok(Generated {
        document: Document {
            id: id.to_string(),
            width: cfg.canvas,
            height: cfg.canvas,
            categories: cats,
            primitives: prims,
        },
        dropped,
    })
}

fn place(rng: &mut impl Rng, canvas: f64, r: f64, placed: &[(Vec2, f64)]) -> Option<Vec2> {
    if 2.0 * r >= canvas {
        return None;
    }
    for _ in 0..MAX_TRIES {
        let p = Vec2::new(rng.gen_range(r..canvas - r), rng.gen_range(r..canvas - r));
        if placed.iter().all(|&(q, rq)| p.dist(q) > r + rq + MARGIN) {
            return Some(p);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentOps {
    pub rotate: bool,
    pub flip: bool,
    pub scale: bool,
    pub shift: bool,
}

impl AugmentOps {
    pub const NONE: AugmentOps = AugmentOps {
        rotate: false,
        flip: false,
        scale: false,
        shift: false,
    };
    pub const ALL: AugmentOps = AugmentOps {
        rotate: true,
        flip: true,
        scale: true,
        shift: true,
    };

    pub fn any(&self) -> bool {
        self.rotate || self.flip || self.scale || self.shift
    }
}

/// A similarity transform about the canvas center, applied as
/// flip, then rotate, then scale, then shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: f64,
    /// Mirror `y` about the canvas center line.
    pub flip: bool,
    pub scale: f64,
    pub shift: Vec2,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rotation: 0.0,
        flip: false,
        scale: 1.0,
        shift: Vec2::ZERO,
    };

    pub fn sample(ops: AugmentOps, canvas: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::IDENTITY;
        if ops.rotate {
            t.rotation = rng.gen_range(0.0..TAU);
        }
        if ops.flip {
            t.flip = rng.gen_bool(0.5);
        }
        if ops.scale {
            t.scale = rng.gen_range(0.8..1.2);
        }
        if ops.shift {
            let m = 0.1 * canvas;
            t.shift = Vec2::new(rng.gen_range(-m..m), rng.gen_range(-m..m));
        }
        t
    }
}

/// Transformed copy of `doc`; labels and primitive order are kept.
pub fn apply_transform(doc: &Document, t: &Transform) -> Result<Document, String> {
    let c = Vec2::new(doc.width / 2.0, doc.height / 2.0);
    let map = |v: Vec2| {
        let mut d = v - c;
        if t.flip {
            d.y = -d.y;
        }
        c + d.rotate(t.rotation) * t.scale + t.shift
    };
    let primitives = doc
        .primitives
        .iter()
        .map(|p| {
            let mut g = *p.geometry();
            if t.flip {
                // mirroring reverses orientation: the ccw sweep a0→a1 becomes -a1→-a0
                g = match g {
                    Geometry::Arc { center, radius, a0, a1 } => Geometry::Arc {
                        center,
                        radius,
                        a0: -a1,
                        a1: -a0,
                    },
                    Geometry::Ellipse { center, rx, ry, rotation } => Geometry::Ellipse {
                        center,
                        rx,
                        ry,
                        rotation: -rotation,
                    },
                    other => other,
                };
            }
            let g = g.transformed(map, |l| l * t.scale, |a| a + t.rotation);
            Primitive::new(g, p.semantic, p.instance)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Document {
        primitives,
        ..doc.clone()
    })
}

pub fn augment(doc: &Document, ops: AugmentOps, seed: u64) -> Result<Document, String> {
    if !ops.any() {
        return Ok(doc.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_transform(doc, &Transform::sample(ops, doc.width.max(doc.height), &mut rng))
}

/// JSON manifest written next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub categories: Vec<Category>,
    pub documents: Vec<ManifestDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDoc {
    pub file: String,
    pub id: String,
    pub seed: u64,
    pub primitives: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// `n` documents with ids `doc_0000..` and their manifest.
pub fn generate_corpus(cfg: &SynthConfig, n: usize) -> Result<(Vec<Document>, Manifest), String> {
    let mut docs = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("doc_{i:04}");
        let seed = cfg.doc_seed(i as u64);
        let g = generate_document(cfg, &id, seed)?;
        entries.push(ManifestDoc {
            file: format!("{id}.json"),
            id,
            seed,
            primitives: g.document.primitives.len(),
        });
        docs.push(g.document);
    }
    Ok((
        docs,
        Manifest {
            config: cfg.clone(),
            categories: cfg.categories(),
            documents: entries,
        },
    ))
}

/// Writes every document as `<id>.json` plus the manifest into `dir`.
pub fn write_corpus(dir: &Path, docs: &[Document], manifest: &Manifest) -> Result<(), IoError> {
    for (d, entry) in docs.iter().zip(&manifest.documents) {
        write_atomic(&dir.join(&entry.file), &serialize_document(d))?;
    }
    let mut text = serde_json::to_vec_pretty(manifest).map_err(|e| IoError::Format(e.to_string()))?;
    text.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conngraph::{connection_stats, raw_connections, ConnectionGraph};
    use crate::points::build_point_set;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_document(&cfg, "a", 11).unwrap();
        let b = generate_document(&cfg, "a", 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn templates_are_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in THING_NAMES.iter().chain(&STUFF_NAMES) {
            let prims: Vec<Primitive> = template(name, BASE_SIZE, &mut rng)
                .into_iter()
                .map(|g| Primitive::new(g, None, -1).unwrap())
                .collect();
            let g = ConnectionGraph {
                neighbors: raw_connections(&prims, 1.0).unwrap(),
                epsilon: 1.0,
                cap: usize::MAX,
            };
            assert_eq!(connection_stats(&g).components, 1, "{name}");
        }
    }

    #[test]
    fn single_door_count() {
        let cfg = SynthConfig {
            thing_classes: 1,
            stuff_classes: 0,
            symbols_min: 1,
            symbols_max: 1,
            clutter: 0,
            ..Default::default()
        };
        let d = generate_document(&cfg, "d", 5).unwrap().document;
        assert_eq!(d.primitives.len(), 3);
        assert!(d.validate().is_ok());
    }

    #[test]
    fn augmentation_examples() {
        let d = generate_document(&SynthConfig::default(), "a", 3).unwrap().document;
        let base = build_point_set(&d);
        let full = Transform {
            rotation: TAU,
            ..Transform::IDENTITY
        };
        let r = build_point_set(&apply_transform(&d, &full).unwrap());
        for (p, q) in base.points.iter().zip(&r.points) {
            let da = crate::geom::angle_diff(p.angle, q.angle);
            assert!(da < 1e-9 && (p.length - q.length).abs() < 1e-9);
        }
        let s2 = Transform {
            scale: 2.0,
            ..Transform::IDENTITY
        };
        let r = build_point_set(&apply_transform(&d, &s2).unwrap());
        for (p, q) in base.points.iter().zip(&r.points) {
            assert!((q.length - 2.0 * p.length).abs() < 1e-9);
            assert!(crate::geom::angle_diff(p.angle, q.angle) < 1e-9);
        }
        let f = Transform {
            flip: true,
            ..Transform::IDENTITY
        };
        let twice = apply_transform(&apply_transform(&d, &f).unwrap(), &f).unwrap();
        let r = build_point_set(&twice);
        for (p, q) in base.points.iter().zip(&r.points) {
            assert!(p.position.dist(q.position) < 1e-9);
            assert!(crate::geom::angle_diff(p.angle, q.angle) < 1e-9);
        }
        let a = augment(&d, AugmentOps::ALL, 9).unwrap();
        assert_eq!(a.primitives.len(), d.primitives.len());
        for (p, q) in a.primitives.iter().zip(&d.primitives) {
            assert_eq!((p.semantic, p.instance), (q.semantic, q.instance));
        }
    }
}
