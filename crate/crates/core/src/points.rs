//! Primitive-to-point encoding: every primitive becomes a 2D position plus a
//! 6-dim feature `[angle, length, onehot(kind)]`.

use std::fmt::Write;

use crate::geom::{wrap_angle, Vec2};
use crate::vgio::{Document, Geometry, Primitive, PrimitiveKind};

pub const FEATURE_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitivePoint {
    pub position: Vec2,
    /// Clockwise angle from +x to the chord direction, in `[0, 2π)`.
    pub angle: f64,
    /// Chord length; `2r` (or twice the major radius) for closed kinds.
    pub length: f64,
    pub kind: PrimitiveKind,
    pub source_index: usize,
}

impl PrimitivePoint {
    pub fn feature(&self) -> [f64; FEATURE_DIM] {
        let mut f = [0.0; FEATURE_DIM];
        f[0] = self.angle;
        f[1] = self.length;
        f[2 + self.kind.ordinal()] = 1.0;
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<PrimitivePoint>,
    /// Per-point `(semantic, instance)` when the source document is annotated.
    pub labels: Option<Vec<(Option<i64>, i64)>>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// Midpoint of the chord for lines and arcs, center for circles and ellipses.
pub fn primitive_position(p: &Primitive) -> Vec2 {
    match p.endpoints() {
        Some((v1, v2)) => v1.midpoint(v2),
        None => p.center().expect("closed primitive has a center"),
    }
}

/// `(angle, length)` of a primitive, see [`PrimitivePoint`].
pub fn angle_and_length(p: &Primitive) -> (f64, f64) {
    match (p.endpoints(), *p.geometry()) {
        (Some((v1, v2)), _) => {
            let d = v2 - v1;
            // y grows upward, so a clockwise angle is the negated math angle
            (wrap_angle(-d.y.atan2(d.x)), d.norm())
        }
        (None, Geometry::Circle { radius, .. }) => (0.0, 2.0 * radius),
        (None, Geometry::Ellipse { rx, ry, .. }) => (0.0, 2.0 * rx.max(ry)),
        (None, _) => unreachable!("open primitives have endpoints"),
    }
}

pub fn primitive_feature(p: &Primitive) -> [f64; FEATURE_DIM] {
    let (angle, length) = angle_and_length(p);
    PrimitivePoint {
        position: Vec2::ZERO,
        angle,
        length,
        kind: p.kind(),
        source_index: 0,
    }
    .feature()
}

pub fn build_point_set(doc: &Document) -> PointSet {
    let points = doc
        .primitives
        .iter()
        .enumerate()
        .map(|(source_index, p)| {
            let (angle, length) = angle_and_length(p);
            PrimitivePoint {
                position: primitive_position(p),
                angle,
                length,
                kind: p.kind(),
                source_index,
            }
        })
        .collect();
    let labeled = doc.primitives.iter().any(|p| p.semantic.is_some());
    let labels = labeled.then(|| doc.primitives.iter().map(|p| (p.semantic, p.instance)).collect());
    PointSet { points, labels }
}

/// CSV with columns `x,y,alpha,l,kind,semantic,instance`; unlabeled cells are empty.
pub fn points_csv(ps: &PointSet) -> String {
    let mut s = String::from("x,y,alpha,l,kind,semantic,instance\n");
    for (i, p) in ps.points.iter().enumerate() {
        let (sem, inst) = match &ps.labels {
            Some(l) => (l[i].0.map_or(String::new(), |v| v.to_string()), l[i].1.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(
            s,
            "{},{},{},{},{},{sem},{inst}",
            p.position.x,
            p.position.y,
            p.angle,
            p.length,
            p.kind.name()
        )
        .unwrap();
    }
    s
}
