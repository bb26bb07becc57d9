//! Vector-graphics documents: the canonical JSON format, a best-effort SVG
//! importer, and a colored SVG renderer for panoptic results.

mod json;
mod render;
mod svg;

pub use json::{parse_document, parse_prediction, serialize_document, serialize_prediction};
pub use render::render_panoptic;
pub use svg::{import_svg, SvgImport};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VgioError {
    #[error("json: {0}")]
    Json(String),
    #[error("xml: {0}")]
    Xml(String),
    #[error("primitive {index}: {msg}")]
    Schema { index: usize, msg: String },
    #[error("document: {0}")]
    Document(String),
    #[error("primitive {index}: unknown kind {kind:?}")]
    UnknownKind { index: usize, kind: String },
    #[error("primitive {index}: unknown semantic id {id}")]
    UnknownSemantic { index: usize, id: i64 },
    #[error("primitive {index}: degenerate zero-length line")]
    DegenerateLine { index: usize },
    #[error("prediction: no entry for primitive {index}")]
    MissingPrediction { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Line,
    Arc,
    Circle,
    Ellipse,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 4] = [
        PrimitiveKind::Line,
        PrimitiveKind::Arc,
        PrimitiveKind::Circle,
        PrimitiveKind::Ellipse,
    ];

    /// Position in the one-hot encoding (line, arc, circle, ellipse).
    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Line => "line",
            PrimitiveKind::Arc => "arc",
            PrimitiveKind::Circle => "circle",
            PrimitiveKind::Ellipse => "ellipse",
        }
    }

    pub fn is_closed(self) -> bool {
        matches!(self, PrimitiveKind::Circle | PrimitiveKind::Ellipse)
    }
}

/// Shape parameters of a primitive. Arc angles are radians, counterclockwise
/// from `a0` to `a1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Line { v1: Vec2, v2: Vec2 },
    Arc { center: Vec2, radius: f64, a0: f64, a1: f64 },
    Circle { center: Vec2, radius: f64 },
    Ellipse { center: Vec2, rx: f64, ry: f64, rotation: f64 },
}

impl Geometry {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Geometry::Line { .. } => PrimitiveKind::Line,
            Geometry::Arc { .. } => PrimitiveKind::Arc,
            Geometry::Circle { .. } => PrimitiveKind::Circle,
            Geometry::Ellipse { .. } => PrimitiveKind::Ellipse,
        }
    }

    /// Applies `f` to every point-valued parameter and `len` to every length.
    /// `angle` maps arc/ellipse orientation angles.
    pub fn transformed(
        &self,
        f: impl Fn(Vec2) -> Vec2,
        len: impl Fn(f64) -> f64,
        angle: impl Fn(f64) -> f64,
    ) -> Geometry {
        match *self {
            Geometry::Line { v1, v2 } => Geometry::Line { v1: f(v1), v2: f(v2) },
            Geometry::Arc { center, radius, a0, a1 } => Geometry::Arc {
                center: f(center),
                radius: len(radius),
                a0: angle(a0),
                a1: angle(a0) + (a1 - a0),
            },
            Geometry::Circle { center, radius } => Geometry::Circle {
                center: f(center),
                radius: len(radius),
            },
            Geometry::Ellipse { center, rx, ry, rotation } => Geometry::Ellipse {
                center: f(center),
                rx: len(rx),
                ry: len(ry),
                rotation: angle(rotation),
            },
        }
    }
}

/// One drawing entity with derived chord endpoints and geodesic length.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    geometry: Geometry,
    endpoints: Option<(Vec2, Vec2)>,
    arc_length: f64,
    /// Category id, or `None` for background.
    pub semantic: Option<i64>,
    /// Instance id for thing classes, `-1` otherwise.
    pub instance: i64,
}

impl Primitive {
    /// Validates `geometry` and derives the endpoints and arc length.
    pub fn new(geometry: Geometry, semantic: Option<i64>, instance: i64) -> Result<Self, String> {
        let finite = |v: f64| v.is_finite();
        let (endpoints, arc_length) = match geometry {
            Geometry::Line { v1, v2 } => {
                if ![v1.x, v1.y, v2.x, v2.y].into_iter().all(finite) {
                    return Err("non-finite coordinate".into());
                }
                let l = v1.dist(v2);
                if l == 0.0 {
                    return Err("zero-length line".into());
                }
                (Some((v1, v2)), l)
            }
            Geometry::Arc { center, radius, a0, a1 } => {
                if ![center.x, center.y, radius, a0, a1].into_iter().all(finite) {
                    return Err("non-finite arc parameter".into());
                }
                if radius <= 0.0 {
                    return Err("arc radius must be positive".into());
                }
                let span = a1 - a0;
                if span == 0.0 || span.abs() > 2.0 * PI {
                    return Err("arc span must be nonzero and at most 2π".into());
                }
                let v1 = center + Vec2::from_polar(radius, a0);
                let v2 = center + Vec2::from_polar(radius, a1);
                (Some((v1, v2)), radius * span.abs())
            }
            Geometry::Circle { center, radius } => {
                if ![center.x, center.y, radius].into_iter().all(finite) || radius <= 0.0 {
                    return Err("circle needs a finite center and positive radius".into());
                }
                (None, 2.0 * PI * radius)
            }
            Geometry::Ellipse { center, rx, ry, rotation } => {
                if ![center.x, center.y, rx, ry, rotation].into_iter().all(finite) || rx <= 0.0 || ry <= 0.0 {
                    return Err("ellipse needs a finite center and positive radii".into());
                }
                // Ramanujan's perimeter approximation
                let h = ((3.0 * rx + ry) * (rx + 3.0 * ry)).sqrt();
                (None, PI * (3.0 * (rx + ry) - h))
            }
        };
        Ok(Primitive {
            geometry,
            endpoints,
            arc_length,
            semantic,
            instance,
        })
    }

    pub fn line(v1: Vec2, v2: Vec2) -> Result<Self, String> {
        Self::new(Geometry::Line { v1, v2 }, None, -1)
    }

    pub fn arc(center: Vec2, radius: f64, a0: f64, a1: f64) -> Result<Self, String> {
        Self::new(Geometry::Arc { center, radius, a0, a1 }, None, -1)
    }

    pub fn circle(center: Vec2, radius: f64) -> Result<Self, String> {
        Self::new(Geometry::Circle { center, radius }, None, -1)
    }

    pub fn ellipse(center: Vec2, rx: f64, ry: f64, rotation: f64) -> Result<Self, String> {
        Self::new(Geometry::Ellipse { center, rx, ry, rotation }, None, -1)
    }

    pub fn with_label(mut self, semantic: Option<i64>, instance: i64) -> Self {
        self.semantic = semantic;
        self.instance = instance;
        self
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn kind(&self) -> PrimitiveKind {
        self.geometry.kind()
    }

    /// Chord endpoints for lines and arcs; `None` for closed kinds.
    pub fn endpoints(&self) -> Option<(Vec2, Vec2)> {
        self.endpoints
    }

    pub fn center(&self) -> Option<Vec2> {
        match self.geometry {
            Geometry::Line { .. } => None,
            Geometry::Arc { center, .. } | Geometry::Circle { center, .. } | Geometry::Ellipse { center, .. } => {
                Some(center)
            }
        }
    }

    /// Points used for connection tests: both chord endpoints, or the center of a closed kind.
    pub fn connection_points(&self) -> Vec<Vec2> {
        match self.endpoints {
            Some((a, b)) => vec![a, b],
            None => vec![self.center().expect("closed kinds have a center")],
        }
    }

    pub fn arc_length(&self) -> f64 {
        self.arc_length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: i64,
    pub name: String,
    pub is_thing: bool,
    pub color: String,
}

/// One drawing: an ordered primitive list plus its category table.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub categories: Vec<Category>,
    pub primitives: Vec<Primitive>,
}

impl Document {
    pub fn category(&self, id: i64) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    /// Checks the annotation invariants; errors carry the offending primitive index.
    pub fn validate(&self) -> Result<(), VgioError> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(VgioError::Document("width and height must be positive".into()));
        }
        for (a, c) in self.categories.iter().enumerate() {
            if self.categories[..a].iter().any(|o| o.id == c.id) {
                return Err(VgioError::Document(format!("duplicate category id {}", c.id)));
            }
            if parse_color(&c.color).is_none() {
                return Err(VgioError::Document(format!("category {}: bad color {:?}", c.id, c.color)));
            }
        }
        for (index, p) in self.primitives.iter().enumerate() {
            match p.semantic {
                None => {
                    if p.instance != -1 {
                        return Err(VgioError::Schema {
                            index,
                            msg: "background primitive must have instance -1".into(),
                        });
                    }
                }
                Some(id) => {
                    let cat = self.category(id).ok_or(VgioError::UnknownSemantic { index, id })?;
                    if cat.is_thing && p.instance < 0 {
                        return Err(VgioError::Schema {
                            index,
                            msg: format!("thing class {} needs instance >= 0", cat.name),
                        });
                    }
                    if !cat.is_thing && p.instance != -1 {
                        return Err(VgioError::Schema {
                            index,
                            msg: format!("stuff class {} must have instance -1", cat.name),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        self.primitives.iter().map(Primitive::arc_length).sum()
    }
}

/// Per-primitive panoptic label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityLabel {
    pub index: usize,
    pub semantic: Option<i64>,
    pub instance: i64,
}

/// Predicted (semantic, instance) for every primitive of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticPrediction {
    pub id: String,
    pub entities: Vec<EntityLabel>,
}

impl PanopticPrediction {
    /// Ground-truth labels of `doc` in prediction form.
    pub fn from_ground_truth(doc: &Document) -> Self {
        PanopticPrediction {
            id: doc.id.clone(),
            entities: doc
                .primitives
                .iter()
                .enumerate()
                .map(|(index, p)| EntityLabel {
                    index,
                    semantic: p.semantic,
                    instance: p.instance,
                })
                .collect(),
        }
    }

    /// Labels ordered by primitive index; errors if any of `0..n` is missing.
    pub fn dense(&self, n: usize) -> Result<Vec<EntityLabel>, VgioError> {
        let mut slots: Vec<Option<EntityLabel>> = vec![None; n];
        for e in &self.entities {
            if e.index < n {
                slots[e.index] = Some(*e);
            }
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(index, s)| s.ok_or(VgioError::MissingPrediction { index }))
            .collect()
    }
}

pub(crate) fn parse_color(s: &str) -> Option<(u8, u8, u8)> {
    let h = s.strip_prefix('#')?;
    if h.len() != 6 {
        return None;
    }
    let v = u32::from_str_radix(h, 16).ok()?;
    Some(((v >> 16) as u8, (v >> 8) as u8, v as u8))
}
