use serde_json::{json, Map, Value};

use super::{Category, Document, EntityLabel, Geometry, PanopticPrediction, Primitive, VgioError};
use crate::geom::Vec2;

fn schema(index: usize, msg: impl Into<String>) -> VgioError {
    VgioError::Schema { index, msg: msg.into() }
}

fn num(obj: &Map<String, Value>, key: &str, index: usize) -> Result<f64, VgioError> {
    obj.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| schema(index, format!("missing or non-numeric field {key:?}")))
}

fn label(obj: &Map<String, Value>, index: usize) -> Result<(Option<i64>, i64), VgioError> {
    let semantic = match obj.get("semantic") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_i64().ok_or_else(|| schema(index, "semantic must be an integer or null"))?),
    };
    let instance = match obj.get("instance") {
        None | Some(Value::Null) => -1,
        Some(v) => v.as_i64().ok_or_else(|| schema(index, "instance must be an integer"))?,
    };
    Ok((semantic, instance))
}

fn build(index: usize, g: Geometry, semantic: Option<i64>, instance: i64) -> Result<Primitive, VgioError> {
    Primitive::new(g, semantic, instance).map_err(|msg| {
        if matches!(g, Geometry::Line { .. }) && msg.contains("zero-length") {
            VgioError::DegenerateLine { index }
        } else {
            schema(index, msg)
        }
    })
}

/// Parses a canonical JSON document. Polylines expand in place into lines.
pub fn parse_document(bytes: &[u8]) -> Result<Document, VgioError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| VgioError::Json(e.to_string()))?;
    let root = root
        .as_object()
        .ok_or_else(|| VgioError::Json("top level must be an object".into()))?;
    let field = |k: &str| root.get(k).ok_or_else(|| VgioError::Document(format!("missing field {k:?}")));
    let id = field("id")?
        .as_str()
        .ok_or_else(|| VgioError::Document("id must be a string".into()))?
        .to_string();
    let width = field("width")?
        .as_f64()
        .ok_or_else(|| VgioError::Document("width must be a number".into()))?;
    let height = field("height")?
        .as_f64()
        .ok_or_else(|| VgioError::Document("height must be a number".into()))?;
    let categories: Vec<Category> = serde_json::from_value(field("categories")?.clone())
        .map_err(|e| VgioError::Document(format!("categories: {e}")))?;
    let raw = field("primitives")?
        .as_array()
        .ok_or_else(|| VgioError::Document("primitives must be an array".into()))?;

    let mut primitives = Vec::with_capacity(raw.len());
    for (index, item) in raw.iter().enumerate() {
        let obj = item.as_object().ok_or_else(|| schema(index, "primitive must be an object"))?;
        let kind = obj
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| schema(index, "missing kind"))?;
        let (semantic, instance) = label(obj, index)?;
        let n = |k: &str| num(obj, k, index);
        match kind {
            "line" => {
                let g = Geometry::Line {
                    v1: Vec2::new(n("x1")?, n("y1")?),
                    v2: Vec2::new(n("x2")?, n("y2")?),
                };
                primitives.push(build(index, g, semantic, instance)?);
            }
            "arc" => {
                let g = Geometry::Arc {
                    center: Vec2::new(n("cx")?, n("cy")?),
                    radius: n("r")?,
                    a0: n("a0")?,
                    a1: n("a1")?,
                };
                primitives.push(build(index, g, semantic, instance)?);
            }
            "circle" => {
                let g = Geometry::Circle {
                    center: Vec2::new(n("cx")?, n("cy")?),
                    radius: n("r")?,
                };
                primitives.push(build(index, g, semantic, instance)?);
            }
            "ellipse" => {
                let rotation = match obj.get("rot") {
                    None => 0.0,
                    Some(_) => n("rot")?,
                };
                let g = Geometry::Ellipse {
                    center: Vec2::new(n("cx")?, n("cy")?),
                    rx: n("rx")?,
                    ry: n("ry")?,
                    rotation,
                };
                primitives.push(build(index, g, semantic, instance)?);
            }
            "polyline" => {
                let pts = obj
                    .get("pts")
                    .and_then(Value::as_array)
                    .ok_or_else(|| schema(index, "polyline needs pts"))?;
                let pts: Vec<Vec2> = pts
                    .iter()
                    .map(|p| {
                        let a = p.as_array().filter(|a| a.len() == 2);
                        match a.map(|a| (a[0].as_f64(), a[1].as_f64())) {
                            Some((Some(x), Some(y))) => Ok(Vec2::new(x, y)),
                            _ => Err(schema(index, "polyline points must be [x, y] pairs")),
                        }
                    })
                    .collect::<Result<_, _>>()?;
                if pts.len() < 2 {
                    return Err(schema(index, "polyline needs at least 2 points"));
                }
                for w in pts.windows(2) {
                    let g = Geometry::Line { v1: w[0], v2: w[1] };
                    primitives.push(build(index, g, semantic, instance)?);
                }
            }
            other => {
                return Err(VgioError::UnknownKind {
                    index,
                    kind: other.to_string(),
                })
            }
        }
    }
    let doc = Document {
        id,
        width,
        height,
        categories,
        primitives,
    };
    doc.validate()?;
    Ok(doc)
}

fn primitive_json(p: &Primitive) -> Value {
    let mut v = match *p.geometry() {
        Geometry::Line { v1, v2 } => json!({"kind": "line", "x1": v1.x, "y1": v1.y, "x2": v2.x, "y2": v2.y}),
        Geometry::Arc { center, radius, a0, a1 } => {
            json!({"kind": "arc", "cx": center.x, "cy": center.y, "r": radius, "a0": a0, "a1": a1})
        }
        Geometry::Circle { center, radius } => json!({"kind": "circle", "cx": center.x, "cy": center.y, "r": radius}),
        Geometry::Ellipse { center, rx, ry, rotation } => {
            json!({"kind": "ellipse", "cx": center.x, "cy": center.y, "rx": rx, "ry": ry, "rot": rotation})
        }
    };
    v["semantic"] = p.semantic.map_or(Value::Null, Value::from);
    v["instance"] = Value::from(p.instance);
    v
}

/// Canonical JSON bytes; `parse_document` inverts this exactly.
pub fn serialize_document(doc: &Document) -> Vec<u8> {
    let v = json!({
        "id": doc.id,
        "width": doc.width,
        "height": doc.height,
        "categories": doc.categories,
        "primitives": doc.primitives.iter().map(primitive_json).collect::<Vec<_>>(),
    });
    let mut out = serde_json::to_vec_pretty(&v).expect("documents serialize");
    out.push(b'\n');
    out
}

/// Background is written as semantic `-1`; `null` is accepted on input as well.
pub fn serialize_prediction(pred: &PanopticPrediction) -> Vec<u8> {
    let entities: Vec<Value> = pred
        .entities
        .iter()
        .map(|e| json!({"index": e.index, "semantic": e.semantic.unwrap_or(-1), "instance": e.instance}))
        .collect();
    let mut out = serde_json::to_vec_pretty(&json!({"id": pred.id, "entities": entities})).expect("serializable");
    out.push(b'\n');
    out
}

pub fn parse_prediction(bytes: &[u8]) -> Result<PanopticPrediction, VgioError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| VgioError::Json(e.to_string()))?;
    let id = root
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| VgioError::Document("prediction needs a string id".into()))?
        .to_string();
    let raw = root
        .get("entities")
        .and_then(Value::as_array)
        .ok_or_else(|| VgioError::Document("prediction needs an entities array".into()))?;
    let mut entities = Vec::with_capacity(raw.len());
    for (k, e) in raw.iter().enumerate() {
        let index = e
            .get("index")
            .and_then(Value::as_u64)
            .ok_or_else(|| schema(k, "entity needs a non-negative index"))? as usize;
        let semantic = match e.get("semantic") {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_i64() {
                Some(-1) => None,
                Some(s) => Some(s),
                None => return Err(schema(k, "semantic must be an integer")),
            },
        };
        let instance = e.get("instance").and_then(Value::as_i64).unwrap_or(-1);
        entities.push(EntityLabel {
            index,
            semantic,
            instance,
        });
    }
    Ok(PanopticPrediction { id, entities })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = r##""id": "t", "width": 10, "height": 10,
        "categories": [{"id": 1, "name": "wall", "is_thing": false, "color": "#ff0000"},
                       {"id": 2, "name": "door", "is_thing": true, "color": "#00ff00"}]"##;

    fn doc(prims: &str) -> Result<Document, VgioError> {
        parse_document(format!("{{{HEAD}, \"primitives\": [{prims}]}}").as_bytes())
    }

    #[test]
    fn single_line() {
        let d = doc(r#"{"kind": "line", "x1": 0, "y1": 0, "x2": 2, "y2": 2, "semantic": 1, "instance": -1}"#).unwrap();
        assert_eq!(d.primitives.len(), 1);
        assert!((d.primitives[0].arc_length() - 2.0 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn polyline_expands_in_place() {
        let d = doc(
            r#"{"kind": "circle", "cx": 1, "cy": 1, "r": 1},
               {"kind": "polyline", "pts": [[0,0],[3,0],[3,4]], "semantic": 2, "instance": 0},
               {"kind": "line", "x1": 0, "y1": 0, "x2": 1, "y2": 0}"#,
        )
        .unwrap();
        assert_eq!(d.primitives.len(), 4);
        assert_eq!(d.primitives[1].arc_length() + d.primitives[2].arc_length(), 7.0);
        assert_eq!(d.primitives[2].semantic, Some(2));
        assert_eq!(d.primitives[3].semantic, None);
    }

    #[test]
    fn arc_from_json() {
        let d = doc(r#"{"kind": "arc", "cx": 0, "cy": 0, "r": 1, "a0": 0, "a1": 3.141592653589793}"#).unwrap();
        let (a, b) = d.primitives[0].endpoints().unwrap();
        assert!((a.x - 1.0).abs() < 1e-15 && (b.x + 1.0).abs() < 1e-15);
        assert!((d.primitives[0].arc_length() - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_index() {
        let e = doc(r#"{"kind": "line", "x1": 0, "y1": 0, "x2": 1, "y2": 0}, {"kind": "spline"}"#).unwrap_err();
        assert_eq!(e, VgioError::UnknownKind { index: 1, kind: "spline".into() });
        let e = doc(r#"{"kind": "line", "x1": 0, "y1": 0, "x2": 0, "y2": 0}"#).unwrap_err();
        assert_eq!(e, VgioError::DegenerateLine { index: 0 });
        let e = doc(r#"{"kind": "circle", "cx": 0, "cy": 0, "r": 1, "semantic": 9, "instance": 0}"#).unwrap_err();
        assert_eq!(e, VgioError::UnknownSemantic { index: 0, id: 9 });
        let e = doc(r#"{"kind": "circle", "cx": 0, "cy": 0}"#).unwrap_err();
        assert!(matches!(e, VgioError::Schema { index: 0, .. }));
        let e = doc(r#"{"kind": "circle", "cx": 0, "cy": 0, "r": 1, "semantic": 2}"#).unwrap_err();
        assert!(matches!(e, VgioError::Schema { index: 0, .. }));
        assert!(matches!(parse_document(b"{"), Err(VgioError::Json(_))));
    }

    #[test]
    fn prediction_round_trip() {
        let p = PanopticPrediction {
            id: "x".into(),
            entities: vec![
                EntityLabel { index: 0, semantic: Some(3), instance: 1 },
                EntityLabel { index: 1, semantic: None, instance: -1 },
            ],
        };
        assert_eq!(parse_prediction(&serialize_prediction(&p)).unwrap(), p);
        let q = parse_prediction(br#"{"id": "x", "entities": [{"index": 0, "semantic": null, "instance": -1}]}"#).unwrap();
        assert_eq!(q.entities[0].semantic, None);
    }
}
