use std::fmt::Write;

use super::{Document, Geometry, PanopticPrediction, VgioError};

const BACKGROUND: &str = "#b0b0b0";
const DASHES: &[&str] = &["", "4 1", "1 1", "6 2 1 2", "2 2", "8 2"];

/// Strokes every primitive in its predicted class color. Thing instances of
/// one class cycle through dash patterns and carry `data-instance`.
pub fn render_panoptic(doc: &Document, pred: &PanopticPrediction) -> Result<Vec<u8>, VgioError> {
    let labels = pred.dense(doc.primitives.len())?;
    let mut s = String::new();
    let stroke = (doc.diagonal() / 500.0).max(0.05);
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = doc.width,
        h = doc.height
    )
    .unwrap();
    writeln!(s, r#"<rect width="{}" height="{}" fill="white"/>"#, doc.width, doc.height).unwrap();
    for (p, l) in doc.primitives.iter().zip(&labels) {
        let cat = l.semantic.and_then(|id| doc.category(id));
        let color = cat.map_or(BACKGROUND, |c| c.color.as_str());
        let mut style = format!(r#"fill="none" stroke="{color}" stroke-width="{stroke}""#);
        if let Some(c) = cat {
            write!(style, r#" data-class="{}""#, xml_escape(&c.name)).unwrap();
            if c.is_thing && l.instance >= 0 {
                let dash = DASHES[l.instance as usize % DASHES.len()];
                if !dash.is_empty() {
                    write!(style, r#" stroke-dasharray="{dash}""#).unwrap();
                }
                write!(style, r#" data-instance="{}""#, l.instance).unwrap();
            }
        }
        match *p.geometry() {
            Geometry::Line { v1, v2 } => writeln!(
                s,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" {style}/>"#,
                v1.x, v1.y, v2.x, v2.y
            ),
            Geometry::Arc { radius, a0, a1, .. } => {
                let (v1, v2) = p.endpoints().expect("arcs have endpoints");
                let span = a1 - a0;
                let large = u8::from(span.abs() > std::f64::consts::PI);
                let sweep = u8::from(span > 0.0);
                writeln!(
                    s,
                    r#"<path d="M {} {} A {r} {r} 0 {large} {sweep} {} {}" {style}/>"#,
                    v1.x,
                    v1.y,
                    v2.x,
                    v2.y,
                    r = radius
                )
            }
            Geometry::Circle { center, radius } => writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="{radius}" {style}/>"#,
                center.x, center.y
            ),
            Geometry::Ellipse { center, rx, ry, rotation } => writeln!(
                s,
                r#"<ellipse cx="{x}" cy="{y}" rx="{rx}" ry="{ry}" transform="rotate({} {x} {y})" {style}/>"#,
                rotation.to_degrees(),
                x = center.x,
                y = center.y
            ),
        }
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s.into_bytes())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use crate::vgio::{Category, EntityLabel, Primitive};

    fn doc(n: usize) -> Document {
        Document {
            id: "r".into(),
            width: 20.0,
            height: 10.0,
            categories: vec![Category {
                id: 1,
                name: "wall".into(),
                is_thing: false,
                color: "#aa0000".into(),
            }],
            primitives: (0..n)
                .map(|i| Primitive::line(Vec2::new(i as f64, 0.0), Vec2::new(i as f64, 5.0)).unwrap())
                .collect(),
        }
    }

    fn walls(n: usize) -> PanopticPrediction {
        PanopticPrediction {
            id: "r".into(),
            entities: (0..n)
                .map(|index| EntityLabel { index, semantic: Some(1), instance: -1 })
                .collect(),
        }
    }

    #[test]
    fn colors_and_determinism() {
        let d = doc(2);
        let a = render_panoptic(&d, &walls(2)).unwrap();
        let b = render_panoptic(&d, &walls(2)).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.matches("<line").count(), 2);
        assert_eq!(text.matches("#aa0000").count(), 2);
    }

    #[test]
    fn empty_document_renders_canvas() {
        let d = doc(0);
        let text = String::from_utf8(render_panoptic(&d, &walls(0)).unwrap()).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
        assert!(roxmltree::Document::parse(&text).is_ok());
    }

    #[test]
    fn missing_entry_is_error() {
        let d = doc(2);
        assert_eq!(
            render_panoptic(&d, &walls(1)).unwrap_err(),
            VgioError::MissingPrediction { index: 1 }
        );
    }
}
