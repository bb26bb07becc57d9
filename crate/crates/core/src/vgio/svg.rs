use std::f64::consts::TAU;

use super::{Category, Document, Geometry, Primitive, VgioError};
use crate::geom::Vec2;

/// Result of importing an SVG file: the document plus the number of skipped
/// (unsupported) elements or path segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgImport {
    pub document: Document,
    pub warnings: usize,
}

const IGNORED: &[&str] = &["svg", "g", "defs", "title", "desc", "metadata", "style", "symbol"];

fn parse_numbers(s: &str) -> Vec<f64> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .filter_map(|t| t.parse().ok())
        .collect()
}

/// Imports `line`, `polyline`, `circle`, `ellipse` and the line/circular-arc
/// subset of `path`. Annotations are read from `semantic-id` / `instance-id`
/// attributes and resolved against `categories`; unannotated elements are background.
pub fn import_svg(bytes: &[u8], id: &str, categories: &[Category]) -> Result<SvgImport, VgioError> {
    let text = std::str::from_utf8(bytes).map_err(|e| VgioError::Xml(e.to_string()))?;
    let xml = roxmltree::Document::parse(text).map_err(|e| VgioError::Xml(e.to_string()))?;
    let root = xml.root_element();
    let dim = |k: &str| {
        root.attribute(k)
            .and_then(|v| v.trim_end_matches("px").parse::<f64>().ok())
    };
    let view = root.attribute("viewBox").map(parse_numbers);
    let width = dim("width").or_else(|| view.as_ref().and_then(|v| v.get(2).copied())).unwrap_or(0.0);
    let height = dim("height").or_else(|| view.as_ref().and_then(|v| v.get(3).copied())).unwrap_or(0.0);

    let mut primitives = Vec::new();
    let mut warnings = 0;
    for node in root.descendants().filter(|n| n.is_element()) {
        let tag = node.tag_name().name();
        let a = |k: &str| node.attribute(k).and_then(|v| v.trim().parse::<f64>().ok()).unwrap_or(0.0);
        let semantic = node.attribute("semantic-id").and_then(|v| v.trim().parse::<i64>().ok());
        let instance = node
            .attribute("instance-id")
            .and_then(|v| v.trim().parse::<i64>().ok())
            .unwrap_or(-1);
        let instance = match semantic.and_then(|s| categories.iter().find(|c| c.id == s)) {
            Some(c) if c.is_thing => instance.max(0),
            _ => -1,
        };
        let mut geoms = Vec::new();
        match tag {
            "line" => geoms.push(Geometry::Line {
                v1: Vec2::new(a("x1"), a("y1")),
                v2: Vec2::new(a("x2"), a("y2")),
            }),
            "polyline" => {
                let nums = parse_numbers(node.attribute("points").unwrap_or(""));
                let pts: Vec<Vec2> = nums.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect();
                for w in pts.windows(2) {
                    geoms.push(Geometry::Line { v1: w[0], v2: w[1] });
                }
            }
            "circle" => geoms.push(Geometry::Circle {
                center: Vec2::new(a("cx"), a("cy")),
                radius: a("r"),
            }),
            "ellipse" => geoms.push(Geometry::Ellipse {
                center: Vec2::new(a("cx"), a("cy")),
                rx: a("rx"),
                ry: a("ry"),
                rotation: 0.0,
            }),
            "path" => {
                let (g, skipped) = parse_path(node.attribute("d").unwrap_or(""));
                geoms = g;
                warnings += skipped;
            }
            t if IGNORED.contains(&t) => continue,
            _ => {
                warnings += 1;
                continue;
            }
        }
        for g in geoms {
            let index = primitives.len();
            match Primitive::new(g, semantic, instance) {
                Ok(p) => primitives.push(p),
                // zero-length segments and invalid shapes are dropped, not fatal
                Err(_) => {
                    log::debug!("svg: skipping invalid {tag} at output index {index}");
                    warnings += 1;
                }
            }
        }
    }
    let document = Document {
        id: id.to_string(),
        width,
        height,
        categories: categories.to_vec(),
        primitives,
    };
    for (index, p) in document.primitives.iter().enumerate() {
        if let Some(id) = p.semantic {
            if document.category(id).is_none() {
                return Err(VgioError::UnknownSemantic { index, id });
            }
        }
    }
    Ok(SvgImport { document, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Cmd(char),
    Num(f64),
}

fn tokenize(d: &str) -> Vec<Tok> {
    let mut out = Vec::new();
    let b = d.as_bytes();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_ascii_alphabetic() && c != 'e' && c != 'E' {
            out.push(Tok::Cmd(c));
            i += 1;
        } else if c == '-' || c == '+' || c == '.' || c.is_ascii_digit() {
            let start = i;
            i += 1;
            let mut seen_dot = c == '.';
            while i < b.len() {
                let ch = b[i] as char;
                if ch.is_ascii_digit() {
                    i += 1;
                } else if ch == '.' && !seen_dot {
                    seen_dot = true;
                    i += 1;
                } else if (ch == 'e' || ch == 'E') && i + 1 < b.len() {
                    i += 1;
                    if b[i] == b'-' || b[i] == b'+' {
                        i += 1;
                    }
                } else {
                    break;
                }
            }
            if let Ok(v) = d[start..i].parse() {
                out.push(Tok::Num(v));
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Circular arc from SVG endpoint parameters; `None` when not representable.
fn endpoint_arc(p1: Vec2, p2: Vec2, rx: f64, ry: f64, rot: f64, large: bool, sweep: bool) -> Option<Geometry> {
    if (rx - ry).abs() > 1e-9 * rx.abs().max(1.0) || rx <= 0.0 || rot.rem_euclid(180.0) != 0.0 || p1 == p2 {
        return None;
    }
    let mut r = rx.abs();
    let h = (p1 - p2) * 0.5;
    let lambda = h.norm2() / (r * r);
    if lambda > 1.0 {
        r *= lambda.sqrt();
    }
    let num = (r * r * r * r - r * r * h.y * h.y - r * r * h.x * h.x).max(0.0);
    let den = r * r * h.y * h.y + r * r * h.x * h.x;
    let mut coef = (num / den).sqrt();
    if large == sweep {
        coef = -coef;
    }
    let cp = Vec2::new(coef * h.y, -coef * h.x);
    let center = cp + p1.midpoint(p2);
    let u = Vec2::new((h.x - cp.x) / r, (h.y - cp.y) / r);
    let v = Vec2::new((-h.x - cp.x) / r, (-h.y - cp.y) / r);
    let a0 = u.y.atan2(u.x);
    let mut delta = (u.x * v.y - u.y * v.x).atan2(u.x * v.x + u.y * v.y);
    if !sweep && delta > 0.0 {
        delta -= TAU;
    } else if sweep && delta < 0.0 {
        delta += TAU;
    }
    Some(Geometry::Arc {
        center,
        radius: r,
        a0,
        a1: a0 + delta,
    })
}

/// Returns the supported geometries and the count of skipped segments.
fn parse_path(d: &str) -> (Vec<Geometry>, usize) {
    let toks = tokenize(d);
    let mut out = Vec::new();
    let mut skipped = 0;
    let mut cur = Vec2::ZERO;
    let mut start = Vec2::ZERO;
    let mut i = 0;
    let mut cmd = ' ';
    let take = |i: &mut usize, n: usize| -> Option<Vec<f64>> {
        let vals: Vec<f64> = toks[*i..]
            .iter()
            .take(n)
            .map_while(|t| if let Tok::Num(v) = t { Some(*v) } else { None })
            .collect();
        if vals.len() == n {
            *i += n;
            Some(vals)
        } else {
            None
        }
    };
    while i < toks.len() {
        if let Tok::Cmd(c) = toks[i] {
            cmd = c;
            i += 1;
            if c == 'Z' || c == 'z' {
                if cur != start {
                    out.push(Geometry::Line { v1: cur, v2: start });
                }
                cur = start;
                continue;
            }
        }
        let rel = cmd.is_ascii_lowercase();
        let base = if rel { cur } else { Vec2::ZERO };
        let arity = match cmd.to_ascii_uppercase() {
            'M' | 'L' | 'T' => 2,
            'H' | 'V' => 1,
            'C' => 6,
            'S' | 'Q' => 4,
            'A' => 7,
            _ => {
                // unknown command: skip one token
                i += 1;
                skipped += 1;
                continue;
            }
        };
        let Some(v) = take(&mut i, arity) else {
            i += 1;
            continue;
        };
        match cmd.to_ascii_uppercase() {
            'M' => {
                cur = base + Vec2::new(v[0], v[1]);
                start = cur;
                cmd = if rel { 'l' } else { 'L' };
            }
            'L' => {
                let next = base + Vec2::new(v[0], v[1]);
                out.push(Geometry::Line { v1: cur, v2: next });
                cur = next;
            }
            'H' => {
                let next = Vec2::new(if rel { cur.x + v[0] } else { v[0] }, cur.y);
                out.push(Geometry::Line { v1: cur, v2: next });
                cur = next;
            }
            'V' => {
                let next = Vec2::new(cur.x, if rel { cur.y + v[0] } else { v[0] });
                out.push(Geometry::Line { v1: cur, v2: next });
                cur = next;
            }
            'A' => {
                let next = base + Vec2::new(v[5], v[6]);
                match endpoint_arc(cur, next, v[0], v[1], v[2], v[3] != 0.0, v[4] != 0.0) {
                    Some(g) => out.push(g),
                    None => skipped += 1,
                }
                cur = next;
            }
            _ => {
                // curves are not flattened
                cur = base + Vec2::new(v[arity - 2], v[arity - 1]);
                skipped += 1;
            }
        }
    }
    (out, skipped)
}
