//! Minimal SVG charts: loss curves and per-class PQ bars.

use std::fmt::Write as _;

use symspot::metrics::ClassRow;
use symspot::trainer::EpochLog;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const SERIES: [(&str, &str); 5] = [
    ("total", "#000000"),
    ("bce", "#1f77b4"),
    ("dice", "#ff7f0e"),
    ("cls", "#2ca02c"),
    ("ccl", "#d62728"),
];

fn header(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per loss term over epochs.
pub fn loss_chart(rows: &[EpochLog]) -> String {
    let mut s = String::new();
    header(&mut s, "training loss");
    let value = |r: &EpochLog, k: &str| match k {
        "total" => r.total,
        "bce" => r.bce,
        "dice" => r.dice,
        "cls" => r.cls,
        _ => r.ccl,
    };
    let ymax = rows
        .iter()
        .flat_map(|r| SERIES.iter().map(move |(k, _)| value(r, k)))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let xmax = rows.last().map_or(1, |r| r.epoch).max(1) as f64;
    let px = |e: usize| PAD + (W - 2.0 * PAD) * e as f64 / xmax;
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * v / ymax;
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{ymax:.3}</text>"#, PAD - 4.0, PAD + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch {xmax}</text>"#, W - PAD, H - PAD + 16.0);
    for (i, (k, color)) in SERIES.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.epoch), py(value(r, k))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{k}</text>"#,
            W - PAD - 40.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One bar per class, height = PQ.
pub fn pq_bars(rows: &[ClassRow]) -> String {
    let mut s = String::new();
    header(&mut s, "PQ per class");
    let n = rows.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (i, r) in rows.iter().enumerate() {
        let h = (H - 2.0 * PAD) * r.pq.clamp(0.0, 1.0);
        let x = PAD + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4c72b0"/>"##,
            H - PAD - h,
            slot * 0.7
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{:.2}</text>"#,
            H - PAD - h - 4.0,
            r.pq
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - PAD + 14.0,
            escape(&r.name)
        );
    }
    s.push_str("</svg>\n");
    s
}
