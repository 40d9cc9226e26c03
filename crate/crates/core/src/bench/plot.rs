//! Latency/accuracy scatter as gnuplot data and a self-contained SVG.

use std::fmt::Write;

use super::output::ResultRow;
use crate::engine::Scheme;

const COLORS: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

fn color(s: Scheme) -> &'static str {
    COLORS[Scheme::ALL.iter().position(|x| *x == s).unwrap_or(0)]
}

/// Whitespace-separated columns: scheme, knob value, mean latency, pass@1.
pub fn latency_accuracy_dat(rows: &[ResultRow]) -> String {
    let mut out = String::from("# scheme value mean_latency_s pass_at_1\n");
    for r in rows {
        let acc = r.pass_at_1.map_or("NaN".to_string(), |p| format!("{p:.6}"));
        let _ = writeln!(out, "{} {} {:.6} {}", r.scheme, r.value, r.mean_latency_s, acc);
    }
    out
}

pub fn latency_accuracy_svg(rows: &[ResultRow]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let pts: Vec<(&ResultRow, f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r, r.mean_latency_s, r.pass_at_1?)))
        .filter(|(_, x, _)| x.is_finite())
        .collect();
    let xmax = pts.iter().map(|p| p.1).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let sx = |x: f64| m + x / xmax * (w - 2.0 * m);
    let sy = |y: f64| h - m - y * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{y0}" stroke="black"/>"#,
        y0 = h - m,
        x1 = w - m
    );
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.2}</text>"#, m - 6.0, sy(y) + 4.0);
        let x = xmax * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x:.1}</text>"#, sx(x), h - m + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">mean latency (s)</text>"#, w / 2.0, h - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">pass@1</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (r, x, y) in &pts {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"><title>{} {}={}</title></circle><text x="{:.2}" y="{:.2}">{}</text>"#,
            sx(*x),
            sy(*y),
            color(r.scheme),
            r.scheme,
            r.knob,
            r.value,
            sx(*x) + 6.0,
            sy(*y) - 4.0,
            r.value
        );
    }
    let mut seen: Vec<Scheme> = pts.iter().map(|p| p.0.scheme).collect();
    seen.dedup();
    for (i, sc) in seen.iter().enumerate() {
        let y = m + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/><text x="{}" y="{}">{sc}</text>"#,
            w - m - 110.0,
            color(*sc),
            w - m - 100.0,
            y + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
