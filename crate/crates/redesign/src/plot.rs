//! Static SVG learning-curve plots.

use std::fmt::Write;

use redesign_core::CurvePoint;

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Error rate by opportunity: observed as a solid line, AFM prediction dashed.
pub fn curve_svg(kc: &str, points: &[CurvePoint], config_hash: &str) -> String {
    let max_x = points.iter().map(|p| p.opportunity).max().unwrap_or(1).max(2);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let x = |o: u32| LEFT + pw * f64::from(o - 1) / f64::from(max_x - 1);
    let y = |e: f64| TOP + ph * (1.0 - e.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, "<!-- config_hash={config_hash} -->");
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(kc)
    );
    for i in 0..=4 {
        let e = f64::from(i) / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2:.1}" y="{3:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{e:.2}</text>"##,
            y(e),
            W - RIGHT,
            LEFT - 6.0,
            y(e) + 3.0
        );
    }
    let every = max_x.div_ceil(10).max(1);
    for o in (1..=max_x).filter(|o| (o - 1) % every == 0) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{o}</text>"#,
            x(o),
            H - BOTTOM + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">opportunity</text>"#,
        LEFT + pw / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.1})">error rate</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    let path = |f: &dyn Fn(&CurvePoint) -> Option<f64>| {
        points
            .iter()
            .filter_map(|p| f(p).map(|e| format!("{:.1},{:.1}", x(p.opportunity), y(e))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let observed = path(&|p| Some(p.error_rate));
    if !observed.is_empty() {
        let _ = writeln!(s, r##"<polyline points="{observed}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##);
        for p in points {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#1f77b4"/>"##,
                x(p.opportunity),
                y(p.error_rate)
            );
        }
    }
    let predicted = path(&|p| p.predicted_error);
    if !predicted.is_empty() {
        let _ = writeln!(
            s,
            r##"<polyline points="{predicted}" fill="none" stroke="#d62728" stroke-width="1.5" stroke-dasharray="5,3"/>"##
        );
    }
    if points.is_empty() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">no opportunity reaches the minimum sample size</text>"#,
            W / 2.0,
            H / 2.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// File-system-safe version of a KC label.
pub fn file_label(kc: &str) -> String {
    kc.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
