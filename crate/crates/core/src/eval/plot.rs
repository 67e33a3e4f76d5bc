//! Static SVG rendering of RD curves and per-layer bar charts.

use std::fmt::Write;

use super::metrics::RDCurve;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{y}" stroke="black"/>"#,
        x = W - MARGIN,
        y = H - MARGIN
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
}

/// PSNR against bpp, one polyline per curve.
pub fn rd_plot_svg(curves: &[RDCurve], title: &str) -> String {
    let (x0, x1) = span(curves.iter().flat_map(|c| c.points.iter().map(|p| p.bpp)));
    let (y0, y1) = span(curves.iter().flat_map(|c| c.points.iter().map(|p| p.psnr_db)));
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |v: f64| H - MARGIN - (v - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut out = String::new();
    header(&mut out, title, "bpp", "PSNR (dB)");
    for (i, t) in [x0, x1].iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="{}">{t:.3}</text>"#,
            sx(*t),
            H - MARGIN + 16.0,
            if i == 0 { "start" } else { "end" }
        );
    }
    for t in [y0, y1] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{t:.2}</text>"#, MARGIN - 4.0, sy(t));
    }
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr_db))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &c.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(p.bpp), sy(p.psnr_db));
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 * i as f64,
            c.method
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One bar per value in `[0, 1]` (e.g. gate opening frequency per layer).
pub fn bar_plot_svg(values: &[f64], title: &str, xlabel: &str) -> String {
    let mut out = String::new();
    header(&mut out, title, xlabel, "frequency");
    let n = values.len().max(1) as f64;
    let slot = (W - 2.0 * MARGIN) / n;
    for (i, &v) in values.iter().enumerate() {
        let h = v.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            H - MARGIN - h,
            slot * 0.7,
            COLORS[0]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - MARGIN + 16.0,
            i + 1
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.2}</text>"#,
            x + slot * 0.35,
            H - MARGIN - h - 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}
