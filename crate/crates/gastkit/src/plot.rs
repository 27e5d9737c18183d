//! Precision-recall plot as a standalone SVG.

use std::fmt::Write as _;

use gast_core::eval::{EvalReport, PrPoint};

const SIZE: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn polyline(points: &[PrPoint]) -> String {
    let mut s = String::new();
    for p in points {
        let x = MARGIN + p.recall * SIZE;
        let y = MARGIN + (1.0 - p.precision) * SIZE;
        let _ = write!(s, "{x:.2},{y:.2} ");
    }
    s.trim_end().to_string()
}

/// One curve per category and IoU threshold (solid 0.5, dashed 0.75).
pub fn pr_svg(report: &EvalReport, names: &[String]) -> String {
    let full = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
        w = full + 140.0,
        h = full
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let x = MARGIN + v * SIZE;
        let y = MARGIN + (1.0 - v) * SIZE;
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#, MARGIN + SIZE + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, MARGIN - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">recall</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN + SIZE + 34.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">precision</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN + SIZE / 2.0
    );
    let mut legend_y = MARGIN + 10.0;
    for (k, c) in report.categories.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let name = names.get(c.category).cloned().unwrap_or_else(|| format!("class {}", c.category));
        for (pts, dash, tag, ap) in [(&c.pr50, "", "AP50", c.ap50), (&c.pr75, r#" stroke-dasharray="5,3""#, "AP75", c.ap75)] {
            if !pts.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                    polyline(pts)
                );
            }
            let label = ap.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                r#"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{tx:.1}" y="{ty:.1}">{name} {tag} {label}</text>"#,
                x0 = full - 4.0,
                x1 = full + 14.0,
                y = legend_y,
                tx = full + 18.0,
                ty = legend_y + 4.0
            );
            legend_y += 16.0;
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle">mAP {:.3}</text>"#,
        MARGIN + SIZE / 2.0,
        report.map
    );
    s.push_str("</svg>\n");
    s
}
