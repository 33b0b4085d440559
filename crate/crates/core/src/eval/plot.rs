use std::fmt::Write;

use super::RocCurve;

/// One labeled curve in an ROC figure.
#[derive(Debug, Clone)]
pub struct RocSeries<'a> {
    pub label: &'a str,
    pub curve: &'a RocCurve,
    pub auc: f64,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Sensitivity against 1 - specificity, with the chance diagonal, as a
/// standalone SVG document.
pub fn render_roc_svg(series: &[RocSeries<'_>], title: &str) -> String {
    const SIZE: f64 = 400.0;
    const M: f64 = 50.0;
    let px = |x: f64| M + x * SIZE;
    let py = |y: f64| M + (1.0 - y) * SIZE;
    let mut s = String::new();
    let total = SIZE + 2.0 * M;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = total + 160.0,
        h = total
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="25" text-anchor="middle" font-size="14">{}</text>"#, px(0.5), escape(title));
    let _ = writeln!(s, r#"<rect x="{M}" y="{M}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#, px(v), py(0.0) + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, px(0.0) - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">1 - specificity</text>"#, px(0.5), total - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">sensitivity</text>"#,
        py(0.5),
        py(0.5)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.curve.points.iter().map(|p| format!("{:.2},{:.2}", px(p.fpr), py(p.tpr))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let y = M + 20.0 * i as f64 + 10.0;
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, total, total + 20.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{} (AUC {:.4})</text>"#,
            total + 26.0,
            y + 4.0,
            escape(ser.label),
            ser.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
