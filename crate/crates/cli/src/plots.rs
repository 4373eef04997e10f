//! Minimal SVG charts: training curves and per-bin metric bars.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn label(out: &mut String, x: f64, y: f64, anchor: &str, text: &str) {
    let _ = writeln!(
        out,
        "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
        escape(text)
    );
}

/// One polyline per series, each scaled to its own maximum so losses and
/// metrics share the frame.
pub fn line_chart(title: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = header(title);
    if x.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let (x0, x1) = (x[0], x[x.len() - 1].max(x[0] + 1.0));
    let px = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    for (k, (name, ys)) in series.iter().enumerate() {
        let top = ys.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12);
        let py = |v: f64| H - PAD - (v / top) * (H - 2.0 * PAD);
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .map(|(&a, &b)| format!("{:.1},{:.1}", px(a), py(b)))
            .collect();
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        label(&mut out, W - PAD, PAD + 14.0 * k as f64, "end", &format!("{name} (max {top:.3})"));
    }
    label(&mut out, PAD, H - PAD + 16.0, "middle", &format!("{x0}"));
    label(&mut out, W - PAD, H - PAD + 16.0, "middle", &format!("{x1}"));
    out.push_str("</svg>\n");
    out
}

/// Grouped bars on a `[0, 1]` axis; empty groups are skipped.
pub fn bar_chart(title: &str, groups: &[String], series: &[(&str, Vec<Option<f64>>)]) -> String {
    let mut out = header(title);
    let n = groups.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        let left = PAD + slot * g as f64 + slot * 0.1;
        for (k, (_, vals)) in series.iter().enumerate() {
            if let Some(v) = vals.get(g).copied().flatten() {
                let h = v.clamp(0.0, 1.0) * (H - 2.0 * PAD);
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar:.1}\" height=\"{h:.1}\" fill=\"{}\"/>",
                    left + bar * k as f64,
                    H - PAD - h,
                    COLORS[k % COLORS.len()]
                );
            }
        }
        label(&mut out, left + slot * 0.4, H - PAD + 16.0, "middle", name);
    }
    for (k, (name, _)) in series.iter().enumerate() {
        label(&mut out, W - PAD, PAD + 14.0 * k as f64, "end", name);
    }
    out.push_str("</svg>\n");
    out
}
