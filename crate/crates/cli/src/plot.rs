//! Static SVG line plots: one metric against labeled fraction, one series
//! per scheme, with per-seed points behind the median line.

use crate::layout::ensure_parent;
use pseudoseg::evalkit::{fmt_sig6, summarize, MetricsReport, Scheme};
use pseudoseg::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const METRICS: [&str; 3] = ["dice", "precision", "recall"];

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

fn color(scheme: Scheme, k: usize) -> &'static str {
    match scheme {
        Scheme::Seg2d => "#1b9e77",
        Scheme::Seg3dSparse => "#d95f02",
        Scheme::Seg3dPseudo => ["#7570b3", "#e7298a", "#66a61e", "#a6761d"][k % 4],
    }
}

fn pick(name: &str, dice: f64, precision: f64, recall: f64) -> f64 {
    match name {
        "dice" => dice,
        "precision" => precision,
        _ => recall,
    }
}

fn px(x: f64) -> f64 {
    LEFT + x * (W - LEFT - RIGHT)
}

fn py(y: f64) -> f64 {
    H - BOTTOM - y * (H - TOP - BOTTOM)
}

fn label(scheme: Scheme, alpha: Option<f64>) -> String {
    match (scheme, alpha) {
        (Scheme::Seg3dPseudo, Some(a)) => format!("{scheme} (α={})", fmt_sig6(a)),
        _ => scheme.to_string(),
    }
}

pub fn render(reports: &[MetricsReport], name: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">Test {name} vs labeled fraction</text>"#,
        px(0.5)
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#ddd"/><text x="{x}" y="{}" text-anchor="middle">{}</text>"##,
            py(0.0),
            py(1.0),
            py(0.0) + 18.0,
            fmt_sig6(t),
            x = px(t)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            px(0.0),
            px(1.0),
            px(0.0) - 6.0,
            py(t) + 4.0,
            fmt_sig6(t),
            y = py(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(1.0) - px(0.0),
        py(0.0) - py(1.0)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">labeled fraction</text>"#, px(0.5), H - 14.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{name}</text>"#,
        y = py(0.5)
    );

    let rows = summarize(reports);
    let mut series: Vec<(Scheme, Option<f64>)> = Vec::new();
    for r in &rows {
        if !series.contains(&(r.scheme, r.alpha)) {
            series.push((r.scheme, r.alpha));
        }
    }
    let mut pseudo_k = 0;
    for (k, &(scheme, alpha)) in series.iter().enumerate() {
        let c = color(scheme, pseudo_k);
        if scheme == Scheme::Seg3dPseudo {
            pseudo_k += 1;
        }
        for r in reports.iter().filter(|r| r.scheme == scheme && r.alpha == alpha) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}" fill-opacity="0.35"/>"#,
                px(r.labeled_fraction),
                py(pick(name, r.dice, r.precision, r.recall))
            );
        }
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.scheme == scheme && r.alpha == alpha)
            .map(|r| (px(r.labeled_fraction), py(pick(name, r.dice, r.precision, r.recall))))
            .collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, path.join(" "));
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{c}"/>"#);
        }
        let ly = TOP + 16.0 + 20.0 * k as f64;
        let lx = px(1.0) + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            label(scheme, alpha)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<metric>.svg` for every metric into `dir`.
pub fn write_metric_plots(dir: &Path, reports: &[MetricsReport]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for name in METRICS {
        let path = dir.join(format!("{name}.svg"));
        ensure_parent(&path)?;
        std::fs::write(&path, render(reports, name))
            .map_err(|e| Error::Artifact(format!("cannot write {}: {e}", path.display())))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pseudoseg::evalkit::ConfusionCounts;

    #[test]
    fn one_series_per_scheme() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 10 };
        let reports: Vec<MetricsReport> =
            [(Scheme::Seg2d, None), (Scheme::Seg3dSparse, Some(0.0)), (Scheme::Seg3dPseudo, Some(0.5))]
                .into_iter()
                .flat_map(|(s, a)| [0.2, 1.0].map(|f| MetricsReport::new(s, f, a, 0, c)))
                .collect();
        let svg = render(&reports, "dice");
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("seg3d_pseudo (α=0.5)"));
    }
}
