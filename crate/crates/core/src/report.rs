//! CSV and SVG emitters for analysis results.
//!
//! Numbers are written with fixed precision so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::ablation::AblationRow;
use crate::analysis::{CorrelationResult, DeltaPca, KdeCurve};
use crate::error::{Error, Result};
use crate::probes::LayerAccuracyCurve;
use crate::tensor::Matrix;

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// `row, col, score` for a `side×side` grid.
pub fn write_score_map_csv(path: impl AsRef<Path>, map: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["row", "col", "score"])?;
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            w.write_record([r.to_string(), c.to_string(), f6(map[(r, c)])])?;
        }
    }
    finish(w, path)
}

/// `x, density, group`.
pub fn write_kde_csv(path: impl AsRef<Path>, curves: &[KdeCurve]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["x", "density", "group"])?;
    for c in curves {
        for (x, d) in c.grid.iter().zip(&c.density) {
            w.write_record([f6(*x), f6(*d), c.group.clone()])?;
        }
    }
    finish(w, path)
}

/// `component, variance_ratio`.
pub fn write_pca_variance_csv(path: impl AsRef<Path>, pca: &DeltaPca) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["component", "variance_ratio"])?;
    for (i, r) in pca.pca.explained_ratio.iter().enumerate() {
        w.write_record([(i + 1).to_string(), f6(*r)])?;
    }
    finish(w, path)
}

/// `sample, label, pc1, pc2, ...`.
pub fn write_pca_coords_csv(path: impl AsRef<Path>, pca: &DeltaPca) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    let mut header = vec!["sample".to_string(), "label".to_string()];
    header.extend((1..=pca.coords.cols()).map(|i| format!("pc{i}")));
    w.write_record(&header)?;
    for i in 0..pca.coords.rows() {
        let mut rec = vec![i.to_string(), pca.labels[i].to_string()];
        rec.extend(pca.coords.row(i).iter().map(|v| f6(*v)));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// `layer, r, p, n_pairs`.
pub fn write_correlation_csv(path: impl AsRef<Path>, results: &[CorrelationResult]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["layer", "r", "p", "n_pairs"])?;
    for c in results {
        w.write_record([c.layer.to_string(), f6(c.r), f6(c.p_value), c.n_pairs.to_string()])?;
    }
    finish(w, path)
}

/// `mode, parameter, seg_acc, inst_acc, dino_loss`; missing values are empty.
pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["mode", "parameter", "seg_acc", "inst_acc", "dino_loss"])?;
    let opt = |v: Option<f64>| v.map(f6).unwrap_or_default();
    for r in rows {
        w.write_record([r.mode.clone(), f6(r.parameter), f6(r.seg_acc), opt(r.inst_acc), opt(r.dino_loss)])?;
    }
    finish(w, path)
}

// ---------------------------------------------------------------------------
// SVG

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn write_svg(path: impl AsRef<Path>, svg: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    let _ = writeln!(s, r#"<text x="{l}" y="{}" text-anchor="middle">{:.3}</text>"#, b + 14.0, f.x0);
    let _ = writeln!(s, r#"<text x="{r}" y="{}" text-anchor="middle">{:.3}</text>"#, b + 14.0, f.x1);
    let _ = writeln!(s, r#"<text x="{}" y="{b}" text-anchor="end">{:.3}</text>"#, l - 4.0, f.y0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, l - 4.0, t + 4.0, f.y1);
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 4.0 + 14.0 * i as f64;
        let x = W - MARGIN - 110.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(n));
    }
}

/// Line chart, one polyline per named series.
pub fn svg_lines(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter()));
    let mut s = open(title, xlabel, ylabel, &f);
    for (i, (_, pts)) in series.iter().enumerate() {
        let d: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            d.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut s, &series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Scatter plot coloured by integer group.
pub fn svg_scatter(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)], groups: &[usize]) -> String {
    let f = Frame::fit(points.iter());
    let mut s = open(title, xlabel, ylabel, &f);
    for (&(x, y), &g) in points.iter().zip(groups) {
        if x.is_finite() && y.is_finite() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
                f.px(x),
                f.py(y),
                PALETTE[g % PALETTE.len()]
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Grid heatmap on `[lo, hi]`, white to dark blue.
pub fn svg_heatmap(title: &str, map: &Matrix, lo: f64, hi: f64) -> String {
    let (rows, cols) = (map.rows().max(1), map.cols().max(1));
    let cell = ((W - 2.0 * MARGIN) / cols as f64).min((H - 2.0 * MARGIN) / rows as f64);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            let t = ((map[(r, c)] - lo) / span).clamp(0.0, 1.0);
            let shade = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"#{:02x}{:02x}{:02x}\"/>",
                MARGIN + c as f64 * cell,
                MARGIN + r as f64 * cell,
                shade(255.0, 8.0),
                shade(255.0, 48.0),
                shade(255.0, 107.0)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn kde_svg(title: &str, curves: &[KdeCurve]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|c| (c.group.clone(), c.grid.iter().copied().zip(c.density.iter().copied()).collect()))
        .collect();
    svg_lines(title, "score", "density", &series)
}

pub fn curve_svg(title: &str, curves: &[(String, &LayerAccuracyCurve)]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|(n, c)| (n.clone(), c.points.iter().map(|p| (p.layer as f64, p.accuracy)).collect()))
        .collect();
    svg_lines(title, "layer", "accuracy", &series)
}

pub fn pca_svg(title: &str, pca: &DeltaPca) -> String {
    let pts: Vec<(f64, f64)> = (0..pca.coords.rows())
        .map(|i| {
            let r = pca.coords.row(i);
            (r[0], r.get(1).copied().unwrap_or(0.0))
        })
        .collect();
    svg_scatter(title, "PC1", "PC2", &pts, &pca.labels)
}

pub fn correlation_svg(title: &str, results: &[CorrelationResult]) -> String {
    let series = vec![("r".to_string(), results.iter().map(|c| (c.layer as f64, c.r)).collect())];
    svg_lines(title, "layer", "Pearson r", &series)
}

pub fn ablation_svg(title: &str, rows: &[AblationRow]) -> String {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for mode in ["uninformed", "informed"] {
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.mode == mode).map(|r| (r.parameter, r.seg_acc)).collect();
        if !pts.is_empty() {
            series.push((mode.to_string(), pts));
        }
    }
    svg_lines(title, "ratio / alpha", "segmentation accuracy", &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.csv");
        write_score_map_csv(&p, &Matrix::from_fn(2, 2, |r, c| (r * 2 + c) as f64 / 4.0)).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next(), Some("row,col,score"));
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("1,1,0.750000"));

        let rows = vec![AblationRow {
            mode: "informed".into(),
            parameter: 0.5,
            seg_acc: 0.9,
            inst_acc: None,
            dino_loss: None,
        }];
        let p = dir.path().join("abl.csv");
        write_ablation_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "mode,parameter,seg_acc,inst_acc,dino_loss\ninformed,0.500000,0.900000,,\n");
    }

    #[test]
    fn svg_is_well_formed_and_escaped() {
        let s = svg_lines("a<b", "x", "y", &[("s&t".into(), vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b") && s.contains("s&amp;t"));
        assert!(!s.contains("NaN"));
        let h = svg_heatmap("m", &Matrix::from_fn(3, 3, |r, c| (r + c) as f64), 0.0, 4.0);
        assert_eq!(h.matches("<rect").count(), 10);
    }
}
