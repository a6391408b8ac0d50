//! Summaries over completed run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunManifest;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub mean_local_loss: Option<f64>,
    pub fid: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty metrics file".into()))?;
    if header.trim() != "round,variant,mean_local_loss,fid,bytes_up,bytes_down,wall_time" {
        return Err(Error::Data(format!("unexpected metrics header `{header}`")));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Data(format!("bad number `{s}`")))
        }
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Data(format!("metrics row `{line}` has {} fields", f.len())));
            }
            let int = |s: &str| s.parse::<u64>().map_err(|_| Error::Data(format!("bad integer `{s}`")));
            Ok(MetricsRow {
                round: int(f[0])? as usize,
                mean_local_loss: opt(f[2])?,
                fid: opt(f[3])?,
                bytes_up: int(f[4])?,
                bytes_down: int(f[5])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub rows: Vec<MetricsRow>,
}

impl RunSummary {
    pub fn best_fid(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.fid).reduce(f64::min)
    }

    pub fn total_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.bytes_up + r.bytes_down).sum()
    }

    pub fn mebibytes(&self) -> f64 {
        self.total_bytes() as f64 / (1u64 << 20) as f64
    }
}

/// Loads every immediate subdirectory holding a manifest, sorted by name.
pub fn load_runs(root: &Path) -> Result<Vec<RunSummary>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no completed runs under {}", root.display())));
    }
    dirs.into_iter()
        .map(|dir| {
            let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
            let rows = parse_metrics_csv(&std::fs::read_to_string(dir.join(METRICS_FILE))?)?;
            Ok(RunSummary { dir, manifest, rows })
        })
        .collect()
}

pub fn summary_table(runs: &[RunSummary]) -> String {
    let mut s = String::from("| run | variant | K | k | R | E | b | skew | best FID | MiB |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in runs {
        let f = &r.manifest.run.experiment.fed;
        let best = r.best_fid().map_or("n/a".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.6} |",
            r.manifest.name,
            f.variant,
            f.clients,
            f.per_round,
            f.rounds,
            f.local_epochs,
            f.bits,
            r.manifest.run.partition.mode,
            best,
            r.mebibytes()
        );
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of `points` (x, y). A log scale is used when every y is positive.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let log = !points.is_empty() && points.iter().all(|p| p.1 > 0.0);
    let ty = |y: f64| if log { y.log10() } else { y };
    let xs = points.iter().map(|p| p.0);
    let ys = points.iter().map(|p| ty(p.1));
    let (mut x0, mut x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (mut y0, mut y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    if !(x0.is_finite() && x1.is_finite()) {
        (x0, x1) = (0.0, 1.0);
    }
    if !(y0.is_finite() && y1.is_finite()) {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (ty(y) - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let (ax0, ax1, ay0, ay1) = (left, w - right, h - bottom, top);
    let _ = writeln!(s, r#"<path d="M{ax0},{ay1} L{ax0},{ay0} L{ax1},{ay0}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let label = if log { 10f64.powf(yv) } else { yv };
        let y = ay0 - f * (ay0 - ay1);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{ax0}" y2="{y:.1}" stroke="black"/>"#, ax0 - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{label:.3e}</text>"#, ax0 - 6.0, y + 4.0);
        let xv = x0 + f * (x1 - x0);
        let x = ax0 + f * (ax1 - ax0);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{ay0}" x2="{x:.1}" y2="{}" stroke="black"/>"#, ay0 + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{xv:.4}</text>"#, ay0 + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ax0 + ax1) / 2.0, h - 10.0, escape(x_label));
    let scale = if log { " (log scale)" } else { "" };
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}{scale}</text>"#,
        (ay0 + ay1) / 2.0,
        (ay0 + ay1) / 2.0,
        escape(y_label)
    );
    if !points.is_empty() {
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
        for &(x, y) in points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, px(x), py(y));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.md` and one `<run>.svg` chart per run into `root`.
pub fn write_report(root: &Path) -> Result<Vec<PathBuf>> {
    let runs = load_runs(root)?;
    let mut written = Vec::new();
    let mut md = String::from("# Run summary\n\n");
    md.push_str(&summary_table(&runs));
    md.push('\n');
    for r in &runs {
        let points: Vec<(f64, f64)> = r.rows.iter().filter_map(|row| row.fid.map(|f| (row.round as f64, f))).collect();
        let svg = line_chart_svg(&format!("{}: FID by round", r.manifest.name), "round", "Fréchet distance", &points);
        let file = format!("{}.svg", r.manifest.name);
        std::fs::write(root.join(&file), svg)?;
        let _ = writeln!(md, "![{0}]({1})", r.manifest.name, file);
        written.push(root.join(file));
    }
    let path = root.join("report.md");
    std::fs::write(&path, md)?;
    written.insert(0, path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rows() {
        let text = "round,variant,mean_local_loss,fid,bytes_up,bytes_down,wall_time\n0,vanilla,,1.5,0,0,0\n1,vanilla,0.9,,1048576,1048576,0\n";
        let rows = parse_metrics_csv(text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].fid, Some(1.5));
        assert_eq!(rows[1].mean_local_loss, Some(0.9));
        assert_eq!(rows[1].fid, None);
        assert!(parse_metrics_csv("a,b\n").is_err());
        assert!(parse_metrics_csv("").is_err());
    }

    #[test]
    fn chart_is_well_formed() {
        let svg = line_chart_svg("t<1>", "x", "y", &[(0.0, 10.0), (1.0, 0.1), (2.0, 0.01)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("log scale"));
        assert!(svg.contains("t&lt;1&gt;"));
        assert_eq!(svg.matches("<circle").count(), 3);
        let flat = line_chart_svg("flat", "x", "y", &[(0.0, 0.0)]);
        assert!(!flat.contains("NaN") && !flat.contains("inf"));
        assert!(!line_chart_svg("none", "x", "y", &[]).contains("NaN"));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_runs(dir.path()).is_err());
        assert!(write_report(dir.path()).is_err());
    }
}
