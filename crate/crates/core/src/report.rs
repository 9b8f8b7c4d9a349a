//! Scatter data and SVG plots aggregated from the per-model result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: missing column `{column}`")]
    Schema { path: String, column: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// A CSV file with a header row; fields are not quoted.
#[derive(Debug, Clone)]
pub struct Table {
    path: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str, path: &str, required: &[&str]) -> Result<Self, ReportError> {
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(|s| s.trim().to_string()).collect();
        for c in required {
            if !header.iter().any(|h| h == c) {
                return Err(ReportError::Schema { path: path.into(), column: (*c).into() });
            }
        }
        let mut rows = vec![];
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(ReportError::Parse {
                    path: path.into(),
                    line: i + 2,
                    msg: format!("{} fields, header has {}", row.len(), header.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { path: path.into(), header, rows })
    }

    pub fn load(path: &Path, required: &[&str]) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text, &path.display().to_string(), required)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("required columns are checked on load")
    }

    pub fn str(&self, row: usize, name: &str) -> &str {
        &self.rows[row][self.col(name)]
    }

    /// Numeric field; an empty field is `None`.
    pub fn num(&self, row: usize, name: &str) -> Result<Option<f64>, ReportError> {
        let s = self.str(row, name);
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>().map(Some).map_err(|_| ReportError::Parse {
            path: self.path.clone(),
            line: row + 2,
            msg: format!("column `{name}`: bad number `{s}`"),
        })
    }

    pub fn flag(&self, row: usize, name: &str) -> Result<bool, ReportError> {
        match self.str(row, name) {
            "true" => Ok(true),
            "false" => Ok(false),
            s => Err(ReportError::Parse {
                path: self.path.clone(),
                line: row + 2,
                msg: format!("column `{name}`: expected true/false, got `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefLine {
    pub y: f64,
    pub label: String,
}

/// Scatter plot description; one series per controller kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Scatter {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_log: bool,
    pub y_log: bool,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
    pub lines: Vec<RefLine>,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: &[f64], log: bool) -> Self {
        let vals: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite() && (!log || *v > 0.0)).collect();
        if vals.is_empty() {
            return if log { Axis { log, lo: 0.0, hi: 1.0 } } else { Axis { log, lo: -1.0, hi: 1.0 } };
        }
        let (mut lo, mut hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if log {
            let (l, h) = (lo.log10().floor(), hi.log10().ceil());
            return Axis { log, lo: l, hi: if h > l { h } else { l + 1.0 } };
        }
        if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            lo -= 0.5 * (1.0 + lo.abs());
            hi += 0.5 * (1.0 + hi.abs());
        }
        let pad = 0.05 * (hi - lo);
        Axis { log, lo: lo - pad, hi: hi + pad }
    }

    /// Position in `[0, 1]`; values off a log axis clamp to its ends.
    fn frac(&self, v: f64) -> f64 {
        let t = if self.log {
            if v > 0.0 {
                v.log10()
            } else {
                self.lo
            }
        } else {
            v
        };
        ((t - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let step = ((self.hi - self.lo) / 8.0).ceil().max(1.0);
            let mut out = vec![];
            let mut e = self.lo;
            while e <= self.hi + 1e-9 {
                out.push(((e - self.lo) / (self.hi - self.lo), format!("1e{}", e as i64)));
                e += step;
            }
            return out;
        }
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
        let mut out = vec![];
        let mut v = (self.lo / step).ceil() * step;
        while v <= self.hi {
            let label = if v.abs() < step * 1e-6 { "0".to_string() } else { fmt_tick(v) };
            out.push(((v - self.lo) / (self.hi - self.lo), label));
            v += step;
        }
        out
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Scatter {
    pub fn to_svg(&self) -> String {
        let xs: Vec<f64> = self.series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
        let mut ys: Vec<f64> = self.series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
        ys.extend(self.lines.iter().map(|l| l.y));
        let xa = Axis::fit(&xs, self.x_log);
        let ya = Axis::fit(&ys, self.y_log);
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let px = |v: f64| LEFT + xa.frac(v) * pw;
        let py = |v: f64| TOP + (1.0 - ya.frac(v)) * ph;
        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ =
            writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for (f, label) in xa.ticks() {
            let x = LEFT + f * pw;
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, TOP + ph + 18.0);
        }
        for (f, label) in ya.ticks() {
            let y = TOP + (1.0 - f) * ph;
            let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, LEFT - 8.0, y + 4.0);
        }
        let _ =
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 15.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for l in &self.lines {
            let y = py(l.y);
            let _ = writeln!(
                s,
                r#"<line class="reference" x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="6,4"/>"#,
                LEFT + pw
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" fill="gray" text-anchor="end">{}</text>"#,
                LEFT + pw - 4.0,
                y - 4.0,
                escape(&l.label)
            );
        }
        for (k, (name, pts)) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            for &(x, y) in pts {
                if x.is_nan() || y.is_nan() {
                    continue;
                }
                let _ =
                    writeln!(s, r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="4" fill="{color}" fill-opacity="0.7"/>"#, px(x), py(y));
            }
            let ly = TOP + 40.0 + 18.0 * k as f64;
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{ly:.2}" r="4" fill="{color}"/>"#, LEFT + pw + 14.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, LEFT + pw + 24.0, ly + 4.0, escape(name));
        }
        s.push_str("</svg>\n");
        s
    }
}

pub const METRICS_COLUMNS: [&str; 8] = ["kind", "size", "trial", "max_l2", "max_real", "mc_worst", "mc_stable", "mean_extra_cost"];
pub const TIMING_COLUMNS: [&str; 4] = ["kind", "size", "trial", "seconds"];

fn push_series(series: &mut Vec<(String, Vec<(f64, f64)>)>, kind: &str, pt: (f64, f64)) {
    match series.iter_mut().find(|(k, _)| k == kind) {
        Some((_, v)) => v.push(pt),
        None => series.push((kind.to_string(), vec![pt])),
    }
}

fn write(path: &Path, text: &str) -> Result<(), ReportError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Builds the figure scatters from `metrics.csv`. The LQR row supplies the
/// extra-cost reference and is not plotted as a model.
pub fn figures(metrics: &Table, stable_tol: f64) -> Result<Vec<(&'static str, Scatter, String)>, ReportError> {
    let mut eig = Scatter {
        title: "Most positive closed-loop eigenvalue".into(),
        x_label: "max l2 test error".into(),
        y_label: "max Re(eig)".into(),
        x_log: true,
        y_log: false,
        series: vec![],
        lines: vec![RefLine { y: 0.0, label: "0".into() }],
    };
    let mut fin = Scatter {
        title: "Worst-case final state norm".into(),
        x_label: "max l2 test error".into(),
        y_label: "max final ||x - x_f||".into(),
        x_log: true,
        y_log: true,
        series: vec![],
        lines: vec![RefLine { y: stable_tol, label: "stable".into() }],
    };
    let mut sub = Scatter {
        title: "Mean percent extra cost".into(),
        x_label: "max l2 test error".into(),
        y_label: "extra cost (%)".into(),
        x_log: true,
        y_log: true,
        series: vec![],
        lines: vec![],
    };
    let mut eig_csv = String::from("kind,size,trial,max_l2,max_real\n");
    let mut fin_csv = String::from("kind,size,trial,max_l2,mc_worst\n");
    let mut sub_csv = String::from("kind,size,trial,max_l2,mean_extra_cost\n");
    for i in 0..metrics.len() {
        let kind = metrics.str(i, "kind");
        if kind == "lqr" {
            if let Some(c) = metrics.num(i, "mean_extra_cost")? {
                sub.lines.push(RefLine { y: c, label: "LQR".into() });
            }
            continue;
        }
        let (size, trial) = (metrics.str(i, "size"), metrics.str(i, "trial"));
        let x = metrics.num(i, "max_l2")?.unwrap_or(f64::NAN);
        let id = format!("{kind},{size},{trial},{}", metrics.str(i, "max_l2"));
        if let Some(y) = metrics.num(i, "max_real")? {
            push_series(&mut eig.series, kind, (x, y));
            let _ = writeln!(eig_csv, "{id},{}", metrics.str(i, "max_real"));
        }
        if let Some(y) = metrics.num(i, "mc_worst")? {
            push_series(&mut fin.series, kind, (x, y));
            let _ = writeln!(fin_csv, "{id},{}", metrics.str(i, "mc_worst"));
        }
        if metrics.flag(i, "mc_stable")? {
            if let Some(y) = metrics.num(i, "mean_extra_cost")? {
                push_series(&mut sub.series, kind, (x, y));
                let _ = writeln!(sub_csv, "{id},{}", metrics.str(i, "mean_extra_cost"));
            }
        }
    }
    Ok(vec![("eigenvalues", eig, eig_csv), ("final_state", fin, fin_csv), ("suboptimality", sub, sub_csv)])
}

pub fn training_figure(timings: &Table) -> Result<(Scatter, String), ReportError> {
    let mut fig = Scatter {
        title: "Training time".into(),
        x_label: "training trajectories".into(),
        y_label: "seconds".into(),
        x_log: true,
        y_log: true,
        series: vec![],
        lines: vec![],
    };
    let mut csv = String::from("kind,size,trial,seconds\n");
    for i in 0..timings.len() {
        let kind = timings.str(i, "kind");
        let size = timings.num(i, "size")?.unwrap_or(f64::NAN);
        let secs = timings.num(i, "seconds")?.unwrap_or(f64::NAN);
        push_series(&mut fig.series, kind, (size, secs));
        let _ = writeln!(csv, "{kind},{},{},{}", timings.str(i, "size"), timings.str(i, "trial"), timings.str(i, "seconds"));
    }
    Ok((fig, csv))
}

/// Reads `metrics.csv` (and `timings.csv` when present) from `results` and
/// writes one CSV and one SVG per figure into `out`. Returns the files
/// written; the training-time pair comes last and is not deterministic.
pub fn write_report(results: &Path, out: &Path, stable_tol: f64) -> Result<Vec<PathBuf>, ReportError> {
    let metrics = Table::load(&results.join("metrics.csv"), &METRICS_COLUMNS)?;
    let mut files = vec![];
    for (name, fig, csv) in figures(&metrics, stable_tol)? {
        let c = out.join(format!("{name}.csv"));
        let s = out.join(format!("{name}.svg"));
        write(&c, &csv)?;
        write(&s, &fig.to_svg())?;
        files.push(c);
        files.push(s);
    }
    let tpath = results.join("timings.csv");
    if tpath.exists() {
        let (fig, csv) = training_figure(&Table::load(&tpath, &TIMING_COLUMNS)?)?;
        let c = out.join("training_time.csv");
        let s = out.join("training_time.svg");
        write(&c, &csv)?;
        write(&s, &fig.to_svg())?;
        files.push(c);
        files.push(s);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "kind,size,trial,max_l2,max_real,mc_worst,mc_stable,mean_extra_cost";

    #[test]
    fn missing_column_names_file() {
        let err = Table::parse("kind,size\nlqr,0\n", "results/metrics.csv", &METRICS_COLUMNS).unwrap_err();
        match err {
            ReportError::Schema { path, column } => {
                assert_eq!(path, "results/metrics.csv");
                assert_eq!(column, "trial");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn single_model_single_marker() {
        let text = format!("{HEADER}\nu-qrnet,8,0,1e-2,-0.5,1e-9,true,0.3\n");
        let t = Table::parse(&text, "m", &METRICS_COLUMNS).unwrap();
        let figs = figures(&t, 1e-3).unwrap();
        let svg = figs[0].1.to_svg();
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert_eq!(svg.matches("class=\"marker\"").count(), 1);
    }

    #[test]
    fn markers_straddle_stability_line() {
        let text = format!("{HEADER}\nu-nn,8,0,1e-1,0.4,5.0,false,\nu-nn,32,0,1e-2,-0.4,1e-9,true,0.2\nlqr,0,0,0.2,-1,1e-9,true,1.5\n");
        let t = Table::parse(&text, "m", &METRICS_COLUMNS).unwrap();
        let figs = figures(&t, 1e-3).unwrap();
        let svg = figs[0].1.to_svg();
        let y_of = |tag: &str| -> Vec<f64> {
            svg.lines()
                .filter(|l| l.contains(tag))
                .map(|l| {
                    let key = if tag.contains("marker") { "cy=\"" } else { "y1=\"" };
                    let rest = &l[l.find(key).unwrap() + key.len()..];
                    rest[..rest.find('"').unwrap()].parse().unwrap()
                })
                .collect()
        };
        let line = y_of("class=\"reference\"")[0];
        let m = y_of("class=\"marker\"");
        assert_eq!(m.len(), 2);
        assert!(m.iter().any(|y| *y < line) && m.iter().any(|y| *y > line));
        assert!(svg.contains("stroke-dasharray"));
        // LQR sets the reference level of the extra-cost plot; the unstable model is left out
        assert_eq!(figs[2].1.lines[0].y, 1.5);
        assert_eq!(figs[2].1.series.iter().map(|s| s.1.len()).sum::<usize>(), 1);
    }

    #[test]
    fn cost_plot_is_log_log() {
        let text = format!("{HEADER}\nqrnet,8,0,1e-2,-0.5,1e-9,true,0.3\n");
        let t = Table::parse(&text, "m", &METRICS_COLUMNS).unwrap();
        let figs = figures(&t, 1e-3).unwrap();
        assert!(figs[2].1.x_log && figs[2].1.y_log);
        assert!(figs[1].1.x_log && figs[1].1.y_log);
    }

    #[test]
    fn ragged_row_is_parse_error() {
        let text = format!("{HEADER}\nqrnet,8\n");
        assert!(matches!(Table::parse(&text, "m", &METRICS_COLUMNS), Err(ReportError::Parse { line: 2, .. })));
    }
}
