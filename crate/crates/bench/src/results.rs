//! Result tables: raw per-trial CSV, class-sweep CSV and aggregated plot data.
//!
//! Every file opens with `#` comment lines holding the tool version, the
//! experiment name and the resolved config. Lists inside a cell are joined
//! with `;`. Floats use the shortest representation that parses back to the
//! same value, so a write/read cycle is lossless.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{BenchError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const TRIAL_HEADER: [&str; 10] = ["method", "snr_db", "T", "Q", "trial", "theta_true", "theta_est", "error", "seed", "ms"];
pub const CLASS_HEADER: [&str; 7] = ["series", "classes", "repeat", "node", "train_accuracy", "val_accuracy", "seed"];
pub const PLOT_HEADER: [&str; 9] = ["series", "x", "n", "failed", "rmse", "mean", "stderr", "rmse_ci95", "mean_ci95"];

/// One method on one trial. A failed trial has no estimates and no errors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub method: String,
    pub snr_db: f64,
    pub snapshots: usize,
    pub q: usize,
    pub trial: usize,
    pub theta_true: Vec<f64>,
    pub theta_est: Vec<f64>,
    /// `est - true` after sorting both; for the bound rows, the bound's
    /// standard deviation at the true DOAs.
    pub error: Vec<f64>,
    pub seed: u64,
    pub ms: f64,
}

impl TrialResult {
    pub fn failed(&self) -> bool {
        self.error.is_empty()
    }

    /// Mean squared error over the sources of this trial.
    pub fn mse(&self) -> f64 {
        self.error.iter().map(|e| e * e).sum::<f64>() / self.error.len() as f64
    }
}

/// Sorted-pair errors `est_q - true_q`.
pub fn paired_errors(truth: &[f64], est: &[f64]) -> Vec<f64> {
    let mut t = truth.to_vec();
    let mut e = est.to_vec();
    t.sort_by(f64::total_cmp);
    e.sort_by(f64::total_cmp);
    e.iter().zip(&t).map(|(a, b)| a - b).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    /// `flat`, or `tree{H}_l{h}` for a node of an `H`-level tree.
    pub series: String,
    pub classes: usize,
    pub repeat: usize,
    /// Node prefix like `0.3`, `root`, or `-` for flat classifiers.
    pub node: String,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub seed: u64,
}

/// One aggregated point. For trial tables `mean` is the mean squared error
/// and `rmse` its square root; for class tables `mean` is the accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub series: String,
    pub x: f64,
    pub n: usize,
    pub failed: usize,
    pub rmse: f64,
    pub mean: f64,
    pub stderr: f64,
    /// Delta-method 95% half-width of `rmse`.
    pub rmse_ci95: f64,
    pub mean_ci95: f64,
}

/// Which trial field becomes the plot x-axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Snr,
    Q,
    Snapshots,
}

pub fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|x| x.parse::<f64>().map_err(|e| BenchError::Results(format!("bad number {x:?}: {e}")))).collect()
}

fn preamble(w: &mut impl Write, experiment: &str, config_toml: &str) -> Result<()> {
    writeln!(w, "# tdnn-bench {VERSION}")?;
    writeln!(w, "# experiment: {experiment}")?;
    for line in config_toml.lines() {
        writeln!(w, "# config: {line}")?;
    }
    Ok(())
}

/// Recovers the experiment name and config text from a file's comment lines.
pub fn read_preamble(text: &str) -> (Option<String>, String) {
    let mut experiment = None;
    let mut config = String::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(e) = line.strip_prefix("# experiment: ") {
            experiment = Some(e.to_string());
        } else if let Some(c) = line.strip_prefix("# config: ") {
            config.push_str(c);
            config.push('\n');
        } else if line == "# config:" {
            config.push('\n');
        }
    }
    (experiment, config)
}

pub fn write_trials(mut w: impl Write, experiment: &str, config_toml: &str, rows: &[TrialResult]) -> Result<()> {
    preamble(&mut w, experiment, config_toml)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(TRIAL_HEADER)?;
    for r in rows {
        csv.write_record([
            r.method.clone(),
            r.snr_db.to_string(),
            r.snapshots.to_string(),
            r.q.to_string(),
            r.trial.to_string(),
            fmt_list(&r.theta_true),
            fmt_list(&r.theta_est),
            fmt_list(&r.error),
            r.seed.to_string(),
            r.ms.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

fn reader(r: impl Read, header: &[&str]) -> Result<csv::Reader<impl Read>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let got: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(BenchError::Results(format!("unexpected header {got:?}")));
    }
    Ok(rd)
}

fn field<F: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<F>
where
    F::Err: std::fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| BenchError::Results(format!("missing column {i}")))?;
    raw.parse().map_err(|e| BenchError::Results(format!("column {i} value {raw:?}: {e}")))
}

pub fn read_trials(r: impl Read) -> Result<Vec<TrialResult>> {
    let mut rd = reader(r, &TRIAL_HEADER)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(TrialResult {
            method: field(&rec, 0)?,
            snr_db: field(&rec, 1)?,
            snapshots: field(&rec, 2)?,
            q: field(&rec, 3)?,
            trial: field(&rec, 4)?,
            theta_true: parse_list(&rec[5])?,
            theta_est: parse_list(&rec[6])?,
            error: parse_list(&rec[7])?,
            seed: field(&rec, 8)?,
            ms: field(&rec, 9)?,
        });
    }
    Ok(out)
}

pub fn emit_results(path: &Path, experiment: &str, config_toml: &str, rows: &[TrialResult]) -> Result<()> {
    let mut buf = Vec::new();
    write_trials(&mut buf, experiment, config_toml, rows)?;
    write_file(path, &buf)
}

pub fn load_results(path: &Path) -> Result<Vec<TrialResult>> {
    read_trials(std::fs::File::open(path)?)
}

pub fn write_classes(mut w: impl Write, config_toml: &str, rows: &[ClassResult]) -> Result<()> {
    preamble(&mut w, "classes", config_toml)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(CLASS_HEADER)?;
    for r in rows {
        csv.write_record([
            r.series.clone(),
            r.classes.to_string(),
            r.repeat.to_string(),
            r.node.clone(),
            r.train_accuracy.to_string(),
            r.val_accuracy.to_string(),
            r.seed.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_classes(r: impl Read) -> Result<Vec<ClassResult>> {
    let mut rd = reader(r, &CLASS_HEADER)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(ClassResult {
            series: field(&rec, 0)?,
            classes: field(&rec, 1)?,
            repeat: field(&rec, 2)?,
            node: field(&rec, 3)?,
            train_accuracy: field(&rec, 4)?,
            val_accuracy: field(&rec, 5)?,
            seed: field(&rec, 6)?,
        });
    }
    Ok(out)
}

pub fn write_plot(mut w: impl Write, experiment: &str, config_toml: &str, rows: &[PlotRow]) -> Result<()> {
    preamble(&mut w, experiment, config_toml)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(PLOT_HEADER)?;
    for r in rows {
        csv.write_record([
            r.series.clone(),
            r.x.to_string(),
            r.n.to_string(),
            r.failed.to_string(),
            r.rmse.to_string(),
            r.mean.to_string(),
            r.stderr.to_string(),
            r.rmse_ci95.to_string(),
            r.mean_ci95.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_plot(r: impl Read) -> Result<Vec<PlotRow>> {
    let mut rd = reader(r, &PLOT_HEADER)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(PlotRow {
            series: field(&rec, 0)?,
            x: field(&rec, 1)?,
            n: field(&rec, 2)?,
            failed: field(&rec, 3)?,
            rmse: field(&rec, 4)?,
            mean: field(&rec, 5)?,
            stderr: field(&rec, 6)?,
            rmse_ci95: field(&rec, 7)?,
            mean_ci95: field(&rec, 8)?,
        });
    }
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Sample mean and standard error of the mean (zero for a single sample).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups `(series, x)` keys in order of first appearance.
fn group<'a, R>(rows: &'a [R], key: impl Fn(&R) -> (String, f64)) -> Vec<((String, f64), Vec<&'a R>)> {
    let mut groups: Vec<((String, f64), Vec<&R>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match groups.iter_mut().find(|(g, _)| g.0 == k.0 && g.1.to_bits() == k.1.to_bits()) {
            Some((_, v)) => v.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    groups
}

/// Per `(method, x)`: RMSE over successful trials, the mean squared error and
/// its standard error, and a delta-method interval for the RMSE.
pub fn aggregate_trials(rows: &[TrialResult], axis: XAxis) -> Vec<PlotRow> {
    let key = |r: &TrialResult| {
        let x = match axis {
            XAxis::Snr => r.snr_db,
            XAxis::Q => r.q as f64,
            XAxis::Snapshots => r.snapshots as f64,
        };
        (r.method.clone(), x)
    };
    group(rows, key)
        .into_iter()
        .map(|((series, x), members)| {
            let ok: Vec<f64> = members.iter().filter(|r| !r.failed()).map(|r| r.mse()).collect();
            let failed = members.len() - ok.len();
            if ok.is_empty() {
                return PlotRow { series, x, n: 0, failed, rmse: f64::NAN, mean: f64::NAN, stderr: f64::NAN, rmse_ci95: f64::NAN, mean_ci95: f64::NAN };
            }
            let (mean, stderr) = mean_stderr(&ok);
            let rmse = mean.sqrt();
            let rmse_ci95 = if rmse > 0.0 { 1.96 * stderr / (2.0 * rmse) } else { 0.0 };
            PlotRow { series, x, n: ok.len(), failed, rmse, mean, stderr, rmse_ci95, mean_ci95: 1.96 * stderr }
        })
        .collect()
}

/// Per `(series, classes)`: mean validation accuracy over repeats and nodes.
pub fn aggregate_classes(rows: &[ClassResult]) -> Vec<PlotRow> {
    group(rows, |r| (r.series.clone(), r.classes as f64))
        .into_iter()
        .map(|((series, x), members)| {
            let acc: Vec<f64> = members.iter().map(|r| r.val_accuracy).collect();
            let (mean, stderr) = mean_stderr(&acc);
            PlotRow { series, x, n: acc.len(), failed: 0, rmse: f64::NAN, mean, stderr, rmse_ci95: f64::NAN, mean_ci95: 1.96 * stderr }
        })
        .collect()
}
