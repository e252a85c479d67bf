//! Multi-run experiments: redaction ablation, frequency-band sweep, attention-module scaling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Device;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::redaction::RedactionSpec;
use crate::tasks::{generate_synthetic_dataset, Dataset, MetricSet, TaskSelection};
use crate::tensor::Task;

use super::config::TrainConfig;
use super::plot::LinePlot;
use super::train::{train_with, write_atomic, Model, RunOptions, RunRecord};

/// Reference numbers for the redaction ablation on NYUD-v2, single-task setting:
/// (redaction, seg mIoU, depth aErr, normals mErr).
pub const REFERENCE_ABLATION: [(&str, f64, f64, f64); 3] = [
    ("none", 37.25, 59.70, 26.30),
    ("spatial", 38.38, 58.34, 26.07),
    ("spectral", 38.21, 56.76, 25.75),
];

pub const REDACTION_ARMS: [&str; 3] = ["none", "spatial", "spectral"];

/// Seeds used by a multi-seed experiment: `cfg.seed, cfg.seed + 1, ...`.
pub fn experiment_seeds(cfg: &TrainConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| cfg.seed + i).collect()
}

/// Metric compared across arms, and whether larger is better.
pub fn headline_metric(task: Task) -> (&'static str, bool) {
    match task {
        Task::Segmentation => ("miou", true),
        Task::Depth => ("a_err", false),
        Task::Normals => ("m_err_deg", false),
    }
}

fn headline_value(m: &MetricSet, task: Task) -> Result<f64> {
    m.headline(task)
        .ok_or_else(|| Error::Config(format!("run produced no {task} metrics")))
}

fn final_metrics(record: &RunRecord) -> Result<MetricSet> {
    record
        .final_metrics()
        .ok_or_else(|| Error::Config("run finished without a validation pass".into()))
}

fn shared_dataset(cfg: &TrainConfig, dataset: Option<Arc<Dataset>>) -> Result<Arc<Dataset>> {
    match dataset {
        Some(d) => Ok(d),
        None => Ok(Arc::new(generate_synthetic_dataset(&cfg.data)?)),
    }
}

fn run(cfg: TrainConfig, dataset: &Arc<Dataset>, verbose: bool) -> Result<RunRecord> {
    if verbose {
        eprintln!("run {}", cfg.out_dir.display());
    }
    train_with(
        cfg,
        RunOptions {
            dataset: Some(dataset.clone()),
            verbose,
            ..Default::default()
        },
    )
}

/// The three arms of the ablation for one task.
pub fn ablation_arm(base: &TrainConfig, task: Task, arm: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.task = TaskSelection::Single(task);
    match arm {
        "none" => cfg = cfg.baseline(),
        "spatial" => {
            cfg.crm.enabled = true;
            cfg.redaction = RedactionSpec::random_blocks(cfg.experiment.ablate_block);
        }
        "spectral" => {
            let (lo, hi) = cfg.experiment.ablate_band;
            cfg.crm.enabled = true;
            cfg.redaction = RedactionSpec::bandstop(lo, hi);
        }
        other => return Err(Error::Config(format!("unknown ablation arm `{other}`"))),
    }
    if arm != "none" && cfg.loss.weights.gamma == 0.0 {
        return Err(Error::Config("ablation arms need loss.gamma > 0".into()));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub task: Task,
    pub redaction: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "task,redaction,metric,value,seed";

    /// Seed mean of the headline metric of one cell.
    pub fn cell_mean(&self, task: Task, redaction: &str) -> Option<f64> {
        let metric = headline_metric(task).0;
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task == task && r.redaction == redaction && r.metric == metric)
            .map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Tasks on which `redaction` beats the unredacted arm.
    pub fn wins(&self, redaction: &str) -> Vec<Task> {
        Task::ALL
            .into_iter()
            .filter(|&t| {
                let higher = headline_metric(t).1;
                match (self.cell_mean(t, redaction), self.cell_mean(t, "none")) {
                    (Some(a), Some(b)) if higher => a > b,
                    (Some(a), Some(b)) => a < b,
                    _ => false,
                }
            })
            .collect()
    }

    pub fn has_nan(&self) -> bool {
        self.rows.iter().any(|r| !r.value.is_finite())
    }

    pub fn completed_cells(&self) -> usize {
        Task::ALL
            .into_iter()
            .flat_map(|t| REDACTION_ARMS.map(move |a| (t, a)))
            .filter(|&(t, a)| self.cell_mean(t, a).is_some_and(f64::is_finite))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.task, r.redaction, r.metric, r.value, r.seed);
        }
        s
    }

    /// Markdown table with tasks as columns, as percent for mIoU and aErr, degrees for mErr.
    pub fn to_markdown(&self) -> String {
        let scale = |t: Task| if t == Task::Normals { 1.0 } else { 100.0 };
        let mut s = String::from("| redaction | seg mIoU (up) | depth aErr (down) | normals mErr (down) |\n|---|---|---|---|\n");
        for arm in REDACTION_ARMS {
            let cells: Vec<String> = Task::ALL
                .into_iter()
                .map(|t| match self.cell_mean(t, arm) {
                    Some(v) => format!("{:.2}", v * scale(t)),
                    None => "n/a".into(),
                })
                .collect();
            let _ = writeln!(s, "| {arm} | {} |", cells.join(" | "));
        }
        for arm in ["spatial", "spectral"] {
            let wins = self.wins(arm);
            let names: Vec<&str> = wins.iter().map(|t| t.as_str()).collect();
            let _ = writeln!(s, "\n{arm} beats none on {}/3 tasks: [{}]", wins.len(), names.join(", "));
        }
        s.push_str("\nReference values (NYUD-v2, single-task, mIoU / aErr / mErr):\n\n");
        for (arm, a, b, c) in REFERENCE_ABLATION {
            let _ = writeln!(s, "- {arm}: {a:.2} / {b:.2} / {c:.2}");
        }
        s
    }
}

/// Trains every (task, redaction) cell for each seed. Writes `ablation.csv` and `ablation.md`.
pub fn ablate_redaction(
    base: &TrainConfig,
    seeds: &[u64],
    out: &Path,
    dataset: Option<Arc<Dataset>>,
    verbose: bool,
) -> Result<AblationReport> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = shared_dataset(base, dataset)?;
    let mut report = AblationReport::default();
    for task in Task::ALL {
        for arm in REDACTION_ARMS {
            for &seed in seeds {
                let mut cfg = ablation_arm(base, task, arm)?;
                cfg.seed = seed;
                cfg.out_dir = out.join(task.as_str()).join(arm).join(format!("seed_{seed}"));
                let metrics = final_metrics(&run(cfg, &dataset, verbose)?)?;
                for (t, metric, value) in metrics.entries() {
                    if t == task {
                        report.rows.push(AblationRow {
                            task,
                            redaction: arm.to_string(),
                            metric: metric.to_string(),
                            value,
                            seed,
                        });
                    }
                }
            }
        }
    }
    write_atomic(&out.join("ablation.csv"), &report.to_csv())?;
    write_atomic(&out.join("ablation.md"), &report.to_markdown())?;
    Ok(report)
}

/// Stop band of width `width` centered at `center`, clipped to `[0, 1]`.
pub fn band_around(center: f64, width: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&center) || !(width > 0.0 && width <= 1.0) {
        return Err(Error::Config(format!("band center {center} / width {width} out of range")));
    }
    Ok(((center - width / 2.0).max(0.0), (center + width / 2.0).min(1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandRow {
    pub center: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    pub seed: u64,
    pub a_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSweep {
    pub rows: Vec<BandRow>,
    pub plot: PathBuf,
    pub report: String,
}

/// The reference finding: error is lowest for a middle band.
pub const MIDDLE_BAND: (f64, f64) = (0.35, 0.65);

impl BandSweep {
    pub const CSV_HEADER: &'static str = "center,band_lo,band_hi,seed,a_err";

    /// Seed-mean error per center, in sweep order.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(c, _, _)| *c == r.center) {
                Some(e) => {
                    e.1 += r.a_err;
                    e.2 += 1;
                }
                None => out.push((r.center, r.a_err, 1)),
            }
        }
        out.into_iter().map(|(c, s, n)| (c, s / n as f64)).collect()
    }

    pub fn argmin(&self) -> Option<(f64, f64)> {
        self.curve().into_iter().min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.center, r.band_lo, r.band_hi, r.seed, r.a_err);
        }
        s
    }
}

fn band_report(curve: &[(f64, f64)], width: f64) -> String {
    let mut s = format!("Depth aErr after redacting a stop band of width {width} at each center (seed mean):\n\n");
    for (c, e) in curve {
        let _ = writeln!(s, "- center {c:.2}: aErr {e:.5}");
    }
    if let Some(&(c, e)) = curve.iter().min_by(|a, b| a.1.total_cmp(&b.1)) {
        let middle = (MIDDLE_BAND.0..=MIDDLE_BAND.1).contains(&c);
        let _ = writeln!(s, "\nLowest error at center {c:.2} (aErr {e:.5}).");
        let _ = writeln!(
            s,
            "Reference finding: error is lowest when a middle band is redacted (centers {:.2}-{:.2} here). \
             This sweep {} it.",
            MIDDLE_BAND.0,
            MIDDLE_BAND.1,
            if middle { "agrees with" } else { "does not reproduce" }
        );
    }
    s
}

/// Depth-task sweep of the stop-band center. Writes `band_sweep.csv`, `band_sweep.png`, `band_sweep.md`.
pub fn band_sweep(
    base: &TrainConfig,
    centers: &[f64],
    seeds: &[u64],
    out: &Path,
    dataset: Option<Arc<Dataset>>,
    verbose: bool,
) -> Result<BandSweep> {
    if base.task != TaskSelection::Single(Task::Depth) {
        return Err(Error::Config("band sweep needs task = depth".into()));
    }
    if centers.is_empty() {
        return Err(Error::Config("band sweep needs at least one center".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = shared_dataset(base, dataset)?;
    let width = base.experiment.band_width;
    let mut rows = Vec::new();
    for &center in centers {
        let (lo, hi) = band_around(center, width)?;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.crm.enabled = true;
            cfg.redaction = RedactionSpec::bandstop(lo, hi);
            cfg.out_dir = out.join(format!("center_{center:.2}")).join(format!("seed_{seed}"));
            let metrics = final_metrics(&run(cfg, &dataset, verbose)?)?;
            rows.push(BandRow {
                center,
                band_lo: lo,
                band_hi: hi,
                seed,
                a_err: headline_value(&metrics, Task::Depth)?,
            });
        }
    }
    let mut sweep = BandSweep {
        rows,
        plot: out.join("band_sweep.png"),
        report: String::new(),
    };
    let curve = sweep.curve();
    sweep.report = band_report(&curve, width);
    let marker = sweep.argmin().and_then(|(c, _)| curve.iter().position(|p| p.0 == c));
    LinePlot {
        title: "DEPTH AERR VS REDACTED BAND CENTER".into(),
        x_label: "BAND CENTER".into(),
        y_label: "AERR".into(),
        points: curve,
        marker,
        band: Some((MIDDLE_BAND.0, MIDDLE_BAND.1, "EXPECTED MINIMUM".into())),
    }
    .save(&sweep.plot)?;
    write_atomic(&out.join("band_sweep.csv"), &sweep.to_csv())?;
    write_atomic(&out.join("band_sweep.md"), &sweep.report)?;
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub dim: usize,
    pub params: usize,
    pub macs: usize,
    pub miou: f64,
    pub seed: u64,
}

pub const SCALING_HEADER: &str = "dim,params,macs,miou,seed";

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut s = format!("{SCALING_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.dim, r.params, r.macs, r.miou, r.seed);
    }
    s
}

/// Parameter count and MAC estimate of the attention module at a given dimension.
pub fn sa_cost(base: &TrainConfig, dim: usize) -> Result<(usize, usize)> {
    let mut cfg = base.clone();
    cfg.sa.config.dim = dim;
    cfg.validate()?;
    let model = Model::new(&cfg, &Device::Cpu)?;
    let n = cfg.basenet().condition_channels();
    Ok((
        model.store.num_params_under("sa."),
        cfg.sa.config.macs(cfg.data.height, cfg.data.width, n),
    ))
}

/// Trains one segmentation run per (dim, seed). Writes `sa_scaling.csv`.
pub fn sa_scaling(
    base: &TrainConfig,
    dims: &[usize],
    seeds: &[u64],
    out: &Path,
    dataset: Option<Arc<Dataset>>,
    verbose: bool,
) -> Result<Vec<ScalingRow>> {
    if !base.sa.enabled {
        return Err(Error::Config("sa scaling needs sa.enabled = true".into()));
    }
    if base.task != TaskSelection::Single(Task::Segmentation) {
        return Err(Error::Config("sa scaling reports mIoU and needs task = seg".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = shared_dataset(base, dataset)?;
    let mut rows = Vec::new();
    for &dim in dims {
        let (params, macs) = sa_cost(base, dim)?;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.sa.config.dim = dim;
            cfg.seed = seed;
            cfg.out_dir = out.join(format!("dim_{dim}")).join(format!("seed_{seed}"));
            let metrics = final_metrics(&run(cfg, &dataset, verbose)?)?;
            rows.push(ScalingRow {
                dim,
                params,
                macs,
                miou: headline_value(&metrics, Task::Segmentation)?,
                seed,
            });
        }
    }
    write_atomic(&out.join("sa_scaling.csv"), &scaling_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: Task, redaction: &str, value: f64, seed: u64) -> AblationRow {
        AblationRow {
            task,
            redaction: redaction.into(),
            metric: headline_metric(task).0.into(),
            value,
            seed,
        }
    }

    #[test]
    fn wins_respect_metric_direction() {
        let mut r = AblationReport::default();
        for (arm, seg, depth, normals) in [("none", 0.5, 0.2, 20.0), ("spatial", 0.6, 0.3, 19.0), ("spectral", 0.4, 0.1, 21.0)] {
            r.rows.push(row(Task::Segmentation, arm, seg, 0));
            r.rows.push(row(Task::Depth, arm, depth, 0));
            r.rows.push(row(Task::Normals, arm, normals, 0));
        }
        assert_eq!(r.wins("spatial"), vec![Task::Segmentation, Task::Normals]);
        assert_eq!(r.wins("spectral"), vec![Task::Depth]);
        assert_eq!(r.completed_cells(), 9);
        assert!(!r.has_nan());
        let md = r.to_markdown();
        assert!(md.contains("37.25 / 59.70 / 26.30"));
        assert!(md.contains("| spatial | 60.00 | 30.00 | 19.00 |"));
    }

    #[test]
    fn cell_mean_averages_seeds() {
        let mut r = AblationReport::default();
        r.rows.push(row(Task::Depth, "none", 0.2, 0));
        r.rows.push(row(Task::Depth, "none", 0.4, 1));
        assert!((r.cell_mean(Task::Depth, "none").unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(r.cell_mean(Task::Depth, "spatial"), None);
        assert!(r.to_csv().starts_with("task,redaction,metric,value,seed\n"));
    }

    #[test]
    fn band_clipping() {
        assert_eq!(band_around(0.5, 0.2).unwrap(), (0.4, 0.6));
        assert_eq!(band_around(0.05, 0.2).unwrap(), (0.0, 0.15000000000000002));
        assert_eq!(band_around(0.95, 0.2).unwrap().1, 1.0);
        assert!(band_around(1.5, 0.2).is_err());
        assert!(band_around(0.5, 0.0).is_err());
    }

    #[test]
    fn sweep_curve_and_argmin() {
        let rows = [(0.1, 0, 0.5), (0.1, 1, 0.7), (0.5, 0, 0.2), (0.5, 1, 0.4), (0.9, 0, 0.9), (0.9, 1, 0.9)]
            .into_iter()
            .map(|(center, seed, a_err)| BandRow { center, band_lo: 0.0, band_hi: 1.0, seed, a_err })
            .collect();
        let sweep = BandSweep { rows, plot: PathBuf::new(), report: String::new() };
        let curve = sweep.curve();
        assert_eq!(curve.len(), 3);
        assert!((curve[0].1 - 0.6).abs() < 1e-12);
        assert_eq!(sweep.argmin().unwrap().0, 0.5);
        let report = band_report(&curve, 0.2);
        assert!(report.contains("Lowest error at center 0.50"));
        assert!(report.contains("agrees with"));
    }

    #[test]
    fn arms_configure_redaction() {
        let base = TrainConfig::default();
        let none = ablation_arm(&base, Task::Depth, "none").unwrap();
        assert!(!none.crm.enabled);
        assert_eq!(none.loss.weights.gamma, 0.0);
        let spectral = ablation_arm(&base, Task::Depth, "spectral").unwrap();
        assert!(spectral.crm.enabled);
        assert_eq!(spectral.redaction, RedactionSpec::bandstop(0.3, 0.6));
        assert!(ablation_arm(&base, Task::Depth, "other").is_err());
    }

    #[test]
    fn scaling_costs_grow_with_dim() {
        let mut cfg = TrainConfig::default();
        cfg.sa.enabled = true;
        cfg.base_width = 4;
        let costs: Vec<(usize, usize)> = [16, 32, 64].iter().map(|&d| sa_cost(&cfg, d).unwrap()).collect();
        assert!(costs.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1));
    }
}
