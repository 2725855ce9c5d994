//! Leave-one-timepoint-out evaluation and ablations.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datasets::{make_holdout, SnapshotDataset};
use crate::error::{param, Result};
use crate::gae::{train_gae, GaeConfig};
use crate::geometry::KernelSpec;
use crate::training::{train_mioflow_observed, BatchObserver, LogRecord, MioflowConfig, MioflowModel};
use crate::transport::{emd, mmd_gaussian, mmd_mean, one_nn_distance, DiscreteDistribution, NnAggregate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// RBF scales averaged by the Gaussian MMD.
    pub mmd_scales: Vec<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { mmd_scales: vec![0.1, 0.5] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    W1,
    MmdGaussian,
    MmdMean,
    MmdMeanSq,
    OneNnMean,
    OneNnWorstQuartile,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::W1,
        Metric::MmdGaussian,
        Metric::MmdMean,
        Metric::MmdMeanSq,
        Metric::OneNnMean,
        Metric::OneNnWorstQuartile,
    ];

    pub fn compute(self, pred: ArrayView2<f64>, truth: ArrayView2<f64>, cfg: &MetricConfig) -> Result<f64> {
        match self {
            Metric::W1 => {
                let a = DiscreteDistribution::uniform_view(pred)?;
                let b = DiscreteDistribution::uniform_view(truth)?;
                Ok(emd(&a, &b, 1)?.0)
            }
            Metric::MmdGaussian => mmd_gaussian(pred, truth, &cfg.mmd_scales),
            Metric::MmdMean => mmd_mean(pred, truth, false),
            Metric::MmdMeanSq => mmd_mean(pred, truth, true),
            Metric::OneNnMean => one_nn_distance(pred, truth, NnAggregate::Mean),
            Metric::OneNnWorstQuartile => one_nn_distance(pred, truth, NnAggregate::WorstQuartile),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub w1: f64,
    pub mmd_gaussian: f64,
    pub mmd_mean: f64,
    pub mmd_mean_sq: f64,
    pub one_nn_mean: f64,
    pub one_nn_worst_quartile: f64,
}

impl Metrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::W1 => self.w1,
            Metric::MmdGaussian => self.mmd_gaussian,
            Metric::MmdMean => self.mmd_mean,
            Metric::MmdMeanSq => self.mmd_mean_sq,
            Metric::OneNnMean => self.one_nn_mean,
            Metric::OneNnWorstQuartile => self.one_nn_worst_quartile,
        }
    }

    fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::W1 => self.w1 = v,
            Metric::MmdGaussian => self.mmd_gaussian = v,
            Metric::MmdMean => self.mmd_mean = v,
            Metric::MmdMeanSq => self.mmd_mean_sq = v,
            Metric::OneNnMean => self.one_nn_mean = v,
            Metric::OneNnWorstQuartile => self.one_nn_worst_quartile = v,
        }
    }
}

pub fn compute_metrics(pred: ArrayView2<f64>, truth: ArrayView2<f64>, cfg: &MetricConfig) -> Result<Metrics> {
    let mut out = Metrics::default();
    for m in Metric::ALL {
        out.set(m, m.compute(pred, truth, cfg)?);
    }
    Ok(out)
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub held_time: u32,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub config: serde_json::Value,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let header = [
            "label", "held", "w1", "mmd_g", "mmd_m", "mmd_m_sq", "1nn", "1nn_q4", "runtime_s",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let m = &r.metrics;
            cells.push(vec![
                r.label.clone(),
                r.held_time.to_string(),
                format!("{:.4}", m.w1),
                format!("{:.4}", m.mmd_gaussian),
                format!("{:.4}", m.mmd_mean),
                format!("{:.4}", m.mmd_mean_sq),
                format!("{:.4}", m.one_nn_mean),
                format!("{:.4}", m.one_nn_worst_quartile),
                format!("{:.2}", r.runtime_seconds),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    if c == 0 {
                        format!("{v:<w$}", w = widths[c])
                    } else {
                        format!("{v:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

fn neighbours(ds: &SnapshotDataset, held_time: u32) -> Result<(usize, usize, usize)> {
    let k = ds
        .times()
        .iter()
        .position(|&t| t == held_time)
        .ok_or_else(|| crate::Error::Param(format!("time {held_time} is not in the dataset")))?;
    if k == 0 || k + 1 == ds.len() {
        return param(format!("held-out time {held_time} must be interior"));
    }
    Ok((k - 1, k, k + 1))
}

/// Mean of the metric from the previous and from the next snapshot to the
/// held one.
pub fn baseline_metric(ds: &SnapshotDataset, held_time: u32, metric: Metric, cfg: &MetricConfig) -> Result<f64> {
    let (prev, held, next) = neighbours(ds, held_time)?;
    let truth = ds.snapshot(held).view();
    let a = metric.compute(ds.snapshot(prev).view(), truth, cfg)?;
    let b = metric.compute(ds.snapshot(next).view(), truth, cfg)?;
    Ok(0.5 * (a + b))
}

pub fn baseline_row(ds: &SnapshotDataset, held_time: u32, cfg: &MetricConfig) -> Result<MetricRow> {
    let mut metrics = Metrics::default();
    for m in Metric::ALL {
        metrics.set(m, baseline_metric(ds, held_time, m, cfg)?);
    }
    Ok(MetricRow {
        label: "baseline".into(),
        held_time,
        metrics,
        runtime_seconds: 0.0,
    })
}

/// Everything produced by one hold-out run.
#[derive(Clone, Debug)]
pub struct HoldoutOutcome {
    pub row: MetricRow,
    /// Predicted points at the held time, in data space.
    pub predicted: Array2<f64>,
    pub truth: Array2<f64>,
    pub model: MioflowModel,
    pub log: Vec<LogRecord>,
}

/// Seed used for the prediction noise of a hold-out run.
pub fn prediction_seed(seed: u64) -> u64 {
    seed ^ 0x0bad_5eed
}

/// Train on every snapshot except `held_time` (with a GAE first when
/// `gae` is given), push the whole first snapshot to the held time and score
/// the prediction against the withheld points.
pub fn evaluate_holdout(
    ds: &SnapshotDataset,
    held_time: u32,
    gae: Option<&GaeConfig>,
    cfg: &MioflowConfig,
    metrics: &MetricConfig,
    seed: u64,
) -> Result<HoldoutOutcome> {
    evaluate_holdout_observed(ds, held_time, gae, cfg, metrics, seed, None)
}

pub fn evaluate_holdout_observed<'a>(
    ds: &SnapshotDataset,
    held_time: u32,
    gae: Option<&GaeConfig>,
    cfg: &MioflowConfig,
    metrics: &MetricConfig,
    seed: u64,
    observer: Option<BatchObserver<'a>>,
) -> Result<HoldoutOutcome> {
    let split = make_holdout(ds, held_time)?;
    let cfg = MioflowConfig {
        seed,
        use_gae: gae.is_some(),
        ..cfg.clone()
    };
    let start = Instant::now();
    let autoencoder = match gae {
        Some(g) => Some(train_gae(&split.train, g, seed)?.model),
        None => None,
    };
    let trained = train_mioflow_observed(&split.train, autoencoder.as_ref(), &cfg, observer)?;
    let runtime_seconds = start.elapsed().as_secs_f64();

    let first = split.train.first_time();
    let bundle = trained.model.predict(
        split.train.snapshot(0).view(),
        first,
        &[held_time],
        prediction_seed(seed),
        false,
    )?;
    let predicted = bundle.final_state().clone();
    let truth = split.truth.into_inner();
    let row = MetricRow {
        label: "mioflow".into(),
        held_time,
        metrics: compute_metrics(predicted.view(), truth.view(), metrics)?,
        runtime_seconds,
    };
    Ok(HoldoutOutcome {
        row,
        predicted,
        truth,
        model: trained.model,
        log: trained.log,
    })
}

/// One setting of the GAE axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaeVariant {
    Off,
    /// GAE with the given kernel (other GAE settings from the base config).
    Kernel(KernelSpec),
}

impl GaeVariant {
    fn label(&self) -> String {
        match self {
            GaeVariant::Off => "gae=off".into(),
            GaeVariant::Kernel(KernelSpec::Gaussian { .. }) => "gae=gaussian".into(),
            GaeVariant::Kernel(KernelSpec::AlphaDecay { .. }) => "gae=alpha_decay".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationAxes {
    pub gae: Vec<GaeVariant>,
    pub density: Vec<bool>,
}

/// One hold-out run per element of `gae x density`, plus the baseline row.
/// Runs are spread over `jobs` threads.
pub fn ablation_suite(
    ds: &SnapshotDataset,
    held_time: u32,
    axes: &AblationAxes,
    base_gae: &GaeConfig,
    base: &MioflowConfig,
    metrics: &MetricConfig,
    seed: u64,
    jobs: usize,
) -> Result<MetricReport> {
    if axes.gae.is_empty() || axes.density.is_empty() {
        return param("every ablation axis needs at least one setting");
    }
    let mut cells = Vec::new();
    for g in &axes.gae {
        for &d in &axes.density {
            cells.push((g.clone(), d));
        }
    }
    let run = |(g, d): &(GaeVariant, bool)| -> Result<MetricRow> {
        let gae_cfg = match g {
            GaeVariant::Off => None,
            GaeVariant::Kernel(k) => Some(GaeConfig { kernel: *k, ..base_gae.clone() }),
        };
        let cfg = MioflowConfig { use_density: *d, ..base.clone() };
        let mut row = evaluate_holdout(ds, held_time, gae_cfg.as_ref(), &cfg, metrics, seed)?.row;
        row.label = format!("{} density={}", g.label(), if *d { "on" } else { "off" });
        Ok(row)
    };
    let jobs = jobs.max(1).min(cells.len());
    let mut results: Vec<Option<Result<MetricRow>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = results.chunks_mut(cells.len().div_ceil(jobs)).enumerate().collect();
        let per = cells.len().div_ceil(jobs);
        for (c, slot) in chunks {
            let cells = &cells;
            let run = &run;
            scope.spawn(move || {
                for (i, out) in slot.iter_mut().enumerate() {
                    *out = Some(run(&cells[c * per + i]));
                }
            });
        }
    });
    let mut rows = vec![baseline_row(ds, held_time, metrics)?];
    for r in results {
        rows.push(r.expect("every cell ran")?);
    }
    Ok(MetricReport {
        seed,
        config: serde_json::json!({
            "held_time": held_time,
            "axes": axes,
            "gae": base_gae,
            "mioflow": base,
            "metrics": metrics,
        }),
        rows,
    })
}
