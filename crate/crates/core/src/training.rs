//! Loss assembly and the local/global training schedule for the flow model.
//!
//! Training runs in "model time": snapshot labels shifted so the first
//! snapshot sits at 0. With a GAE, every snapshot is encoded once up front and
//! the flow lives entirely in latent coordinates.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::datasets::SnapshotDataset;
use crate::error::{param, Error, Result};
use crate::gae::GeodesicAutoencoder;
use crate::net::{Activation, AdamW};
use crate::ode::{self, BundleGradient, SdeParams, SolverConfig, TrajectoryBundle, VectorField};
use crate::transport::{emd, emd_gradient, DiscreteDistribution};
use crate::util::{rng, Rng};

pub const MODEL_CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MioflowConfig {
    pub lambda_d: f64,
    pub lambda_e: f64,
    /// Hinge floor of the density penalty.
    pub density_h: f64,
    pub density_k: usize,
    pub n_local: usize,
    pub n_global: usize,
    pub batches_per_epoch: usize,
    /// Points drawn per snapshot for every step.
    pub batch_size: usize,
    pub use_gae: bool,
    pub use_density: bool,
    /// Learn per-interval diffusion scales; otherwise integrate a plain ODE.
    pub use_sde: bool,
    pub sigma_init: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub weight_decay: f64,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for MioflowConfig {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_e: 0.0,
            density_h: 0.01,
            density_k: 5,
            n_local: 30,
            n_global: 15,
            batches_per_epoch: 20,
            batch_size: 60,
            use_gae: false,
            use_density: true,
            use_sde: true,
            sigma_init: 0.1,
            hidden: vec![16, 32, 16],
            activation: Activation::LeakyRelu,
            lr: 1e-3,
            weight_decay: 0.01,
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

impl MioflowConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_e", self.lambda_e),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return param(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.density_h > 0.0) {
            return param("density_h must be positive");
        }
        if self.density_k == 0 {
            return param("density_k must be at least 1");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return param("batch_size and batches_per_epoch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return param("learning rate must be positive");
        }
        if !self.sigma_init.is_finite() {
            return param("sigma_init must be finite");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return param("hidden widths must be positive");
        }
        self.solver.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_m: f64,
    pub l_e: f64,
    pub l_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(l_m: f64, l_e: f64, l_d: f64) -> Self {
        Self { l_m, l_e, l_d, total: l_m + l_e + l_d }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Local,
    Global,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub step: usize,
    pub l_m: f64,
    pub l_e: f64,
    pub l_d: f64,
    pub total: f64,
    pub sigma: Vec<f64>,
}

/// Trained flow, in whatever coordinates it was trained in, plus the
/// autoencoder that maps those coordinates to and from data space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MioflowModel {
    pub format_version: u32,
    /// Label of model time 0.
    pub time_origin: u32,
    /// Labels seen during training.
    pub times: Vec<u32>,
    pub field: VectorField,
    pub sde: Option<SdeParams>,
    pub solver: SolverConfig,
    pub gae: Option<GeodesicAutoencoder>,
}

impl MioflowModel {
    pub fn new(dataset: &SnapshotDataset, gae: Option<&GeodesicAutoencoder>, cfg: &MioflowConfig) -> Result<Self> {
        let dim = match gae {
            Some(g) => g.latent_dim(),
            None => dataset.dim(),
        };
        let mut r = rng(cfg.seed);
        let field = VectorField::new(dim, &cfg.hidden, cfg.activation, &mut r)?;
        let intervals = (dataset.last_time() - dataset.first_time()) as usize;
        let sde = cfg.use_sde.then(|| SdeParams::constant(intervals, cfg.sigma_init));
        Ok(Self {
            format_version: MODEL_CHECKPOINT_VERSION,
            time_origin: dataset.first_time(),
            times: dataset.times().to_vec(),
            field,
            sde,
            solver: cfg.solver,
            gae: gae.cloned(),
        })
    }

    pub fn model_time(&self, label: u32) -> f64 {
        label as f64 - self.time_origin as f64
    }

    /// Data-space points into flow coordinates.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.gae {
            Some(g) => g.encode(x),
            None => Ok(x.to_owned()),
        }
    }

    /// Flow coordinates back to data space.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.gae {
            Some(g) => g.decode(z),
            None => Ok(z.to_owned()),
        }
    }

    /// Push data-space points observed at label `from` through `to` (labels,
    /// increasing and after `from`). States, including the dense path when
    /// requested, come back in data space.
    pub fn predict(&self, x0: ArrayView2<f64>, from: u32, to: &[u32], seed: u64, dense: bool) -> Result<TrajectoryBundle> {
        let mut times = vec![self.model_time(from)];
        times.extend(to.iter().map(|&t| self.model_time(t)));
        let z0 = self.encode(x0)?;
        let solver = &self.solver;
        let mut bundle = if dense {
            ode::integrate_dense(&self.field, z0.view(), &times, self.sde.as_ref(), solver, seed)?
        } else {
            ode::integrate(&self.field, z0.view(), &times, self.sde.as_ref(), solver, seed)?
        };
        if self.gae.is_some() {
            for s in bundle.states.iter_mut().chain(bundle.dense.iter_mut()) {
                *s = self.decode(s.view())?;
            }
        }
        Ok(bundle)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != MODEL_CHECKPOINT_VERSION {
            return param(format!("unsupported model checkpoint version {}", m.format_version));
        }
        Ok(m)
    }
}

fn uniform(x: ArrayView2<f64>) -> Result<DiscreteDistribution> {
    DiscreteDistribution::uniform_view(x)
}

/// Squared 2-Wasserstein cost between one predicted and one observed set, with
/// its gradient in the predicted points.
fn marginal_term(pred: ArrayView2<f64>, data: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.nrows() == 0 {
        return param("empty predicted set");
    }
    let a = uniform(pred)?;
    let b = uniform(data)?;
    let (_, plan) = emd(&a, &b, 2)?;
    let grad = emd_gradient(&a, &b, &plan);
    Ok((plan.cost, grad))
}

/// Sum over times of the squared 2-Wasserstein cost.
pub fn marginal_loss(preds: &[ArrayView2<f64>], data: &[ArrayView2<f64>]) -> Result<f64> {
    if preds.len() != data.len() {
        return Err(Error::Shape(format!(
            "{} predicted sets for {} observed sets",
            preds.len(),
            data.len()
        )));
    }
    preds
        .iter()
        .zip(data)
        .map(|(p, d)| marginal_term(p.view(), d.view()).map(|v| v.0))
        .sum()
}

/// `lambda_e` times the mean accumulated squared speed.
pub fn energy_loss(bundle: &TrajectoryBundle, lambda_e: f64) -> f64 {
    if lambda_e == 0.0 {
        return 0.0;
    }
    lambda_e * bundle.energy.mean().unwrap_or(0.0)
}

/// `lambda_d sum_x sum_{i<=k} max(0, d_(i)(x) - h)`, where `d_(i)(x)` is the
/// distance from `x` to its i-th nearest point of `data`; with its gradient.
pub fn density_loss_grad(
    pred: ArrayView2<f64>,
    data: ArrayView2<f64>,
    k: usize,
    h: f64,
    lambda_d: f64,
) -> Result<(f64, Array2<f64>)> {
    if data.nrows() < k {
        return param(format!(
            "density loss needs at least k = {k} observed points, got {}",
            data.nrows()
        ));
    }
    if pred.ncols() != data.ncols() {
        return Err(Error::Shape("predicted and observed dimensions differ".into()));
    }
    let mut grad = Array2::zeros(pred.raw_dim());
    if lambda_d == 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(data.nrows());
    for (i, x) in pred.rows().into_iter().enumerate() {
        dists.clear();
        for (j, y) in data.rows().into_iter().enumerate() {
            let d = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dists.push((d, j));
        }
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        }
        for &(d, j) in &dists[..k] {
            if d > h {
                loss += d - h;
                let y = data.row(j);
                let mut g = grad.row_mut(i);
                for q in 0..g.len() {
                    g[q] += lambda_d * (x[q] - y[q]) / d;
                }
            }
        }
    }
    Ok((lambda_d * loss, grad))
}

pub fn density_loss(pred: ArrayView2<f64>, data: ArrayView2<f64>, k: usize, h: f64, lambda_d: f64) -> Result<f64> {
    Ok(density_loss_grad(pred, data, k, h, lambda_d)?.0)
}

/// Composite loss for one step: predictions at `bundle.states[1..]` against
/// `targets`.
pub fn composite_loss(bundle: &TrajectoryBundle, targets: &[Array2<f64>], cfg: &MioflowConfig) -> Result<(LossBreakdown, BundleGradient)> {
    let mut grad = BundleGradient::zeros_like(bundle);
    let (mut l_m, mut l_d) = (0.0, 0.0);
    for (k, target) in targets.iter().enumerate() {
        let pred = bundle.states[k + 1].view();
        let (m, gm) = marginal_term(pred, target.view())?;
        l_m += m;
        grad.states[k + 1] += &gm;
        if cfg.use_density && cfg.lambda_d > 0.0 {
            // mean over the n * k neighbour terms
            let w = cfg.lambda_d / (pred.nrows() * cfg.density_k) as f64;
            let (d, gd) = density_loss_grad(pred, target.view(), cfg.density_k, cfg.density_h, w)?;
            l_d += d;
            grad.states[k + 1] += &gd;
        }
    }
    let l_e = energy_loss(bundle, cfg.lambda_e);
    if cfg.lambda_e > 0.0 {
        grad.energy.fill(cfg.lambda_e / bundle.energy.len() as f64);
    }
    Ok((LossBreakdown::new(l_m, l_e, l_d), grad))
}

struct Sampler {
    perm: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn reset(&mut self, r: &mut Rng) {
        self.perm.shuffle(r);
        self.cursor = 0;
    }

    fn draw(&mut self, size: usize, r: &mut Rng) -> Vec<usize> {
        let n = self.perm.len();
        if size >= n {
            return (0..n).collect();
        }
        if self.cursor + size > n {
            self.reset(r);
        }
        let out = self.perm[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

/// Called with `(time label, row indices)` for every batch read from the
/// training data.
pub type BatchObserver<'a> = Box<dyn FnMut(u32, &[usize]) + Send + 'a>;

/// Training state that persists across epochs: optimisers, sampler and log.
pub struct Trainer<'a> {
    data: SnapshotDataset,
    cfg: MioflowConfig,
    model: MioflowModel,
    model_times: Vec<f64>,
    theta_opt: AdamW,
    sigma_opt: Option<AdamW>,
    rng: Rng,
    samplers: Vec<Sampler>,
    log: Vec<LogRecord>,
    epoch: usize,
    step: usize,
    observer: Option<BatchObserver<'a>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MioflowModel,
    pub log: Vec<LogRecord>,
}

impl<'a> Trainer<'a> {
    /// `data` must already be in flow coordinates.
    pub fn new(data: SnapshotDataset, model: MioflowModel, cfg: &MioflowConfig) -> Result<Self> {
        cfg.validate()?;
        if data.dim() != model.field.dim() {
            return Err(Error::Shape(format!(
                "data dimension {} does not match the field ({})",
                data.dim(),
                model.field.dim()
            )));
        }
        if cfg.use_density && cfg.lambda_d > 0.0 {
            let smallest = data.counts().into_iter().min().unwrap_or(0);
            if smallest.min(cfg.batch_size) < cfg.density_k {
                return param(format!(
                    "density loss needs batches of at least k = {} points",
                    cfg.density_k
                ));
            }
        }
        let model_times = data.times().iter().map(|&t| model.model_time(t)).collect();
        let theta_opt = AdamW::new(model.field.net().n_params(), cfg.lr, cfg.weight_decay);
        let sigma_opt = model.sde.as_ref().map(|s| AdamW::new(s.len(), cfg.lr, 0.0));
        let samplers = data
            .counts()
            .into_iter()
            .map(|n| Sampler { perm: (0..n).collect(), cursor: 0 })
            .collect();
        Ok(Self {
            data,
            cfg: cfg.clone(),
            model,
            model_times,
            theta_opt,
            sigma_opt,
            rng: rng(cfg.seed ^ 0x5eed_0f_f10e),
            samplers,
            log: Vec::new(),
            epoch: 0,
            step: 0,
            observer: None,
        })
    }

    pub fn set_batch_observer(&mut self, observer: BatchObserver<'a>) {
        self.observer = Some(observer);
    }

    pub fn model(&self) -> &MioflowModel {
        &self.model
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    fn batch(&mut self, k: usize) -> Array2<f64> {
        let idx = self.samplers[k].draw(self.cfg.batch_size, &mut self.rng);
        if let Some(obs) = self.observer.as_mut() {
            obs(self.data.times()[k], &idx);
        }
        self.data.snapshot(k).select(&idx).into_inner()
    }

    fn begin_epoch(&mut self) {
        for s in &mut self.samplers {
            s.reset(&mut self.rng);
        }
    }

    /// One gradient step integrating snapshot `from` through every snapshot
    /// in `to`.
    fn gradient_step(&mut self, phase: Phase, from: usize, to: std::ops::Range<usize>) -> Result<LossBreakdown> {
        let x0 = self.batch(from);
        let targets: Vec<Array2<f64>> = to.clone().map(|k| self.batch(k)).collect();
        let mut times = vec![self.model_times[from]];
        times.extend(to.map(|k| self.model_times[k]));
        let seed = self.rng.next_u64();
        let cfg = &self.cfg;
        let mut breakdown = LossBreakdown::default();
        let grads = ode::integrate_with_gradients(
            &self.model.field,
            x0.view(),
            &times,
            self.model.sde.as_ref(),
            &cfg.solver,
            seed,
            |bundle| {
                let (b, g) = composite_loss(bundle, &targets, cfg)?;
                breakdown = b;
                Ok((b.total, g))
            },
        )?;
        if !grads.theta.iter().chain(&grads.sigma).all(|g| g.is_finite()) {
            return Err(Error::NonFinite { step: self.step, t: times[times.len() - 1] });
        }
        self.theta_opt.step(self.model.field.net_mut().params_mut(), &grads.theta);
        if let (Some(opt), Some(sde)) = (self.sigma_opt.as_mut(), self.model.sde.as_mut()) {
            opt.step(&mut sde.sigma, &grads.sigma);
        }
        self.log.push(LogRecord {
            epoch: self.epoch,
            phase,
            step: self.step,
            l_m: breakdown.l_m,
            l_e: breakdown.l_e,
            l_d: breakdown.l_d,
            total: breakdown.total,
            sigma: self.model.sde.as_ref().map(|s| s.sigma.clone()).unwrap_or_default(),
        });
        self.step += 1;
        Ok(breakdown)
    }

    /// One gradient step per (batch, consecutive snapshot pair), predicting
    /// each snapshot from the previous one.
    pub fn train_local_epoch(&mut self) -> Result<Vec<LossBreakdown>> {
        self.begin_epoch();
        let mut out = Vec::new();
        for _ in 0..self.cfg.batches_per_epoch {
            for k in 0..self.data.len() - 1 {
                out.push(self.gradient_step(Phase::Local, k, k + 1..k + 2)?);
            }
        }
        self.epoch += 1;
        Ok(out)
    }

    /// One gradient step per batch, integrating the first snapshot through
    /// all later ones.
    pub fn train_global_epoch(&mut self) -> Result<Vec<LossBreakdown>> {
        self.begin_epoch();
        let mut out = Vec::with_capacity(self.cfg.batches_per_epoch);
        for _ in 0..self.cfg.batches_per_epoch {
            out.push(self.gradient_step(Phase::Global, 0, 1..self.data.len())?);
        }
        self.epoch += 1;
        Ok(out)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome { model: self.model, log: self.log }
    }
}

/// Encode (if configured), then run the local epochs followed by the global
/// epochs.
pub fn train_mioflow(
    dataset: &SnapshotDataset,
    gae: Option<&GeodesicAutoencoder>,
    cfg: &MioflowConfig,
) -> Result<TrainOutcome> {
    train_mioflow_observed(dataset, gae, cfg, None)
}

pub fn train_mioflow_observed<'a>(
    dataset: &SnapshotDataset,
    gae: Option<&GeodesicAutoencoder>,
    cfg: &MioflowConfig,
    observer: Option<BatchObserver<'a>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let gae = match (cfg.use_gae, gae) {
        (true, None) => return param("use_gae is set but no autoencoder was supplied"),
        (true, Some(g)) => Some(g),
        (false, _) => None,
    };
    let data = match gae {
        Some(g) => {
            if g.input_dim() != dataset.dim() {
                return Err(Error::Shape(format!(
                    "autoencoder expects dimension {}, data has {}",
                    g.input_dim(),
                    dataset.dim()
                )));
            }
            dataset.try_map(|pc| g.encode(pc.view()))?
        }
        None => dataset.clone(),
    };
    let model = MioflowModel::new(dataset, gae, cfg)?;
    let mut trainer = Trainer::new(data, model, cfg)?;
    if let Some(obs) = observer {
        trainer.set_batch_observer(obs);
    }
    for e in 0..cfg.n_local {
        let losses = trainer.train_local_epoch()?;
        log::info!("local epoch {e}: mean loss {:.5}", mean_total(&losses));
    }
    for e in 0..cfg.n_global {
        let losses = trainer.train_global_epoch()?;
        log::info!("global epoch {e}: mean loss {:.5}", mean_total(&losses));
    }
    let out = trainer.finish();
    if let Some(sde) = &out.model.sde {
        if sde.sigma.iter().any(|s| s.abs() > 0.5) {
            log::warn!("learned diffusion scales are large: {:?}", sde.sigma);
        }
    }
    Ok(out)
}

fn mean_total(losses: &[LossBreakdown]) -> f64 {
    Array1::from_iter(losses.iter().map(|l| l.total)).mean().unwrap_or(0.0)
}
