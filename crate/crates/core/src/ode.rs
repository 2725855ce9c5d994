//! Fixed-step integration of a learned vector field, with exact gradients of
//! the discretised map.
//!
//! The state carries two augmentation coordinates after the `d` data
//! coordinates; they start at zero, are never perturbed by noise and are never
//! reported. The network sees `(x, aug, t)` and returns the time derivative of
//! `(x, aug)`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::net::{Activation, MultilayerNet, Tape};
use crate::util::{rng, standard_normal, Rng};

pub const AUG_DIMS: usize = 2;

/// `f_theta(x, t)` on the augmented state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MultilayerNet", into = "MultilayerNet")]
pub struct VectorField {
    net: MultilayerNet,
}

impl TryFrom<MultilayerNet> for VectorField {
    type Error = Error;

    fn try_from(net: MultilayerNet) -> Result<Self> {
        VectorField::from_net(net)
    }
}

impl From<VectorField> for MultilayerNet {
    fn from(f: VectorField) -> Self {
        f.net
    }
}

impl VectorField {
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return param("vector field dimension must be positive");
        }
        let mut dims = vec![dim + AUG_DIMS + 1];
        dims.extend_from_slice(hidden);
        dims.push(dim + AUG_DIMS);
        Self::from_net(MultilayerNet::new(&dims, activation, rng)?)
    }

    pub fn from_net(net: MultilayerNet) -> Result<Self> {
        let out = net.output_dim();
        if out <= AUG_DIMS || net.input_dim() != out + 1 {
            return Err(Error::Shape(format!(
                "vector field needs input width d+3 and output width d+2, got {} -> {}",
                net.input_dim(),
                out
            )));
        }
        Ok(Self { net })
    }

    /// Data dimension `d`.
    pub fn dim(&self) -> usize {
        self.net.output_dim() - AUG_DIMS
    }

    pub fn net(&self) -> &MultilayerNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MultilayerNet {
        &mut self.net
    }

    /// Evaluate on augmented states (`batch x (d+2)`).
    pub fn eval(&self, z: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        self.net.forward(with_time(z, t).view())
    }

    fn eval_taped(&self, z: ArrayView2<f64>, t: f64) -> (Array2<f64>, Tape) {
        self.net
            .forward_taped(with_time(z, t).view())
            .expect("state width checked on entry")
    }
}

fn with_time(z: ArrayView2<f64>, t: f64) -> Array2<f64> {
    let (b, w) = z.dim();
    let mut inp = Array2::from_elem((b, w + 1), t);
    inp.slice_mut(s![.., ..w]).assign(&z);
    inp
}

/// Signed diffusion scale per unit interval of model time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeParams {
    pub sigma: Vec<f64>,
}

impl SdeParams {
    pub fn constant(intervals: usize, value: f64) -> Self {
        Self { sigma: vec![value; intervals] }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Scale for the unit interval containing `t`, clamped to the ends.
    pub fn index_at(&self, t: f64) -> usize {
        let k = (t + 1e-9).floor().max(0.0) as usize;
        k.min(self.sigma.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_empty() {
            return param("sigma needs at least one interval");
        }
        if self.sigma.iter().any(|s| !s.is_finite()) {
            return param("sigma must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Rk4,
    EulerMaruyama,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Steps per unit of model time.
    pub substeps: usize,
    pub scheme: Scheme,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { substeps: 10, scheme: Scheme::Rk4 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return param("substeps must be at least 1");
        }
        Ok(())
    }
}

/// Result of integrating a batch.
#[derive(Clone, Debug)]
pub struct TrajectoryBundle {
    /// Requested output times.
    pub times: Vec<f64>,
    /// Positions (first `d` coordinates) at each requested time.
    pub states: Vec<Array2<f64>>,
    /// Time grid of the dense path, when recorded.
    pub dense_times: Vec<f64>,
    /// Positions after every step, when recorded.
    pub dense: Vec<Array2<f64>>,
    /// Accumulated squared speed per trajectory.
    pub energy: Array1<f64>,
}

impl TrajectoryBundle {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("at least one time")
    }
}

/// Gradient of a scalar loss with respect to a bundle's outputs.
#[derive(Clone, Debug)]
pub struct BundleGradient {
    pub states: Vec<Array2<f64>>,
    pub energy: Array1<f64>,
}

impl BundleGradient {
    pub fn zeros_like(bundle: &TrajectoryBundle) -> Self {
        Self {
            states: bundle.states.iter().map(|s| Array2::zeros(s.raw_dim())).collect(),
            energy: Array1::zeros(bundle.energy.len()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// Same layout as the field's parameter buffer.
    pub theta: Vec<f64>,
    /// Empty when integrated without noise.
    pub sigma: Vec<f64>,
    pub x0: Array2<f64>,
    pub bundle: TrajectoryBundle,
}

struct Step {
    h: f64,
    /// Tapes for each stage (one for Euler-Maruyama, four for RK4).
    tapes: Vec<Tape>,
    /// Stage outputs `k_i`.
    ks: Vec<Array2<f64>>,
    noise: Option<(usize, Array2<f64>)>,
}

struct Forward {
    bundle: TrajectoryBundle,
    steps: Vec<Step>,
    /// Index of the last step before each requested time (`None` for a time
    /// reached before any step).
    marks: Vec<Option<usize>>,
}

fn check_inputs(field: &VectorField, x0: ArrayView2<f64>, times: &[f64], sde: Option<&SdeParams>, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if x0.ncols() != field.dim() {
        return Err(Error::Shape(format!(
            "initial points have width {}, field expects {}",
            x0.ncols(),
            field.dim()
        )));
    }
    if x0.nrows() == 0 {
        return param("empty initial batch");
    }
    if times.is_empty() {
        return param("at least one output time required");
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return param("output times must be strictly increasing");
    }
    if let Some(sde) = sde {
        sde.validate()?;
    }
    Ok(())
}

fn run(
    field: &VectorField,
    x0: ArrayView2<f64>,
    times: &[f64],
    sde: Option<&SdeParams>,
    cfg: &SolverConfig,
    seed: u64,
    record: bool,
    dense: bool,
) -> Result<Forward> {
    check_inputs(field, x0, times, sde, cfg)?;
    let (b, d) = x0.dim();
    let mut z = Array2::zeros((b, d + AUG_DIMS));
    z.slice_mut(s![.., ..d]).assign(&x0);
    let mut noise_rng = rng(seed);
    let mut energy = Array1::zeros(b);
    let mut states = vec![x0.to_owned()];
    let mut marks = vec![None];
    let mut dense_times = Vec::new();
    let mut dense_states = Vec::new();
    if dense {
        dense_times.push(times[0]);
        dense_states.push(x0.to_owned());
    }
    let mut steps = Vec::new();
    let mut step_no = 0usize;

    for w in times.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let n = ((tb - ta) * cfg.substeps as f64 - 1e-9).ceil().max(1.0) as usize;
        let h = (tb - ta) / n as f64;
        for i in 0..n {
            let t = ta + i as f64 * h;
            let mut step = advance(field, &mut z, &mut energy, t, h, cfg.scheme, record);
            if let Some(sde) = sde {
                let k = sde.index_at(t);
                let xi = standard_normal(&mut noise_rng, (b, d));
                let scale = sde.sigma[k] * h.sqrt();
                z.slice_mut(s![.., ..d]).scaled_add(scale, &xi);
                step.noise = Some((k, xi));
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { step: step_no, t: t + h });
            }
            if dense {
                dense_times.push(t + h);
                dense_states.push(z.slice(s![.., ..d]).to_owned());
            }
            if record {
                steps.push(step);
            }
            step_no += 1;
        }
        states.push(z.slice(s![.., ..d]).to_owned());
        marks.push(Some(step_no - 1));
    }

    Ok(Forward {
        bundle: TrajectoryBundle {
            times: times.to_vec(),
            states,
            dense_times,
            dense: dense_states,
            energy,
        },
        steps,
        marks,
    })
}

fn advance(
    field: &VectorField,
    z: &mut Array2<f64>,
    energy: &mut Array1<f64>,
    t: f64,
    h: f64,
    scheme: Scheme,
    record: bool,
) -> Step {
    let mut tapes = Vec::new();
    let mut ks = Vec::new();
    match scheme {
        Scheme::EulerMaruyama => {
            let (k1, tape) = field.eval_taped(z.view(), t);
            for (e, row) in energy.iter_mut().zip(k1.rows()) {
                *e += h * row.dot(&row);
            }
            z.scaled_add(h, &k1);
            if record {
                tapes.push(tape);
                ks.push(k1);
            }
        }
        Scheme::Rk4 => {
            let (k1, t1) = field.eval_taped(z.view(), t);
            let (k2, t2) = field.eval_taped((&*z + &(&k1 * (0.5 * h))).view(), t + 0.5 * h);
            let (k3, t3) = field.eval_taped((&*z + &(&k2 * (0.5 * h))).view(), t + 0.5 * h);
            let (k4, t4) = field.eval_taped((&*z + &(&k3 * h)).view(), t + h);
            for ((e, r2), r3) in energy.iter_mut().zip(k2.rows()).zip(k3.rows()) {
                *e += 0.5 * h * (r2.dot(&r2) + r3.dot(&r3));
            }
            z.scaled_add(h / 6.0, &k1);
            z.scaled_add(h / 3.0, &k2);
            z.scaled_add(h / 3.0, &k3);
            z.scaled_add(h / 6.0, &k4);
            if record {
                tapes = vec![t1, t2, t3, t4];
                ks = vec![k1, k2, k3, k4];
            }
        }
    }
    Step { h, tapes, ks, noise: None }
}

/// Integrate `x0` (model time `times[0]`) through every later time in
/// `times`. With `sde`, a kick `sigma_k sqrt(h) z` is added to the data
/// coordinates after every step, `k` being the unit interval the step starts
/// in. Noise is drawn from `seed`.
pub fn integrate(
    field: &VectorField,
    x0: ArrayView2<f64>,
    times: &[f64],
    sde: Option<&SdeParams>,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<TrajectoryBundle> {
    Ok(run(field, x0, times, sde, cfg, seed, false, false)?.bundle)
}

/// As [`integrate`], also recording the state after every step.
pub fn integrate_dense(
    field: &VectorField,
    x0: ArrayView2<f64>,
    times: &[f64],
    sde: Option<&SdeParams>,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<TrajectoryBundle> {
    Ok(run(field, x0, times, sde, cfg, seed, false, true)?.bundle)
}

/// Integrate, evaluate `loss` on the result and backpropagate through every
/// solver stage. `loss` returns its value and its gradient with respect to
/// the bundle's states and energies. Noise draws are held fixed.
pub fn integrate_with_gradients<F>(
    field: &VectorField,
    x0: ArrayView2<f64>,
    times: &[f64],
    sde: Option<&SdeParams>,
    cfg: &SolverConfig,
    seed: u64,
    loss: F,
) -> Result<Gradients>
where
    F: FnOnce(&TrajectoryBundle) -> Result<(f64, BundleGradient)>,
{
    let fwd = run(field, x0, times, sde, cfg, seed, true, false)?;
    let (value, upstream) = loss(&fwd.bundle)?;
    if upstream.states.len() != times.len() || upstream.energy.len() != x0.nrows() {
        return Err(Error::Shape("loss gradient does not match the bundle".into()));
    }

    let (b, d) = x0.dim();
    let width = d + AUG_DIMS;
    let net = field.net();
    let mut theta = vec![0.0; net.n_params()];
    let mut sigma = vec![0.0; sde.map_or(0, |s| s.len())];
    let mut g = Array2::<f64>::zeros((b, width));
    let ge = &upstream.energy;

    let mut mark = times.len() - 1;
    for (si, step) in fwd.steps.iter().enumerate().rev() {
        while fwd.marks[mark] == Some(si) {
            g.slice_mut(s![.., ..d]).scaled_add(1.0, &upstream.states[mark]);
            mark -= 1;
        }
        if let Some((k, xi)) = &step.noise {
            let scale = step.h.sqrt();
            sigma[*k] += scale * (&g.slice(s![.., ..d]) * xi).sum();
        }
        let h = step.h;
        let mut stage = |i: usize, gk: &Array2<f64>| -> Array2<f64> {
            let gin = net.backward(&step.tapes[i], gk.view(), &mut theta);
            gin.slice(s![.., ..width]).to_owned()
        };
        match step.ks.len() {
            1 => {
                let mut gk1 = &g * h;
                gk1 += &(&step.ks[0] * &(ge * (2.0 * h)).insert_axis(Axis(1)));
                let gz = stage(0, &gk1);
                g += &gz;
            }
            _ => {
                let ew = (ge * h).insert_axis(Axis(1));
                let gk4 = &g * (h / 6.0);
                let mut gk3 = &g * (h / 3.0) + &step.ks[2] * &ew;
                let mut gk2 = &g * (h / 3.0) + &step.ks[1] * &ew;
                let mut gk1 = &g * (h / 6.0);
                let mut gz = g.clone();
                let gu4 = stage(3, &gk4);
                gz += &gu4;
                gk3.scaled_add(h, &gu4);
                let gu3 = stage(2, &gk3);
                gz += &gu3;
                gk2.scaled_add(0.5 * h, &gu3);
                let gu2 = stage(1, &gk2);
                gz += &gu2;
                gk1.scaled_add(0.5 * h, &gu2);
                gz += &stage(0, &gk1);
                g = gz;
            }
        }
    }
    debug_assert_eq!(mark, 0);
    g.slice_mut(s![.., ..d]).scaled_add(1.0, &upstream.states[0]);

    Ok(Gradients {
        loss: value,
        theta,
        sigma,
        x0: g.slice(s![.., ..d]).to_owned(),
        bundle: fwd.bundle,
    })
}
