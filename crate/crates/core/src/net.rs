//! Small dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters live in one flat buffer laid out layer by layer as
//! `[W_0 (out x in, row-major), b_0, W_1, b_1, ...]`. Gradients use the same
//! layout, so an optimiser only ever sees two slices of equal length.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::Rng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Negative slope 0.01.
    LeakyRelu,
    /// CELU with alpha = 1.
    Celu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    0.01 * z
                }
            }
            Activation::Celu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
            Activation::Celu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" | "leaky-relu" => Ok(Activation::LeakyRelu),
            "celu" => Ok(Activation::Celu),
            other => Err(Error::Param(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine layers with an activation between consecutive layers and a linear
/// output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetCheckpoint", into = "NetCheckpoint")]
pub struct MultilayerNet {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// On-disk form of a [`MultilayerNet`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

impl From<MultilayerNet> for NetCheckpoint {
    fn from(net: MultilayerNet) -> Self {
        NetCheckpoint {
            format_version: CHECKPOINT_VERSION,
            layer_dims: net.dims,
            activation: net.activation,
            params: net.params,
        }
    }
}

impl TryFrom<NetCheckpoint> for MultilayerNet {
    type Error = Error;

    fn try_from(c: NetCheckpoint) -> Result<Self> {
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::Param(format!(
                "unsupported network checkpoint version {}",
                c.format_version
            )));
        }
        MultilayerNet::from_parts(c.layer_dims, c.activation, c.params)
    }
}

/// Intermediates recorded by [`MultilayerNet::forward_taped`].
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Array2<f64>>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl MultilayerNet {
    /// He-uniform weights and zero biases.
    pub fn new(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        Self::from_parts(dims.to_vec(), activation, vec![0.0; param_count(dims)])
    }

    pub fn from_parts(dims: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Param(format!("invalid layer dimensions {dims:?}")));
        }
        if params.len() != param_count(&dims) {
            return Err(Error::Shape(format!(
                "expected {} parameters for dims {dims:?}, got {}",
                param_count(&dims),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Param("non-finite network parameter".into()));
        }
        Ok(Self {
            dims,
            activation,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    /// Weight matrix (out x in) and bias of `layer`.
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (inp, out) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer);
        let w = ArrayView2::from_shape((out, inp), &self.params[off..off + out * inp])
            .expect("layout");
        let b = ArrayView1::from(&self.params[off + out * inp..off + out * inp + out]);
        (w, b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<f64>, mut tape: Option<&mut Tape>) -> Array2<f64> {
        let last = self.num_layers() - 1;
        let mut h = x.to_owned();
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w.t());
            z += &b;
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(h);
            }
            if l == last {
                return z;
            }
            let act = self.activation;
            h = z.mapv(|v| act.apply(v));
            if let Some(t) = tape.as_deref_mut() {
                t.pre.push(z);
            }
        }
        unreachable!()
    }

    /// Batch forward pass, one sample per row.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.run(x, None))
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that also records what [`backward`](Self::backward) needs.
    pub fn forward_taped(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.num_layers()),
            pre: Vec::with_capacity(self.num_layers() - 1),
        };
        let y = self.run(x, Some(&mut tape));
        Ok((y, tape))
    }

    /// Reverse pass. `upstream` is dL/d(output); parameter gradients are
    /// accumulated into `grads` and dL/d(input) is returned.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>, grads: &mut [f64]) -> Array2<f64> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let mut g = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            if l < self.num_layers() - 1 {
                let act = self.activation;
                Zip::from(&mut g)
                    .and(&tape.pre[l])
                    .for_each(|gv, &z| *gv *= act.derivative(z));
            }
            let (inp, out) = (self.dims[l], self.dims[l + 1]);
            let off = self.offset(l);
            {
                let (gw, gb) = grads[off..off + out * inp + out].split_at_mut(out * inp);
                let mut gw = ArrayViewMut2::from_shape((out, inp), gw).expect("layout");
                general_mat_mul(1.0, &g.t(), &tape.inputs[l], 1.0, &mut gw);
                for (acc, s) in gb.iter_mut().zip(g.sum_axis(Axis(0)).iter()) {
                    *acc += s;
                }
            }
            let (w, _) = self.layer(l);
            g = g.dot(&w);
        }
        g
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *p *= 1.0 - self.lr * self.weight_decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
