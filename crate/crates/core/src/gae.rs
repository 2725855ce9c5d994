//! Geodesic autoencoder: an encoder whose latent Euclidean distances match
//! the diffusion geodesic distance, and a decoder back to data coordinates.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::SnapshotDataset;
use crate::error::{param, Error, Result};
use crate::geometry::{geodesic_distance, DistanceMatrix, GeodesicParams, KernelSpec, PointCloud};
use crate::net::{Activation, AdamW, MultilayerNet};
use crate::util::{rng, standard_normal};

pub const GAE_CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaeConfig {
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    /// Std of the Gaussian perturbation applied to inputs.
    pub noise_scale: f64,
    pub max_iterations: usize,
    pub kernel: KernelSpec,
    pub geodesic: GeodesicParams,
    pub lr: f64,
    pub weight_decay: f64,
    pub train_decoder: bool,
    /// Draw an equal share of each batch from every timepoint.
    pub stratified: bool,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            batch_size: 100,
            noise_scale: 0.0,
            max_iterations: 1000,
            kernel: KernelSpec::default(),
            geodesic: GeodesicParams::default(),
            lr: 1e-3,
            weight_decay: 0.0,
            train_decoder: true,
            stratified: false,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return param("latent_dim must be at least 1");
        }
        if self.batch_size < 2 {
            return param("GAE batch size must be at least 2");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return param("noise_scale must be finite and non-negative");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return param("learning rate must be positive and weight decay non-negative");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return param("hidden widths must be positive");
        }
        self.kernel.validate(self.batch_size)?;
        self.geodesic.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaeCheckpoint", into = "GaeCheckpoint")]
pub struct GeodesicAutoencoder {
    encoder: MultilayerNet,
    decoder: Option<MultilayerNet>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaeCheckpoint {
    format_version: u32,
    encoder: MultilayerNet,
    decoder: Option<MultilayerNet>,
}

impl From<GeodesicAutoencoder> for GaeCheckpoint {
    fn from(m: GeodesicAutoencoder) -> Self {
        GaeCheckpoint {
            format_version: GAE_CHECKPOINT_VERSION,
            encoder: m.encoder,
            decoder: m.decoder,
        }
    }
}

impl TryFrom<GaeCheckpoint> for GeodesicAutoencoder {
    type Error = Error;

    fn try_from(c: GaeCheckpoint) -> Result<Self> {
        if c.format_version != GAE_CHECKPOINT_VERSION {
            return param(format!("unsupported GAE checkpoint version {}", c.format_version));
        }
        GeodesicAutoencoder::from_parts(c.encoder, c.decoder)
    }
}

impl GeodesicAutoencoder {
    pub fn new(dim: usize, cfg: &GaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let mut dims = vec![dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.latent_dim);
        let encoder = MultilayerNet::new(&dims, cfg.activation, &mut r)?;
        dims.reverse();
        let decoder = if cfg.train_decoder {
            Some(MultilayerNet::new(&dims, cfg.activation, &mut r)?)
        } else {
            None
        };
        Ok(Self { encoder, decoder })
    }

    pub fn from_parts(encoder: MultilayerNet, decoder: Option<MultilayerNet>) -> Result<Self> {
        if let Some(dec) = &decoder {
            if dec.input_dim() != encoder.output_dim() || dec.output_dim() != encoder.input_dim() {
                return Err(Error::Shape(format!(
                    "decoder {} -> {} does not invert encoder {} -> {}",
                    dec.input_dim(),
                    dec.output_dim(),
                    encoder.input_dim(),
                    encoder.output_dim()
                )));
            }
        }
        Ok(Self { encoder, decoder })
    }

    pub fn encoder(&self) -> &MultilayerNet {
        &self.encoder
    }

    pub fn decoder(&self) -> Option<&MultilayerNet> {
        self.decoder.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.decoder {
            Some(dec) => dec.forward(z),
            None => param("autoencoder has no decoder"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("autoencoder serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `(2/N) sum_{i<j} (|z_i - z_j| - G_ij)^2` and its gradient in `z`.
fn distance_loss_latent(z: ArrayView2<f64>, target: &DistanceMatrix) -> Result<(f64, Array2<f64>)> {
    let n = z.nrows();
    if n < 2 {
        return param("distance loss needs at least two points");
    }
    if target.len() != n {
        return Err(Error::Shape(format!(
            "target has {} points, batch has {n}",
            target.len()
        )));
    }
    let k = z.ncols();
    let zs = z.as_standard_layout();
    let zs = zs.as_slice().expect("standard layout");
    let c = 2.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        for j in i + 1..n {
            let (zi, zj) = (&zs[i * k..(i + 1) * k], &zs[j * k..(j + 1) * k]);
            let dist = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let r = dist - target.get(i, j);
            loss += r * r;
            if dist > 0.0 {
                let w = 2.0 * c * r / dist;
                for q in 0..k {
                    let g = w * (zi[q] - zj[q]);
                    grad[i * k + q] += g;
                    grad[j * k + q] -= g;
                }
            }
        }
    }
    let grad = Array2::from_shape_vec((n, k), grad).expect("shape");
    Ok((c * loss, grad))
}

/// Distance-matching loss of the encoder on `batch` against `target`.
pub fn gae_distance_loss(model: &GeodesicAutoencoder, batch: ArrayView2<f64>, target: &DistanceMatrix) -> Result<f64> {
    let z = model.encode(batch)?;
    Ok(distance_loss_latent(z.view(), target)?.0)
}

/// Loss and its gradient with respect to the encoder parameters.
pub fn gae_distance_loss_grad(
    model: &GeodesicAutoencoder,
    batch: ArrayView2<f64>,
    target: &DistanceMatrix,
) -> Result<(f64, Vec<f64>)> {
    let (z, tape) = model.encoder.forward_taped(batch)?;
    let (loss, gz) = distance_loss_latent(z.view(), target)?;
    let mut grads = vec![0.0; model.encoder.n_params()];
    model.encoder.backward(&tape, gz.view(), &mut grads);
    Ok((loss, grads))
}

/// `sum_x |dec(enc(x)) - x|`.
pub fn reconstruction_loss(model: &GeodesicAutoencoder, batch: ArrayView2<f64>) -> Result<f64> {
    let rec = model.decode(model.encode(batch)?.view())?;
    Ok((&rec - &batch)
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .sum())
}

/// Reconstruction loss of `input` against `clean`, with the gradient with
/// respect to the decoder parameters (the encoder is held fixed).
pub fn reconstruction_loss_grad(
    model: &GeodesicAutoencoder,
    input: ArrayView2<f64>,
    clean: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>)> {
    let dec = model
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Param("autoencoder has no decoder".into()))?;
    let z = model.encode(input)?;
    let (rec, tape) = dec.forward_taped(z.view())?;
    let mut diff = &rec - &clean;
    let mut loss = 0.0;
    for mut row in diff.rows_mut() {
        let norm = row.dot(&row).sqrt();
        loss += norm;
        if norm > 0.0 {
            row /= norm;
        }
    }
    let mut grads = vec![0.0; dec.n_params()];
    dec.backward(&tape, diff.view(), &mut grads);
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaeLogRecord {
    pub iteration: usize,
    pub distance_loss: f64,
    pub reconstruction_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GaeTraining {
    pub model: GeodesicAutoencoder,
    pub log: Vec<GaeLogRecord>,
}

fn sample_batch(data: &SnapshotDataset, cfg: &GaeConfig, r: &mut crate::util::Rng) -> Array2<f64> {
    let d = data.dim();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    if cfg.stratified {
        let t = data.len();
        for (k, snap) in data.snapshots().iter().enumerate() {
            let share = cfg.batch_size / t + usize::from(k < cfg.batch_size % t);
            let mut idx: Vec<usize> = (0..snap.len()).collect();
            idx.shuffle(r);
            for &i in idx.iter().take(share.min(snap.len())) {
                rows.push(snap.points().row(i).to_vec());
            }
        }
    } else {
        let pooled = data.pooled();
        let mut idx: Vec<usize> = (0..pooled.nrows()).collect();
        idx.shuffle(r);
        for &i in idx.iter().take(cfg.batch_size) {
            rows.push(pooled.row(i).to_vec());
        }
    }
    let n = rows.len();
    Array2::from_shape_vec((n, d), rows.concat()).expect("rows share the data dimension")
}

/// Train encoder (distance loss) and decoder (reconstruction loss) on
/// batches drawn from all snapshots. The geodesic target is recomputed on
/// every batch.
pub fn train_gae(data: &SnapshotDataset, cfg: &GaeConfig, seed: u64) -> Result<GaeTraining> {
    cfg.validate()?;
    if cfg.batch_size > data.total_points() {
        return param(format!(
            "GAE batch size {} exceeds the {} available points",
            cfg.batch_size,
            data.total_points()
        ));
    }
    let mut model = GeodesicAutoencoder::new(data.dim(), cfg, seed)?;
    let mut r = rng(seed.wrapping_add(1));
    let mut enc_opt = AdamW::new(model.encoder.n_params(), cfg.lr, cfg.weight_decay);
    let mut dec_opt = model
        .decoder
        .as_ref()
        .map(|d| AdamW::new(d.n_params(), cfg.lr, cfg.weight_decay));
    let mut log = Vec::with_capacity(cfg.max_iterations);

    for iteration in 0..cfg.max_iterations {
        let x = sample_batch(data, cfg, &mut r);
        let target = geodesic_distance(&PointCloud::new(x.clone())?, &cfg.kernel, &cfg.geodesic)?;
        let input = if cfg.noise_scale > 0.0 {
            &x + &(standard_normal(&mut r, x.dim()) * cfg.noise_scale)
        } else {
            x.clone()
        };

        let (distance_loss, g_enc) = gae_distance_loss_grad(&model, input.view(), &target)?;
        let rec = match dec_opt.as_mut() {
            Some(opt) => {
                let (l, g_dec) = reconstruction_loss_grad(&model, input.view(), x.view())?;
                opt.step(model.decoder.as_mut().expect("decoder").params_mut(), &g_dec);
                Some(l)
            }
            None => None,
        };
        enc_opt.step(model.encoder.params_mut(), &g_enc);
        log::debug!("gae iteration {iteration}: distance {distance_loss:.6e}");
        log.push(GaeLogRecord {
            iteration,
            distance_loss,
            reconstruction_loss: rec,
        });
    }
    Ok(GaeTraining { model, log })
}

/// Median over pairs of `|latent - G| / G` on a single batch.
pub fn median_relative_error(model: &GeodesicAutoencoder, x: ArrayView2<f64>, target: &DistanceMatrix) -> Result<f64> {
    let z = model.encode(x)?;
    let n = z.nrows();
    let mut errs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let g = target.get(i, j);
            if g > 0.0 {
                let diff = &z.row(i) - &z.row(j);
                errs.push((diff.dot(&diff).sqrt() - g).abs() / g);
            }
        }
    }
    if errs.is_empty() {
        return param("no pairs with positive target distance");
    }
    errs.sort_by(f64::total_cmp);
    Ok(errs[errs.len() / 2])
}
