//! Graph kernels, the density-normalised diffusion operator and the
//! multiscale diffusion geodesic distance.
//!
//! The geodesic distance between points `i` and `j` is
//!
//! ```text
//! G(i, j) = sum_{k=0..K} 2^{-(K-k) alpha} |P^{2^k}[i,:] - P^{2^k}[j,:]|_1
//!         + 2^{-(K+1)/2} |pi_i - pi_j|
//! ```
//!
//! where `P` is the Markov operator obtained from the kernel by first
//! normalising out the sampling density and then row-normalising, and `pi` is
//! its stationary distribution. Powers are taken by repeated squaring.

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::util::euclidean;

/// A finite set of observations in `R^d`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return param(format!(
                "point cloud must be non-empty, got {}x{}",
                points.nrows(),
                points.ncols()
            ));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return param(format!(
                "non-finite coordinate at row {}",
                pos / points.ncols()
            ));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.points
    }

    /// Rows `idx` of this cloud, in the given order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: self.points.select(Axis(0), idx),
        }
    }
}

/// Affinity kernel used to build the diffusion graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(-|x - y|^2 / epsilon)`.
    Gaussian { epsilon: f64 },
    /// Adaptive-bandwidth kernel: the bandwidth of each point is the distance
    /// to its `knn`-th nearest neighbour, symmetrised by averaging the two
    /// one-sided affinities.
    AlphaDecay { knn: usize, decay: f64 },
}

impl KernelSpec {
    pub fn alpha_decay(knn: usize) -> Self {
        KernelSpec::AlphaDecay { knn, decay: 40.0 }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                param(format!("gaussian bandwidth must be positive, got {epsilon}"))
            }
            KernelSpec::AlphaDecay { knn, .. } if knn == 0 || knn >= n => param(format!(
                "alpha-decay knn must satisfy 1 <= knn < n (knn = {knn}, n = {n})"
            )),
            KernelSpec::AlphaDecay { decay, .. } if !(decay >= 1.0 && decay.is_finite()) => {
                param(format!("alpha-decay exponent must be >= 1, got {decay}"))
            }
            _ => Ok(()),
        }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Gaussian { epsilon: 0.1 }
    }
}

/// Row-stochastic Markov matrix together with its stationary distribution.
#[derive(Clone, Debug)]
pub struct DiffusionOperator {
    p: Array2<f64>,
    pi: Array1<f64>,
}

impl DiffusionOperator {
    pub fn p(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn pi(&self) -> &Array1<f64> {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicParams {
    pub alpha: f64,
    /// Largest diffusion scale is `2^max_scale` steps.
    pub max_scale: u32,
}

impl Default for GeodesicParams {
    fn default() -> Self {
        Self {
            alpha: 0.49,
            max_scale: 5,
        }
    }
}

impl GeodesicParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return param(format!("alpha must lie in (0, 0.5], got {}", self.alpha));
        }
        Ok(())
    }
}

/// Symmetric, zero-diagonal matrix of pairwise distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(Array2<f64>);

impl DistanceMatrix {
    pub fn new(d: Array2<f64>) -> Result<Self> {
        if d.nrows() != d.ncols() {
            return Err(Error::Shape(format!(
                "distance matrix must be square, got {}x{}",
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(Self(d))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Unnormalised affinity matrix of a point cloud.
pub fn build_kernel(cloud: &PointCloud, spec: &KernelSpec) -> Result<Array2<f64>> {
    let n = cloud.len();
    spec.validate(n)?;
    let x = cloud.view();
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(x.row(i), x.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }

    match *spec {
        KernelSpec::Gaussian { epsilon } => Ok(dist.mapv(|d| (-d * d / epsilon).exp())),
        KernelSpec::AlphaDecay { knn, decay } => {
            let mut bandwidth = Vec::with_capacity(n);
            let mut row = Vec::with_capacity(n - 1);
            for i in 0..n {
                row.clear();
                row.extend((0..n).filter(|&j| j != i).map(|j| dist[[i, j]]));
                row.sort_by(f64::total_cmp);
                bandwidth.push(row[knn - 1]);
            }
            if bandwidth.iter().any(|&b| b <= 0.0) {
                let smallest = dist
                    .iter()
                    .copied()
                    .filter(|&d| d > 0.0)
                    .fold(f64::INFINITY, f64::min);
                let fallback = if smallest.is_finite() { smallest } else { 1.0 };
                let collapsed = bandwidth.iter().filter(|&&b| b <= 0.0).count();
                warn!(
                    "alpha-decay: {collapsed} point(s) have a zero knn distance (duplicates); \
                     using smallest positive distance {fallback:e} as their bandwidth"
                );
                for b in bandwidth.iter_mut().filter(|b| **b <= 0.0) {
                    *b = fallback;
                }
            }
            let mut k = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let d = dist[[i, j]];
                    k[[i, j]] = 0.5 * (-(d / bandwidth[i]).powf(decay)).exp()
                        + 0.5 * (-(d / bandwidth[j]).powf(decay)).exp();
                }
            }
            Ok(k)
        }
    }
}

/// Density-normalise a symmetric kernel (`M = Q^-1 K Q^-1`) and then
/// row-normalise it into a Markov operator `P = D^-1 M`.
pub fn markov_normalize(kernel: &Array2<f64>) -> Result<DiffusionOperator> {
    let n = kernel.nrows();
    if n == 0 || kernel.ncols() != n {
        return Err(Error::Shape(format!(
            "kernel must be square and non-empty, got {}x{}",
            kernel.nrows(),
            kernel.ncols()
        )));
    }
    if kernel.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return param("kernel entries must be finite and non-negative");
    }
    let q = kernel.sum_axis(Axis(1));
    if let Some(i) = q.iter().position(|&s| s <= 0.0) {
        return Err(Error::IsolatedPoint(i));
    }
    let mut m = kernel.clone();
    for ((i, j), v) in m.indexed_iter_mut() {
        *v /= q[i] * q[j];
    }
    let d = m.sum_axis(Axis(1));
    if let Some(i) = d.iter().position(|&s| s <= 0.0) {
        return Err(Error::IsolatedPoint(i));
    }
    let mut p = m;
    for (mut row, &di) in p.rows_mut().into_iter().zip(d.iter()) {
        row /= di;
    }
    let total = d.sum();
    let pi = d / total;
    Ok(DiffusionOperator { p, pi })
}

/// `|a[i,:] - a[j,:]|_1` for all pairs, added with weight `w` into `out`.
fn add_pairwise_l1(out: &mut Array2<f64>, a: &Array2<f64>, w: f64) {
    let n = a.nrows();
    let a = a.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    for i in 0..n {
        let ri = &a[i * n..(i + 1) * n];
        for j in (i + 1)..n {
            let rj = &a[j * n..(j + 1) * n];
            let l1 = l1_distance(ri, rj);
            out[[i, j]] += w * l1;
            out[[j, i]] += w * l1;
        }
    }
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y).abs()).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += (x[k] - y[k]).abs();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// The dyadic powers `P, P^2, P^4, ..., P^{2^K}` by repeated squaring.
pub fn dyadic_powers(op: &DiffusionOperator, max_scale: u32) -> Vec<Array2<f64>> {
    let mut powers = Vec::with_capacity(max_scale as usize + 1);
    powers.push(op.p.clone());
    for _ in 0..max_scale {
        let last = powers.last().expect("non-empty");
        powers.push(last.dot(last));
    }
    powers
}

/// Multiscale diffusion geodesic distance between all pairs of points.
pub fn diffusion_geodesic(op: &DiffusionOperator, params: &GeodesicParams) -> Result<DistanceMatrix> {
    params.validate()?;
    let n = op.len();
    let k_max = params.max_scale as i32;
    let mut g = Array2::<f64>::zeros((n, n));
    for (k, power) in dyadic_powers(op, params.max_scale).iter().enumerate() {
        let w = 2f64.powf(-((k_max - k as i32) as f64) * params.alpha);
        add_pairwise_l1(&mut g, power, w);
    }
    let w_pi = 2f64.powf(-((k_max + 1) as f64) / 2.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = w_pi * (op.pi[i] - op.pi[j]).abs();
            g[[i, j]] += v;
            g[[j, i]] += v;
        }
    }
    DistanceMatrix::new(g)
}

/// Kernel, normalisation and geodesic distance in one call.
pub fn geodesic_distance(
    cloud: &PointCloud,
    kernel: &KernelSpec,
    params: &GeodesicParams,
) -> Result<DistanceMatrix> {
    let k = build_kernel(cloud, kernel)?;
    let op = markov_normalize(&k)?;
    diffusion_geodesic(&op, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_cloud(n: usize, d: usize, seed: u64) -> PointCloud {
        let mut rng = crate::util::rng(seed);
        let pts = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn gaussian_self_affinity_is_one() {
        let c = PointCloud::from_rows(&[vec![0.3, 0.3], vec![0.3, 0.3]]).unwrap();
        let k = build_kernel(&c, &KernelSpec::Gaussian { epsilon: 1.0 }).unwrap();
        assert_eq!(k[[0, 1]], 1.0);
        assert_eq!(k[[0, 0]], 1.0);
    }

    #[test]
    fn gaussian_closed_form() {
        let c = PointCloud::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let k = build_kernel(&c, &KernelSpec::Gaussian { epsilon: 2.0 }).unwrap();
        assert_abs_diff_eq!(k[[0, 1]], (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k[[0, 1]], 0.135335, epsilon = 1e-6);
    }

    #[test]
    fn alpha_decay_matches_direct_definition() {
        let cloud = random_cloud(10, 2, 3);
        let (knn, decay) = (3, 2.0);
        let k = build_kernel(&cloud, &KernelSpec::AlphaDecay { knn, decay }).unwrap();

        let x = cloud.points();
        let dist = |i: usize, j: usize| -> f64 {
            ((x[[i, 0]] - x[[j, 0]]).powi(2) + (x[[i, 1]] - x[[j, 1]]).powi(2)).sqrt()
        };
        let mut eps = vec![0.0; 10];
        for (i, e) in eps.iter_mut().enumerate() {
            let mut ds: Vec<f64> = (0..10).filter(|&j| j != i).map(|j| dist(i, j)).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            *e = ds[knn - 1];
        }
        for i in 0..10 {
            for j in 0..10 {
                let d = dist(i, j);
                let want = 0.5 * (-(d / eps[i]).powf(decay)).exp()
                    + 0.5 * (-(d / eps[j]).powf(decay)).exp();
                assert_abs_diff_eq!(k[[i, j]], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn alpha_decay_rejects_large_knn() {
        let cloud = random_cloud(4, 2, 1);
        assert!(build_kernel(&cloud, &KernelSpec::AlphaDecay { knn: 4, decay: 2.0 }).is_err());
    }

    #[test]
    fn alpha_decay_survives_duplicates() {
        let c = PointCloud::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 2.0],
        ])
        .unwrap();
        let k = build_kernel(&c, &KernelSpec::AlphaDecay { knn: 1, decay: 2.0 }).unwrap();
        assert!(k.iter().all(|v| v.is_finite()));
        // bandwidth of the duplicated points falls back to the smallest positive distance (1)
        assert_abs_diff_eq!(k[[0, 2]], 0.5 * (-1.0f64).exp() + 0.5 * (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn all_ones_kernel() {
        let op = markov_normalize(&Array2::ones((2, 2))).unwrap();
        assert_eq!(op.p(), &array![[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(op.pi(), &array![0.5, 0.5]);
    }

    #[test]
    fn chain_kernel_by_hand() {
        // Q = (2, 3, 2); M = K / (Q_i Q_j); D = (5/12, 4/9, 5/12).
        let k = array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
        let op = markov_normalize(&k).unwrap();
        let want_p = array![
            [3.0 / 5.0, 2.0 / 5.0, 0.0],
            [3.0 / 8.0, 1.0 / 4.0, 3.0 / 8.0],
            [0.0, 2.0 / 5.0, 3.0 / 5.0]
        ];
        let want_pi = array![15.0 / 46.0, 16.0 / 46.0, 15.0 / 46.0];
        for (a, b) in op.p().iter().zip(want_p.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        for (a, b) in op.pi().iter().zip(want_pi.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn isolated_point_is_named() {
        let k = array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        match markov_normalize(&k) {
            Err(Error::IsolatedPoint(1)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Def-by-definition evaluation with explicitly multiplied powers.
    fn naive_geodesic(op: &DiffusionOperator, alpha: f64, kk: u32) -> Array2<f64> {
        let n = op.len();
        let mut g = Array2::<f64>::zeros((n, n));
        for k in 0..=kk {
            let steps = 1usize << k;
            let mut pw = op.p().clone();
            for _ in 1..steps {
                pw = pw.dot(op.p());
            }
            let w = 2f64.powf(-((kk - k) as f64) * alpha);
            for i in 0..n {
                for j in 0..n {
                    let l1: f64 = (0..n).map(|c| (pw[[i, c]] - pw[[j, c]]).abs()).sum();
                    g[[i, j]] += w * l1;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                g[[i, j]] += 2f64.powf(-((kk + 1) as f64) / 2.0) * (op.pi()[i] - op.pi()[j]).abs();
            }
        }
        g
    }

    #[test]
    fn chain_geodesic_matches_naive_powers() {
        let k = array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
        let op = markov_normalize(&k).unwrap();
        let g = diffusion_geodesic(&op, &GeodesicParams { alpha: 0.5, max_scale: 2 }).unwrap();
        let want = naive_geodesic(&op, 0.5, 2);
        for (a, b) in g.matrix().iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        for i in 0..3 {
            assert_eq!(g.get(i, i), 0.0);
        }
    }

    #[test]
    fn rejects_bad_alpha() {
        let op = markov_normalize(&Array2::ones((2, 2))).unwrap();
        assert!(diffusion_geodesic(&op, &GeodesicParams { alpha: 0.6, max_scale: 1 }).is_err());
        assert!(diffusion_geodesic(&op, &GeodesicParams { alpha: 0.0, max_scale: 1 }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn operator_invariants(seed in 0u64..1000, n in 2usize..30, eps in 0.05f64..2.0) {
            let cloud = random_cloud(n, 2, seed);
            let op = markov_normalize(&build_kernel(&cloud, &KernelSpec::Gaussian { epsilon: eps }).unwrap()).unwrap();
            for row in op.p().rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-10);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            prop_assert!((op.pi().sum() - 1.0).abs() < 1e-10);
            let stationary = op.pi().dot(op.p());
            let err = stationary.iter().zip(op.pi().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-8);
        }

        #[test]
        fn squaring_matches_iterated_products(seed in 0u64..1000, n in 2usize..50, kk in 0u32..=5) {
            let cloud = random_cloud(n, 3, seed);
            let op = markov_normalize(&build_kernel(&cloud, &KernelSpec::Gaussian { epsilon: 0.5 }).unwrap()).unwrap();
            let powers = dyadic_powers(&op, kk);
            let mut naive = op.p().clone();
            for (k, pw) in powers.iter().enumerate() {
                if k > 0 {
                    for _ in 0..(1usize << (k - 1)) {
                        naive = naive.dot(op.p());
                    }
                }
                let err = pw.iter().zip(naive.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(err < 1e-9, "k = {k}, err = {err}");
                for row in pw.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn geodesic_is_a_metric(seed in 0u64..1000, n in 2usize..25, kk in 0u32..6) {
            let cloud = random_cloud(n, 2, seed);
            let g = geodesic_distance(&cloud, &KernelSpec::Gaussian { epsilon: 0.3 }, &GeodesicParams { alpha: 0.49, max_scale: kk }).unwrap();
            let m = g.matrix();
            for i in 0..n {
                prop_assert_eq!(m[[i, i]], 0.0);
                for j in 0..n {
                    prop_assert_eq!(m[[i, j]], m[[j, i]]);
                    prop_assert!(m[[i, j]] >= 0.0);
                    for k in 0..n {
                        prop_assert!(m[[i, j]] <= m[[i, k]] + m[[k, j]] + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..1000, n in 2usize..20) {
            let cloud = random_cloud(n, 2, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left((seed as usize) % n);
            let params = GeodesicParams { alpha: 0.49, max_scale: 3 };
            let spec = KernelSpec::Gaussian { epsilon: 0.4 };
            let g = geodesic_distance(&cloud, &spec, &params).unwrap();
            let gp = geodesic_distance(&cloud.select(&perm), &spec, &params).unwrap();
            for a in 0..n {
                for b in 0..n {
                    prop_assert!((gp.get(a, b) - g.get(perm[a], perm[b])).abs() < 1e-10);
                }
            }
        }
    }
}
