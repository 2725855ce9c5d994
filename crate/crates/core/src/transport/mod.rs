//! Exact discrete optimal transport and two-sample statistics.

mod simplex;

use log::debug;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{cross_distances, euclidean};

/// Weighted point masses `sum_i w_i delta_{x_i}`.
#[derive(Clone, Debug)]
pub struct DiscreteDistribution {
    support: Array2<f64>,
    weights: Array1<f64>,
    uniform: bool,
}

impl DiscreteDistribution {
    pub fn uniform(support: Array2<f64>) -> Result<Self> {
        let m = support.nrows();
        if m == 0 {
            return Err(Error::Transport("empty support".into()));
        }
        Ok(Self {
            support,
            weights: Array1::from_elem(m, 1.0 / m as f64),
            uniform: true,
        })
    }

    pub fn uniform_view(support: ArrayView2<f64>) -> Result<Self> {
        Self::uniform(support.to_owned())
    }

    pub fn weighted(support: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if support.nrows() == 0 || weights.len() != support.nrows() {
            return Err(Error::Transport(format!(
                "{} weights for {} support points",
                weights.len(),
                support.nrows()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Transport("weights must be finite and non-negative".into()));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Transport(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            support,
            weights,
            uniform: false,
        })
    }

    pub fn support(&self) -> &Array2<f64> {
        &self.support
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// A coupling between two discrete distributions and its cost.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// `sum_ij plan_ij |x_i - y_j|^p`.
    pub cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroundCost {
    /// `|x - y|`
    L1,
    /// `|x - y|^2`
    L2Squared,
}

impl GroundCost {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(GroundCost::L1),
            2 => Ok(GroundCost::L2Squared),
            _ => Err(Error::Param(format!("unsupported Wasserstein order {p}"))),
        }
    }

    fn exponent(self) -> f64 {
        match self {
            GroundCost::L1 => 1.0,
            GroundCost::L2Squared => 2.0,
        }
    }
}

/// Solve the Kantorovich problem exactly. Returns `W_p = cost^{1/p}` and the
/// optimal plan (whose `cost` field is the un-rooted optimum).
pub fn emd(a: &DiscreteDistribution, b: &DiscreteDistribution, p: u32) -> Result<(f64, TransportPlan)> {
    let ground = GroundCost::from_p(p)?;
    let plan = optimal_plan(a, b, ground)?;
    Ok((plan.cost.powf(1.0 / ground.exponent()), plan))
}

/// Optimal plan under the given ground cost.
pub fn optimal_plan(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    ground: GroundCost,
) -> Result<TransportPlan> {
    if a.support.ncols() != b.support.ncols() {
        return Err(Error::Shape(format!(
            "support dimensions differ: {} vs {}",
            a.support.ncols(),
            b.support.ncols()
        )));
    }
    let (m, n) = (a.len(), b.len());
    let mut cost = cross_distances(a.support.view(), b.support.view());
    if ground == GroundCost::L2Squared {
        cost.mapv_inplace(|d| d * d);
    }

    if cost.iter().all(|&c| c == 0.0) {
        debug!("transport: all support points coincide, returning the independent coupling");
        let plan = outer(&a.weights, &b.weights);
        return Ok(TransportPlan { plan, cost: 0.0 });
    }

    let plan = if a.uniform && b.uniform {
        // integral supplies keep degenerate pivots exact
        let sa = vec![n as f64; m];
        let sb = vec![m as f64; n];
        simplex::solve(&sa, &sb, &cost)? / (m * n) as f64
    } else {
        let ia: Vec<usize> = (0..m).filter(|&i| a.weights[i] > 0.0).collect();
        let ib: Vec<usize> = (0..n).filter(|&j| b.weights[j] > 0.0).collect();
        let wa: Vec<f64> = ia.iter().map(|&i| a.weights[i]).collect();
        let wb: Vec<f64> = ib.iter().map(|&j| b.weights[j]).collect();
        let sub = cost.select(Axis(0), &ia).select(Axis(1), &ib);
        let reduced = simplex::solve(&wa, &wb, &sub)?;
        let mut full = Array2::zeros((m, n));
        for (r, &i) in ia.iter().enumerate() {
            for (c, &j) in ib.iter().enumerate() {
                full[[i, j]] = reduced[[r, c]];
            }
        }
        full
    };

    check_marginals(&plan, &a.weights, &b.weights)?;
    let total = (&plan * &cost).sum();
    Ok(TransportPlan { plan, cost: total })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn check_marginals(plan: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Result<()> {
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let row_err = rows.iter().zip(a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let col_err = cols.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if row_err > 1e-9 || col_err > 1e-9 {
        return Err(Error::Transport(format!(
            "plan marginals off by {row_err:e} (rows) / {col_err:e} (columns)"
        )));
    }
    Ok(())
}

/// Gradient of the squared-Euclidean transport cost with respect to the
/// support of `a`, holding `plan` fixed: `2 sum_j plan_ij (x_i - y_j)`.
pub fn emd_gradient(a: &DiscreteDistribution, b: &DiscreteDistribution, plan: &TransportPlan) -> Array2<f64> {
    let row_mass = plan.plan.sum_axis(Axis(1));
    let mut g = a.support.clone();
    for (mut gi, &w) in g.rows_mut().into_iter().zip(row_mass.iter()) {
        gi *= w;
    }
    g -= &plan.plan.dot(&b.support);
    g * 2.0
}

/// Biased squared MMD with an RBF kernel `exp(-|x-y|^2 / (2 s^2))`, averaged
/// over `scales`, clamped at zero and square-rooted.
pub fn mmd_gaussian(a: ArrayView2<f64>, b: ArrayView2<f64>, scales: &[f64]) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Param("MMD needs non-empty samples".into()));
    }
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Param("MMD scales must be positive".into()));
    }
    let sq = |x: ArrayView2<f64>, y: ArrayView2<f64>| cross_distances(x, y).mapv(|d| d * d);
    let (aa, bb, ab) = (sq(a, a), sq(b, b), sq(a, b));
    let mut total = 0.0;
    for &s in scales {
        let k = |d2: f64| (-d2 / (2.0 * s * s)).exp();
        let kaa = aa.mapv(k).mean().expect("non-empty");
        let kbb = bb.mapv(k).mean().expect("non-empty");
        let kab = ab.mapv(k).mean().expect("non-empty");
        total += kaa + kbb - 2.0 * kab;
    }
    Ok((total / scales.len() as f64).max(0.0).sqrt())
}

/// Distance between sample means, optionally squared.
pub fn mmd_mean(a: ArrayView2<f64>, b: ArrayView2<f64>, squared: bool) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Param("MMD needs non-empty samples".into()));
    }
    let ma = a.mean_axis(Axis(0)).expect("non-empty");
    let mb = b.mean_axis(Axis(0)).expect("non-empty");
    let d = euclidean(ma.view(), mb.view());
    Ok(if squared { d * d } else { d })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnAggregate {
    Mean,
    /// Mean over the largest quarter (at least one point) of the distances.
    WorstQuartile,
}

/// Distance from every predicted point to its nearest ground-truth point,
/// aggregated.
pub fn one_nn_distance(pred: ArrayView2<f64>, truth: ArrayView2<f64>, aggregate: NnAggregate) -> Result<f64> {
    if truth.nrows() == 0 || pred.nrows() == 0 {
        return Err(Error::Param("1-NN distance needs non-empty point sets".into()));
    }
    let mut nearest: Vec<f64> = pred
        .rows()
        .into_iter()
        .map(|p| {
            truth
                .rows()
                .into_iter()
                .map(|t| euclidean(p, t))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(match aggregate {
        NnAggregate::Mean => nearest.iter().sum::<f64>() / nearest.len() as f64,
        NnAggregate::WorstQuartile => {
            nearest.sort_by(|x, y| y.total_cmp(x));
            let k = nearest.len().div_ceil(4);
            nearest[..k].iter().sum::<f64>() / k as f64
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(rng: &mut crate::util::Rng, m: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((m, d), || rng.random_range(-1.0..1.0))
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identical_distributions_are_at_zero_distance() {
        let mut rng = crate::util::rng(1);
        let x = random_points(&mut rng, 7, 3);
        let a = DiscreteDistribution::uniform(x.clone()).unwrap();
        for p in [1, 2] {
            let (w, plan) = emd(&a, &a, p).unwrap();
            assert_abs_diff_eq!(w, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(plan.plan.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_diracs() {
        let a = DiscreteDistribution::uniform(array![[0.0]]).unwrap();
        let b = DiscreteDistribution::uniform(array![[3.0]]).unwrap();
        assert_abs_diff_eq!(emd(&a, &b, 1).unwrap().0, 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(emd(&a, &b, 2).unwrap().0, 3.0, epsilon = 1e-15);
    }

    #[test]
    fn five_point_assignment_matches_enumeration() {
        let mut rng = crate::util::rng(7);
        let x = random_points(&mut rng, 5, 2);
        let y = random_points(&mut rng, 5, 2);
        let c = cross_distances(x.view(), y.view());
        let best = permutations(5)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / 5.0)
            .fold(f64::INFINITY, f64::min);
        let (w1, plan) = emd(
            &DiscreteDistribution::uniform(x).unwrap(),
            &DiscreteDistribution::uniform(y).unwrap(),
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(w1, best, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.cost, best, epsilon = 1e-12);
    }

    #[test]
    fn unequal_sizes_and_weights() {
        // 1-D: optimal transport is the monotone coupling of the CDFs.
        let a = DiscreteDistribution::weighted(array![[0.0], [1.0], [4.0]], array![0.5, 0.25, 0.25]).unwrap();
        let b = DiscreteDistribution::uniform(array![[2.0], [3.0]]).unwrap();
        // CDF coupling: 0->2 (0.5), 1->3 (0.25), 4->3 (0.25): cost 1 + 0.5 + 0.25
        let (w1, _) = emd(&a, &b, 1).unwrap();
        assert_abs_diff_eq!(w1, 1.75, epsilon = 1e-12);
        // under the squared cost the monotone coupling is the unique optimum
        let (_, plan) = emd(&a, &b, 2).unwrap();
        assert_abs_diff_eq!(plan.cost, 0.5 * 4.0 + 0.25 * 4.0 + 0.25 * 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.plan[[0, 0]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_weight_points_are_ignored() {
        let a = DiscreteDistribution::weighted(array![[0.0], [100.0]], array![1.0, 0.0]).unwrap();
        let b = DiscreteDistribution::uniform(array![[1.0]]).unwrap();
        let (w1, plan) = emd(&a, &b, 1).unwrap();
        assert_abs_diff_eq!(w1, 1.0, epsilon = 1e-15);
        assert_eq!(plan.plan[[1, 0]], 0.0);
    }

    #[test]
    fn degenerate_weights_are_rejected() {
        assert!(DiscreteDistribution::weighted(array![[0.0], [1.0]], array![0.7, 0.7]).is_err());
        assert!(DiscreteDistribution::weighted(array![[0.0], [1.0]], array![1.5, -0.5]).is_err());
        assert!(DiscreteDistribution::uniform(Array2::zeros((0, 2))).is_err());
        let a = DiscreteDistribution::uniform(array![[0.0, 1.0]]).unwrap();
        let b = DiscreteDistribution::uniform(array![[0.0]]).unwrap();
        assert!(emd(&a, &b, 1).is_err());
        assert!(emd(&a, &a, 3).is_err());
    }

    #[test]
    fn coincident_points_give_zero() {
        let a = DiscreteDistribution::uniform(array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let b = DiscreteDistribution::uniform(array![[1.0, 1.0]]).unwrap();
        assert_eq!(emd(&a, &b, 2).unwrap().0, 0.0);
    }

    #[test]
    fn gradient_trivial_cases() {
        let x = array![[0.0, 1.0], [2.0, -1.0]];
        let a = DiscreteDistribution::uniform(x.clone()).unwrap();
        let plan = TransportPlan { plan: array![[0.5, 0.0], [0.0, 0.5]], cost: 0.0 };
        assert_eq!(emd_gradient(&a, &a, &plan), Array2::<f64>::zeros((2, 2)));

        let a = DiscreteDistribution::uniform(array![[1.0, 2.0]]).unwrap();
        let b = DiscreteDistribution::uniform(array![[4.0, -2.0]]).unwrap();
        let (_, plan) = emd(&a, &b, 2).unwrap();
        assert_eq!(emd_gradient(&a, &b, &plan), array![[-6.0, 8.0]]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::util::rng(21);
        let x = random_points(&mut rng, 4, 2);
        let y = random_points(&mut rng, 4, 2);
        let b = DiscreteDistribution::uniform(y).unwrap();
        let cost = |x: &Array2<f64>| {
            optimal_plan(&DiscreteDistribution::uniform(x.clone()).unwrap(), &b, GroundCost::L2Squared)
                .unwrap()
                .cost
        };
        let a = DiscreteDistribution::uniform(x.clone()).unwrap();
        let plan = optimal_plan(&a, &b, GroundCost::L2Squared).unwrap();
        let g = emd_gradient(&a, &b, &plan);
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..2 {
                let mut xp = x.clone();
                xp[[i, k]] += h;
                let mut xm = x.clone();
                xm[[i, k]] -= h;
                let fd = (cost(&xp) - cost(&xm)) / (2.0 * h);
                let rel = (fd - g[[i, k]]).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-3, "({i},{k}) fd {fd} vs {}", g[[i, k]]);
            }
        }
    }

    #[test]
    fn mmd_closed_forms() {
        let a = array![[0.0, 0.0]];
        let b = array![[3.0, 4.0]];
        let (r, s) = (5.0f64, 2.0f64);
        let want = (2.0 - 2.0 * (-r * r / (2.0 * s * s)).exp()).sqrt();
        assert_abs_diff_eq!(mmd_gaussian(a.view(), b.view(), &[s]).unwrap(), want, epsilon = 1e-15);
        assert_eq!(mmd_gaussian(a.view(), a.view(), &[0.1, 0.5]).unwrap(), 0.0);
        assert_eq!(mmd_mean(a.view(), b.view(), false).unwrap(), 5.0);
        assert_eq!(mmd_mean(a.view(), b.view(), true).unwrap(), 25.0);
        assert_eq!(mmd_mean(b.view(), b.view(), true).unwrap(), 0.0);
    }

    #[test]
    fn mmd_matches_double_loop() {
        let mut rng = crate::util::rng(4);
        let a = random_points(&mut rng, 6, 3);
        let b = random_points(&mut rng, 9, 3);
        let scales = [0.1, 0.5];
        let mut acc = 0.0;
        for &s in &scales {
            let k = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
                let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                (-d2 / (2.0 * s * s)).exp()
            };
            let (mut kaa, mut kbb, mut kab) = (0.0, 0.0, 0.0);
            for x in a.rows() {
                for y in a.rows() {
                    kaa += k(x, y);
                }
                for y in b.rows() {
                    kab += k(x, y);
                }
            }
            for x in b.rows() {
                for y in b.rows() {
                    kbb += k(x, y);
                }
            }
            acc += kaa / 36.0 + kbb / 81.0 - 2.0 * kab / 54.0;
        }
        let want = (acc / 2.0).max(0.0).sqrt();
        assert_abs_diff_eq!(mmd_gaussian(a.view(), b.view(), &scales).unwrap(), want, epsilon = 1e-13);

        let mut diff = [0.0; 3];
        for k in 0..3 {
            diff[k] = a.column(k).sum() / 6.0 - b.column(k).sum() / 9.0;
        }
        let want: f64 = diff.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(mmd_mean(a.view(), b.view(), true).unwrap(), want, epsilon = 1e-14);
    }

    #[test]
    fn one_nn_cases() {
        let truth = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]];
        let pred = array![[1.0, 0.0], [0.0, 0.0]];
        assert_eq!(one_nn_distance(pred.view(), truth.view(), NnAggregate::Mean).unwrap(), 0.0);
        let pred = array![[1.0, 2.0]];
        assert_eq!(one_nn_distance(pred.view(), truth.view(), NnAggregate::Mean).unwrap(), 2.0);

        let mut rng = crate::util::rng(9);
        let pred = random_points(&mut rng, 13, 2);
        let truth = random_points(&mut rng, 8, 2);
        let mut nn = Vec::new();
        for p in pred.rows() {
            let mut best = f64::INFINITY;
            for t in truth.rows() {
                let d = ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt();
                if d < best {
                    best = d;
                }
            }
            nn.push(best);
        }
        let mean = nn.iter().sum::<f64>() / 13.0;
        nn.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let worst = nn[..4].iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(one_nn_distance(pred.view(), truth.view(), NnAggregate::Mean).unwrap(), mean, epsilon = 1e-14);
        assert_abs_diff_eq!(
            one_nn_distance(pred.view(), truth.view(), NnAggregate::WorstQuartile).unwrap(),
            worst,
            epsilon = 1e-14
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn emd_matches_brute_force(seed in 0u64..10_000, m in 1usize..=6) {
            let mut rng = crate::util::rng(seed);
            let x = random_points(&mut rng, m, 2);
            let y = random_points(&mut rng, m, 2);
            let c = cross_distances(x.view(), y.view());
            let best = permutations(m)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / m as f64)
                .fold(f64::INFINITY, f64::min);
            let (_, plan) = emd(&DiscreteDistribution::uniform(x).unwrap(), &DiscreteDistribution::uniform(y).unwrap(), 1).unwrap();
            prop_assert!((plan.cost - best).abs() < 1e-10);
        }

        #[test]
        fn plans_have_exact_marginals(seed in 0u64..10_000, m in 1usize..30, n in 1usize..30) {
            let mut rng = crate::util::rng(seed);
            let x = random_points(&mut rng, m, 3);
            let y = random_points(&mut rng, n, 3);
            let mut w: Array1<f64> = Array1::from_shape_simple_fn(m, || rng.random_range(0.1..1.0));
            w /= w.sum();
            let a = DiscreteDistribution::weighted(x, w.clone()).unwrap();
            let b = DiscreteDistribution::uniform(y).unwrap();
            let (_, plan) = emd(&a, &b, 2).unwrap();
            prop_assert!(plan.plan.iter().all(|&v| v >= 0.0));
            for (r, wi) in plan.plan.sum_axis(Axis(1)).iter().zip(w.iter()) {
                prop_assert!((r - wi).abs() < 1e-9);
            }
        }

        #[test]
        fn emd_rigid_motion_invariance(seed in 0u64..10_000, angle in 0.0f64..6.28, tx in -3.0f64..3.0) {
            let mut rng = crate::util::rng(seed);
            let x = random_points(&mut rng, 8, 2);
            let y = random_points(&mut rng, 6, 2);
            let rot = array![[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]];
            let mv = |p: &Array2<f64>| p.dot(&rot.t()) + tx;
            for p in [1, 2] {
                let (w, _) = emd(&DiscreteDistribution::uniform(x.clone()).unwrap(), &DiscreteDistribution::uniform(y.clone()).unwrap(), p).unwrap();
                let (wm, _) = emd(&DiscreteDistribution::uniform(mv(&x)).unwrap(), &DiscreteDistribution::uniform(mv(&y)).unwrap(), p).unwrap();
                prop_assert!((w - wm).abs() < 1e-9);
            }
        }

        #[test]
        fn mmd_nonnegative_and_symmetric(seed in 0u64..10_000) {
            let mut rng = crate::util::rng(seed);
            let a = random_points(&mut rng, 5, 2);
            let b = random_points(&mut rng, 7, 2);
            let ab = mmd_gaussian(a.view(), b.view(), &[0.1, 0.5]).unwrap();
            let ba = mmd_gaussian(b.view(), a.view(), &[0.1, 0.5]).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
