//! Snapshot datasets: the container type, synthetic generators, CSV I/O and
//! the leave-one-timepoint-out split.
//!
//! Both generators are surrogates for the toy benchmarks they are named after.
//! The petal is a rose curve whose lobes are traversed from the origin to the
//! tip along both sides at once, so mass splits when leaving the centre and
//! merges again at each tip. The bifurcation is a planar stem splitting into
//! two branches of unequal curvature, isometrically embedded in a higher
//! dimension.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::geometry::PointCloud;
use crate::util::{self, Rng};

/// Time-labelled point clouds, ordered by time.
///
/// Labels are integer model times; they need not be contiguous (a holdout
/// split leaves a gap).
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotDataset {
    times: Vec<u32>,
    snapshots: Vec<PointCloud>,
}

impl SnapshotDataset {
    pub fn new(times: Vec<u32>, snapshots: Vec<PointCloud>) -> Result<Self> {
        if times.len() != snapshots.len() {
            return param("one time label per snapshot required");
        }
        if snapshots.len() < 2 {
            return param(format!("need at least two snapshots, got {}", snapshots.len()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return param("time labels must be strictly increasing");
        }
        let d = snapshots[0].dim();
        if snapshots.iter().any(|s| s.dim() != d) {
            return Err(Error::Shape("snapshots have different dimensions".into()));
        }
        Ok(Self { times, snapshots })
    }

    /// Snapshots labelled `0..T`.
    pub fn from_snapshots(snapshots: Vec<PointCloud>) -> Result<Self> {
        let times = (0..snapshots.len() as u32).collect();
        Self::new(times, snapshots)
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].dim()
    }

    pub fn times(&self) -> &[u32] {
        &self.times
    }

    pub fn snapshots(&self) -> &[PointCloud] {
        &self.snapshots
    }

    pub fn snapshot(&self, k: usize) -> &PointCloud {
        &self.snapshots[k]
    }

    pub fn at_time(&self, t: u32) -> Option<&PointCloud> {
        self.times.iter().position(|&x| x == t).map(|k| &self.snapshots[k])
    }

    pub fn first_time(&self) -> u32 {
        self.times[0]
    }

    pub fn last_time(&self) -> u32 {
        *self.times.last().expect("non-empty")
    }

    pub fn total_points(&self) -> usize {
        self.snapshots.iter().map(PointCloud::len).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.snapshots.iter().map(PointCloud::len).collect()
    }

    /// All points stacked in time order.
    pub fn pooled(&self) -> Array2<f64> {
        let views: Vec<ArrayView2<f64>> = self.snapshots.iter().map(PointCloud::view).collect();
        concatenate(Axis(0), &views).expect("shared dimension")
    }

    /// Apply `f` to every snapshot, keeping labels.
    pub fn try_map<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&PointCloud) -> Result<Array2<f64>>,
    {
        let snapshots = self
            .snapshots
            .iter()
            .map(|s| f(s).and_then(PointCloud::new))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.times.clone(), snapshots)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PetalSpec {
    pub n_lobes: usize,
    /// Points per lobe at every timepoint.
    pub points_per_lobe: usize,
    pub n_times: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PetalSpec {
    fn default() -> Self {
        Self {
            n_lobes: 4,
            points_per_lobe: 25,
            n_times: 5,
            noise: 0.02,
            seed: 0,
        }
    }
}

/// Point on lobe `lobe` at progress `s` (0 = origin, 1 = tip) along `side`.
pub fn petal_point(n_lobes: usize, lobe: usize, s: f64, upper_side: bool) -> [f64; 2] {
    let half_width = PI / n_lobes as f64;
    let centre = 2.0 * PI * lobe as f64 / n_lobes as f64;
    let sign = if upper_side { 1.0 } else { -1.0 };
    let psi = sign * (1.0 - s) * half_width;
    let r = (n_lobes as f64 * psi / 2.0).cos();
    let theta = centre + psi;
    [r * theta.cos(), r * theta.sin()]
}

pub fn gen_petal(spec: &PetalSpec) -> Result<SnapshotDataset> {
    if spec.n_lobes < 2 || spec.n_times < 2 || spec.points_per_lobe == 0 {
        return param("petal needs n_lobes >= 2, n_times >= 2 and points_per_lobe >= 1");
    }
    if !(spec.noise >= 0.0) {
        return param("noise must be non-negative");
    }
    let mut rng = util::rng(spec.seed);
    let jitter = Normal::new(0.0, spec.noise).map_err(|e| Error::Param(e.to_string()))?;
    let t_count = spec.n_times as f64;
    let mut snapshots = Vec::with_capacity(spec.n_times);
    for t in 0..spec.n_times {
        let mut pts = Array2::zeros((spec.n_lobes * spec.points_per_lobe, 2));
        let mut row = 0;
        for lobe in 0..spec.n_lobes {
            for k in 0..spec.points_per_lobe {
                let s = rng.random_range(t as f64 / t_count..=(t + 1) as f64 / t_count);
                let p = petal_point(spec.n_lobes, lobe, s, k % 2 == 0);
                pts[[row, 0]] = p[0] + noise(&mut rng, &jitter, spec.noise);
                pts[[row, 1]] = p[1] + noise(&mut rng, &jitter, spec.noise);
                row += 1;
            }
        }
        snapshots.push(PointCloud::new(pts)?);
    }
    SnapshotDataset::from_snapshots(snapshots)
}

fn noise(rng: &mut Rng, dist: &Normal<f64>, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        dist.sample(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BifurcationSpec {
    pub dim: usize,
    /// Points per timepoint; the number of timepoints is `counts.len()`.
    pub counts: Vec<usize>,
    /// 0 gives mirror-image branches; 1 flattens the lower branch's bend.
    pub asymmetry: f64,
    pub curvature: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BifurcationSpec {
    fn default() -> Self {
        Self {
            dim: 5,
            counts: vec![140, 120, 100, 80, 60],
            asymmetry: 0.5,
            curvature: 0.5,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Stem length along the first latent axis before the split.
const SPLIT_X: f64 = 0.8;

/// Signed latent height of a branch at horizontal position `x`.
pub fn branch_height(spec: &BifurcationSpec, x: f64, upper: bool) -> f64 {
    let u = (x - SPLIT_X).max(0.0);
    if upper {
        0.5 * u + spec.curvature * u * u
    } else {
        -(0.5 * u + spec.curvature * (1.0 - spec.asymmetry) * u * u)
    }
}

/// Noise-free planar curve samples, one array per timepoint.
pub fn bifurcation_latent(spec: &BifurcationSpec) -> Result<Vec<Array2<f64>>> {
    if spec.counts.len() < 2 || spec.counts.contains(&0) {
        return param("bifurcation needs at least two timepoints with positive counts");
    }
    let mut rng = util::rng(spec.seed);
    let t_count = spec.counts.len() as f64;
    Ok(spec
        .counts
        .iter()
        .enumerate()
        .map(|(t, &n)| {
            let mut pts = Array2::zeros((n, 2));
            for k in 0..n {
                let s = rng.random_range(t as f64 / t_count..=(t + 1) as f64 / t_count);
                let x = 2.0 * s;
                pts[[k, 0]] = x;
                pts[[k, 1]] = branch_height(spec, x, k % 2 == 0);
            }
            pts
        })
        .collect())
}

/// `dim x 2` matrix with orthonormal columns, drawn from `seed`.
pub fn orthonormal_embedding(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = util::rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut q = util::standard_normal(&mut rng, (dim, 2));
    let n0 = q.column(0).dot(&q.column(0)).sqrt();
    q.column_mut(0).mapv_inplace(|v| v / n0);
    let proj = q.column(0).dot(&q.column(1));
    let c0 = q.column(0).to_owned();
    q.column_mut(1).scaled_add(-proj, &c0);
    let n1 = q.column(1).dot(&q.column(1)).sqrt();
    q.column_mut(1).mapv_inplace(|v| v / n1);
    q
}

pub fn gen_bifurcation(spec: &BifurcationSpec) -> Result<SnapshotDataset> {
    if spec.dim < 2 {
        return param(format!("bifurcation ambient dimension must be >= 2, got {}", spec.dim));
    }
    if !(spec.noise >= 0.0) {
        return param("noise must be non-negative");
    }
    let latent = bifurcation_latent(spec)?;
    let embed = orthonormal_embedding(spec.dim, spec.seed);
    let mut rng = util::rng(spec.seed.wrapping_add(1));
    let jitter = Normal::new(0.0, spec.noise).map_err(|e| Error::Param(e.to_string()))?;
    let snapshots = latent
        .iter()
        .map(|z| {
            let mut x = z.dot(&embed.t());
            x.mapv_inplace(|v| v + noise(&mut rng, &jitter, spec.noise));
            PointCloud::new(x)
        })
        .collect::<Result<Vec<_>>>()?;
    SnapshotDataset::from_snapshots(snapshots)
}

/// Parse `t,x0,...,x{d-1}` CSV.
pub fn read_csv<R: Read>(reader: R) -> Result<SnapshotDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let d = header.len().saturating_sub(1);
    let valid = header.get(0).map(str::trim) == Some("t")
        && d >= 1
        && (0..d).all(|k| header.get(k + 1).map(str::trim) == Some(format!("x{k}").as_str()));
    if !valid {
        return Err(Error::Parse {
            line: 1,
            msg: "missing or malformed header, expected `t,x0,...`".into(),
        });
    }

    let mut groups: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let t: u32 = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("time label `{}` is not a non-negative integer", &rec[0]),
        })?;
        let group = groups.entry(t).or_default();
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: "non-finite coordinate".into() });
            }
            group.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::NoData);
    }
    let mut times = Vec::with_capacity(groups.len());
    let mut snapshots = Vec::with_capacity(groups.len());
    for (t, flat) in groups {
        times.push(t);
        let n = flat.len() / d;
        snapshots.push(PointCloud::new(
            Array2::from_shape_vec((n, d), flat).expect("row-aligned"),
        )?);
    }
    SnapshotDataset::new(times, snapshots)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<SnapshotDataset> {
    read_csv(std::fs::File::open(path)?)
}

/// Writes every coordinate with 17 significant digits.
pub fn write_csv<W: Write>(ds: &SnapshotDataset, mut w: W) -> Result<()> {
    let d = ds.dim();
    let mut header = String::from("t");
    for k in 0..d {
        header.push_str(&format!(",x{k}"));
    }
    writeln!(w, "{header}")?;
    for (t, snap) in ds.times.iter().zip(&ds.snapshots) {
        for row in snap.points().rows() {
            write!(w, "{t}")?;
            for v in row {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn save_csv(ds: &SnapshotDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(ds, &mut f)?;
    f.flush()?;
    Ok(())
}

/// One interior timepoint withheld from training.
#[derive(Clone, Debug)]
pub struct HoldoutSplit {
    pub held_time: u32,
    /// Remaining snapshots with their original time labels.
    pub train: SnapshotDataset,
    pub truth: PointCloud,
}

pub fn make_holdout(ds: &SnapshotDataset, held_time: u32) -> Result<HoldoutSplit> {
    let k = ds
        .times
        .iter()
        .position(|&t| t == held_time)
        .ok_or_else(|| Error::Param(format!("time {held_time} is not in the dataset")))?;
    if k == 0 || k + 1 == ds.len() {
        return param(format!(
            "held-out time must be interior; {held_time} is a boundary timepoint"
        ));
    }
    let mut times = ds.times.clone();
    let mut snaps = ds.snapshots.clone();
    times.remove(k);
    let truth = snaps.remove(k);
    Ok(HoldoutSplit {
        held_time,
        train: SnapshotDataset::new(times, snaps)?,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn petal_first_band_stays_near_centre() {
        let ds = gen_petal(&PetalSpec { noise: 0.0, ..Default::default() }).unwrap();
        assert_eq!(ds.len(), 5);
        let max_r = ds
            .snapshot(0)
            .points()
            .rows()
            .into_iter()
            .map(|p| p.dot(&p).sqrt())
            .fold(0.0, f64::max);
        assert!(max_r < 1.0, "max radius {max_r}");
    }

    #[test]
    fn petal_is_seed_deterministic() {
        let a = gen_petal(&PetalSpec::default()).unwrap();
        let b = gen_petal(&PetalSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = gen_petal(&PetalSpec { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn petal_lobes_are_balanced() {
        let spec = PetalSpec { noise: 0.0, ..Default::default() };
        let ds = gen_petal(&spec).unwrap();
        for snap in ds.snapshots() {
            let mut counts = vec![0usize; spec.n_lobes];
            for p in snap.points().rows() {
                // lobe = nearest lobe-centre direction
                let theta = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
                let lobe = ((theta / (2.0 * PI / spec.n_lobes as f64)).round() as usize) % spec.n_lobes;
                counts[lobe] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn noiseless_petal_lies_on_the_rose() {
        let spec = PetalSpec { noise: 0.0, n_lobes: 5, ..Default::default() };
        let ds = gen_petal(&spec).unwrap();
        for p in ds.pooled().rows() {
            let r = p.dot(&p).sqrt();
            let theta = p[1].atan2(p[0]);
            let want = (spec.n_lobes as f64 * theta / 2.0).cos().abs();
            assert!((r - want).abs() < 1e-12, "r {r} vs {want}");
        }
    }

    #[test]
    fn symmetric_bifurcation_branches_mirror() {
        let spec = BifurcationSpec { asymmetry: 0.0, noise: 0.0, ..Default::default() };
        for snap in bifurcation_latent(&spec).unwrap() {
            for p in snap.rows() {
                let up = branch_height(&spec, p[0], true);
                let low = branch_height(&spec, p[0], false);
                assert_eq!(up, -low);
                assert!(p[1] == up || p[1] == low);
            }
        }
    }

    #[test]
    fn embedding_is_an_isometry() {
        let spec = BifurcationSpec { noise: 0.0, dim: 7, ..Default::default() };
        let latent = bifurcation_latent(&spec).unwrap();
        let ds = gen_bifurcation(&spec).unwrap();
        for (z, x) in latent.iter().zip(ds.snapshots()) {
            let dz = util::cross_distances(z.view(), z.view());
            let dx = util::cross_distances(x.view(), x.view());
            for (a, b) in dz.iter().zip(dx.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bifurcation_counts_are_unequal() {
        let ds = gen_bifurcation(&BifurcationSpec::default()).unwrap();
        let counts = ds.counts();
        let mut sorted = counts.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), counts.len());
        assert!(gen_bifurcation(&BifurcationSpec { dim: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(read_csv("t,x0\n".as_bytes()), Err(Error::NoData)));
        assert!(matches!(read_csv("a,b\n0,1\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        match read_csv("t,x0,x1\n0,1,2\n1,3\n".as_bytes()) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match read_csv("t,x0\n0,1\n1,abc\n".as_bytes()) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_row_csv() {
        let ds = read_csv("t,x0,x1\n1,0.5,1\n0,2,3\n".as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.times(), &[0, 1]);
        assert_eq!(ds.snapshot(0).points()[[0, 0]], 2.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = gen_petal(&PetalSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.times(), ds.times());
        for (a, b) in back.snapshots().iter().zip(ds.snapshots()) {
            assert_eq!(a.points().shape(), b.points().shape());
            for (x, y) in a.points().iter().zip(b.points().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn holdout_split() {
        let ds = SnapshotDataset::from_snapshots(vec![
            PointCloud::from_rows(&[vec![0.0]]).unwrap(),
            PointCloud::from_rows(&[vec![1.0], vec![1.5]]).unwrap(),
            PointCloud::from_rows(&[vec![2.0]]).unwrap(),
        ])
        .unwrap();
        let split = make_holdout(&ds, 1).unwrap();
        assert_eq!(split.train.times(), &[0, 2]);
        assert_eq!(&split.truth, ds.snapshot(1));
        assert_eq!(split.train.total_points() + split.truth.len(), ds.total_points());
        assert!(make_holdout(&ds, 0).is_err());
        assert!(make_holdout(&ds, 2).is_err());
        assert!(make_holdout(&ds, 7).is_err());
    }
}
