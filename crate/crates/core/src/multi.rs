//! Multi-emitter estimation with `Q` structurally identical trees; branch `q`
//! is trained to report the `q`-th smallest DOA of the combined feature.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::ArrayConfig;
use crate::error::{Error, Result};
use crate::mlnn::Mlnn;
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::tree::{train_tree, FeatureSource, NodeClassifier, NodeReport, TrainingGrid, TreeModel, TreeSpec, TreeTrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct QTdnn<T, N = Mlnn<T>> {
    branches: Vec<TreeModel<T, N>>,
}

impl<T: Real, N: NodeClassifier<T>> QTdnn<T, N> {
    pub fn new(branches: Vec<TreeModel<T, N>>) -> Result<Self> {
        let first = branches.first().ok_or_else(|| Error::Config("Q-TDNN needs at least one branch".into()))?;
        if branches.iter().any(|b| b.spec() != first.spec() || b.decoder() != first.decoder()) {
            return Err(Error::Config("all branches must share one tree spec and decoder".into()));
        }
        Ok(Self { branches })
    }

    pub fn num_sources(&self) -> usize {
        self.branches.len()
    }

    pub fn spec(&self) -> &TreeSpec<T> {
        self.branches[0].spec()
    }

    pub fn branches(&self) -> &[TreeModel<T, N>] {
        &self.branches
    }

    /// One estimate per branch, sorted ascending.
    pub fn predict_multi(&self, features: &[T]) -> Result<Vec<T>> {
        let mut est = self.branches.iter().map(|b| b.route_predict(features).map(|(_, t)| t)).collect::<Result<Vec<_>>>()?;
        est.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Ok(est)
    }
}

/// `L_h x Q` binary matrix whose column `q` one-hot encodes source `q`'s
/// level-`h` label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    entries: Array2<u8>,
}

impl LabelMatrix {
    pub fn new<T: Real>(spec: &TreeSpec<T>, level: usize, doas: &[T]) -> Result<Self> {
        let rows = *spec.fanouts().get(level).ok_or_else(|| Error::Config(format!("no level {level}")))?;
        let mut entries = Array2::zeros((rows, doas.len()));
        for (q, &theta) in doas.iter().enumerate() {
            entries[[spec.doa_to_labels(theta)?.0[level], q]] = 1;
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Array2<u8> {
        &self.entries
    }

    pub fn column_label(&self, q: usize) -> usize {
        self.entries.column(q).iter().position(|&v| v == 1).expect("columns are one-hot")
    }
}

fn check_tuple<T: Real>(spec: &TreeSpec<T>, tuple: &[T], min_separation: T) -> Result<()> {
    if tuple.is_empty() {
        return Err(Error::Config("empty source tuple".into()));
    }
    for &t in tuple {
        if !spec.contains(t) {
            let (lo, hi) = spec.domain();
            return Err(Error::OutOfDomain { angle: t.to64(), min: lo.to64(), max: hi.to64() });
        }
    }
    for w in tuple.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Config(format!("tuple {tuple:?} is not strictly increasing")));
        }
        if w[1] - w[0] < min_separation {
            return Err(Error::Config(format!("tuple {tuple:?} violates minimum separation {min_separation}")));
        }
    }
    Ok(())
}

/// Draws `count` sorted `q`-tuples. Tuple `i` always contains a source in leaf
/// cell `i mod N`, so every cell is covered; the remaining sources are drawn
/// uniformly subject to `min_separation`, and each angle is placed uniformly
/// inside its cell.
pub fn sample_tuples<T: Real>(spec: &TreeSpec<T>, q: usize, count: usize, min_separation: T, stream: SeedStream) -> Result<Vec<Vec<T>>> {
    if q == 0 {
        return Err(Error::Config("Q must be at least 1".into()));
    }
    let (lo, hi) = spec.domain();
    if min_separation * T::of_usize(q) >= spec.span() {
        return Err(Error::Config(format!("{q} sources cannot fit {min_separation} apart in the domain")));
    }
    let n = spec.total_classes() as usize;
    let step = spec.resolution();
    let mut rng = stream.rng();
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::Config("could not draw separated tuples; reduce Q or the separation".into()));
        }
        let anchor_cell = i % n;
        let anchor = lo + (T::of_usize(anchor_cell) + T::of(rng.random::<f64>())) * step;
        let mut tuple = vec![anchor];
        for _ in 1..q {
            let t = lo + T::of(rng.random::<f64>()) * (hi - lo);
            tuple.push(t.min(hi - step * T::of(1e-9)));
        }
        tuple.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        if check_tuple(spec, &tuple, min_separation).is_ok() {
            out.push(tuple);
            i += 1;
        }
    }
    Ok(out)
}

/// Validates the tuples and builds their shared feature grid; branch `q`
/// reads column `q` of each row's DOAs as its target.
pub fn build_multi_training_set<T: Real>(
    cfg: &ArrayConfig<T>,
    spec: &TreeSpec<T>,
    tuples: &[Vec<T>],
    min_separation: T,
    source: &FeatureSource,
    stream: SeedStream,
) -> Result<TrainingGrid<T>> {
    let q = tuples.first().map_or(0, Vec::len);
    for t in tuples {
        if t.len() != q {
            return Err(Error::Config(format!("mixed tuple sizes {} and {q}", t.len())));
        }
        check_tuple(spec, t, min_separation)?;
    }
    TrainingGrid::from_tuples(cfg, tuples, source, stream)
}

#[derive(Debug, Clone)]
pub struct TrainedQTdnn<T> {
    pub model: QTdnn<T>,
    /// Node reports per branch.
    pub reports: Vec<Vec<NodeReport>>,
}

/// Trains one tree per source rank; branch seeds derive from `cfg.train.seed`.
pub fn train_qtdnn<T: Real>(spec: &TreeSpec<T>, grid: &TrainingGrid<T>, cfg: &TreeTrainConfig) -> Result<TrainedQTdnn<T>> {
    let q = grid.sources_per_row();
    if q == 0 {
        return Err(Error::EmptyDataset("multi-source grid is empty".into()));
    }
    let base = SeedStream::new(cfg.train.seed).named("branch");
    let trained = (0..q)
        .into_par_iter()
        .map(|b| {
            let mut branch_cfg = cfg.clone();
            branch_cfg.train.seed = base.child(b as u64).seed();
            train_tree(spec, grid, b, &branch_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut branches = Vec::with_capacity(q);
    let mut reports = Vec::with_capacity(q);
    for t in trained {
        branches.push(t.model);
        reports.push(t.reports);
    }
    Ok(TrainedQTdnn { model: QTdnn::new(branches)?, reports })
}

/// Root-mean-square error with each tuple sorted before pairing.
pub fn multi_rmse<T: Real>(truth: &[Vec<T>], estimates: &[Vec<T>]) -> Result<T> {
    if truth.len() != estimates.len() {
        return Err(Error::Dimension { expected: truth.len(), got: estimates.len() });
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for (t, e) in truth.iter().zip(estimates) {
        if t.len() != e.len() {
            return Err(Error::Dimension { expected: t.len(), got: e.len() });
        }
        let mut t = t.clone();
        let mut e = e.clone();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        e.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        for (a, b) in t.iter().zip(&e) {
            sum += (*b - *a) * (*b - *a);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset("no estimates to score".into()));
    }
    Ok((sum / T::of_usize(count)).sqrt())
}

#[derive(Debug, Serialize, Deserialize)]
struct QManifest {
    format: String,
    version: u32,
    branches: Vec<String>,
}

pub const QTDNN_FORMAT: &str = "q-tdnn";

impl<T: Real> QTdnn<T> {
    /// `qtdnn.toml` plus one tree checkpoint directory per branch.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (q, b) in self.branches.iter().enumerate() {
            let name = format!("branch_{q}");
            b.save(dir.join(&name))?;
            names.push(name);
        }
        let m = QManifest { format: QTDNN_FORMAT.into(), version: 1, branches: names };
        std::fs::write(dir.join("qtdnn.toml"), toml::to_string_pretty(&m).map_err(|e| Error::Checkpoint(e.to_string()))?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("qtdnn.toml"))?;
        let m: QManifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if m.format != QTDNN_FORMAT || m.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported Q-TDNN manifest {} v{}", m.format, m.version)));
        }
        let branches = m.branches.iter().map(|b| TreeModel::load(dir.join(b))).collect::<Result<Vec<_>>>()?;
        Self::new(branches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::oracle_tree;

    fn spec() -> TreeSpec<f64> {
        TreeSpec::new(vec![6, 5, 4], -60.0, 60.0, vec![8]).unwrap()
    }

    #[test]
    fn label_matrix_columns_are_one_hot() {
        let s = spec();
        let z = LabelMatrix::new(&s, 0, &[-30.0, -29.0, 40.0]).unwrap();
        assert_eq!(z.entries().dim(), (6, 3));
        for q in 0..3 {
            assert_eq!(z.entries().column(q).iter().map(|&v| v as u32).sum::<u32>(), 1);
        }
        // two sources in the same coarse cell share a label
        assert_eq!(z.column_label(0), z.column_label(1));
        assert_eq!(z.column_label(2), 5);
    }

    #[test]
    fn tuple_validation() {
        let s = spec();
        assert!(check_tuple(&s, &[-30.0, 40.0], 2.0).is_ok());
        assert!(check_tuple(&s, &[40.0, -30.0], 2.0).is_err());
        assert!(check_tuple(&s, &[10.0, 11.0], 2.0).is_err());
        assert!(check_tuple(&s, &[10.0, 70.0], 2.0).is_err());
    }

    #[test]
    fn sampled_tuples_cover_every_cell() {
        let s = spec();
        let tuples = sample_tuples(&s, 3, 240, 2.0, SeedStream::new(1)).unwrap();
        assert_eq!(tuples.len(), 240);
        let mut seen = vec![false; 120];
        for t in &tuples {
            check_tuple(&s, t, 2.0).unwrap();
            for &a in t {
                seen[s.leaf_index(a).unwrap()] = true;
            }
        }
        assert!(seen.iter().all(|&v| v));
        assert_eq!(tuples, sample_tuples(&s, 3, 240, 2.0, SeedStream::new(1)).unwrap());
    }

    #[test]
    fn pair_targets_follow_sort_order() {
        let cfg = ArrayConfig::<f64>::half_wavelength(6).unwrap();
        let s = spec();
        let grid = build_multi_training_set(&cfg, &s, &[vec![-30.0, 40.0]], 2.0, &FeatureSource::Analytic, SeedStream::new(0)).unwrap();
        let b0 = crate::tree::build_node_training_set(&s, 0, &[], &grid, 0).unwrap();
        let b1 = crate::tree::build_node_training_set(&s, 0, &[], &grid, 1).unwrap();
        assert_eq!(crate::mlnn::argmax(b0.targets().row(0)), s.doa_to_labels(-30.0).unwrap().0[0]);
        assert_eq!(crate::mlnn::argmax(b1.targets().row(0)), s.doa_to_labels(40.0).unwrap().0[0]);
        assert!(build_multi_training_set(&cfg, &s, &[vec![10.0, 11.0]], 2.0, &FeatureSource::Analytic, SeedStream::new(0)).is_err());
    }

    #[test]
    fn single_branch_matches_single_tree() {
        let cfg = ArrayConfig::<f64>::half_wavelength(8).unwrap();
        let s = spec();
        let q = QTdnn::new(vec![oracle_tree(&cfg, &s).unwrap()]).unwrap();
        let t = oracle_tree(&cfg, &s).unwrap();
        for theta in [-55.3, -0.1, 12.7, 59.2] {
            let f = crate::array::noiseless_features(&cfg, &[theta]).unwrap();
            assert_eq!(q.predict_multi(f.as_slice()).unwrap(), vec![t.route_predict(f.as_slice()).unwrap().1]);
        }
    }

    #[test]
    fn rmse_examples() {
        let t = vec![vec![-10.0, 20.0]];
        assert_eq!(multi_rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(multi_rmse(&t, &[vec![-9.0, 19.0]]).unwrap(), 1.0);
        assert_eq!(multi_rmse(&t, &[vec![19.0, -9.0]]).unwrap(), 1.0);
        assert!(multi_rmse(&t, &[vec![1.0]]).is_err());
    }
}
