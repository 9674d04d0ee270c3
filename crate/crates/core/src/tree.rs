//! The tree classifier: level/fan-out algebra, angular cell codec, routed
//! inference, per-node training sets, parallel training and checkpoints.
//!
//! Levels are 0-based in the API. Level `h` holds `G_h = L_0 ... L_{h-1}`
//! nodes, each splitting its parent's interval into `L_h` equal cells; the
//! node at level `h` is addressed by the labels chosen at levels `0..h`.

use std::path::Path;

use ndarray::{Array2, Axis};
use num_traits::{FromPrimitive, Num};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{analytic_covariance, extract_features, sample_covariance, synth_snapshots, ArrayConfig, SourceSet};
use crate::error::{Error, Result};
use crate::mlnn::{self, Dataset, InputScaling, LayerSpec, Mlnn, TrainConfig};
use crate::rng::SeedStream;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec<T> {
    fanouts: Vec<usize>,
    theta_min: T,
    theta_max: T,
    hidden: Vec<usize>,
}

/// Per-level classification labels `[l_0, ..., l_{H-1}]`, each `< L_h`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelPath(pub Vec<usize>);

impl LabelPath {
    pub fn labels(&self) -> &[usize] {
        &self.0
    }
}

/// How a leaf cell is turned into an angle estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    /// Centre of the selected leaf cell.
    #[default]
    Midpoint,
    /// Upper edge of the selected leaf cell.
    RightEdge,
}

/// Level widths `step_h = span / (L_0 ... L_h)` in any numeric type, so
/// exact rational arithmetic can be used to check the float path.
pub fn level_resolutions_in<N: Num + Copy + FromPrimitive>(span: N, fanouts: &[usize]) -> Vec<N> {
    let mut cells: u64 = 1;
    fanouts
        .iter()
        .map(|&l| {
            cells *= l as u64;
            span / N::from_u64(cells).expect("cell count representable")
        })
        .collect()
}

impl<T: Real> TreeSpec<T> {
    pub fn new(fanouts: Vec<usize>, theta_min: T, theta_max: T, hidden: Vec<usize>) -> Result<Self> {
        if fanouts.is_empty() {
            return Err(Error::Config("tree needs at least one level".into()));
        }
        if let Some(bad) = fanouts.iter().find(|&&l| l < 2) {
            return Err(Error::Config(format!("every fan-out must be at least 2, got {bad}")));
        }
        if !(theta_min < theta_max) || !theta_min.is_finite() || !theta_max.is_finite() {
            return Err(Error::Config(format!("empty angular domain [{theta_min}, {theta_max})")));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!("node hidden sizes must be non-empty and positive: {hidden:?}")));
        }
        let cells = fanouts.iter().try_fold(1u64, |acc, &l| acc.checked_mul(l as u64));
        if cells.is_none() {
            return Err(Error::Config("total class count overflows".into()));
        }
        Ok(Self { fanouts, theta_min, theta_max, hidden })
    }

    /// Tree over the array's angular domain.
    pub fn for_array(cfg: &ArrayConfig<T>, fanouts: Vec<usize>, hidden: Vec<usize>) -> Result<Self> {
        Self::new(fanouts, cfg.theta_min, cfg.theta_max, hidden)
    }

    pub fn depth(&self) -> usize {
        self.fanouts.len()
    }

    pub fn fanouts(&self) -> &[usize] {
        &self.fanouts
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn domain(&self) -> (T, T) {
        (self.theta_min, self.theta_max)
    }

    pub fn span(&self) -> T {
        self.theta_max - self.theta_min
    }

    /// Nodes per level: `G_0 = 1`, `G_{h+1} = G_h L_h`.
    pub fn group_counts(&self) -> Vec<u64> {
        let mut g = 1u64;
        self.fanouts
            .iter()
            .map(|&l| {
                let cur = g;
                g *= l as u64;
                cur
            })
            .collect()
    }

    pub fn node_count(&self) -> u64 {
        self.group_counts().iter().sum()
    }

    /// Number of leaf cells `N = L_0 ... L_{H-1}`.
    pub fn total_classes(&self) -> u64 {
        self.fanouts.iter().map(|&l| l as u64).product()
    }

    /// Sum of the per-level output sizes.
    pub fn model_classes(&self) -> u64 {
        self.fanouts.iter().map(|&l| l as u64).sum()
    }

    pub fn level_resolutions(&self) -> Vec<T> {
        level_resolutions_in(self.span(), &self.fanouts)
    }

    /// Leaf cell width.
    pub fn resolution(&self) -> T {
        self.span() / T::of(self.total_classes() as f64)
    }

    /// Layer widths of every node at `level`.
    pub fn node_layer_spec(&self, level: usize, input_dim: usize) -> Result<LayerSpec> {
        let outputs = *self.fanouts.get(level).ok_or_else(|| Error::Config(format!("no level {level}")))?;
        LayerSpec::with_hidden(input_dim, &self.hidden, outputs)
    }

    pub fn contains(&self, theta_deg: T) -> bool {
        theta_deg >= self.theta_min && theta_deg < self.theta_max
    }

    /// Index of the leaf cell containing `theta_deg`.
    pub fn leaf_index(&self, theta_deg: T) -> Result<usize> {
        if !self.contains(theta_deg) {
            return Err(Error::OutOfDomain { angle: theta_deg.to64(), min: self.theta_min.to64(), max: self.theta_max.to64() });
        }
        let n = self.total_classes();
        let pos = ((theta_deg - self.theta_min) * T::of(n as f64) / self.span()).floor();
        let idx = pos.to_u64().unwrap_or(0).min(n - 1);
        Ok(idx as usize)
    }

    /// Mixed-radix digits of a leaf index, most significant level first.
    pub fn labels_of_leaf(&self, mut leaf: usize) -> Result<LabelPath> {
        if leaf as u64 >= self.total_classes() {
            return Err(Error::Label(format!("leaf {leaf} out of range")));
        }
        let mut labels = vec![0; self.depth()];
        for (slot, &l) in labels.iter_mut().zip(&self.fanouts).rev() {
            *slot = leaf % l;
            leaf /= l;
        }
        Ok(LabelPath(labels))
    }

    pub fn check_path(&self, path: &LabelPath) -> Result<()> {
        if path.0.len() != self.depth() {
            return Err(Error::Label(format!("path has {} labels, tree has {} levels", path.0.len(), self.depth())));
        }
        self.check_prefix(&path.0)
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.len() > self.depth() {
            return Err(Error::Label(format!("prefix {prefix:?} longer than tree depth {}", self.depth())));
        }
        for (h, (&l, &fan)) in prefix.iter().zip(&self.fanouts).enumerate() {
            if l >= fan {
                return Err(Error::Label(format!("label {l} at level {h} exceeds fan-out {fan}")));
            }
        }
        Ok(())
    }

    pub fn leaf_of_labels(&self, path: &LabelPath) -> Result<usize> {
        self.check_path(path)?;
        Ok(self.prefix_index(&path.0))
    }

    /// Position of the node addressed by `prefix` within its level.
    pub fn node_index(&self, prefix: &[usize]) -> Result<usize> {
        self.check_prefix(prefix)?;
        if prefix.len() >= self.depth() {
            return Err(Error::Label(format!("prefix {prefix:?} addresses no node")));
        }
        Ok(self.prefix_index(prefix))
    }

    fn prefix_index(&self, prefix: &[usize]) -> usize {
        prefix.iter().zip(&self.fanouts).fold(0, |acc, (&l, &fan)| acc * fan + l)
    }

    /// Inverse of [`node_index`](Self::node_index).
    pub fn node_prefix(&self, level: usize, mut index: usize) -> Vec<usize> {
        let mut prefix = vec![0; level];
        for (slot, &fan) in prefix.iter_mut().zip(&self.fanouts[..level]).rev() {
            *slot = index % fan;
            index /= fan;
        }
        prefix
    }

    pub fn doa_to_labels(&self, theta_deg: T) -> Result<LabelPath> {
        self.labels_of_leaf(self.leaf_index(theta_deg)?)
    }

    pub fn labels_to_doa(&self, path: &LabelPath, decoder: Decoder) -> Result<T> {
        self.check_path(path)?;
        let steps = self.level_resolutions();
        let base = path.0.iter().zip(&steps).fold(self.theta_min, |acc, (&l, &step)| acc + T::of_usize(l) * step);
        let last = *steps.last().expect("depth >= 1");
        Ok(match decoder {
            Decoder::Midpoint => base + last / T::of(2.0),
            Decoder::RightEdge => base + last,
        })
    }

    /// `[lo, hi)` covered by the cells sharing `prefix` (the whole domain for
    /// an empty prefix).
    pub fn prefix_interval(&self, prefix: &[usize]) -> Result<(T, T)> {
        self.check_prefix(prefix)?;
        if prefix.is_empty() {
            return Ok((self.theta_min, self.theta_max));
        }
        let steps = self.level_resolutions();
        let lo = prefix.iter().zip(&steps).fold(self.theta_min, |acc, (&l, &step)| acc + T::of_usize(l) * step);
        Ok((lo, lo + steps[prefix.len() - 1]))
    }

    pub fn complexity_report(&self, input_dim: usize) -> Result<ComplexityReport> {
        let mut mac = 0;
        for h in 0..self.depth() {
            mac += self.node_layer_spec(h, input_dim)?.mac_count();
        }
        Ok(ComplexityReport { model_classes: self.model_classes(), flat_equivalent: self.total_classes(), mac_count: mac })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Sum of per-level output sizes.
    pub model_classes: u64,
    /// Output size of a flat classifier with the same resolution.
    pub flat_equivalent: u64,
    /// Multiply-accumulates over the `H` nodes evaluated per estimate.
    pub mac_count: u64,
}

/// Anything that maps a feature vector to a class index.
pub trait NodeClassifier<T>: Send + Sync {
    fn classify(&self, features: &[T]) -> Result<usize>;
}

impl<T: Real> NodeClassifier<T> for Mlnn<T> {
    fn classify(&self, features: &[T]) -> Result<usize> {
        self.predict_class(features)
    }
}

/// `H` levels of node classifiers; level `h` holds `G_h` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel<T, N = Mlnn<T>> {
    spec: TreeSpec<T>,
    levels: Vec<Vec<N>>,
    decoder: Decoder,
}

impl<T: Real, N: NodeClassifier<T>> TreeModel<T, N> {
    pub fn from_levels(spec: TreeSpec<T>, levels: Vec<Vec<N>>) -> Result<Self> {
        if levels.len() != spec.depth() {
            return Err(Error::Config(format!("expected {} levels, got {}", spec.depth(), levels.len())));
        }
        for (h, (nodes, &g)) in levels.iter().zip(spec.group_counts().iter()).enumerate() {
            if nodes.len() as u64 != g {
                return Err(Error::Config(format!("level {h} needs {g} nodes, got {}", nodes.len())));
            }
        }
        Ok(Self { spec, levels, decoder: Decoder::default() })
    }

    pub fn with_decoder(mut self, decoder: Decoder) -> Self {
        self.decoder = decoder;
        self
    }

    pub fn spec(&self) -> &TreeSpec<T> {
        &self.spec
    }

    pub fn decoder(&self) -> Decoder {
        self.decoder
    }

    pub fn levels(&self) -> &[Vec<N>] {
        &self.levels
    }

    pub fn node(&self, level: usize, prefix: &[usize]) -> Result<&N> {
        if prefix.len() != level {
            return Err(Error::Label(format!("level {level} nodes are addressed by {level} labels")));
        }
        Ok(&self.levels[level][self.spec.node_index(prefix)?])
    }

    /// Evaluates one node per level, each chosen by the labels above it.
    pub fn route_predict(&self, features: &[T]) -> Result<(LabelPath, T)> {
        let mut labels = Vec::with_capacity(self.spec.depth());
        let mut index = 0usize;
        for (h, nodes) in self.levels.iter().enumerate() {
            let l = nodes[index].classify(features)?;
            let fan = self.spec.fanouts[h];
            if l >= fan {
                return Err(Error::Label(format!("node at level {h} returned class {l} >= {fan}")));
            }
            labels.push(l);
            index = index * fan + l;
        }
        let path = LabelPath(labels);
        let theta = self.spec.labels_to_doa(&path, self.decoder)?;
        Ok((path, theta))
    }
}

impl<T: Real> TreeModel<T> {
    /// Checks every node's layer widths against the spec.
    pub fn check_shapes(&self, input_dim: usize) -> Result<()> {
        for (h, nodes) in self.levels.iter().enumerate() {
            let want = self.spec.node_layer_spec(h, input_dim)?;
            for (i, n) in nodes.iter().enumerate() {
                if n.spec() != &want {
                    return Err(Error::Config(format!("node {i} at level {h} has widths {:?}, expected {:?}", n.spec().sizes(), want.sizes())));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0][0].spec().input_size()
    }
}

/// Perfect node classifier for noise-free single-source features: reads the
/// angle back from the phase of the first off-diagonal covariance entry.
#[derive(Debug, Clone)]
pub struct OracleNode<T> {
    spacing_wavelengths: T,
    spec: TreeSpec<T>,
    level: usize,
}

impl<T: Real> OracleNode<T> {
    /// Angle encoded in a single-source feature vector (requires spacing <= 1/2).
    pub fn decode_angle(spacing_wavelengths: T, features: &[T]) -> T {
        let half = features.len() / 2;
        let phase = features[half].atan2(features[0]);
        let s = (-phase / (T::TAU() * spacing_wavelengths)).max(-T::one()).min(T::one());
        crate::scalar::rad_to_deg(s.asin())
    }
}

impl<T: Real> NodeClassifier<T> for OracleNode<T> {
    fn classify(&self, features: &[T]) -> Result<usize> {
        let theta = Self::decode_angle(self.spacing_wavelengths, features);
        let (lo, hi) = self.spec.domain();
        let clamped = theta.max(lo).min(hi - self.spec.resolution() * T::of(1e-6));
        Ok(self.spec.doa_to_labels(clamped)?.0[self.level])
    }
}

/// Tree whose every node is an [`OracleNode`].
pub fn oracle_tree<T: Real>(cfg: &ArrayConfig<T>, spec: &TreeSpec<T>) -> Result<TreeModel<T, OracleNode<T>>> {
    let levels = spec
        .group_counts()
        .iter()
        .enumerate()
        .map(|(level, &g)| {
            (0..g).map(|_| OracleNode { spacing_wavelengths: cfg.spacing_wavelengths, spec: spec.clone(), level }).collect()
        })
        .collect();
    TreeModel::from_levels(spec.clone(), levels)
}

/// Where training features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    /// Statistical covariance of unit-power sources (noise-free features).
    #[default]
    Analytic,
    /// The analytic row plus `copies` sample-covariance rows per SNR.
    Mixed { snrs_db: Vec<f64>, snapshots: usize, copies: usize },
}

impl FeatureSource {
    pub fn rows_per_tuple(&self) -> usize {
        match self {
            FeatureSource::Analytic => 1,
            FeatureSource::Mixed { snrs_db, copies, .. } => 1 + snrs_db.len() * copies,
        }
    }

    /// Feature rows for one source tuple.
    pub fn features<T: Real>(&self, cfg: &ArrayConfig<T>, doas: &[T], stream: SeedStream) -> Result<Vec<Vec<T>>> {
        let src = SourceSet::noiseless(doas.to_vec())?;
        let mut rows = vec![extract_features(&analytic_covariance(cfg, &src)?)?.into_values().to_vec()];
        if let FeatureSource::Mixed { snrs_db, snapshots, copies } = self {
            for (si, &snr) in snrs_db.iter().enumerate() {
                let noisy = SourceSet::unit_power(doas.to_vec(), T::of(snr))?;
                for c in 0..*copies {
                    let batch = synth_snapshots(cfg, &noisy, *snapshots, stream.path(&[si as u64, c as u64]))?;
                    rows.push(extract_features(&sample_covariance(&batch))?.into_values().to_vec());
                }
            }
        }
        Ok(rows)
    }
}

/// Labelled feature rows: each row carries the sorted DOAs it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingGrid<T> {
    doas: Vec<Vec<T>>,
    features: Array2<T>,
}

impl<T: Real> TrainingGrid<T> {
    pub fn new(doas: Vec<Vec<T>>, features: Array2<T>) -> Result<Self> {
        if doas.len() != features.nrows() {
            return Err(Error::Dimension { expected: features.nrows(), got: doas.len() });
        }
        Ok(Self { doas, features })
    }

    /// Feature rows for each angle tuple; rows for tuple `i` use child stream `i`.
    pub fn from_tuples(cfg: &ArrayConfig<T>, tuples: &[Vec<T>], source: &FeatureSource, stream: SeedStream) -> Result<Self> {
        let per = source.rows_per_tuple();
        let blocks: Vec<Vec<Vec<T>>> = tuples
            .par_iter()
            .enumerate()
            .map(|(i, t)| source.features(cfg, t, stream.child(i as u64)))
            .collect::<Result<_>>()?;
        let dim = cfg.feature_dim();
        let mut features = Array2::zeros((tuples.len() * per, dim));
        let mut doas = Vec::with_capacity(tuples.len() * per);
        for (i, block) in blocks.into_iter().enumerate() {
            for (j, row) in block.into_iter().enumerate() {
                features.row_mut(i * per + j).assign(&ndarray::ArrayView1::from(&row[..]));
                doas.push(tuples[i].clone());
            }
        }
        Self::new(doas, features)
    }

    /// Single-source grid with `per_cell` evenly spaced angles inside every
    /// leaf cell, at offsets `(k + 1/2) / per_cell` of the cell width.
    pub fn uniform(cfg: &ArrayConfig<T>, spec: &TreeSpec<T>, per_cell: usize, source: &FeatureSource, stream: SeedStream) -> Result<Self> {
        if per_cell == 0 {
            return Err(Error::Config("need at least one training angle per cell".into()));
        }
        let tuples = grid_angles(spec, per_cell).into_iter().map(|a| vec![a]).collect::<Vec<_>>();
        Self::from_tuples(cfg, &tuples, source, stream)
    }

    pub fn doas(&self) -> &[Vec<T>] {
        &self.doas
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.doas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doas.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of sources per row (0 for an empty grid).
    pub fn sources_per_row(&self) -> usize {
        self.doas.first().map_or(0, Vec::len)
    }
}

/// Training angles `theta_min + (cell + (k + 1/2)/per_cell) * resolution`.
pub fn grid_angles<T: Real>(spec: &TreeSpec<T>, per_cell: usize) -> Vec<T> {
    let n = spec.total_classes() as usize;
    let step = spec.resolution();
    let (lo, _) = spec.domain();
    let mut out = Vec::with_capacity(n * per_cell);
    for cell in 0..n {
        for k in 0..per_cell {
            let frac = (k as f64 + 0.5) / per_cell as f64;
            out.push(lo + (T::of_usize(cell) + T::of(frac)) * step);
        }
    }
    out
}

/// Rows of `grid` whose `branch`-th DOA falls under `prefix`, labelled one-hot
/// with that DOA's level-`level` digit.
pub fn build_node_training_set<T: Real>(
    spec: &TreeSpec<T>,
    level: usize,
    prefix: &[usize],
    grid: &TrainingGrid<T>,
    branch: usize,
) -> Result<Dataset<T>> {
    if level >= spec.depth() || prefix.len() != level {
        return Err(Error::Label(format!("level {level} with prefix {prefix:?} is not a node of a depth-{} tree", spec.depth())));
    }
    spec.check_prefix(prefix)?;
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (i, doas) in grid.doas.iter().enumerate() {
        let theta = *doas.get(branch).ok_or_else(|| Error::Config(format!("grid rows have no source {branch}")))?;
        let path = spec.doa_to_labels(theta)?;
        if path.0[..level] == *prefix {
            rows.push(i);
            classes.push(path.0[level]);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("no training angles under prefix {prefix:?} at level {level}")));
    }
    let inputs = grid.features.select(Axis(0), &rows);
    Dataset::from_classes(inputs, &classes, spec.fanouts[level])
}

/// Label at `level` of the child interval closest to the nearest training
/// DOA, for nodes whose interval no training row reaches (in a Q-source tree
/// the `q`-th smallest DOA cannot occupy every cell).
fn nearest_label<T: Real>(spec: &TreeSpec<T>, level: usize, prefix: &[usize], grid: &TrainingGrid<T>, branch: usize) -> Result<usize> {
    let (lo, hi) = spec.prefix_interval(prefix)?;
    let nearest = grid
        .doas
        .iter()
        .filter_map(|d| d.get(branch).copied())
        .min_by(|a, b| {
            let da = (lo - *a).max(*a - hi);
            let db = (lo - *b).max(*b - hi);
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
        })
        .ok_or_else(|| Error::EmptyDataset("training grid is empty".into()))?;
    Ok(if nearest < lo { 0 } else { spec.fanouts[level] - 1 })
}

/// Per-node training summary; `samples == 0` marks a constant node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub level: usize,
    pub prefix: Vec<usize>,
    pub samples: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedTree<T> {
    pub model: TreeModel<T>,
    pub reports: Vec<NodeReport>,
}

/// Node training options shared by every node in the tree.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeTrainConfig {
    pub train: TrainConfig,
    pub scaling: InputScaling,
}

/// Trains all `sum_h G_h` nodes independently and in parallel. Node seeds
/// derive from `cfg.train.seed` and the node's `(level, index)`.
pub fn train_tree<T: Real>(spec: &TreeSpec<T>, grid: &TrainingGrid<T>, branch: usize, cfg: &TreeTrainConfig) -> Result<TrainedTree<T>> {
    cfg.train.validate()?;
    let input_dim = grid.feature_dim();
    let base = SeedStream::new(cfg.train.seed);
    let addresses: Vec<(usize, usize)> = spec
        .group_counts()
        .iter()
        .enumerate()
        .flat_map(|(h, &g)| (0..g as usize).map(move |i| (h, i)))
        .collect();

    let trained: Vec<(Mlnn<T>, NodeReport)> = addresses
        .par_iter()
        .map(|&(level, index)| {
            let prefix = spec.node_prefix(level, index);
            let wrap = |e: Error| Error::Node { level, path: prefix.clone(), source: Box::new(e) };
            let layer_spec = spec.node_layer_spec(level, input_dim).map_err(wrap)?;
            let data = match build_node_training_set(spec, level, &prefix, grid, branch) {
                Ok(d) => d,
                Err(Error::EmptyDataset(_)) => {
                    let class = nearest_label(spec, level, &prefix, grid, branch).map_err(wrap)?;
                    let model = Mlnn::constant(layer_spec, class).map_err(wrap)?.with_scaling(cfg.scaling);
                    let report = NodeReport { level, prefix, samples: 0, epochs_run: 0, final_loss: f64::NAN, train_accuracy: f64::NAN };
                    return Ok((model, report));
                }
                Err(e) => return Err(wrap(e)),
            };
            let stream = base.path(&[level as u64, index as u64]);
            let init = Mlnn::new(layer_spec, cfg.train.init, stream.named("init")).with_scaling(cfg.scaling);
            let node_cfg = TrainConfig { seed: stream.named("train").seed(), ..cfg.train.clone() };
            let out = mlnn::train(init, &data, &node_cfg).map_err(wrap)?;
            let acc = out.model.accuracy(&data).map_err(wrap)?;
            let report = NodeReport {
                level,
                prefix: prefix.clone(),
                samples: data.len(),
                epochs_run: out.loss_history.len(),
                final_loss: out.loss_history.last().copied().unwrap_or(f64::NAN),
                train_accuracy: acc,
            };
            Ok((out.model, report))
        })
        .collect::<Result<_>>()?;

    let mut levels: Vec<Vec<Mlnn<T>>> = spec.group_counts().iter().map(|&g| Vec::with_capacity(g as usize)).collect();
    let mut reports = Vec::with_capacity(trained.len());
    for ((level, _), (model, report)) in addresses.iter().zip(trained) {
        levels[*level].push(model);
        reports.push(report);
    }
    Ok(TrainedTree { model: TreeModel::from_levels(spec.clone(), levels)?, reports })
}

pub const TREE_FORMAT: &str = "tdnn-tree";
pub const TREE_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Serialize, Deserialize)]
struct TreeManifest {
    format: String,
    version: u32,
    fanouts: Vec<usize>,
    theta_min: f64,
    theta_max: f64,
    hidden: Vec<usize>,
    input_dim: usize,
    decoder: Decoder,
    nodes: Vec<NodeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeEntry {
    level: usize,
    prefix: Vec<usize>,
    file: String,
}

impl<T: Real> TreeModel<T> {
    /// Writes `manifest.toml` plus one model checkpoint per node under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("nodes"))?;
        let mut nodes = Vec::new();
        for (h, level) in self.levels.iter().enumerate() {
            for (i, node) in level.iter().enumerate() {
                let file = format!("nodes/l{h}_n{i}.mlnn");
                node.save(dir.join(&file))?;
                nodes.push(NodeEntry { level: h, prefix: self.spec.node_prefix(h, i), file });
            }
        }
        let manifest = TreeManifest {
            format: TREE_FORMAT.into(),
            version: TREE_FORMAT_VERSION,
            fanouts: self.spec.fanouts.clone(),
            theta_min: self.spec.theta_min.to64(),
            theta_max: self.spec.theta_max.to64(),
            hidden: self.spec.hidden.clone(),
            input_dim: self.input_dim(),
            decoder: self.decoder,
            nodes,
        };
        let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        let m: TreeManifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if m.format != TREE_FORMAT {
            return Err(Error::Checkpoint(format!("manifest format {:?} is not {TREE_FORMAT:?}", m.format)));
        }
        if m.version != TREE_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported tree manifest version {}", m.version)));
        }
        let spec = TreeSpec::new(m.fanouts, T::of(m.theta_min), T::of(m.theta_max), m.hidden)?;
        let mut slots: Vec<Vec<Option<Mlnn<T>>>> = spec.group_counts().iter().map(|&g| vec![None; g as usize]).collect();
        for entry in &m.nodes {
            if entry.level >= spec.depth() || entry.prefix.len() != entry.level {
                return Err(Error::Checkpoint(format!("bad node entry {:?} at level {}", entry.prefix, entry.level)));
            }
            let idx = spec.node_index(&entry.prefix)?;
            let want = spec.node_layer_spec(entry.level, m.input_dim)?;
            let node = Mlnn::load_expecting(dir.join(&entry.file), &want)?;
            slots[entry.level][idx] = Some(node);
        }
        let mut levels = Vec::with_capacity(slots.len());
        for (h, level) in slots.into_iter().enumerate() {
            let nodes: Option<Vec<_>> = level.into_iter().collect();
            levels.push(nodes.ok_or_else(|| Error::Checkpoint(format!("manifest is missing nodes at level {h}")))?);
        }
        Ok(TreeModel::from_levels(spec, levels)?.with_decoder(m.decoder))
    }
}
