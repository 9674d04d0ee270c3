use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlnn::{self, Dataset, LayerSpec, Mlnn};
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::tree::{Decoder, TrainingGrid, TreeSpec, TreeTrainConfig};

/// Single network with one output class per leaf cell of `spec`, decoded with
/// the same cell midpoints as the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatDnn<T> {
    spec: TreeSpec<T>,
    model: Mlnn<T>,
    decoder: Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatTraining<T> {
    pub model: FlatDnn<T>,
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
}

impl<T: Real> FlatDnn<T> {
    pub fn new(spec: TreeSpec<T>, model: Mlnn<T>) -> Result<Self> {
        if model.spec().output_size() as u64 != spec.total_classes() {
            return Err(Error::Config(format!(
                "flat model has {} outputs but the grid has {} cells",
                model.spec().output_size(),
                spec.total_classes()
            )));
        }
        Ok(Self { spec, model, decoder: Decoder::Midpoint })
    }

    pub fn spec(&self) -> &TreeSpec<T> {
        &self.spec
    }

    pub fn model(&self) -> &Mlnn<T> {
        &self.model
    }

    pub fn num_classes(&self) -> usize {
        self.model.spec().output_size()
    }

    /// Top-`q` cells by output probability (ties to the lower index),
    /// decoded and sorted ascending.
    pub fn predict(&self, features: &[T], q: usize) -> Result<Vec<T>> {
        if q == 0 || q > self.num_classes() {
            return Err(Error::Config(format!("cannot pick {q} of {} classes", self.num_classes())));
        }
        let p = self.model.forward(features)?;
        let cells = top_k(p.view(), q);
        let mut est = cells
            .into_iter()
            .map(|c| self.spec.labels_to_doa(&self.spec.labels_of_leaf(c)?, self.decoder))
            .collect::<Result<Vec<_>>>()?;
        est.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Ok(est)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.model.save(dir.join("model.mlnn"))?;
        let m = FlatManifest {
            format: "flat-dnn".into(),
            version: 1,
            fanouts: self.spec.fanouts().to_vec(),
            theta_min: self.spec.domain().0.to64(),
            theta_max: self.spec.domain().1.to64(),
            hidden: self.spec.hidden().to_vec(),
        };
        std::fs::write(dir.join("manifest.toml"), toml::to_string_pretty(&m).map_err(|e| Error::Checkpoint(e.to_string()))?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: FlatManifest = toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml"))?)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if m.format != "flat-dnn" || m.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported flat manifest {} v{}", m.format, m.version)));
        }
        let spec = TreeSpec::new(m.fanouts, T::of(m.theta_min), T::of(m.theta_max), m.hidden)?;
        Self::new(spec, Mlnn::load(dir.join("model.mlnn"))?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FlatManifest {
    format: String,
    version: u32,
    fanouts: Vec<usize>,
    theta_min: f64,
    theta_max: f64,
    hidden: Vec<usize>,
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_k<T: Real>(p: ArrayView1<T>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Trains the flat classifier over the leaf cells of `spec`. Every source in
/// a grid row sets its cell to 1 in the (multi-hot) target.
pub fn train_flat_dnn<T: Real>(spec: &TreeSpec<T>, grid: &TrainingGrid<T>, cfg: &TreeTrainConfig) -> Result<FlatTraining<T>> {
    let n = spec.total_classes() as usize;
    let sets = grid
        .doas()
        .iter()
        .map(|doas| doas.iter().map(|&t| spec.leaf_index(t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::from_class_sets(grid.features().clone(), &sets, n)?;
    let layer_spec = LayerSpec::with_hidden(grid.feature_dim(), spec.hidden(), n)?;
    let stream = SeedStream::new(cfg.train.seed).named("flat");
    let init = Mlnn::new(layer_spec, cfg.train.init, stream.named("init")).with_scaling(cfg.scaling);
    let train_cfg = mlnn::TrainConfig { seed: stream.named("train").seed(), ..cfg.train.clone() };
    let out = mlnn::train(init, &data, &train_cfg)?;
    let train_accuracy = if grid.sources_per_row() == 1 { out.model.accuracy(&data)? } else { f64::NAN };
    Ok(FlatTraining { model: FlatDnn::new(spec.clone(), out.model)?, loss_history: out.loss_history, train_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_low() {
        let p = ndarray::arr1(&[0.1, 0.3, 0.3, 0.2, 0.1]);
        assert_eq!(top_k(p.view(), 1), vec![1]);
        assert_eq!(top_k(p.view(), 3), vec![1, 2, 3]);
        assert_eq!(top_k(p.view(), 5), vec![1, 2, 3, 0, 4]);
    }

    #[test]
    fn multi_hot_targets_have_q_ones() {
        let spec = TreeSpec::<f64>::new(vec![12, 10], -60.0, 60.0, vec![4]).unwrap();
        let sets: Vec<Vec<usize>> = [[-30.0, 40.0], [-59.9, 59.9]]
            .iter()
            .map(|d| d.iter().map(|&t| spec.leaf_index(t).unwrap()).collect())
            .collect();
        let data = Dataset::<f64>::from_class_sets(ndarray::Array2::zeros((2, 3)), &sets, 120).unwrap();
        for row in data.targets().rows() {
            assert_eq!(row.sum(), 2.0);
        }
    }

    #[test]
    fn rejects_mismatched_output_size() {
        let spec = TreeSpec::<f64>::new(vec![6, 5, 4], -60.0, 60.0, vec![4]).unwrap();
        let m = Mlnn::zeros(LayerSpec::new(vec![3, 4, 100]).unwrap());
        assert!(FlatDnn::new(spec, m).is_err());
    }
}
