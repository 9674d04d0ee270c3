//! Tree-structured neural classifiers for high-resolution direction-of-arrival
//! estimation with a uniform linear array, plus the subspace and bound
//! baselines they are measured against.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`). The aliases at
//! the bottom of this file fix the scalar for callers that do not care; the
//! benchmark harness uses the `f64` ones.
//!
//! ```no_run
//! use tdnn_core::tree::{FeatureSource, TrainingGrid};
//! use tdnn_core::{array, train_tree, ArrayConfig64, SeedStream, SourceSet64, TreeSpec64, TreeTrainConfig};
//!
//! let cfg = ArrayConfig64::half_wavelength(16)?;
//! let spec = TreeSpec64::for_array(&cfg, vec![6, 5, 4], vec![128, 64, 32])?;
//! let grid = TrainingGrid::uniform(&cfg, &spec, 5, &FeatureSource::Analytic, SeedStream::new(1))?;
//! let tree = train_tree(&spec, &grid, 0, &TreeTrainConfig::default())?.model;
//!
//! let src = SourceSet64::unit_power(vec![27.3], 10.0)?;
//! let r = array::sample_covariance(&array::synth_snapshots(&cfg, &src, 50, SeedStream::new(2))?);
//! let (_labels, theta) = tree.route_predict(array::extract_features(&r)?.as_slice())?;
//! # let _ = theta;
//! # Ok::<(), tdnn_core::Error>(())
//! ```

pub mod array;
pub mod baselines;
pub mod error;
pub mod linalg;
pub mod mlnn;
pub mod multi;
pub mod rng;
pub mod scalar;
pub mod tree;

pub use array::{
    analytic_covariance, extract_features, noiseless_features, sample_covariance, steering_vector, synth_snapshots,
};
pub use baselines::{crlb, music_spectrum, root_music, train_flat_dnn, CrlbKind};
pub use error::{Error, Result};
pub use mlnn::{bce_loss, train, InputScaling, LayerSpec, LossKind, Optimizer, TrainConfig};
pub use multi::{build_multi_training_set, multi_rmse, train_qtdnn};
pub use rng::SeedStream;
pub use scalar::Real;
pub use tree::{
    build_node_training_set, oracle_tree, train_tree, Decoder, FeatureSource, LabelPath, TreeTrainConfig,
};

pub type ArrayConfig64 = array::ArrayConfig<f64>;
pub type SourceSet64 = array::SourceSet<f64>;
pub type CovarianceMatrix64 = array::CovarianceMatrix<f64>;
pub type FeatureVector64 = array::FeatureVector<f64>;
pub type Mlnn64 = mlnn::Mlnn<f64>;
pub type Dataset64 = mlnn::Dataset<f64>;
pub type TreeSpec64 = tree::TreeSpec<f64>;
pub type TreeModel64 = tree::TreeModel<f64>;
pub type TrainingGrid64 = tree::TrainingGrid<f64>;
pub type QTdnn64 = multi::QTdnn<f64>;
pub type FlatDnn64 = baselines::FlatDnn<f64>;

pub type ArrayConfig32 = array::ArrayConfig<f32>;
pub type SourceSet32 = array::SourceSet<f32>;
pub type Mlnn32 = mlnn::Mlnn<f32>;
pub type TreeSpec32 = tree::TreeSpec<f32>;
pub type TreeModel32 = tree::TreeModel<f32>;
pub type QTdnn32 = multi::QTdnn<f32>;
pub type FlatDnn32 = baselines::FlatDnn<f32>;
