//! Experiment configuration: a profile supplies defaults, a TOML file and
//! `key.path=value` overrides are merged on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdnn_core::mlnn::{InputScaling, TrainConfig};
use tdnn_core::tree::{FeatureSource, TreeSpec, TreeTrainConfig};
use tdnn_core::{ArrayConfig64, TreeSpec64};

use crate::error::{BenchError, Result};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TDNN_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 16 elements, small nodes; fits CI.
    Desk,
    /// 64 elements and the full six-hidden-layer nodes.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Tree (or Q parallel trees) over the primary fan-outs.
    Tdnn,
    /// Tree over the alternate fan-outs.
    Tdnn2,
    /// Tree with perfect node classifiers; single-source only.
    OracleTdnn,
    FlatDnn,
    RootMusic,
    /// Square root of the stochastic bound; single-source only.
    Crlb,
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::Tdnn => "tdnn",
            Method::Tdnn2 => "tdnn2",
            Method::OracleTdnn => "oracle_tdnn",
            Method::FlatDnn => "flat_dnn",
            Method::RootMusic => "root_music",
            Method::Crlb => "crlb",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        [Method::Tdnn, Method::Tdnn2, Method::OracleTdnn, Method::FlatDnn, Method::RootMusic, Method::Crlb]
            .into_iter()
            .find(|m| m.id() == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    /// Uniform random off-grid DOA per trial.
    Random,
    /// Every trial uses `fixed_theta_deg`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub elements: usize,
    pub spacing_wavelengths: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub fanouts: Vec<usize>,
    pub alt_fanouts: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Training angles per leaf cell.
    pub per_cell: usize,
    pub features: FeatureSource,
    pub scaling: InputScaling,
    pub train: TrainConfig,
    /// Multi-source training tuples per leaf cell.
    pub tuples_per_class: usize,
    /// Minimum training separation in leaf cells.
    pub min_separation_cells: f64,
}

impl ModelConfig {
    pub fn array(&self) -> Result<ArrayConfig64> {
        Ok(ArrayConfig64::new(self.elements, self.spacing_wavelengths, self.theta_min, self.theta_max)?)
    }

    pub fn tree_spec(&self) -> Result<TreeSpec64> {
        Ok(TreeSpec::new(self.fanouts.clone(), self.theta_min, self.theta_max, self.hidden.clone())?)
    }

    pub fn alt_tree_spec(&self) -> Result<TreeSpec64> {
        Ok(TreeSpec::new(self.alt_fanouts.clone(), self.theta_min, self.theta_max, self.hidden.clone())?)
    }

    pub fn tree_train(&self) -> TreeTrainConfig {
        TreeTrainConfig { train: self.train.clone(), scaling: self.scaling }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub snr_db: Vec<f64>,
    pub snapshots: usize,
    pub trials: usize,
    pub theta_mode: ThetaMode,
    pub fixed_theta_deg: f64,
    pub q_sweep: Vec<usize>,
    pub q_snr_db: f64,
    /// Minimum separation of evaluation tuples in degrees.
    pub eval_min_separation_deg: f64,
    pub class_sweep: Vec<usize>,
    /// Independent training seeds per class-sweep point.
    pub class_repeats: usize,
    /// Held-out angles per class for the class-sweep validation accuracy.
    pub validation_per_class: usize,
    /// Record wall time in the `ms` column (breaks byte-identical reruns).
    pub record_timing: bool,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let model = match profile {
            Profile::Desk => ModelConfig {
                elements: 16,
                spacing_wavelengths: 0.5,
                theta_min: -60.0,
                theta_max: 60.0,
                fanouts: vec![6, 5, 4],
                alt_fanouts: vec![12, 10],
                hidden: vec![128, 64, 32],
                per_cell: 5,
                features: FeatureSource::Mixed { snrs_db: vec![-10.0, -5.0, 0.0], snapshots: 50, copies: 2 },
                scaling: InputScaling::UnitNorm,
                train: TrainConfig { epochs: 60, batch_size: 32, learning_rate: 1e-3, seed: 1, ..TrainConfig::default() },
                tuples_per_class: 50,
                min_separation_cells: 2.0,
            },
            Profile::Full => ModelConfig {
                elements: 64,
                spacing_wavelengths: 0.5,
                theta_min: -60.0,
                theta_max: 60.0,
                fanouts: vec![6, 5, 4],
                alt_fanouts: vec![12, 10],
                hidden: vec![512, 256, 128, 64, 32, 16],
                per_cell: 5,
                features: FeatureSource::Mixed { snrs_db: vec![-10.0, -5.0, 0.0], snapshots: 50, copies: 2 },
                scaling: InputScaling::UnitNorm,
                train: TrainConfig { epochs: 60, batch_size: 32, learning_rate: 1e-3, seed: 1, ..TrainConfig::default() },
                tuples_per_class: 50,
                min_separation_cells: 2.0,
            },
        };
        Self {
            profile,
            seed: 2024,
            methods: vec![Method::Tdnn, Method::FlatDnn, Method::RootMusic, Method::Crlb],
            snr_db: vec![-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0],
            snapshots: 50,
            trials: match profile {
                Profile::Desk => 500,
                Profile::Full => 2000,
            },
            theta_mode: ThetaMode::Random,
            fixed_theta_deg: 27.0,
            q_sweep: vec![1, 2, 3],
            q_snr_db: -8.0,
            eval_min_separation_deg: 10.0,
            class_sweep: vec![12, 30, 60, 120],
            class_repeats: 3,
            validation_per_class: 4,
            record_timing: false,
            output_dir: None,
            model,
        }
    }

    /// Profile defaults, then the file, then each `key.path=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| BenchError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| BenchError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(v) => v.clone().try_into().map_err(|e| BenchError::Config(format!("profile: {e}")))?,
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| BenchError::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.trials == 0 || self.class_repeats == 0 {
            return bad("trials and class_repeats must be at least 1");
        }
        if self.snr_db.is_empty() || self.q_sweep.is_empty() || self.methods.is_empty() || self.class_sweep.is_empty() {
            return bad("sweeps and the method list must be non-empty");
        }
        if self.snapshots == 0 {
            return bad("snapshots must be at least 1");
        }
        if self.q_sweep.iter().any(|&q| q == 0 || q >= self.model.elements) {
            return bad("every Q must satisfy 0 < Q < elements");
        }
        if self.class_sweep.iter().any(|&c| c < 2) {
            return bad("class sweep sizes must be at least 2");
        }
        self.model.array()?;
        self.model.tree_spec()?;
        self.model.alt_tree_spec()?;
        self.model.train.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// `output_dir` from the config, else `$TDNN_OUT_DIR`, else `results`.
    pub fn out_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML value, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| BenchError::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| BenchError::Config(format!("{k} is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::for_profile(Profile::Desk).validate().unwrap();
        ExperimentConfig::for_profile(Profile::Full).validate().unwrap();
    }

    #[test]
    fn overrides_merge_over_profile() {
        let cfg = ExperimentConfig::resolve(
            None,
            &["profile=full".into(), "trials=7".into(), "model.train.epochs=3".into(), "methods=[\"tdnn\", \"crlb\"]".into()],
        )
        .unwrap();
        assert_eq!(cfg.profile, Profile::Full);
        assert_eq!(cfg.model.elements, 64);
        assert_eq!(cfg.trials, 7);
        assert_eq!(cfg.model.train.epochs, 3);
        assert_eq!(cfg.model.train.batch_size, 32);
        assert_eq!(cfg.methods, vec![Method::Tdnn, Method::Crlb]);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let e = ExperimentConfig::resolve(None, &["trials=0".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = ExperimentConfig::resolve(None, &["no_such_key=1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = ExperimentConfig::resolve(None, &["trials".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::for_profile(Profile::Desk);
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
