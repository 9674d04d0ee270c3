//! The trained model set a benchmark needs, with directory checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tdnn_core::multi::{build_multi_training_set, sample_tuples, train_qtdnn};
use tdnn_core::tree::{train_tree, NodeReport, TrainingGrid};
use tdnn_core::{train_flat_dnn, FlatDnn64, QTdnn64, SeedStream, TreeModel64, TreeSpec64};

use crate::config::{ExperimentConfig, Method};
use crate::error::{BenchError, Result};

/// Models for `Q >= 2` sources, trained on one shared tuple grid.
#[derive(Debug, Clone, Default)]
pub struct MultiModels {
    pub qtdnn: Option<QTdnn64>,
    pub flat: Option<FlatDnn64>,
}

#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub tdnn: Option<TreeModel64>,
    pub tdnn2: Option<TreeModel64>,
    pub flat: Option<FlatDnn64>,
    pub multi: BTreeMap<usize, MultiModels>,
}

/// Per-model training summary.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainSummary {
    pub entries: Vec<SummaryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub model: String,
    pub rows: usize,
    pub min_train_accuracy: f64,
    pub mean_train_accuracy: f64,
    pub mean_final_loss: f64,
    /// Nodes no training row reaches; they predict a fixed label.
    pub constant_nodes: usize,
}

impl SummaryEntry {
    fn from_nodes(model: String, rows: usize, reports: &[NodeReport]) -> Self {
        let trained: Vec<&NodeReport> = reports.iter().filter(|r| r.samples > 0).collect();
        let n = trained.len().max(1) as f64;
        Self {
            model,
            rows,
            min_train_accuracy: trained.iter().map(|r| r.train_accuracy).fold(f64::INFINITY, f64::min),
            mean_train_accuracy: trained.iter().map(|r| r.train_accuracy).sum::<f64>() / n,
            mean_final_loss: trained.iter().map(|r| r.final_loss).sum::<f64>() / n,
            constant_nodes: reports.len() - trained.len(),
        }
    }
}

/// What [`train_models`] should build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPlan {
    pub single: Vec<Method>,
    /// `Q >= 2` values needing multi-source models.
    pub multi_q: Vec<usize>,
    pub multi_methods: Vec<Method>,
}

impl TrainPlan {
    /// Models used by the SNR sweep only.
    pub fn snr(cfg: &ExperimentConfig) -> Self {
        Self { single: cfg.methods.clone(), multi_q: Vec::new(), multi_methods: Vec::new() }
    }

    /// Models used by the Q sweep only (`Q = 1` reuses the single-source ones).
    pub fn q(cfg: &ExperimentConfig) -> Self {
        let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| matches!(m, Method::Tdnn | Method::FlatDnn)).collect();
        let single = if cfg.q_sweep.contains(&1) { methods.clone() } else { Vec::new() };
        let multi_q = cfg.q_sweep.iter().copied().filter(|&q| q >= 2).collect();
        Self { single, multi_q, multi_methods: methods }
    }

    pub fn all(cfg: &ExperimentConfig) -> Self {
        let mut plan = Self::q(cfg);
        for m in &cfg.methods {
            if !plan.single.contains(m) {
                plan.single.push(*m);
            }
        }
        plan
    }
}

fn data_stream(cfg: &ExperimentConfig) -> SeedStream {
    SeedStream::new(cfg.model.train.seed).named("data")
}

/// The single-source training grid shared by every single-source model.
pub fn single_grid(cfg: &ExperimentConfig, spec: &TreeSpec64) -> Result<TrainingGrid<f64>> {
    let array = cfg.model.array()?;
    Ok(TrainingGrid::uniform(&array, spec, cfg.model.per_cell, &cfg.model.features, data_stream(cfg).named("single"))?)
}

/// The `q`-source training grid shared by the Q-TDNN and the flat top-Q model.
pub fn multi_grid(cfg: &ExperimentConfig, q: usize) -> Result<TrainingGrid<f64>> {
    let array = cfg.model.array()?;
    let spec = cfg.model.tree_spec()?;
    let stream = data_stream(cfg).named("multi").child(q as u64);
    let count = cfg.model.tuples_per_class * spec.total_classes() as usize;
    let sep = cfg.model.min_separation_cells * spec.resolution();
    let tuples = sample_tuples(&spec, q, count, sep, stream.named("tuples"))?;
    Ok(build_multi_training_set(&array, &spec, &tuples, sep, &cfg.model.features, stream.named("features"))?)
}

fn seeded(cfg: &ExperimentConfig, name: &str) -> tdnn_core::TreeTrainConfig {
    let mut t = cfg.model.tree_train();
    t.train.seed = SeedStream::new(cfg.model.train.seed).named(name).seed();
    t
}

/// Trains what `plan` asks for. `log` receives one line per finished model.
pub fn train_models(cfg: &ExperimentConfig, plan: &TrainPlan, mut log: impl FnMut(&str)) -> Result<(ModelSet, TrainSummary)> {
    let spec = cfg.model.tree_spec()?;
    let mut set = ModelSet::default();
    let mut summary = TrainSummary::default();
    let needs = |m: Method| plan.single.contains(&m);

    if needs(Method::Tdnn) || needs(Method::FlatDnn) || needs(Method::Tdnn2) {
        let grid = single_grid(cfg, &spec)?;
        if needs(Method::Tdnn) {
            let t = train_tree(&spec, &grid, 0, &seeded(cfg, "tdnn"))?;
            summary.entries.push(SummaryEntry::from_nodes("tdnn".into(), grid.len(), &t.reports));
            set.tdnn = Some(t.model);
            log("tdnn trained");
        }
        if needs(Method::Tdnn2) {
            let t = train_tree(&cfg.model.alt_tree_spec()?, &grid, 0, &seeded(cfg, "tdnn2"))?;
            summary.entries.push(SummaryEntry::from_nodes("tdnn2".into(), grid.len(), &t.reports));
            set.tdnn2 = Some(t.model);
            log("tdnn2 trained");
        }
        if needs(Method::FlatDnn) {
            let f = train_flat_dnn(&spec, &grid, &seeded(cfg, "flat"))?;
            summary.entries.push(SummaryEntry {
                model: "flat_dnn".into(),
                rows: grid.len(),
                min_train_accuracy: f.train_accuracy,
                mean_train_accuracy: f.train_accuracy,
                mean_final_loss: f.loss_history.last().copied().unwrap_or(f64::NAN),
                constant_nodes: 0,
            });
            set.flat = Some(f.model);
            log("flat_dnn trained");
        }
    }

    for &q in &plan.multi_q {
        let grid = multi_grid(cfg, q)?;
        let mut mm = MultiModels::default();
        if plan.multi_methods.contains(&Method::Tdnn) {
            let t = train_qtdnn(&spec, &grid, &seeded(cfg, &format!("qtdnn{q}")))?;
            let all: Vec<NodeReport> = t.reports.into_iter().flatten().collect();
            summary.entries.push(SummaryEntry::from_nodes(format!("qtdnn_q{q}"), grid.len(), &all));
            mm.qtdnn = Some(t.model);
            log(&format!("q-tdnn Q={q} trained"));
        }
        if plan.multi_methods.contains(&Method::FlatDnn) {
            let f = train_flat_dnn(&spec, &grid, &seeded(cfg, &format!("flat{q}")))?;
            summary.entries.push(SummaryEntry {
                model: format!("flat_dnn_q{q}"),
                rows: grid.len(),
                min_train_accuracy: f64::NAN,
                mean_train_accuracy: f64::NAN,
                mean_final_loss: f.loss_history.last().copied().unwrap_or(f64::NAN),
                constant_nodes: 0,
            });
            mm.flat = Some(f.model);
            log(&format!("flat_dnn Q={q} trained"));
        }
        set.multi.insert(q, mm);
    }
    Ok((set, summary))
}

impl ModelSet {
    /// Layout: `tdnn/`, `tdnn2/`, `flat_dnn/`, `q{Q}/qtdnn/`, `q{Q}/flat_dnn/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(m) = &self.tdnn {
            m.save(dir.join("tdnn"))?;
        }
        if let Some(m) = &self.tdnn2 {
            m.save(dir.join("tdnn2"))?;
        }
        if let Some(m) = &self.flat {
            m.save(dir.join("flat_dnn"))?;
        }
        for (q, mm) in &self.multi {
            let sub = dir.join(format!("q{q}"));
            if let Some(m) = &mm.qtdnn {
                m.save(sub.join("qtdnn"))?;
            }
            if let Some(m) = &mm.flat {
                m.save(sub.join("flat_dnn"))?;
            }
        }
        Ok(())
    }

    /// Loads whatever checkpoints exist under `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(BenchError::Config(format!("model directory {} does not exist", dir.display())));
        }
        let opt = |p: &Path| p.is_dir();
        let mut set = ModelSet::default();
        if opt(&dir.join("tdnn")) {
            set.tdnn = Some(TreeModel64::load(dir.join("tdnn"))?);
        }
        if opt(&dir.join("tdnn2")) {
            set.tdnn2 = Some(TreeModel64::load(dir.join("tdnn2"))?);
        }
        if opt(&dir.join("flat_dnn")) {
            set.flat = Some(FlatDnn64::load(dir.join("flat_dnn"))?);
        }
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            let Some(q) = name.strip_prefix('q').and_then(|s| s.parse::<usize>().ok()) else { continue };
            let sub = entry.path();
            let mut mm = MultiModels::default();
            if opt(&sub.join("qtdnn")) {
                mm.qtdnn = Some(QTdnn64::load(sub.join("qtdnn"))?);
            }
            if opt(&sub.join("flat_dnn")) {
                mm.flat = Some(FlatDnn64::load(sub.join("flat_dnn"))?);
            }
            set.multi.insert(q, mm);
        }
        Ok(set)
    }

    /// Fills any model this set lacks from `other`.
    pub fn absorb(&mut self, other: ModelSet) {
        self.tdnn = self.tdnn.take().or(other.tdnn);
        self.tdnn2 = self.tdnn2.take().or(other.tdnn2);
        self.flat = self.flat.take().or(other.flat);
        for (q, mm) in other.multi {
            let e = self.multi.entry(q).or_default();
            e.qtdnn = e.qtdnn.take().or(mm.qtdnn);
            e.flat = e.flat.take().or(mm.flat);
        }
    }

    /// The part of `plan` this set cannot serve.
    pub fn missing(&self, plan: &TrainPlan) -> TrainPlan {
        let single = plan
            .single
            .iter()
            .copied()
            .filter(|m| match m {
                Method::Tdnn => self.tdnn.is_none(),
                Method::Tdnn2 => self.tdnn2.is_none(),
                Method::FlatDnn => self.flat.is_none(),
                _ => false,
            })
            .collect();
        let multi_q = plan
            .multi_q
            .iter()
            .copied()
            .filter(|q| {
                let mm = self.multi.get(q);
                plan.multi_methods.iter().any(|m| match m {
                    Method::Tdnn => mm.is_none_or(|x| x.qtdnn.is_none()),
                    Method::FlatDnn => mm.is_none_or(|x| x.flat.is_none()),
                    _ => false,
                })
            })
            .collect();
        TrainPlan { single, multi_q, multi_methods: plan.multi_methods.clone() }
    }
}

impl TrainPlan {
    pub fn is_empty(&self) -> bool {
        !self.single.iter().any(|m| matches!(m, Method::Tdnn | Method::Tdnn2 | Method::FlatDnn)) && self.multi_q.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;

    #[test]
    fn plans_follow_the_method_list() {
        let mut cfg = ExperimentConfig::for_profile(Profile::Desk);
        cfg.methods = vec![Method::Tdnn, Method::RootMusic];
        cfg.q_sweep = vec![1, 3];
        let q = TrainPlan::q(&cfg);
        assert_eq!(q.single, vec![Method::Tdnn]);
        assert_eq!(q.multi_q, vec![3]);
        assert!(TrainPlan::snr(&cfg).single.contains(&Method::RootMusic));
        cfg.methods = vec![Method::RootMusic, Method::Crlb];
        cfg.q_sweep = vec![1];
        assert!(TrainPlan::all(&cfg).is_empty());
    }

    #[test]
    fn trained_sets_round_trip_and_report_nothing_missing() {
        let mut cfg = ExperimentConfig::for_profile(Profile::Desk);
        cfg.model.elements = 4;
        cfg.model.fanouts = vec![3, 2];
        cfg.model.alt_fanouts = vec![6];
        cfg.model.hidden = vec![5];
        cfg.model.train.epochs = 1;
        cfg.model.tuples_per_class = 3;
        cfg.methods = vec![Method::Tdnn, Method::Tdnn2, Method::FlatDnn];
        cfg.q_sweep = vec![1, 2];
        let plan = TrainPlan::all(&cfg);
        let (set, summary) = train_models(&cfg, &plan, |_| {}).unwrap();
        assert!(set.missing(&plan).is_empty());
        assert_eq!(summary.entries.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let back = ModelSet::load(dir.path()).unwrap();
        assert!(back.missing(&plan).is_empty());
        assert_eq!(back.tdnn, set.tdnn);
        assert_eq!(back.multi[&2].qtdnn, set.multi[&2].qtdnn);
        assert!(ModelSet::default().missing(&plan).multi_q == vec![2]);
    }
}
