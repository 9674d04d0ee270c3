//! Monte-Carlo sweeps. Trial `i` of a sweep point draws everything from a
//! seed stream addressed by the point and `i`, so results do not depend on
//! thread scheduling. The same trial index reuses the same DOAs and noise
//! draws across SNR points (common random numbers).

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use tdnn_core::array::{analytic_covariance, extract_features, noiseless_features, sample_covariance, synth_snapshots};
use tdnn_core::baselines::crlb::crlb;
use tdnn_core::mlnn::Dataset;
use tdnn_core::tree::{build_node_training_set, oracle_tree, train_tree, TrainingGrid};
use tdnn_core::{root_music, train_flat_dnn, CrlbKind, SeedStream, SourceSet64, TreeSpec64};

use crate::config::{ExperimentConfig, Method, ThetaMode};
use crate::error::{BenchError, Result};
use crate::models::ModelSet;
use crate::results::{paired_errors, ClassResult, TrialResult};

/// Everything a method may look at for one trial.
struct TrialInput<'a> {
    cfg: &'a ExperimentConfig,
    truth: Vec<f64>,
    snr_db: f64,
    features: Vec<f64>,
    covariance: tdnn_core::CovarianceMatrix64,
}

fn estimate(method: Method, models: &ModelSet, t: &TrialInput) -> Result<Vec<f64>> {
    let q = t.truth.len();
    let array = t.cfg.model.array()?;
    let missing = |what: &str| BenchError::Config(format!("method {} needs a trained {what} model", method.id()));
    match method {
        Method::Tdnn if q == 1 => Ok(vec![models.tdnn.as_ref().ok_or_else(|| missing("tdnn"))?.route_predict(&t.features)?.1]),
        Method::Tdnn => {
            let m = models.multi.get(&q).and_then(|m| m.qtdnn.as_ref()).ok_or_else(|| missing(&format!("Q={q} q-tdnn")))?;
            Ok(m.predict_multi(&t.features)?)
        }
        Method::Tdnn2 if q == 1 => Ok(vec![models.tdnn2.as_ref().ok_or_else(|| missing("tdnn2"))?.route_predict(&t.features)?.1]),
        Method::FlatDnn => {
            let m = if q == 1 { models.flat.as_ref() } else { models.multi.get(&q).and_then(|m| m.flat.as_ref()) };
            Ok(m.ok_or_else(|| missing(&format!("Q={q} flat")))?.predict(&t.features, q)?)
        }
        Method::OracleTdnn if q == 1 => {
            // Perfect nodes see the noise-free feature of the true DOA.
            let tree = oracle_tree(&array, &t.cfg.model.tree_spec()?)?;
            Ok(vec![tree.route_predict(noiseless_features(&array, &t.truth)?.as_slice())?.1])
        }
        Method::RootMusic => Ok(root_music(&t.covariance, q, &array)?.doas_deg),
        Method::Crlb => {
            let src = SourceSet64::unit_power(t.truth.clone(), t.snr_db)?;
            let b = crlb(&array, &src, t.cfg.snapshots, CrlbKind::Stochastic)?;
            // Reported as "estimates" at truth + bound std so errors carry the std.
            Ok((0..q).map(|i| t.truth[i] + b[[i, i]].sqrt()).collect())
        }
        _ => Err(BenchError::Config(format!("method {} supports a single source only", method.id()))),
    }
}

/// `Q` sorted angles, uniform on the domain, pairwise at least `sep` apart.
pub fn draw_tuple(rng: &mut impl Rng, lo: f64, hi: f64, q: usize, sep: f64) -> Vec<f64> {
    loop {
        let mut t: Vec<f64> = (0..q).map(|_| lo + rng.random::<f64>() * (hi - lo)).collect();
        t.sort_by(f64::total_cmp);
        if t.windows(2).all(|w| w[1] - w[0] >= sep) {
            return t;
        }
    }
}

fn run_trial(cfg: &ExperimentConfig, models: &ModelSet, methods: &[Method], snr_db: f64, q: usize, trial: usize, stream: SeedStream) -> Result<Vec<TrialResult>> {
    let array = cfg.model.array()?;
    let truth = match (cfg.theta_mode, q) {
        (ThetaMode::Fixed, 1) => vec![cfg.fixed_theta_deg],
        _ => draw_tuple(&mut stream.named("theta").rng(), array.theta_min, array.theta_max, q, cfg.eval_min_separation_deg),
    };
    let src = SourceSet64::unit_power(truth.clone(), snr_db)?;
    let batch = synth_snapshots(&array, &src, cfg.snapshots, stream.named("snapshots"))?;
    let covariance = sample_covariance(&batch);
    let features = extract_features(&covariance)?.into_values().to_vec();
    let input = TrialInput { cfg, truth, snr_db, features, covariance };
    Ok(methods
        .iter()
        .map(|&m| {
            let start = Instant::now();
            let est = estimate(m, models, &input);
            let ms = if cfg.record_timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
            let (theta_est, error) = match est {
                Ok(e) if e.len() == q && e.iter().all(|x| x.is_finite()) => {
                    let err = paired_errors(&input.truth, &e);
                    let mut sorted = e;
                    sorted.sort_by(f64::total_cmp);
                    if m == Method::Crlb {
                        (Vec::new(), err)
                    } else {
                        (sorted, err)
                    }
                }
                _ => (Vec::new(), Vec::new()),
            };
            TrialResult {
                method: m.id().into(),
                snr_db,
                snapshots: cfg.snapshots,
                q,
                trial,
                theta_true: input.truth.clone(),
                theta_est,
                error,
                seed: stream.seed(),
                ms,
            }
        })
        .collect())
}

/// Methods that cannot run at all (missing model) are configuration errors;
/// per-trial failures are recorded as rows without estimates.
fn check_models(methods: &[Method], models: &ModelSet, qs: &[usize]) -> Result<()> {
    for &m in methods {
        for &q in qs {
            let ok = match (m, q) {
                (Method::Tdnn, 1) => models.tdnn.is_some(),
                (Method::Tdnn, q) => models.multi.get(&q).is_some_and(|x| x.qtdnn.is_some()),
                (Method::Tdnn2, _) => models.tdnn2.is_some(),
                (Method::FlatDnn, 1) => models.flat.is_some(),
                (Method::FlatDnn, q) => models.multi.get(&q).is_some_and(|x| x.flat.is_some()),
                _ => true,
            };
            if !ok {
                return Err(BenchError::Config(format!("method {} has no trained model for Q={q}", m.id())));
            }
        }
    }
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, models: &ModelSet, methods: &[Method], points: &[(f64, usize)], stream: SeedStream, crn_by_q: bool) -> Result<Vec<TrialResult>> {
    let mut out = Vec::new();
    for &(snr, q) in points {
        let base = if crn_by_q { stream.child(q as u64) } else { stream.clone() };
        let rows = (0..cfg.trials)
            .into_par_iter()
            .map(|i| run_trial(cfg, models, methods, snr, q, i, base.child(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        out.extend(rows.into_iter().flatten());
    }
    Ok(out)
}

/// Single source, every configured method, every SNR point.
pub fn run_rmse_vs_snr(cfg: &ExperimentConfig, models: &ModelSet) -> Result<Vec<TrialResult>> {
    check_models(&cfg.methods, models, &[1])?;
    let points: Vec<(f64, usize)> = cfg.snr_db.iter().map(|&s| (s, 1)).collect();
    sweep(cfg, models, &cfg.methods, &points, SeedStream::new(cfg.seed).named("snr"), false)
}

/// Every Q in the sweep at `q_snr_db`; single-source-only methods are skipped.
pub fn run_rmse_vs_q(cfg: &ExperimentConfig, models: &ModelSet) -> Result<Vec<TrialResult>> {
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| matches!(m, Method::Tdnn | Method::FlatDnn | Method::RootMusic | Method::Crlb)).collect();
    if methods.is_empty() {
        return Err(BenchError::Config("the Q sweep needs tdnn, flat_dnn, root_music or crlb".into()));
    }
    check_models(&methods, models, &cfg.q_sweep)?;
    let mut qcfg = cfg.clone();
    qcfg.theta_mode = ThetaMode::Random;
    let points: Vec<(f64, usize)> = cfg.q_sweep.iter().map(|&q| (cfg.q_snr_db, q)).collect();
    sweep(&qcfg, models, &methods, &points, SeedStream::new(cfg.seed).named("q"), true)
}

fn accuracy_rows(model: &tdnn_core::Mlnn64, train: &Dataset<f64>, val: &Dataset<f64>) -> Result<(f64, f64)> {
    Ok((model.accuracy(train)?, model.accuracy(val)?))
}

/// Validation angles: `per_class` uniform random angles per leaf cell.
fn validation_grid(cfg: &ExperimentConfig, spec: &TreeSpec64, per_class: usize, stream: SeedStream) -> Result<TrainingGrid<f64>> {
    let array = cfg.model.array()?;
    let mut rng = stream.named("angles").rng();
    let n = spec.total_classes() as usize;
    let step = spec.resolution();
    let tuples: Vec<Vec<f64>> = (0..n * per_class).map(|i| vec![array.theta_min + ((i / per_class) as f64 + rng.random::<f64>()) * step]).collect();
    Ok(TrainingGrid::from_tuples(&array, &tuples, &cfg.model.features, stream.named("features"))?)
}

fn class_dataset(spec: &TreeSpec64, grid: &TrainingGrid<f64>) -> Result<Dataset<f64>> {
    let classes = grid.doas().iter().map(|d| spec.leaf_index(d[0])).collect::<tdnn_core::Result<Vec<_>>>()?;
    Ok(Dataset::from_classes(grid.features().clone(), &classes, spec.total_classes() as usize)?)
}

/// Flat classifiers over each swept class count, all on the same number of
/// training angles, plus per-node accuracies of the two trees.
pub fn run_accuracy_vs_classes(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<Vec<ClassResult>> {
    let main = cfg.model.tree_spec()?;
    let budget = cfg.model.per_cell * main.total_classes() as usize;
    let (lo, hi) = main.domain();
    let mut out = Vec::new();
    for repeat in 0..cfg.class_repeats {
        let stream = SeedStream::new(cfg.seed).named("classes").child(repeat as u64);
        for &c in &cfg.class_sweep {
            let spec = TreeSpec64::new(vec![c], lo, hi, cfg.model.hidden.clone())?;
            let per_cell = (budget / c).max(1);
            let array = cfg.model.array()?;
            let grid = TrainingGrid::uniform(&array, &spec, per_cell, &cfg.model.features, stream.path(&[c as u64, 0]))?;
            let val = validation_grid(cfg, &spec, cfg.validation_per_class, stream.path(&[c as u64, 1]))?;
            let mut tcfg = cfg.model.tree_train();
            tcfg.train.seed = stream.path(&[c as u64, 2]).seed();
            let flat = train_flat_dnn(&spec, &grid, &tcfg)?;
            let (tr, va) = accuracy_rows(flat.model.model(), &class_dataset(&spec, &grid)?, &class_dataset(&spec, &val)?)?;
            out.push(ClassResult { series: "flat".into(), classes: c, repeat, node: "-".into(), train_accuracy: tr, val_accuracy: va, seed: tcfg.train.seed });
            log(&format!("repeat {repeat}: flat {c} classes train {tr:.3} val {va:.3}"));
        }
        for spec in [cfg.model.alt_tree_spec()?, main.clone()] {
            let array = cfg.model.array()?;
            let depth = spec.depth();
            let grid = TrainingGrid::uniform(&array, &spec, (budget / spec.total_classes() as usize).max(1), &cfg.model.features, stream.path(&[1000 + depth as u64, 0]))?;
            let val = validation_grid(cfg, &spec, cfg.validation_per_class, stream.path(&[1000 + depth as u64, 1]))?;
            let mut tcfg = cfg.model.tree_train();
            tcfg.train.seed = stream.path(&[1000 + depth as u64, 2]).seed();
            let trained = train_tree(&spec, &grid, 0, &tcfg)?;
            for rep in &trained.reports {
                let node = trained.model.node(rep.level, &rep.prefix)?;
                let vdata = build_node_training_set(&spec, rep.level, &rep.prefix, &val, 0)?;
                let va = node.accuracy(&vdata)?;
                let name = if rep.prefix.is_empty() { "root".to_string() } else { rep.prefix.iter().map(usize::to_string).collect::<Vec<_>>().join(".") };
                out.push(ClassResult {
                    series: format!("tree{depth}_l{}", rep.level),
                    classes: spec.fanouts()[rep.level],
                    repeat,
                    node: name,
                    train_accuracy: rep.train_accuracy,
                    val_accuracy: va,
                    seed: tcfg.train.seed,
                });
            }
            log(&format!("repeat {repeat}: {depth}-level tree trained"));
        }
    }
    Ok(out)
}

/// Single-source estimates for one covariance built from `truth` at `snr_db`.
pub fn evaluate_once(cfg: &ExperimentConfig, models: &ModelSet, truth: &[f64], snr_db: f64, seed: u64) -> Result<Vec<(Method, Result<Vec<f64>>)>> {
    let array = cfg.model.array()?;
    let src = SourceSet64::unit_power(truth.to_vec(), snr_db)?;
    let stream = SeedStream::new(seed);
    let covariance = if cfg.snapshots == 0 { analytic_covariance(&array, &src)? } else { sample_covariance(&synth_snapshots(&array, &src, cfg.snapshots, stream)?) };
    let features = extract_features(&covariance)?.into_values().to_vec();
    let mut sorted = truth.to_vec();
    sorted.sort_by(f64::total_cmp);
    let input = TrialInput { cfg, truth: sorted, snr_db, features, covariance };
    Ok(cfg.methods.iter().map(|&m| (m, estimate(m, models, &input))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use rand::SeedableRng;

    #[test]
    fn drawn_tuples_are_sorted_and_separated() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for q in 1..=4 {
            for _ in 0..200 {
                let t = draw_tuple(&mut rng, -60.0, 60.0, q, 10.0);
                assert_eq!(t.len(), q);
                assert!(t.iter().all(|x| (-60.0..60.0).contains(x)));
                assert!(t.windows(2).all(|w| w[1] - w[0] >= 10.0));
            }
        }
    }

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_profile(Profile::Desk);
        cfg.model.elements = 6;
        cfg.trials = 4;
        cfg.snr_db = vec![0.0, 20.0];
        cfg.methods = vec![Method::RootMusic, Method::OracleTdnn, Method::Crlb];
        cfg
    }

    #[test]
    fn model_free_methods_run_without_training() {
        let cfg = tiny();
        let rows = run_rmse_vs_snr(&cfg, &ModelSet::default()).unwrap();
        assert_eq!(rows.len(), 2 * 4 * 3);
        assert!(rows.iter().all(|r| !r.failed()));
        // common random numbers: the same trial sees the same DOA at every SNR
        let a: Vec<_> = rows.iter().filter(|r| r.snr_db == 0.0).map(|r| r.theta_true.clone()).collect();
        let b: Vec<_> = rows.iter().filter(|r| r.snr_db == 20.0).map(|r| r.theta_true.clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_models_are_config_errors() {
        let mut cfg = tiny();
        cfg.methods = vec![Method::Tdnn];
        assert!(matches!(run_rmse_vs_snr(&cfg, &ModelSet::default()), Err(BenchError::Config(_))));
    }

    #[test]
    fn fixed_mode_uses_the_fixed_angle() {
        let mut cfg = tiny();
        cfg.theta_mode = ThetaMode::Fixed;
        let rows = run_rmse_vs_snr(&cfg, &ModelSet::default()).unwrap();
        assert!(rows.iter().all(|r| r.theta_true == vec![27.0]));
    }

    #[test]
    fn single_source_only_methods_are_skipped_in_the_q_sweep() {
        let mut cfg = tiny();
        cfg.q_sweep = vec![2];
        cfg.eval_min_separation_deg = 15.0;
        let rows = run_rmse_vs_q(&cfg, &ModelSet::default()).unwrap();
        assert!(rows.iter().all(|r| r.method != "oracle_tdnn" && r.q == 2));
        assert_eq!(rows.len(), 4 * 2);
    }
}
