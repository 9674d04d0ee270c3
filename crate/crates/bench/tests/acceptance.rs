//! Acceptance suite: one PASS/FAIL line per criterion. Oracles here are
//! written independently of the code under test.

use std::time::Instant;

use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdnn_bench::config::{ExperimentConfig, Method, Profile, ThetaMode};
use tdnn_bench::experiments::{run_rmse_vs_q, run_rmse_vs_snr};
use tdnn_bench::models::{train_models, ModelSet, TrainPlan};
use tdnn_bench::results::{aggregate_trials, mean_stderr, write_trials, PlotRow, TrialResult, XAxis};
use tdnn_core::array::{analytic_covariance, noiseless_features, ArrayConfig, SourceSet};
use tdnn_core::baselines::music::{music_spectrum, root_music};
use tdnn_core::mlnn::{InitScheme, LayerSpec, LossKind, Mlnn};
use tdnn_core::tree::{level_resolutions_in, oracle_tree, Decoder, TreeSpec};
use tdnn_core::{bce_loss, crlb, CrlbKind, SeedStream};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn c1_structure() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (fanouts, groups, sum) in [(vec![12usize, 10], vec![1u64, 12], 22usize), (vec![6, 5, 4], vec![1, 6, 30], 15)] {
        let spec = TreeSpec::<f64>::new(fanouts.clone(), -60.0, 60.0, vec![8]).unwrap();
        let delta = *level_resolutions_in(Rational64::from_integer(120), &fanouts).last().unwrap();
        ok &= spec.group_counts() == groups;
        ok &= delta == Rational64::from_integer(1);
        ok &= spec.model_classes() == sum as u64 && fanouts.iter().sum::<usize>() == sum;
        ok &= spec.total_classes() == 120;
        notes.push(format!("{fanouts:?}: G={:?} Δθ={delta} ΣL={} N={}", spec.group_counts(), spec.model_classes(), spec.total_classes()));
    }
    outcome(ok, notes.join("; "))
}

fn c2_codec() -> Outcome {
    let spec = TreeSpec::<f64>::new(vec![6, 5, 4], -60.0, 60.0, vec![8]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let theta = rng.random_range(-60.0..60.0);
        let back = spec.labels_to_doa(&spec.doa_to_labels(theta).unwrap(), Decoder::Midpoint).unwrap();
        worst = worst.max((back - theta).abs());
    }
    let mut scan_ok = true;
    for cell in 0..120usize {
        for frac in [0.0, 0.5, 0.999_999] {
            let theta = -60.0 + cell as f64 + frac;
            let scan = (0..120).find(|&c| -60.0 + c as f64 <= theta && theta < -59.0 + c as f64);
            scan_ok &= scan == Some(cell) && spec.leaf_index(theta).unwrap() == cell;
        }
    }
    outcome(worst <= 0.5 + 1e-12 && scan_ok, format!("max round-trip error {worst:.6}° (≤ 0.5°), cell scan agreement {scan_ok}"))
}

fn c3_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let cases = 100;
    for case in 0..cases {
        let mut sizes = vec![rng.random_range(2..=32)];
        for _ in 0..rng.random_range(1..=3) {
            sizes.push(rng.random_range(2..=32));
        }
        sizes.push(rng.random_range(2..=16));
        // Random biases too: zero biases behind a dead layer put
        // pre-activations exactly on the ReLU kink, where no derivative exists.
        let mut m = Mlnn::<f64>::new(LayerSpec::new(sizes.clone()).unwrap(), InitScheme::HeGlorot, SeedStream::new(case));
        let params: Vec<f64> = (0..m.spec().parameter_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
        m.set_parameters_flat(&params).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = *sizes.last().unwrap();
        let mut z = vec![0.0; k];
        z[rng.random_range(0..k)] = 1.0;
        let g = m.backprop_gradients(&x, &z, LossKind::Bce).unwrap().flat();
        let base = m.parameters_flat();
        let mut probe = m.clone();
        let h = 1e-6;
        let mut diff = 0.0;
        let mut ng = 0.0;
        let mut nf = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            probe.set_parameters_flat(&p).unwrap();
            let up = bce_loss(probe.forward(&x).unwrap().as_slice().unwrap(), &z).unwrap();
            p[i] = base[i] - h;
            probe.set_parameters_flat(&p).unwrap();
            let down = bce_loss(probe.forward(&x).unwrap().as_slice().unwrap(), &z).unwrap();
            let fd = (up - down) / (2.0 * h);
            diff += (g[i] - fd) * (g[i] - fd);
            ng += g[i] * g[i];
            nf += fd * fd;
        }
        worst = worst.max(diff.sqrt() / ng.max(nf).sqrt().max(1e-300));
    }
    outcome(worst < 1e-4, format!("{cases} networks, worst relative error {worst:.2e} (< 1e-4)"))
}

fn c4_oracle_floor() -> Outcome {
    let cfg = ArrayConfig::<f64>::half_wavelength(16).unwrap();
    let spec = TreeSpec::for_array(&cfg, vec![6, 5, 4], vec![8]).unwrap();
    let tree = oracle_tree(&cfg, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let mut sq = 0.0;
    for _ in 0..n {
        let theta = rng.random_range(-60.0..60.0);
        let est = tree.route_predict(noiseless_features(&cfg, &[theta]).unwrap().as_slice()).unwrap().1;
        sq += (est - theta).powi(2);
    }
    let rmse = (sq / n as f64).sqrt();
    let floor = 1.0 / 12f64.sqrt();
    let rel = (rmse - floor).abs() / floor;
    outcome(rel < 0.05, format!("RMSE {rmse:.4}° vs Δθ/√12 = {floor:.4}° ({:.2}% off, limit 5%)", rel * 100.0))
}

fn c5_root_music() -> Outcome {
    let cfg = ArrayConfig::<f64>::half_wavelength(16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut worst_grid) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let q = 1 + case % 2;
        let doas: Vec<f64> = loop {
            let mut t: Vec<f64> = (0..q).map(|_| rng.random_range(-58.0..58.0)).collect();
            t.sort_by(f64::total_cmp);
            if t.windows(2).all(|w| w[1] - w[0] >= 10.0) {
                break t;
            }
        };
        let r = analytic_covariance(&cfg, &SourceSet::unit_power(doas.clone(), 10.0).unwrap()).unwrap();
        let est = root_music(&r, q, &cfg).unwrap().doas_deg;
        let peaks = music_spectrum(&r, q, &cfg, 0.001).unwrap().peak_doas(q);
        for ((e, t), p) in est.iter().zip(&doas).zip(&peaks) {
            worst = worst.max((e - t).abs());
            worst_grid = worst_grid.max((e - p).abs());
        }
    }
    outcome(worst < 1e-6 && worst_grid < 0.01, format!("max error {worst:.2e}° (< 1e-6°), max grid-MUSIC gap {worst_grid:.4}° (< 0.01°)"))
}

fn c6_crlb() -> Outcome {
    let m = 16;
    let cfg = ArrayConfig::<f64>::half_wavelength(m).unwrap();
    let bound = |theta: f64, snr: f64, t: usize| crlb(&cfg, &SourceSet::unit_power(vec![theta], snr).unwrap(), t, CrlbKind::Stochastic).unwrap()[[0, 0]];
    // Scalar form: Re(dᴴP⊥d) and aᴴR⁻¹a in closed form for a ULA.
    let closed = |theta: f64, snr: f64, t: usize| {
        let noise = 10f64.powf(-snr / 10.0);
        let k = std::f64::consts::PI * theta.to_radians().cos();
        let s1: f64 = (0..m).map(|i| i as f64).sum();
        let s2: f64 = (0..m).map(|i| (i * i) as f64).sum();
        let dpd = k * k * (s2 - s1 * s1 / m as f64);
        let ara = m as f64 / (noise + m as f64);
        noise / (2.0 * t as f64) / (dpd * ara) * (180.0 / std::f64::consts::PI).powi(2)
    };
    let mut worst = 0.0f64;
    for &(theta, snr, t) in &[(27.0, 10.0, 50), (-40.0, -10.0, 10), (0.0, -20.0, 100), (55.0, 0.0, 50)] {
        worst = worst.max(((bound(theta, snr, t) - closed(theta, snr, t)) / closed(theta, snr, t)).abs());
    }
    let snr_dec = (-20..10).all(|s| bound(27.0, f64::from(s + 1), 50) < bound(27.0, f64::from(s), 50));
    let t_dec = bound(27.0, 0.0, 50) < bound(27.0, 0.0, 10) && bound(27.0, 0.0, 100) < bound(27.0, 0.0, 50);
    outcome(worst < 1e-10 && snr_dec && t_dec, format!("closed-form gap {worst:.1e} (< 1e-10), decreasing in SNR {snr_dec}, in T {t_dec}"))
}

fn point<'a>(agg: &'a [PlotRow], series: &str, x: f64) -> &'a PlotRow {
    agg.iter().find(|p| p.series == series && p.x == x).unwrap_or_else(|| panic!("no {series} at {x}"))
}

/// 95% interval of the paired mean difference of per-trial squared errors.
fn paired_gap(rows: &[TrialResult], a: &str, b: &str, x_of: impl Fn(&TrialResult) -> f64, x: f64) -> (f64, f64) {
    let pick = |m: &str| -> Vec<(usize, f64)> { rows.iter().filter(|r| r.method == m && x_of(r) == x && !r.failed()).map(|r| (r.trial, r.mse())).collect() };
    let (ra, rb) = (pick(a), pick(b));
    let diffs: Vec<f64> = ra.iter().filter_map(|(t, ea)| rb.iter().find(|(u, _)| u == t).map(|(_, eb)| ea - eb)).collect();
    let (mean, se) = mean_stderr(&diffs);
    (mean, 1.96 * se)
}

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_profile(Profile::Desk);
    cfg.theta_mode = ThetaMode::Random;
    cfg
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        println!("criterion {n:>2} [{}] {name}: {} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail, t.elapsed().as_secs_f64());
        results.push((n, name, o));
    };
    record(1, "structure algebra", &c1_structure);
    record(2, "label codec", &c2_codec);
    record(3, "gradient correctness", &c3_gradients);
    record(4, "oracle quantization floor", &c4_oracle_floor);
    record(5, "root-MUSIC exactness", &c5_root_music);
    record(6, "CRLB sanity", &c6_crlb);

    // Criteria 7-10 share one desk-profile model set.
    let mut snr_cfg = desk_config();
    snr_cfg.methods = vec![Method::Tdnn, Method::FlatDnn, Method::RootMusic, Method::OracleTdnn, Method::Crlb];
    snr_cfg.snr_db = vec![-10.0, 10.0];
    snr_cfg.trials = 500;
    let mut q_cfg = desk_config();
    q_cfg.methods = vec![Method::Tdnn, Method::FlatDnn, Method::RootMusic];
    q_cfg.q_sweep = vec![2, 3];
    q_cfg.trials = 300;
    let t = Instant::now();
    let (single, _) = train_models(&snr_cfg, &TrainPlan::snr(&snr_cfg), |_| {}).expect("single-source training");
    let train_single = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let (multi, _) = train_models(&q_cfg, &TrainPlan::q(&q_cfg), |_| {}).expect("multi-source training");
    let train_multi = t.elapsed().as_secs_f64();
    let mut models = ModelSet::default();
    models.absorb(single);
    models.absorb(multi);
    println!("desk training: single-source {train_single:.0}s, Q-TDNN/flat for Q=2,3 {train_multi:.0}s");

    let snr_rows = run_rmse_vs_snr(&snr_cfg, &models).expect("snr sweep");
    let snr_agg = aggregate_trials(&snr_rows, XAxis::Snr);
    let q_rows = run_rmse_vs_q(&q_cfg, &models).expect("q sweep");
    let q_agg = aggregate_trials(&q_rows, XAxis::Q);

    record(7, "desk end-to-end at +10 dB", &|| {
        let p = point(&snr_agg, "tdnn", 10.0);
        let floor = 1.0 / 12f64.sqrt();
        let limit = 1.2 * floor + p.rmse_ci95;
        outcome(p.n == 500 && p.rmse <= limit, format!("TDNN RMSE {:.4}° ±{:.4} over {} trials, limit 1.2·{floor:.4} + MC error = {limit:.4}° (training {train_single:.0}s)", p.rmse, p.rmse_ci95, p.n))
    });
    record(8, "RMSE vs SNR trend at -10 dB", &|| {
        let a = point(&snr_agg, "tdnn", -10.0);
        let b = point(&snr_agg, "flat_dnn", -10.0);
        let (gap, hw) = paired_gap(&snr_rows, "tdnn", "flat_dnn", |r| r.snr_db, -10.0);
        outcome(
            a.n == 500 && b.n == 500 && a.rmse <= b.rmse,
            format!("TDNN {:.3}° [95% CI ±{:.3}] vs flat DNN {:.3}° [±{:.3}]; paired MSE gap {gap:.2} ±{hw:.2} deg²", a.rmse, a.rmse_ci95, b.rmse, b.rmse_ci95),
        )
    });
    record(9, "RMSE vs Q trend at -8 dB", &|| {
        let mut ok = true;
        let mut notes = Vec::new();
        for q in [2.0, 3.0] {
            let a = point(&q_agg, "tdnn", q);
            let b = point(&q_agg, "flat_dnn", q);
            let m = point(&q_agg, "root_music", q);
            let (gap, hw) = paired_gap(&q_rows, "tdnn", "flat_dnn", |r| r.q as f64, q);
            ok &= a.n == 300 && b.n == 300 && a.rmse <= b.rmse;
            notes.push(format!(
                "Q={q}: Q-TDNN {:.3}° [±{:.3}] vs flat top-Q {:.3}° [±{:.3}] (paired MSE gap {gap:.2} ±{hw:.2}; root-MUSIC {:.3}°)",
                a.rmse, a.rmse_ci95, b.rmse, b.rmse_ci95, m.rmse
            ));
        }
        outcome(ok, notes.join("; "))
    });
    record(10, "determinism", &|| {
        let bytes = |rows: &[TrialResult], name: &str, cfg: &ExperimentConfig| {
            let mut buf = Vec::new();
            write_trials(&mut buf, name, &cfg.to_toml(), rows).unwrap();
            buf
        };
        // Fresh training and a fresh sweep must reproduce the CSV exactly.
        let (retrained, _) = train_models(&snr_cfg, &TrainPlan::snr(&snr_cfg), |_| {}).expect("retraining");
        let rerun = run_rmse_vs_snr(&snr_cfg, &retrained).unwrap();
        let snr_same = bytes(&rerun, "snr", &snr_cfg) == bytes(&snr_rows, "snr", &snr_cfg);
        let q_same = bytes(&run_rmse_vs_q(&q_cfg, &models).unwrap(), "q", &q_cfg) == bytes(&q_rows, "q", &q_cfg);
        outcome(snr_same && q_same, format!("SNR sweep with retrained models byte-identical {snr_same}; Q sweep rerun byte-identical {q_same}"))
    });

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria pass ({:.0}s total)", results.len() - failed.len(), results.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
