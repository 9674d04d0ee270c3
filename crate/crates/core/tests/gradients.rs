use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdnn_core::mlnn::{InitScheme, LayerSpec, LossKind, Mlnn};
use tdnn_core::{bce_loss, SeedStream};

fn loss(m: &Mlnn<f64>, x: &[f64], z: &[f64], kind: LossKind) -> f64 {
    let p = m.forward(x).unwrap();
    match kind {
        LossKind::Bce => bce_loss(p.as_slice().unwrap(), z).unwrap(),
        LossKind::CategoricalCe => -z.iter().zip(p.iter()).map(|(t, q)| t * q.max(1e-12).ln()).sum::<f64>(),
    }
}

/// Relative error `|g - fd| / max(|g|, |fd|)` over the whole parameter vector.
fn relative_error(m: &Mlnn<f64>, x: &[f64], z: &[f64], kind: LossKind) -> f64 {
    let g = m.backprop_gradients(x, z, kind).unwrap().flat();
    let base = m.parameters_flat();
    let h = 1e-6;
    let mut fd = Vec::with_capacity(base.len());
    let mut probe = m.clone();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_parameters_flat(&p).unwrap();
        let up = loss(&probe, x, z, kind);
        p[i] = base[i] - h;
        probe.set_parameters_flat(&p).unwrap();
        let down = loss(&probe, x, z, kind);
        fd.push((up - down) / (2.0 * h));
    }
    let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm_g: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_fd: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm_g.max(norm_fd).max(1e-300)
}

#[test]
fn backprop_matches_central_differences_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..120u64 {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(2..=32)];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..=32));
        }
        sizes.push(rng.random_range(2..=12));
        // Random biases: zero biases behind a dead layer sit on the ReLU kink.
        let mut m = Mlnn::<f64>::new(LayerSpec::new(sizes.clone()).unwrap(), InitScheme::HeGlorot, SeedStream::new(case));
        let params: Vec<f64> = (0..m.spec().parameter_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
        m.set_parameters_flat(&params).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = *sizes.last().unwrap();
        let mut z = vec![0.0; k];
        z[rng.random_range(0..k)] = 1.0;
        let kind = if case % 4 == 3 { LossKind::CategoricalCe } else { LossKind::Bce };
        let e = relative_error(&m, &x, &z, kind);
        assert!(e < 1e-4, "case {case} sizes {sizes:?} {kind:?}: relative error {e}");
        worst = worst.max(e);
    }
    eprintln!("worst relative gradient error {worst:e}");
}

#[test]
fn multi_hot_targets_differentiate_correctly() {
    let m = Mlnn::<f64>::new(LayerSpec::new(vec![5, 7, 6]).unwrap(), InitScheme::HeGlorot, SeedStream::new(3));
    let x = [0.3, -0.2, 0.9, 0.1, -0.7];
    let z = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
    assert!(relative_error(&m, &x, &z, LossKind::Bce) < 1e-4);
}
