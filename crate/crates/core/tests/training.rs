use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdnn_core::mlnn::{train, Dataset, InitScheme, LayerSpec, LossKind, Mlnn, Optimizer, TrainConfig};
use tdnn_core::SeedStream;

/// Two Gaussian blobs labelled by a fixed hyperplane, with a margin.
fn separable(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = [1.0, -2.0, 0.5, 1.5];
    let mut x = Array2::zeros((n, 4));
    let mut y = Vec::with_capacity(n);
    while y.len() < n {
        let p: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum();
        if s.abs() < 0.3 {
            continue;
        }
        let i = y.len();
        for (j, v) in p.iter().enumerate() {
            x[[i, j]] = *v;
        }
        y.push(usize::from(s > 0.0));
    }
    (x, y)
}

/// Rosenblatt perceptron; returns true once an epoch makes no mistakes.
fn perceptron_separates(x: &Array2<f64>, y: &[usize]) -> bool {
    let mut w = [0.0; 5];
    for _ in 0..1000 {
        let mut mistakes = 0;
        for (row, &label) in x.rows().into_iter().zip(y) {
            let t = if label == 1 { 1.0 } else { -1.0 };
            let s = w[4] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            if t * s <= 0.0 {
                mistakes += 1;
                for (wi, xi) in w.iter_mut().zip(row.iter()) {
                    *wi += t * xi;
                }
                w[4] += t;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

#[test]
fn separable_toy_set_is_learned_within_200_epochs() {
    let (x, y) = separable(200, 1);
    assert!(perceptron_separates(&x, &y));
    let data = Dataset::from_classes(x, &y, 2).unwrap();
    let init = Mlnn::new(LayerSpec::new(vec![4, 16, 2]).unwrap(), InitScheme::HeGlorot, SeedStream::new(2));
    let cfg = TrainConfig { epochs: 200, batch_size: 16, learning_rate: 1e-2, seed: 3, ..TrainConfig::default() };
    let out = train(init, &data, &cfg).unwrap();
    assert_eq!(out.model.accuracy(&data).unwrap(), 1.0);
}

#[test]
fn training_is_deterministic() {
    let (x, y) = separable(64, 4);
    let data = Dataset::from_classes(x, &y, 2).unwrap();
    let run = || {
        let init = Mlnn::new(LayerSpec::new(vec![4, 8, 6, 2]).unwrap(), InitScheme::HeGlorot, SeedStream::new(9));
        train(init, &data, &TrainConfig { epochs: 20, batch_size: 7, seed: 10, ..TrainConfig::default() }).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.parameters_flat(), b.model.parameters_flat());
    assert_eq!(a.loss_history, b.loss_history);
}

#[test]
fn full_batch_small_step_sgd_never_increases_loss() {
    let (x, y) = separable(50, 6);
    let data = Dataset::from_classes(x, &y, 2).unwrap();
    let init = Mlnn::new(LayerSpec::new(vec![4, 10, 2]).unwrap(), InitScheme::HeGlorot, SeedStream::new(1));
    let cfg = TrainConfig { epochs: 1, batch_size: 50, learning_rate: 1e-2, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
    let mut model = init;
    let mut last = model.dataset_loss(&data, LossKind::Bce).unwrap();
    for _ in 0..100 {
        model = train(model, &data, &cfg).unwrap().model;
        let now = model.dataset_loss(&data, LossKind::Bce).unwrap();
        assert!(now <= last + 1e-15, "{now} > {last}");
        last = now;
    }
}
