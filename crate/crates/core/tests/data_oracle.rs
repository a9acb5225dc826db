use sft_core::data::{batches, gen_majority_task, Dataset, TOKEN_A, TOKEN_B};
use sft_core::nn::ModelConfig;

fn counts(seq: &[u32], vocab: usize) -> Vec<f64> {
    let mut c = vec![0.0; vocab + 1];
    for &t in seq {
        c[t as usize] += 1.0;
    }
    c[vocab] = 1.0;
    c
}

/// Bag-of-tokens logistic regression, batch gradient descent.
fn fit_logistic(data: &Dataset, vocab: usize, epochs: usize, lr: f64) -> Vec<f64> {
    let xs: Vec<Vec<f64>> = data.sequences.iter().map(|s| counts(s, vocab)).collect();
    let mut w = vec![0.0; vocab + 1];
    for _ in 0..epochs {
        let mut grad = vec![0.0; vocab + 1];
        for (x, &y) in xs.iter().zip(&data.labels) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += (p - f64::from(y)) * xi;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= lr * g / xs.len() as f64;
        }
    }
    w
}

fn accuracy(w: &[f64], data: &Dataset, vocab: usize) -> f64 {
    let correct = data
        .sequences
        .iter()
        .zip(&data.labels)
        .filter(|(s, &y)| {
            let z: f64 = counts(s, vocab).iter().zip(w).map(|(a, b)| a * b).sum();
            u32::from(z > 0.0) == y
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn task_is_learnable_from_token_counts() {
    let cfg = ModelConfig::default();
    let train = gen_majority_task(4000, &cfg, 1).unwrap();
    let test = gen_majority_task(1000, &cfg, 2).unwrap();
    let w = fit_logistic(&train, cfg.vocab_size, 300, 0.5);
    let acc = accuracy(&w, &test, cfg.vocab_size);
    assert!(acc >= 0.95, "held-out accuracy {acc}");
    // The fitted weights single out the two counted tokens.
    assert!(w[TOKEN_A as usize] > 0.0 && w[TOKEN_B as usize] < 0.0);
}

#[test]
fn labels_balanced_at_ten_thousand() {
    let cfg = ModelConfig::default();
    for seed in 0..3 {
        let d = gen_majority_task(10_000, &cfg, seed).unwrap();
        let frac = d.labels.iter().filter(|&&l| l == 1).count() as f64 / d.len() as f64;
        assert!((0.45..=0.55).contains(&frac), "seed {seed}: {frac}");
    }
}

#[test]
fn labels_match_a_recount() {
    let cfg = ModelConfig::default();
    let d = gen_majority_task(2000, &cfg, 9).unwrap();
    for (s, &y) in d.sequences.iter().zip(&d.labels) {
        let a = s.iter().filter(|&&t| t == TOKEN_A).count();
        let b = s.iter().filter(|&&t| t == TOKEN_B).count();
        assert_ne!(a, b);
        assert_eq!(y, u32::from(a > b));
        assert!(s.iter().all(|&t| (t as usize) < cfg.vocab_size));
    }
}

#[test]
fn every_epoch_covers_the_dataset() {
    let cfg = ModelConfig::default();
    let d = gen_majority_task(100, &cfg, 3).unwrap();
    let mut stream = batches(&d, 32, 4).unwrap();
    for _ in 0..3 {
        let mut seen = vec![false; d.len()];
        // 100 rows in batches of 32: three full batches and one topped-up batch.
        for _ in 0..4 {
            for i in stream.next_indices().into_iter().take(100) {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
