use prunelab::diagnostics::{check_class_balance, check_init_correlations, DiagConfig, Status};
use prunelab::model::{init_weights, Activation};
use prunelab::pruner::{sample_mask, Shape};
use prunelab::synthdata::{generate_dataset, DataConfig};

#[test]
fn init_brackets_hold_on_most_seeds() {
    let cfg = DiagConfig::default();
    let seeds = 20u64;
    let mut passes = 0;
    for seed in 0..seeds {
        let data = generate_dataset(&DataConfig { classes: 4, dim: 2000, n_train: 40, mu: 1.0, sigma_n: 0.5, seed }).unwrap();
        let mask = sample_mask(Shape::new(4, 512, 2000), 1.0, seed).unwrap();
        let net = init_weights(mask, Activation::Poly(3), 0.01, seed).unwrap();
        let rep = check_init_correlations(&net, &data, &cfg);
        if rep.passed == Status::Pass {
            passes += 1;
        }
    }
    assert!(passes as f64 >= 0.95 * seeds as f64, "{passes}/{seeds} seeds inside both brackets");
}

#[test]
fn large_sample_class_counts_are_balanced() {
    let data = generate_dataset(&DataConfig { classes: 4, dim: 8, n_train: 4000, mu: 1.0, sigma_n: 1.0, seed: 3 }).unwrap();
    let rep = check_class_balance(&data);
    assert_eq!(rep.passed, Status::Pass);
    assert!(data.class_counts().iter().all(|&c| (500..=1500).contains(&c)));
}
