mod common;

use common::{pretrain_small, theme_run, ThemeRun};
use melt::corpus::mask_chunks;
use melt::model::MeltModel;
use melt::pretrain::{evaluate_dev, train, PretrainConfig};
use melt::synth::ThemeConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run() -> ThemeRun {
    theme_run(
        &ThemeConfig {
            users: 16,
            messages_per_user: 80,
            ..ThemeConfig::default()
        },
        4,
        40,
    )
}

fn config(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        base_lr: 1e-3,
        warmup_steps: 20,
        batch_size: 1,
        epochs,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn loss_falls_within_two_hundred_steps() {
    let out = pretrain_small(&run(), &config(10), 5);
    let at = |s: u64| out.steps.iter().find(|r| r.step == s).map(|r| r.loss);
    let (first, later) = (at(1).unwrap(), at(200).unwrap());
    assert!(later < first, "step 1 {first} vs step 200 {later}");
    assert_eq!(out.steps[0].step, 1);
    assert!(out.steps.windows(2).all(|w| w[1].step > w[0].step));
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let r = run();
    let a = pretrain_small(&r, &config(2), 5);
    let b = pretrain_small(&r, &config(2), 5);
    for (x, y) in a.model.params().params().iter().zip(b.model.params().params()) {
        assert!(x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(a.best_dev_mse.to_bits(), b.best_dev_mse.to_bits());
}

#[test]
fn best_model_reproduces_its_dev_mse() {
    let r = run();
    let cfg = config(3);
    let out = pretrain_small(&r, &cfg, 5);
    let best = out.epochs.iter().map(|e| e.dev_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_dev_mse, best);
    let plans = mask_chunks(&r.dev, cfg.batch_size, cfg.dev_seed(), &cfg.masking).unwrap();
    let again = evaluate_dev(&out.model, &r.vectors, &r.dev, &plans).unwrap();
    assert!((again - out.best_dev_mse).abs() < 1e-6);
}

#[test]
fn empty_dev_set_is_an_error() {
    let r = run();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = MeltModel::new(common::small_config(40), &mut rng).unwrap();
    assert!(train(model, &r.vectors, &r.train, &[], &config(1), |_| {}).is_err());
}
