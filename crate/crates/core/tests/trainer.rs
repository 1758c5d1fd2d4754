mod common;

use common::{central_diff, rel_err, FD_TOL};
use dpmld::autodiff::Tensor;
use dpmld::data::{generate, split, GeneratorConfig};
use dpmld::model::{ModalitySample, ModelConfig, Prepared};
use dpmld::privacy::{
    budget_gradient, eps_prime, DropoutRates, NormalizationSpec, PrivacyBudget, RateBounds,
    DEFAULT_W_MIN,
};
use dpmld::random::{stream, Stream};
use dpmld::trainer::{
    allocation_report, train, GradPaths, ReleaseDraws, Scheme, TrainConfig, TrainError, Trainer,
};

fn small_model() -> ModelConfig {
    ModelConfig {
        vocab: 8,
        window: 4,
        d_model: 8,
        d_k: 8,
        d_ff: 6,
        d_feat: 4,
        eeg_layers: 1,
        cross_layers: 2,
        om_width: 8,
        patch: 4,
        om_hidden: 5,
        classifier_hidden: 6,
        ..ModelConfig::default()
    }
}

fn small_data(n: usize, seed: u64) -> Vec<ModalitySample<f64>> {
    generate(&GeneratorConfig {
        n_samples: n,
        eeg_channels: 3,
        om_dims: 4,
        timesteps: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn budget(e: f64) -> PrivacyBudget<f64> {
    PrivacyBudget::new(e).unwrap()
}

fn config(scheme: Scheme<f64>, seed: u64) -> TrainConfig<f64> {
    let mut cfg = TrainConfig::new(scheme);
    cfg.model = small_model();
    cfg.seed = seed;
    cfg.batch_size = 8;
    cfg
}

fn trainer(cfg: TrainConfig<f64>, n: usize) -> Trainer<f64> {
    let data = small_data(n, cfg.seed);
    let (tr, te) = split(&data, 0.7, cfg.seed).unwrap();
    Trainer::new(cfg, &tr, &te).unwrap()
}

/// Bounds wide enough that no training feature sits on the clamp.
fn set_loose_bounds(t: &mut Trainer<f64>) {
    let k = t.config().model.feature_len();
    let raw = t.raw_features(t.train_set()).unwrap();
    let fit = NormalizationSpec::fit(raw.chunks(k), 1e-6).unwrap();
    let lo = fit.lo().iter().map(|x| x - 0.5).collect();
    let hi = fit.hi().iter().map(|x| x + 0.5).collect();
    t.set_bounds(NormalizationSpec::new(lo, hi).unwrap());
}

fn first_batch(t: &Trainer<f64>, n: usize) -> Vec<Prepared<f64>> {
    t.train_set()[..n].to_vec()
}

fn param_snapshot(t: &Trainer<f64>) -> Vec<f64> {
    t.model().params().iter().flat_map(|p| p.data.clone()).collect()
}

#[test]
fn zero_weight_rate_leaves_parameters() {
    let mut cfg = config(Scheme::ElementWise { eps: budget(1.0) }, 1);
    cfg.lr_p = 0.0;
    let mut t = trainer(cfg, 40);
    set_loose_bounds(&mut t);
    let before = param_snapshot(&t);
    let batch = first_batch(&t, 8);
    let refs: Vec<&Prepared<f64>> = batch.iter().collect();
    let k = t.config().model.feature_len();
    for i in 0..3 {
        let draws = ReleaseDraws::sample(8, k, &mut stream(i, Stream::Train));
        t.step_model(&refs, &draws).unwrap();
    }
    assert_eq!(before, param_snapshot(&t));
}

#[test]
fn zero_rate_step_leaves_logits() {
    let mut cfg = config(Scheme::ElementWise { eps: budget(1.0) }, 2);
    cfg.lr_w = 0.0;
    let mut t = trainer(cfg, 40);
    set_loose_bounds(&mut t);
    let before = t.rates().logits().to_vec();
    let batch = first_batch(&t, 8);
    let refs: Vec<&Prepared<f64>> = batch.iter().collect();
    let k = t.config().model.feature_len();
    let draws = ReleaseDraws::sample(8, k, &mut stream(3, Stream::Train));
    t.step_rates(&refs, &draws).unwrap();
    assert_eq!(before, t.rates().logits());
}

#[test]
fn nearly_noiseless_release_fits_a_separable_batch() {
    let mut cfg = config(Scheme::ElementWise { eps: budget(20.0) }, 4);
    cfg.init_rate = DEFAULT_W_MIN;
    cfg.lr_w = 0.0;
    let data: Vec<ModalitySample<f64>> = generate(&GeneratorConfig {
        n_samples: 16,
        eeg_channels: 3,
        om_dims: 4,
        timesteps: 16,
        noise_sd: 0.0,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let mut t = Trainer::new(cfg, &data, &data).unwrap();
    set_loose_bounds(&mut t);
    let batch = t.train_set().to_vec();
    let refs: Vec<&Prepared<f64>> = batch.iter().collect();
    let k = t.config().model.feature_len();
    let mut rng = stream(4, Stream::Train);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let draws = ReleaseDraws::sample(refs.len(), k, &mut rng);
        loss = t.step_model(&refs, &draws).unwrap();
    }
    assert!(loss < 0.1, "final loss {loss}");
}

#[test]
fn weight_gradient_matches_finite_differences() {
    let mut t = trainer(config(Scheme::ElementWise { eps: budget(1.0) }, 5), 30);
    set_loose_bounds(&mut t);
    let batch = first_batch(&t, 6);
    let refs: Vec<&Prepared<f64>> = batch.iter().collect();
    let k = t.config().model.feature_len();
    let draws = ReleaseDraws::sample(6, k, &mut stream(5, Stream::Train));
    let (_, grads) = t.model_gradient(&refs, &draws).unwrap();
    let n_params = t.model().params().len();
    let mut checked = 0;
    for pi in 0..n_params {
        let Some(g) = grads[pi].clone() else { continue };
        let len = g.len();
        for j in [0, len / 2, len - 1] {
            let base = t.model().params().iter().nth(pi).unwrap().data[j];
            let numeric = central_diff(|h| {
                t.model_mut().params_mut().iter_mut().nth(pi).unwrap().data[j] = base + h;
                let v = t.model_gradient(&refs, &draws).unwrap().0;
                t.model_mut().params_mut().iter_mut().nth(pi).unwrap().data[j] = base;
                v
            });
            let err = rel_err(g[j], numeric);
            assert!(err < FD_TOL, "param {pi}[{j}]: {} vs {numeric} ({err})", g[j]);
            checked += 1;
        }
    }
    assert!(checked >= 3 * 10);
}

fn rate_loss(t: &mut Trainer<f64>, refs: &[&Prepared<f64>], draws: &ReleaseDraws<f64>, logits: &[f64]) -> f64 {
    t.rates_mut().set_logits(logits).unwrap();
    t.rate_gradient(refs, draws, GradPaths::BOTH).unwrap().0
}

#[test]
fn rate_gradient_matches_finite_differences_through_both_paths() {
    let mut t = trainer(config(Scheme::ElementWise { eps: budget(0.7) }, 6), 30);
    set_loose_bounds(&mut t);
    let k = t.config().model.feature_len();
    let logits: Vec<f64> = (0..k).map(|i| -1.5 + 3.0 * i as f64 / k as f64).collect();
    t.rates_mut().set_logits(&logits).unwrap();
    let batch = first_batch(&t, 6);
    let refs: Vec<&Prepared<f64>> = batch.iter().collect();
    let draws = ReleaseDraws::sample(6, k, &mut stream(6, Stream::Train));

    let (_, both) = t.rate_gradient(&refs, &draws, GradPaths::BOTH).unwrap();
    let (_, mask) = t.rate_gradient(&refs, &draws, GradPaths { mask: true, noise: false }).unwrap();
    let (_, noise) = t.rate_gradient(&refs, &draws, GradPaths { mask: false, noise: true }).unwrap();
    for i in 0..k {
        let numeric = central_diff(|h| {
            let mut l = logits.clone();
            l[i] += h;
            rate_loss(&mut t, &refs, &draws, &l)
        });
        assert!(rel_err(both[i], numeric) < FD_TOL, "logit {i}: {} vs {numeric}", both[i]);
        assert!((mask[i] + noise[i] - both[i]).abs() <= 1e-12 * both[i].abs().max(1.0));
    }
    assert!(noise.iter().any(|g| g.abs() > 1e-8));
    assert!(mask.iter().any(|g| g.abs() > 1e-8));
    assert_ne!(mask, both, "dropping the noise path must change the update");
}

#[test]
fn noise_path_agrees_with_budget_gradient() {
    // chain rule by hand: ∂L/∂l_i = Σ_r ∂L/∂x_ri · t_ri · (−1/ε'_i²) · dε'/dw · w(1−w)
    let eps = budget(0.5);
    let mut t = trainer(config(Scheme::ElementWise { eps }, 7), 30);
    set_loose_bounds(&mut t);
    let k = t.config().model.feature_len();
    let logits: Vec<f64> = (0..k).map(|i| ((i * 7) % 5) as f64 * 0.4 - 0.8).collect();
    t.rates_mut().set_logits(&logits).unwrap();
    let rows = 5;
    let batch = first_batch(&t, rows);
    let refs: Vec<&Prepared<f64>> = batch.iter().collect();
    let labels: Vec<usize> = batch.iter().map(|p| p.label).collect();
    let draws = ReleaseDraws::sample(rows, k, &mut stream(7, Stream::Train));
    let (_, noise) = t.rate_gradient(&refs, &draws, GradPaths { mask: false, noise: true }).unwrap();

    let f = t.features(&batch).unwrap();
    let w = t.rates().rates();
    let ep: Vec<f64> = w.iter().map(|&wi| eps_prime(wi, eps).unwrap()).collect();
    let tau = t.tau();
    let x: Vec<f64> = (0..rows * k)
        .map(|idx| {
            let i = idx % k;
            let gap = draws.gumbel[2 * idx + 1] - draws.gumbel[2 * idx];
            let m = 1.0 / (1.0 + (-(gap + (1.0 - w[i]).ln() - w[i].ln()) / tau).exp());
            f[idx] * m + draws.laplace[idx] / ep[i]
        })
        .collect();
    let xt = Tensor::param(x, &[rows, k]).unwrap();
    let g = t.model().graph(&[]);
    g.classify(&xt).unwrap().cross_entropy(&labels).unwrap().backward().unwrap();
    let dx = xt.grad_or_zeros();
    let rates = DropoutRates::from_rates(&w, RateBounds::default()).unwrap();
    let dep = budget_gradient(&rates, eps).unwrap();
    for i in 0..k {
        let s: f64 = (0..rows).map(|r| dx[r * k + i] * draws.laplace[r * k + i]).sum();
        let expect = s * (-1.0 / (ep[i] * ep[i])) * dep[i] * w[i] * (1.0 - w[i]);
        assert!(rel_err(noise[i], expect) < 1e-8, "logit {i}: {} vs {expect}", noise[i]);
    }
}

#[test]
fn rates_stay_within_bounds() {
    let mut cfg = config(Scheme::ElementWise { eps: budget(0.3) }, 8);
    cfg.rate_bounds = RateBounds::new(0.45, 0.55).unwrap();
    cfg.lr_w = 5.0;
    cfg.epochs = 2;
    let mut t = trainer(cfg, 40);
    for _ in 0..2 {
        t.run_epoch().unwrap();
        for w in t.rates().rates() {
            assert!((0.45..=0.55).contains(&w), "{w}");
        }
    }
}

#[test]
fn zero_epochs_returns_initial_state() {
    let mut cfg = config(Scheme::ElementWise { eps: budget(1.0) }, 9);
    cfg.epochs = 0;
    let out = train(&small_data(30, 9), cfg).unwrap();
    assert!(out.metrics.is_empty());
    assert!(out.best_test_acc().is_none());
    assert!(out.rates.rates().iter().all(|&w| (w - 0.5).abs() < 1e-12));
}

#[test]
fn identical_seeds_give_identical_traces() {
    let mut cfg = config(Scheme::ElementWise { eps: budget(1.0) }, 10);
    cfg.epochs = 2;
    let data = small_data(40, 10);
    let a = train(&data, cfg.clone()).unwrap();
    let b = train(&data, cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.rates.logits(), b.rates.logits());
}

#[test]
fn non_finite_weights_abort_with_diagnostic() {
    let mut t = trainer(config(Scheme::ElementWise { eps: budget(1.0) }, 11), 30);
    set_loose_bounds(&mut t);
    let k = t.config().model.feature_len();
    for p in t.model_mut().params_mut().iter_mut() {
        if p.name.starts_with("classifier") {
            p.data[0] = f64::NAN;
        }
    }
    let batch = first_batch(&t, 4);
    let refs: Vec<&Prepared<f64>> = batch.iter().collect();
    let draws = ReleaseDraws::sample(4, k, &mut stream(1, Stream::Train));
    assert!(matches!(
        t.step_model(&refs, &draws),
        Err(TrainError::NonFiniteLoss { phase: "weight", .. })
    ));
}

#[test]
fn ablated_feature_is_not_kept_more_often() {
    let ablated = 1;
    let mut mean = 0.0;
    for seed in 0..5 {
        let mut cfg = config(Scheme::ElementWise { eps: budget(1.0) }, 100 + seed);
        cfg.epochs = 3;
        cfg.lr_w = 0.05;
        cfg.ablate_features = vec![ablated];
        let out = train(&small_data(60, seed), cfg).unwrap();
        mean += out.rates.rates()[ablated] / 5.0;
    }
    assert!(mean >= 0.5, "mean learned rate {mean}");
}

#[test]
fn large_budget_reproduces_non_private_predictions() {
    let mut cfg = config(Scheme::NonPrivate, 12);
    cfg.init_rate = DEFAULT_W_MIN;
    let data = small_data(600, 12);
    let (tr, te) = split(&data, 0.7, 12).unwrap();
    let mut t = Trainer::new(cfg, &tr, &te).unwrap();
    for _ in 0..15 {
        t.run_epoch().unwrap();
    }
    let test = t.test_set().to_vec();
    let f = t.features(&test).unwrap();
    let y: Vec<usize> = test.iter().map(|p| p.label).collect();
    let mut rng = stream(12, Stream::Eval);
    let clean = t.evaluate_features(&f, &y, &Scheme::NonPrivate, &mut rng).unwrap();
    let private = t
        .evaluate_features(&f, &y, &Scheme::ElementWise { eps: budget(20.0) }, &mut rng)
        .unwrap();
    let same = clean
        .predictions
        .iter()
        .zip(&private.predictions)
        .filter(|(a, b)| a == b)
        .count();
    assert!(clean.accuracy > 0.8, "{}", clean.accuracy);
    assert!(same as f64 >= 0.99 * y.len() as f64, "{same} of {}", y.len());
}

#[test]
fn allocation_report_layout() {
    let eps = budget(0.8);
    let d = 4;
    let rates = DropoutRates::uniform(3 * d, 0.5, RateBounds::default()).unwrap();
    let features: Vec<f64> = (0..5 * 3 * d).map(|i| (i % 7) as f64 / 7.0).collect();
    let report = allocation_report(&rates, eps, &features, d).unwrap();
    assert_eq!(report.len(), 3);
    for block in &report {
        assert_eq!(block.w.len(), d);
        assert_eq!(block.b.len(), d);
        assert_eq!(block.mean_abs_f.len(), d);
        for (&w, &b) in block.w.iter().zip(&block.b) {
            assert!((b - 1.0 / eps_prime(w, eps).unwrap()).abs() < 1e-12);
        }
        assert!((block.mean_w() - report[0].mean_w()).abs() < 1e-6);
    }
    assert!(allocation_report(&rates, eps, &features, 5).is_err());
}

#[test]
fn mixed_rates_report_per_block() {
    let eps = budget(1.0);
    let w: Vec<f64> = (0..6).map(|i| 0.1 + 0.1 * i as f64).collect();
    let rates = DropoutRates::from_rates(&w, RateBounds::default()).unwrap();
    let report = allocation_report(&rates, eps, &[0.5; 6], 2).unwrap();
    assert!((report[2].mean_w() - 0.55).abs() < 1e-12);
    assert!((report[1].mean_f() - 0.5).abs() < 1e-12);
}

#[test]
fn single_precision_training_runs() {
    let data: Vec<ModalitySample<f32>> = generate(&GeneratorConfig {
        n_samples: 30,
        eeg_channels: 3,
        om_dims: 4,
        timesteps: 16,
        seed: 13,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::new(Scheme::ElementWise { eps: PrivacyBudget::new(1.0f32).unwrap() });
    cfg.model = small_model();
    cfg.epochs = 2;
    let out = train(&data, cfg).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert!(out.model.params().all_finite());
}

#[test]
fn synthetic_task_reaches_target_accuracy_at_unit_budget() {
    let mut total = 0.0;
    for seed in 0..5 {
        let data = generate::<f64>(&GeneratorConfig { seed, ..Default::default() }).unwrap();
        let mut cfg = TrainConfig::new(Scheme::ElementWise { eps: budget(1.0) });
        cfg.seed = seed;
        let out = train(&data, cfg).unwrap();
        let best = out.best_test_acc().unwrap();
        eprintln!("seed {seed}: best test accuracy {best:.4}");
        total += best;
    }
    let mean = total / 5.0;
    assert!(mean >= 0.90, "5-seed mean best test accuracy {mean:.4}");
}
