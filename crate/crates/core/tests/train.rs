mod common;

use margin_cert::bounds::{BoundKind, BoundSpec, SearchConfig};
use margin_cert::train::*;
use margin_cert::votes::{majority_vote_error, PredictionMatrix, WeightPosterior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grad_check(obj: &dyn Objective, omega: &[f64], batch: &[usize]) -> f64 {
    let (_, g) = obj.value_and_grad(omega, batch);
    let mut worst: f64 = 0.0;
    for i in 0..omega.len() {
        let fd = common::central_diff(|w| obj.value(w, batch), omega, i, 1e-5);
        if g[i].abs() > 1e-8 || fd.abs() > 1e-8 {
            worst = worst.max(common::rel_err(g[i], fd));
        }
    }
    worst
}

#[test]
fn objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checked = 0;
    while checked < 20 {
        let d = rng.random_range(3..9);
        let m = rng.random_range(40..120);
        let acc = rng.random_range(0.55..0.8);
        let p = common::random_matrix(&mut rng, m, d, 2, acc);
        let spec = BoundSpec::new(m, 0.05, 2).unwrap();
        let omega: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.5)).collect();
        let batch: Vec<usize> = (0..m).filter(|_| rng.random::<f64>() < 0.6).collect();
        if batch.is_empty() {
            continue;
        }
        let gamma = [0.01, 0.025, 0.05, 0.1][checked % 4];
        let thm2 = DirichletObjective::thm2(&p, gamma, &spec, 2.0);
        let f2 = DirichletObjective::f2(&p, &spec, 2.0);
        let fo = CategoricalObjective::new(BoundKind::Fo, &p, &spec, 100).unwrap();
        let so = CategoricalObjective::new(BoundKind::So, &p, &spec, 100).unwrap();
        let bin = CategoricalObjective::new(BoundKind::Bin, &p, &spec, 100).unwrap();
        for (name, obj) in [("thm2", &thm2 as &dyn Objective), ("f2", &f2), ("fo", &fo), ("so", &so), ("bin", &bin)] {
            let err = grad_check(obj, &omega, &batch);
            assert!(err < 1e-4, "{name} at point {checked}: relative error {err}");
        }
        checked += 1;
    }
}

#[test]
fn margin_penalty_gradient_is_analytic() {
    // with no empirical signal the gradient is the exponential term plus the KL part
    let p = PredictionMatrix::from_rows(&[vec![1, 1, 1], vec![2, 2, 2]], &[1, 2], 2).unwrap();
    let spec = BoundSpec::new(2, 0.05, 2).unwrap();
    let gamma = 0.1;
    let obj = DirichletObjective::thm2(&p, gamma, &spec, 3.0);
    let omega = obj.initial_params();
    let alpha = obj.alpha(&omega);
    assert!(alpha.iter().all(|a| (a - 1.0).abs() < 1e-12));
    let total: f64 = alpha.iter().sum();
    let (value, grad) = obj.value_and_grad(&omega, &[0, 1]);
    let eps = (-4.0 * (total + 1.0) * gamma * gamma).exp();
    let sig = 1.0 / (1.0 + (-omega[0]).exp());
    // α = β makes the KL gradient vanish, and every row is unanimous so the
    // empirical term has no gradient either
    for g in &grad {
        assert!((g - (-4.0 * gamma * gamma * eps * sig)).abs() < 1e-12, "{g}");
    }
    assert!(value > eps);
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut s = AdamState::new(1, 0.9, 0.999, 1e-8);
    let mut x = [0.0];
    adam_step(&mut s, &mut x, &[2.5], 0.1);
    assert!((x[0] + 0.1 * 2.5 / (2.5 + 1e-8)).abs() < 1e-15);
    let mut s = AdamState::new(3, 0.9, 0.999, 1e-8);
    let mut x = [0.3, -1.0, 4.0];
    for _ in 0..50 {
        adam_step(&mut s, &mut x, &[0.0; 3], 0.1);
    }
    assert_eq!(x, [0.3, -1.0, 4.0]);
}

#[test]
fn adam_matches_reference_on_a_quadratic() {
    let a = [1.0, 4.0, 0.25];
    let mut x = [1.0, -2.0, 3.0];
    let mut s = AdamState::new(3, 0.9, 0.999, 1e-8);
    // reference: scalar loops, explicit powers
    let mut rx = x;
    let (mut rm, mut rv) = ([0.0f64; 3], [0.0f64; 3]);
    for t in 1..=10 {
        let g: Vec<f64> = (0..3).map(|i| a[i] * x[i]).collect();
        adam_step(&mut s, &mut x, &g, 0.05);
        for i in 0..3 {
            let gi = a[i] * rx[i];
            rm[i] = 0.9 * rm[i] + 0.1 * gi;
            rv[i] = 0.999 * rv[i] + 0.001 * gi * gi;
            let mh = rm[i] / (1.0 - 0.9f64.powf(t as f64));
            let vh = rv[i] / (1.0 - 0.999f64.powf(t as f64));
            rx[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..3 {
            assert!((x[i] - rx[i]).abs() < 1e-13, "step {t}, coord {i}");
        }
    }
}

fn separable(seed: u64) -> PredictionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 200;
    let d = 6;
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(1..=2)).collect();
    let mut preds = Vec::new();
    for &y in &labels {
        preds.push(y);
        for _ in 1..d {
            preds.push(rng.random_range(1..=2));
        }
    }
    PredictionMatrix::from_flat(preds, labels, d, 2).unwrap()
}

fn quick_search() -> SearchConfig {
    SearchConfig { n_gamma: 50, ..SearchConfig::default() }
}

#[test]
fn no_epochs_returns_the_uniform_start() {
    let p = separable(1);
    let spec = BoundSpec::for_matrix(&p, 0.05).unwrap();
    let cfg = TrainConfig { max_epochs: 0, gamma_candidates: vec![0.05], search: quick_search(), ..TrainConfig::default() };
    let out = train_posterior(&p, &cfg, &spec).unwrap();
    for t in out.posterior.theta() {
        assert!((t - 1.0 / 6.0).abs() < 1e-12);
    }
    assert!((out.posterior.k() - cfg.k_init).abs() < 1e-9);
    assert!(out.log.is_empty());
}

#[test]
fn perfect_voter_takes_the_mass() {
    // the certificate is smallest near θ₀ ≈ 0.8 on this toy, so training
    // settles there rather than on a point mass
    for seed in 0..3 {
        let p = separable(10 + seed);
        let spec = BoundSpec::for_matrix(&p, 0.05).unwrap();
        let cfg = TrainConfig { seed, search: quick_search(), ..TrainConfig::default() };
        let out = train_posterior(&p, &cfg, &spec).unwrap();
        let theta = out.posterior.theta();
        assert!(theta[0] > 0.7, "seed {seed}: θ = {theta:?}");
        assert!(theta[1..].iter().all(|&t| t < 0.1));
        assert_eq!(majority_vote_error(&p, theta), 0.0);
        assert!(out.posterior.alpha().iter().all(|&a| a > 0.0));
    }
}

#[test]
fn first_epoch_decreases_the_full_objective() {
    let p = separable(4);
    let spec = BoundSpec::for_matrix(&p, 0.05).unwrap();
    let obj = DirichletObjective::thm2(&p, 0.05, &spec, 2.0);
    let cfg = TrainConfig { max_epochs: 1, batch_size: p.num_rows(), ..TrainConfig::default() };
    let all: Vec<usize> = (0..p.num_rows()).collect();
    let start = obj.value(&obj.initial_params(), &all);
    let run = run_optimizer(&obj, &cfg, 0, 0.05);
    assert!(run.best_full < start);
}

struct Plateau;

impl Objective for Plateau {
    fn kind(&self) -> BoundKind {
        BoundKind::Thm2
    }
    fn num_params(&self) -> usize {
        2
    }
    fn num_rows(&self) -> usize {
        10
    }
    fn initial_params(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn value_and_grad(&self, _: &[f64], _: &[usize]) -> (f64, Vec<f64>) {
        (0.5, vec![0.0, 0.0])
    }
    fn posterior(&self, _: &[f64]) -> WeightPosterior {
        WeightPosterior::uniform(2, 1.0).unwrap()
    }
}

#[test]
fn early_stopping_after_patience() {
    for patience in [1, 5, 25] {
        let cfg = TrainConfig { early_stop_patience: patience, lr_reduce_patience: 1000, max_epochs: 500, ..TrainConfig::default() };
        let run = run_optimizer(&Plateau, &cfg, 0, 0.1);
        assert_eq!(run.epochs_run, patience + 1);
    }
}

#[test]
fn training_is_deterministic() {
    let p = separable(7);
    let spec = BoundSpec::for_matrix(&p, 0.05).unwrap();
    let cfg = TrainConfig { seed: 3, max_epochs: 15, search: quick_search(), ..TrainConfig::default() };
    let a = train_posterior(&p, &cfg, &spec).unwrap();
    let b = train_posterior(&p, &cfg, &spec).unwrap();
    assert_eq!(a, b);
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    write_log(&a.log, &mut la).unwrap();
    write_log(&b.log, &mut lb).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn categorical_objectives_train() {
    let p = separable(12);
    let spec = BoundSpec::for_matrix(&p, 0.05).unwrap();
    for kind in [BoundKind::Fo, BoundKind::So, BoundKind::Bin, BoundKind::F2] {
        let cfg = TrainConfig { objective: kind, max_epochs: 30, search: quick_search(), ..TrainConfig::default() };
        let out = train_posterior(&p, &cfg, &spec).unwrap();
        assert_eq!(out.certificate.kind, kind);
        assert!(out.posterior.theta()[0] > 0.5, "{kind}: {:?}", out.posterior.theta());
    }
    let cfg = TrainConfig { objective: BoundKind::Gz, ..TrainConfig::default() };
    assert!(train_posterior(&p, &cfg, &spec).is_err());
}
