//! Learning voting weights by minibatch Adam on a differentiable certificate.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{certify, BoundError, BoundKind, BoundResult, BoundSpec, SearchConfig};
use crate::numkern::{
    binomial_tail, binomial_tail_grad, categorical_kl_uniform, dirichlet_kl, dirichlet_kl_grad, kl_inv, kl_inv_grad,
    reg_inc_beta_grad,
};
use crate::votes::{beta_margin_term, PredictionMatrix, WeightPosterior};

/// Offset keeping every Dirichlet parameter strictly positive.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("`{0}` is not a trainable objective")]
    NotTrainable(BoundKind),
    #[error("every training run diverged")]
    AllRunsFailed,
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: BoundKind,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_reduce_factor: f64,
    pub lr_reduce_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub gamma_candidates: Vec<f64>,
    pub k_init: f64,
    /// Certificate used to pick among runs; `None` uses the objective itself.
    pub select_with: Option<BoundKind>,
    pub bin_voters: u64,
    pub search: SearchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: BoundKind::Thm2,
            learning_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 100,
            max_epochs: 100,
            early_stop_patience: 25,
            lr_reduce_factor: 10.0,
            lr_reduce_patience: 2,
            min_lr: 1e-6,
            seed: 0,
            gamma_candidates: vec![0.005, 0.01, 0.025, 0.05, 0.1],
            k_init: 2.0,
            select_with: None,
            bin_voters: 100,
            search: SearchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::BadConfig(msg.to_string()));
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) || !(self.k_init > 0.0) {
            return bad("learning rate, adam epsilon and K_init must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam coefficients must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr_reduce_factor > 1.0) {
            return bad("learning-rate reduction factor must exceed 1");
        }
        if self.objective.uses_gamma() {
            if self.gamma_candidates.is_empty() {
                return bad("need at least one margin candidate");
            }
            if self.gamma_candidates.iter().any(|g| !(*g > 0.0 && *g < 0.5)) {
                return bad("margin candidates must lie in (0, 1/2)");
            }
        }
        Ok(())
    }

    fn margins(&self) -> Vec<f64> {
        if self.objective.uses_gamma() {
            self.gamma_candidates.clone()
        } else {
            vec![0.0]
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(omega: &[f64]) -> Vec<f64> {
    let top = omega.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = omega.iter().map(|w| (w - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(d: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; d], v: vec![0.0; d], t: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// A certificate as a differentiable function of unconstrained parameters.
pub trait Objective: Sync {
    fn kind(&self) -> BoundKind;
    fn num_params(&self) -> usize;
    /// Rows available for batching.
    fn num_rows(&self) -> usize;
    fn initial_params(&self) -> Vec<f64>;
    /// Value and gradient with the empirical term averaged over `batch`.
    fn value_and_grad(&self, omega: &[f64], batch: &[usize]) -> (f64, Vec<f64>);
    /// The posterior encoded by `omega`.
    fn posterior(&self, omega: &[f64]) -> WeightPosterior;
    fn value(&self, omega: &[f64], batch: &[usize]) -> f64 {
        self.value_and_grad(omega, batch).0
    }
}

/// Per-row voter correctness, shared by the objectives.
struct Correctness {
    hits: Vec<bool>,
    d: usize,
}

impl Correctness {
    fn new(p: &PredictionMatrix) -> Self {
        let d = p.num_voters();
        let mut hits = Vec::with_capacity(p.num_rows() * d);
        for r in 0..p.num_rows() {
            let y = p.raw_label(r);
            hits.extend(p.raw_row(r).iter().map(|&k| k == y));
        }
        Self { hits, d }
    }

    fn row(&self, r: usize) -> &[bool] {
        &self.hits[r * self.d..(r + 1) * self.d]
    }

    fn split(&self, r: usize, w: &[f64]) -> (f64, f64) {
        let mut right = 0.0;
        let mut wrong = 0.0;
        for (&h, &x) in self.row(r).iter().zip(w) {
            if h {
                right += x;
            } else {
                wrong += x;
            }
        }
        (right, wrong)
    }
}

/// Chain rule through `v = kl_inv(u, c)`, returning `(v, ∂v/∂u, ∂v/∂c)`.
/// The `u` derivative is dropped when `u` underflows, where the inverse has a
/// vertical tangent and the empirical gradient vanishes with it.
fn kl_inv_chain(u: f64, c: f64) -> (f64, f64, f64) {
    let c = c.max(1e-12);
    let v = kl_inv(u, c);
    match kl_inv_grad(u, c) {
        Ok((du, dc)) => (v, if u < 1e-300 { 0.0 } else { du }, dc),
        Err(_) => (v, 0.0, 0.0),
    }
}

fn ln_confidence(m: usize, delta: f64) -> f64 {
    (2.0 * (m as f64).sqrt() / delta).ln()
}

/// Dirichlet-proxy objectives over `α = softplus(ω) + 1e-6`: the stochastic
/// margin certificate at margin `γ`, or twice the small-kl bound on the
/// Dirichlet-averaged 0-1 loss.
pub struct DirichletObjective<'a> {
    kind: BoundKind,
    p: &'a PredictionMatrix,
    correct: Correctness,
    gamma: f64,
    prior: Vec<f64>,
    m: usize,
    delta: f64,
    k_init: f64,
}

impl<'a> DirichletObjective<'a> {
    pub fn thm2(p: &'a PredictionMatrix, gamma: f64, spec: &BoundSpec, k_init: f64) -> Self {
        Self::build(BoundKind::Thm2, p, gamma, spec, k_init)
    }

    pub fn f2(p: &'a PredictionMatrix, spec: &BoundSpec, k_init: f64) -> Self {
        Self::build(BoundKind::F2, p, 0.0, spec, k_init)
    }

    fn build(kind: BoundKind, p: &'a PredictionMatrix, gamma: f64, spec: &BoundSpec, k_init: f64) -> Self {
        let d = p.num_voters();
        let prior = spec.prior.as_ref().map(|c| c.as_slice().to_vec()).unwrap_or_else(|| vec![1.0; d]);
        Self { kind, p, correct: Correctness::new(p), gamma, prior, m: spec.m, delta: spec.delta, k_init }
    }

    pub fn alpha(&self, omega: &[f64]) -> Vec<f64> {
        omega.iter().map(|&w| softplus(w) + ALPHA_FLOOR).collect()
    }
}

impl Objective for DirichletObjective<'_> {
    fn kind(&self) -> BoundKind {
        self.kind
    }

    fn num_params(&self) -> usize {
        self.p.num_voters()
    }

    fn num_rows(&self) -> usize {
        self.p.num_rows()
    }

    fn initial_params(&self) -> Vec<f64> {
        let d = self.p.num_voters();
        vec![softplus_inv(self.k_init / d as f64 - ALPHA_FLOOR); d]
    }

    fn value_and_grad(&self, omega: &[f64], batch: &[usize]) -> (f64, Vec<f64>) {
        let d = omega.len();
        let alpha = self.alpha(omega);
        let total: f64 = alpha.iter().sum();
        let nb = batch.len() as f64;
        let mut emp = 0.0;
        let mut emp_grad = vec![0.0; d];
        for &r in batch {
            let (a, b) = self.correct.split(r, &alpha);
            emp += beta_margin_term(a, b, self.gamma);
            let (da, db) = if a > 0.0 && b > 0.0 {
                reg_inc_beta_grad(0.5 + self.gamma, a, b).unwrap_or((f64::NAN, f64::NAN))
            } else {
                (0.0, 0.0)
            };
            for (g, &h) in emp_grad.iter_mut().zip(self.correct.row(r)) {
                *g += if h { da } else { db };
            }
        }
        emp /= nb;
        emp_grad.iter_mut().for_each(|g| *g /= nb);
        let dkl = dirichlet_kl(&alpha, &self.prior).unwrap_or(f64::INFINITY);
        let dkl_grad = dirichlet_kl_grad(&alpha, &self.prior).unwrap_or_else(|_| vec![f64::NAN; d]);
        let mf = self.m as f64;
        let c = (dkl.max(0.0) + ln_confidence(self.m, self.delta)) / mf;
        let (v, dv_du, dv_dc) = kl_inv_chain(emp.clamp(0.0, 1.0), c);
        let (value, scale, eps_grad) = match self.kind {
            BoundKind::F2 => (2.0 * v, 2.0, 0.0),
            _ => {
                let g2 = self.gamma * self.gamma;
                let eps = (-4.0 * (total + 1.0) * g2).exp();
                (v + eps, 1.0, -4.0 * g2 * eps)
            }
        };
        let grad = (0..d)
            .map(|i| {
                let dalpha = scale * (dv_du * emp_grad[i] + dv_dc * dkl_grad[i] / mf) + eps_grad;
                dalpha * sigmoid(omega[i])
            })
            .collect();
        (value, grad)
    }

    fn posterior(&self, omega: &[f64]) -> WeightPosterior {
        WeightPosterior::from_alpha(&self.alpha(omega)).expect("softplus keeps α positive")
    }
}

/// Categorical objectives over `θ = softmax(ω)`: first order, second order
/// (tandem) and binomial certificates.
pub struct CategoricalObjective<'a> {
    kind: BoundKind,
    p: &'a PredictionMatrix,
    correct: Correctness,
    m: usize,
    delta: f64,
    bin_voters: u64,
}

impl<'a> CategoricalObjective<'a> {
    pub fn new(kind: BoundKind, p: &'a PredictionMatrix, spec: &BoundSpec, bin_voters: u64) -> Result<Self, TrainError> {
        if !matches!(kind, BoundKind::Fo | BoundKind::So | BoundKind::Bin) {
            return Err(TrainError::NotTrainable(kind));
        }
        Ok(Self { kind, p, correct: Correctness::new(p), m: spec.m, delta: spec.delta, bin_voters })
    }
}

impl Objective for CategoricalObjective<'_> {
    fn kind(&self) -> BoundKind {
        self.kind
    }

    fn num_params(&self) -> usize {
        self.p.num_voters()
    }

    fn num_rows(&self) -> usize {
        self.p.num_rows()
    }

    fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.p.num_voters()]
    }

    fn value_and_grad(&self, omega: &[f64], batch: &[usize]) -> (f64, Vec<f64>) {
        let d = omega.len();
        let theta = softmax(omega);
        let nb = batch.len() as f64;
        let mut emp = 0.0;
        let mut emp_grad = vec![0.0; d];
        let k0 = self.bin_voters.div_ceil(2) as i64;
        for &r in batch {
            let wrong = self.correct.split(r, &theta).1.clamp(0.0, 1.0);
            let (term, slope) = match self.kind {
                BoundKind::Fo => (wrong, 1.0),
                BoundKind::So => (wrong * wrong, 2.0 * wrong),
                _ => (binomial_tail(self.bin_voters, wrong, k0), binomial_tail_grad(self.bin_voters, wrong, k0)),
            };
            emp += term;
            for (g, &h) in emp_grad.iter_mut().zip(self.correct.row(r)) {
                if !h {
                    *g += slope;
                }
            }
        }
        emp /= nb;
        emp_grad.iter_mut().for_each(|g| *g /= nb);
        let (kl_weight, mult) = match self.kind {
            BoundKind::Fo => (1.0, 2.0),
            BoundKind::So => (2.0, 4.0),
            _ => (self.bin_voters as f64, 2.0),
        };
        let mf = self.m as f64;
        let kl = categorical_kl_uniform(&theta);
        let c = (kl_weight * kl + ln_confidence(self.m, self.delta)) / mf;
        let (v, dv_du, dv_dc) = kl_inv_chain(emp.clamp(0.0, 1.0), c);
        // gradient in θ, then through the softmax
        let g_theta: Vec<f64> = (0..d)
            .map(|i| {
                let dkl = if theta[i] > 0.0 { theta[i].ln() + 1.0 } else { 0.0 };
                mult * (dv_du * emp_grad[i] + dv_dc * kl_weight * dkl / mf)
            })
            .collect();
        let mean: f64 = theta.iter().zip(&g_theta).map(|(t, g)| t * g).sum();
        let grad = theta.iter().zip(&g_theta).map(|(t, g)| t * (g - mean)).collect();
        (mult * v, grad)
    }

    fn posterior(&self, omega: &[f64]) -> WeightPosterior {
        // categorical posteriors start the concentration search at 1
        WeightPosterior::new(softmax(omega), 1.0).expect("softmax lies on the simplex")
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub gamma: f64,
    pub epoch: usize,
    /// Mean minibatch objective over the epoch.
    pub objective: f64,
    /// Objective on the full sample at epoch end.
    pub full_bound: f64,
    pub k: f64,
    pub lr: f64,
}

/// Result of one optimisation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub params: Vec<f64>,
    pub posterior: WeightPosterior,
    pub best_full: f64,
    pub epochs_run: usize,
    pub log: Vec<LogRow>,
    pub diverged: bool,
}

/// Minibatch Adam with epoch-level early stopping and plateau learning-rate
/// decay, both driven by the full-sample objective. Returns the best
/// parameters seen (the initial ones if no epoch completed).
pub fn run_optimizer(obj: &dyn Objective, cfg: &TrainConfig, stream: u64, gamma: f64) -> RunResult {
    let m = obj.num_rows();
    let all: Vec<usize> = (0..m).collect();
    let mut omega = obj.initial_params();
    let mut adam = AdamState::new(omega.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut order = all.clone();
    let mut lr = cfg.learning_rate;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut since_lr = 0;
    let mut log = Vec::new();
    let mut diverged = false;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (v, g) = obj.value_and_grad(&omega, batch);
            if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
                diverged = true;
                break;
            }
            sum += v;
            batches += 1;
            adam_step(&mut adam, &mut omega, &g, lr);
        }
        if diverged {
            break;
        }
        epochs_run = epoch;
        let full = obj.value(&omega, &all);
        if !full.is_finite() {
            diverged = true;
            break;
        }
        log.push(LogRow {
            gamma,
            epoch,
            objective: sum / batches as f64,
            full_bound: full,
            k: obj.posterior(&omega).k(),
            lr,
        });
        if best.as_ref().is_none_or(|(b, _)| full < *b) {
            best = Some((full, omega.clone()));
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
        }
        if since_best >= cfg.early_stop_patience {
            break;
        }
        if since_lr >= cfg.lr_reduce_patience {
            lr /= cfg.lr_reduce_factor;
            since_lr = 0;
            if lr < cfg.min_lr {
                break;
            }
        }
    }
    let (best_full, params) = match best {
        Some(b) => b,
        None => {
            let init = obj.initial_params();
            (obj.value(&init, &all), init)
        }
    };
    RunResult { posterior: obj.posterior(&params), params, best_full, epochs_run, log, diverged }
}

/// Outcome of [`train_posterior`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub posterior: WeightPosterior,
    pub certificate: BoundResult,
    /// Margin the winning run was trained at (0 for margin-free objectives).
    pub train_gamma: f64,
    /// Certificate of every run, in candidate order.
    pub candidates: Vec<(f64, BoundResult)>,
    pub log: Vec<LogRow>,
}

/// Trains one run per margin candidate and keeps the posterior with the
/// smallest certificate, spending `δ/|candidates|` on each certificate.
pub fn train_posterior(p: &PredictionMatrix, cfg: &TrainConfig, spec: &BoundSpec) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let margins = cfg.margins();
    let runs: Vec<RunResult> = margins
        .par_iter()
        .enumerate()
        .map(|(i, &g)| {
            let obj: Box<dyn Objective> = match cfg.objective {
                BoundKind::Thm2 => Box::new(DirichletObjective::thm2(p, g, spec, cfg.k_init)),
                BoundKind::F2 => Box::new(DirichletObjective::f2(p, spec, cfg.k_init)),
                kind => Box::new(CategoricalObjective::new(kind, p, spec, cfg.bin_voters)?),
            };
            Ok(run_optimizer(obj.as_ref(), cfg, i as u64, g))
        })
        .collect::<Result<_, TrainError>>()?;
    let select = cfg.select_with.unwrap_or(cfg.objective);
    let sel_spec = spec.with_delta(spec.delta / margins.len() as f64);
    let mut search = cfg.search.clone();
    search.bin_voters = cfg.bin_voters;
    let mut candidates: Vec<(f64, BoundResult)> = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, usize)> = None;
    for (i, run) in runs.iter().enumerate() {
        if run.diverged && run.log.is_empty() {
            continue;
        }
        let cert = certify(p, &run.posterior, &sel_spec, select, &search)?;
        if best.is_none_or(|(_, c): (usize, usize)| cert.value < candidates[c].1.value) {
            best = Some((i, candidates.len()));
        }
        candidates.push((margins[i], cert));
    }
    let (win, c) = best.ok_or(TrainError::AllRunsFailed)?;
    let log = runs.iter().flat_map(|r| r.log.iter().cloned()).collect();
    Ok(TrainOutcome {
        posterior: runs[win].posterior.clone(),
        certificate: candidates[c].1.clone(),
        train_gamma: margins[win],
        candidates,
        log,
    })
}

/// Writes the trace as CSV: `gamma,epoch,objective,full_bound,k,lr`.
pub fn write_log<W: Write>(log: &[LogRow], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
