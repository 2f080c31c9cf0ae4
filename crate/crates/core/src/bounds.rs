//! Generalisation certificates for weighted majority votes and the
//! `(γ, K, T)` search that picks the tightest one.
//!
//! Each certificate exists in two layers: a fixed-loss formula taking the
//! empirical quantities as numbers (`*_from_loss`), and a matrix-level
//! function computing those quantities from a [`PredictionMatrix`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkern::{categorical_entropy, categorical_kl_uniform, dirichlet_kl, kl_inv, ConcentrationVector, NumError};
use crate::votes::{
    binomial_loss, empirical_margin_loss, expected_margin_loss_beta, gibbs_loss, tandem_loss, MarginStats,
    MassProfile, PredictionMatrix, VotesError, WeightPosterior,
};

/// Smallest weight allowed into a Dirichlet proxy under the default prior.
pub const THETA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("margin {gamma} is not above sqrt(2/d) = {min}")]
    InapplicableMargin { gamma: f64, min: f64 },
    #[error("bound needs at least {need} voters, got {got}")]
    TooFewVoters { need: usize, got: usize },
    #[error("invalid bound specification: {0}")]
    BadSpec(String),
    #[error("unknown bound `{0}`")]
    UnknownBound(String),
    #[error(transparent)]
    Votes(#[from] VotesError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Thm1,
    Thm2,
    Gz,
    BgPlus,
    #[serde(rename = "bg", alias = "bgoriginal")]
    BgOriginal,
    BgPlusPlus,
    Fo,
    So,
    Bin,
    F2,
}

impl BoundKind {
    pub const ALL: [BoundKind; 10] = [
        BoundKind::Thm1,
        BoundKind::Thm2,
        BoundKind::Gz,
        BoundKind::BgPlus,
        BoundKind::BgOriginal,
        BoundKind::BgPlusPlus,
        BoundKind::Fo,
        BoundKind::So,
        BoundKind::Bin,
        BoundKind::F2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Thm1 => "thm1",
            BoundKind::Thm2 => "thm2",
            BoundKind::Gz => "gz",
            BoundKind::BgPlus => "bgplus",
            BoundKind::BgOriginal => "bg",
            BoundKind::BgPlusPlus => "bgplusplus",
            BoundKind::Fo => "fo",
            BoundKind::So => "so",
            BoundKind::Bin => "bin",
            BoundKind::F2 => "f2",
        }
    }

    /// Whether the certificate is stated at a fixed margin.
    pub fn uses_gamma(self) -> bool {
        !matches!(self, BoundKind::Fo | BoundKind::So | BoundKind::Bin | BoundKind::F2)
    }

    /// Whether the certificate has a Dirichlet concentration to tune.
    pub fn uses_k(self) -> bool {
        matches!(self, BoundKind::Thm1 | BoundKind::Thm2 | BoundKind::F2)
    }

    /// Whether searching the margin grid costs a union bound over it.
    pub fn needs_grid_union(self) -> bool {
        self.uses_gamma() && self != BoundKind::Gz
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundKind {
    type Err = BoundError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        BoundKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .or(match lower.as_str() {
                "bg_original" | "bgoriginal" => Some(BoundKind::BgOriginal),
                "bg+" => Some(BoundKind::BgPlus),
                "bg++" => Some(BoundKind::BgPlusPlus),
                _ => None,
            })
            .ok_or_else(|| BoundError::UnknownBound(s.to_string()))
    }
}

/// Sample size, confidence and prior for one certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub m: usize,
    pub delta: f64,
    /// Dirichlet prior; `None` means the all-ones prior.
    pub prior: Option<ConcentrationVector>,
    pub num_classes: usize,
}

impl BoundSpec {
    pub fn new(m: usize, delta: f64, num_classes: usize) -> Result<Self, BoundError> {
        if m == 0 {
            return Err(BoundError::BadSpec("sample size must be positive".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(BoundError::BadSpec(format!("delta {delta} outside (0, 1)")));
        }
        Ok(Self { m, delta, prior: None, num_classes })
    }

    pub fn for_matrix(p: &PredictionMatrix, delta: f64) -> Result<Self, BoundError> {
        Self::new(p.num_rows(), delta, p.num_classes())
    }

    pub fn with_prior(mut self, prior: ConcentrationVector) -> Self {
        self.prior = Some(prior);
        self
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self { delta, ..self.clone() }
    }

    fn prior_for(&self, d: usize) -> Result<Vec<f64>, BoundError> {
        match &self.prior {
            Some(p) if p.len() != d => Err(NumError::LengthMismatch(p.len(), d).into()),
            Some(p) => Ok(p.as_slice().to_vec()),
            None => Ok(vec![1.0; d]),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundFlags {
    /// Every candidate evaluated to the trivial value 1.
    pub vacuous: bool,
    /// The Dirichlet KL was infinite or undefined.
    pub infinite_complexity: bool,
    /// Some weights were raised to [`THETA_FLOOR`] before forming the proxy.
    pub theta_floored: bool,
}

/// A certified risk value and the pieces it was assembled from.
///
/// `empirical_term`, `complexity_term` and `derandomisation_term` are the
/// quantities fed into the closed form of `kind`; [`BoundResult::reconstruct`]
/// recomputes `value` from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub kind: BoundKind,
    pub value: f64,
    pub gamma_star: Option<f64>,
    pub k_star: Option<f64>,
    /// `T` for the BG family, `N` for the binomial certificate.
    pub t_star: Option<u64>,
    pub empirical_term: f64,
    pub complexity_term: f64,
    pub derandomisation_term: f64,
    pub sample_size: usize,
    /// Confidence actually spent, after any union correction.
    pub delta: f64,
    pub flags: BoundFlags,
}

impl BoundResult {
    fn vacuous(kind: BoundKind, m: usize, delta: f64) -> Self {
        Self {
            kind,
            value: 1.0,
            gamma_star: None,
            k_star: None,
            t_star: None,
            empirical_term: 1.0,
            complexity_term: f64::INFINITY,
            derandomisation_term: 0.0,
            sample_size: m,
            delta,
            flags: BoundFlags { vacuous: true, ..Default::default() },
        }
    }

    /// Recomputes the value from the stored components.
    pub fn reconstruct(&self) -> f64 {
        if self.flags.infinite_complexity {
            return 1.0;
        }
        let e = self.empirical_term;
        let c = self.complexity_term;
        let eps = self.derandomisation_term;
        let v = match self.kind {
            BoundKind::Thm1 | BoundKind::BgPlus | BoundKind::BgPlusPlus => kl_inv((e + eps).min(1.0), c) + eps,
            BoundKind::Thm2 | BoundKind::Gz => kl_inv(e, c) + eps,
            BoundKind::BgOriginal => {
                let m = self.sample_size as f64;
                e + (c / m * e).sqrt() + (c + c.sqrt() + 2.0) / m
            }
            BoundKind::Fo | BoundKind::Bin | BoundKind::F2 => 2.0 * kl_inv(e, c),
            BoundKind::So => 4.0 * kl_inv(e, c),
        };
        v.min(1.0)
    }

    fn is_better_than(&self, other: &BoundResult) -> bool {
        self.value < other.value
    }
}

fn ln_confidence(m: usize, delta: f64) -> f64 {
    (2.0 * (m as f64).sqrt() / delta).ln()
}

fn base(kind: BoundKind, m: usize, delta: f64) -> BoundResult {
    BoundResult {
        kind,
        value: 1.0,
        gamma_star: None,
        k_star: None,
        t_star: None,
        empirical_term: 0.0,
        complexity_term: 0.0,
        derandomisation_term: 0.0,
        sample_size: m,
        delta,
        flags: BoundFlags::default(),
    }
}

fn finish(mut r: BoundResult) -> BoundResult {
    r.value = r.reconstruct();
    r.flags.vacuous = r.value >= 1.0;
    r
}

/// Main certificate from the empirical `γ`-margin loss and `D = KL(Dir(Kθ) ‖ Dir(β))`.
pub fn thm1_from_loss(loss: f64, dir_kl: f64, k: f64, gamma: f64, m: usize, delta: f64) -> BoundResult {
    let mut r = base(BoundKind::Thm1, m, delta);
    r.gamma_star = Some(gamma);
    r.k_star = Some(k);
    r.empirical_term = loss;
    r.derandomisation_term = (-(k + 1.0) * gamma * gamma).exp();
    if !dir_kl.is_finite() {
        r.flags.infinite_complexity = true;
        r.complexity_term = f64::INFINITY;
        return finish(r);
    }
    r.complexity_term = (dir_kl.max(0.0) + ln_confidence(m, delta)) / m as f64;
    finish(r)
}

/// Stochastic certificate from the expected Beta-CDF margin loss.
pub fn thm2_from_loss(expected: f64, dir_kl: f64, k: f64, gamma: f64, m: usize, delta: f64) -> BoundResult {
    let mut r = base(BoundKind::Thm2, m, delta);
    r.gamma_star = Some(gamma);
    r.k_star = Some(k);
    r.empirical_term = expected.clamp(0.0, 1.0);
    r.derandomisation_term = (-4.0 * (k + 1.0) * gamma * gamma).exp();
    if !dir_kl.is_finite() {
        r.flags.infinite_complexity = true;
        r.complexity_term = f64::INFINITY;
        return finish(r);
    }
    r.complexity_term = (dir_kl.max(0.0) + ln_confidence(m, delta)) / m as f64;
    finish(r)
}

/// Margin bound valid simultaneously over all `γ > sqrt(2/d)`.
pub fn gz_from_loss(loss: f64, d: usize, gamma: f64, m: usize, delta: f64) -> Result<BoundResult, BoundError> {
    if d < 3 {
        return Err(BoundError::TooFewVoters { need: 3, got: d });
    }
    let min = (2.0 / d as f64).sqrt();
    if !(gamma > min) {
        return Err(BoundError::InapplicableMargin { gamma, min });
    }
    let (df, mf) = (d as f64, m as f64);
    let mut r = base(BoundKind::Gz, m, delta);
    r.gamma_star = Some(gamma);
    r.empirical_term = loss;
    r.complexity_term =
        (2.0 * (2.0 * df).ln() / (gamma * gamma) * (2.0 * mf * mf / df.ln()).ln() + (df * mf / delta).ln()) / mf;
    r.derandomisation_term = df.ln() / mf;
    Ok(finish(r))
}

/// The `T` used by the sharpened categorical margin bound: `⌈2γ⁻² ln m⌉`.
pub fn bgplus_t(gamma: f64, m: usize) -> u64 {
    (2.0 / (gamma * gamma) * (m as f64).ln()).ceil().max(0.0) as u64
}

/// Sharpened categorical-sampling margin bound at a fixed margin.
pub fn bgplus_from_loss(loss: f64, d: usize, gamma: f64, m: usize, delta: f64) -> BoundResult {
    let t = bgplus_t(gamma, m);
    let mut r = base(BoundKind::BgPlus, m, delta);
    r.gamma_star = Some(gamma);
    r.t_star = Some(t);
    r.empirical_term = loss;
    r.complexity_term = (t as f64 * (d as f64).ln() + ln_confidence(m, delta)) / m as f64;
    r.derandomisation_term = 1.0 / m as f64;
    finish(r)
}

/// The original categorical-sampling margin bound.
pub fn bg_original_from_loss(loss: f64, d: usize, gamma: f64, m: usize, delta: f64) -> BoundResult {
    let mut r = base(BoundKind::BgOriginal, m, delta);
    r.gamma_star = Some(gamma);
    r.empirical_term = loss;
    r.complexity_term =
        2.0 * (2.0 / delta).ln() + 4.75 / (gamma * gamma) * (d as f64).ln() * (m as f64).ln();
    finish(r)
}

/// Default upper end of the `T` search: `⌈8γ⁻² ln m⌉`, at least 1.
pub fn bgplusplus_default_t_max(gamma: f64, m: usize) -> u64 {
    ((8.0 / (gamma * gamma) * (m as f64).ln()).ceil() as u64).max(1)
}

const T_EXHAUSTIVE: u64 = 512;
const T_SCAN_RATIO: f64 = 1.25;

/// Entropy-aware categorical bound, minimised over `T ∈ 1..=t_max`.
///
/// Up to 512 candidates are tried exhaustively; beyond that a geometric scan
/// (which always includes the BG+ choice of `T`) is refined locally. Any
/// `T` yields a valid certificate, so a missed optimum only costs tightness.
pub fn bgplusplus_from_loss(
    loss: f64,
    d: usize,
    entropy: f64,
    gamma: f64,
    m: usize,
    delta: f64,
    t_max: u64,
) -> BoundResult {
    let t_max = t_max.max(1);
    let spread = ((d as f64).ln() - entropy).max(0.0);
    let conf = (m as f64 / delta).ln();
    let eval = |t: u64| {
        let mut r = base(BoundKind::BgPlusPlus, m, delta);
        r.gamma_star = Some(gamma);
        r.t_star = Some(t);
        r.empirical_term = loss;
        r.derandomisation_term = (-0.5 * t as f64 * gamma * gamma).exp();
        r.complexity_term = (t as f64 * spread + conf) / m as f64;
        finish(r)
    };
    let mut best = eval(1);
    let consider = |t: u64, best: &mut BoundResult| {
        let r = eval(t);
        if r.is_better_than(best) {
            *best = r;
        }
    };
    if t_max <= T_EXHAUSTIVE {
        for t in 2..=t_max {
            consider(t, &mut best);
        }
        return best;
    }
    let mut candidates = vec![1u64, t_max, bgplus_t(gamma, m).clamp(1, t_max)];
    let mut t = 1.0f64;
    while t < t_max as f64 {
        t = (t * T_SCAN_RATIO).ceil();
        candidates.push((t as u64).min(t_max));
    }
    candidates.sort_unstable();
    candidates.dedup();
    for &t in &candidates {
        consider(t, &mut best);
    }
    // integer golden refinement around the best scan point
    let pos = candidates.iter().position(|&t| Some(t) == best.t_star).unwrap_or(0);
    let mut lo = candidates[pos.saturating_sub(1)];
    let mut hi = candidates[(pos + 1).min(candidates.len() - 1)];
    while hi - lo > 2 {
        let a = lo + (hi - lo) / 3;
        let b = hi - (hi - lo) / 3;
        let (ra, rb) = (eval(a), eval(b));
        if ra.value <= rb.value {
            hi = b;
        } else {
            lo = a;
        }
        for r in [ra, rb] {
            if r.is_better_than(&best) {
                best = r;
            }
        }
    }
    for t in lo..=hi {
        consider(t, &mut best);
    }
    best
}

/// Twice the small-kl bound on the Gibbs risk.
pub fn fo_from_loss(gibbs: f64, kl_cat: f64, m: usize, delta: f64) -> BoundResult {
    let mut r = base(BoundKind::Fo, m, delta);
    r.empirical_term = gibbs;
    r.complexity_term = (kl_cat + ln_confidence(m, delta)) / m as f64;
    finish(r)
}

/// Four times the small-kl bound on the tandem risk.
pub fn so_from_loss(tandem: f64, kl_cat: f64, m: usize, delta: f64) -> BoundResult {
    let mut r = base(BoundKind::So, m, delta);
    r.empirical_term = tandem;
    r.complexity_term = (2.0 * kl_cat + ln_confidence(m, delta)) / m as f64;
    finish(r)
}

/// Twice the small-kl bound on the `N`-voter binomial loss.
pub fn bin_from_loss(binomial: f64, kl_cat: f64, n: u64, m: usize, delta: f64) -> BoundResult {
    let mut r = base(BoundKind::Bin, m, delta);
    r.t_star = Some(n);
    r.empirical_term = binomial;
    r.complexity_term = (n as f64 * kl_cat + ln_confidence(m, delta)) / m as f64;
    finish(r)
}

/// Twice the small-kl bound on the Dirichlet-averaged 0-1 loss.
pub fn f2_from_loss(expected: f64, dir_kl: f64, k: f64, m: usize, delta: f64) -> BoundResult {
    let mut r = base(BoundKind::F2, m, delta);
    r.k_star = Some(k);
    r.empirical_term = expected.clamp(0.0, 1.0);
    if !dir_kl.is_finite() {
        r.flags.infinite_complexity = true;
        r.complexity_term = f64::INFINITY;
        return finish(r);
    }
    r.complexity_term = (dir_kl.max(0.0) + ln_confidence(m, delta)) / m as f64;
    finish(r)
}

/// Raises weights below [`THETA_FLOOR`] and renormalises; reports whether it did.
pub fn floor_theta(theta: &[f64]) -> (Vec<f64>, bool) {
    if theta.iter().all(|&t| t >= THETA_FLOOR) {
        return (theta.to_vec(), false);
    }
    let raised: Vec<f64> = theta.iter().map(|&t| t.max(THETA_FLOOR)).collect();
    let total: f64 = raised.iter().sum();
    (raised.into_iter().map(|t| t / total).collect(), true)
}

fn check_dims(p: &PredictionMatrix, theta: &[f64]) -> Result<(), BoundError> {
    if theta.len() != p.num_voters() {
        return Err(VotesError::LengthMismatch(theta.len(), p.num_voters()).into());
    }
    Ok(())
}

fn scaled_dir_kl(theta: &[f64], k: f64, prior: &[f64]) -> f64 {
    let alpha: Vec<f64> = theta.iter().map(|t| t * k).collect();
    dirichlet_kl(&alpha, prior).unwrap_or(f64::INFINITY)
}

pub fn thm1_bound(p: &PredictionMatrix, wp: &WeightPosterior, gamma: f64, spec: &BoundSpec) -> Result<BoundResult, BoundError> {
    check_dims(p, wp.theta())?;
    let prior = spec.prior_for(p.num_voters())?;
    let (theta, floored) = floor_theta(wp.theta());
    let floored_wp = WeightPosterior::new(theta.clone(), wp.k())?;
    let loss = empirical_margin_loss(p, &floored_wp, gamma);
    let mut r = thm1_from_loss(loss, scaled_dir_kl(&theta, wp.k(), &prior), wp.k(), gamma, spec.m, spec.delta);
    r.flags.theta_floored = floored;
    Ok(r)
}

pub fn thm2_bound(p: &PredictionMatrix, wp: &WeightPosterior, gamma: f64, spec: &BoundSpec) -> Result<BoundResult, BoundError> {
    check_dims(p, wp.theta())?;
    let prior = spec.prior_for(p.num_voters())?;
    let (theta, floored) = floor_theta(wp.theta());
    let alpha: Vec<f64> = theta.iter().map(|t| t * wp.k()).collect();
    let expected = expected_margin_loss_beta(p, &alpha, gamma);
    let dkl = dirichlet_kl(&alpha, &prior).unwrap_or(f64::INFINITY);
    let mut r = thm2_from_loss(expected, dkl, wp.k(), gamma, spec.m, spec.delta);
    r.flags.theta_floored = floored;
    Ok(r)
}

pub fn gz_bound(p: &PredictionMatrix, theta: &[f64], gamma: f64, spec: &BoundSpec) -> Result<BoundResult, BoundError> {
    check_dims(p, theta)?;
    let loss = MarginStats::compute(p, theta)?.loss(gamma);
    gz_from_loss(loss, p.num_voters(), gamma, spec.m, spec.delta)
}

pub fn bgplus_bound(p: &PredictionMatrix, theta: &[f64], gamma: f64, spec: &BoundSpec) -> Result<BoundResult, BoundError> {
    check_dims(p, theta)?;
    let loss = MarginStats::compute(p, theta)?.loss(gamma);
    Ok(bgplus_from_loss(loss, p.num_voters(), gamma, spec.m, spec.delta))
}

pub fn bg_original_bound(
    p: &PredictionMatrix,
    theta: &[f64],
    gamma: f64,
    spec: &BoundSpec,
) -> Result<BoundResult, BoundError> {
    check_dims(p, theta)?;
    let loss = MarginStats::compute(p, theta)?.loss(gamma);
    Ok(bg_original_from_loss(loss, p.num_voters(), gamma, spec.m, spec.delta))
}

pub fn bgplusplus_bound(
    p: &PredictionMatrix,
    theta: &[f64],
    gamma: f64,
    spec: &BoundSpec,
    t_max: u64,
) -> Result<BoundResult, BoundError> {
    check_dims(p, theta)?;
    let loss = MarginStats::compute(p, theta)?.loss(gamma);
    Ok(bgplusplus_from_loss(loss, p.num_voters(), categorical_entropy(theta), gamma, spec.m, spec.delta, t_max))
}

pub fn fo_bound(p: &PredictionMatrix, theta: &[f64], spec: &BoundSpec) -> Result<BoundResult, BoundError> {
    check_dims(p, theta)?;
    Ok(fo_from_loss(gibbs_loss(p, theta), categorical_kl_uniform(theta), spec.m, spec.delta))
}

pub fn so_bound(p: &PredictionMatrix, theta: &[f64], spec: &BoundSpec) -> Result<BoundResult, BoundError> {
    check_dims(p, theta)?;
    Ok(so_from_loss(tandem_loss(p, theta), categorical_kl_uniform(theta), spec.m, spec.delta))
}

pub fn bin_bound(p: &PredictionMatrix, theta: &[f64], spec: &BoundSpec, n: u64) -> Result<BoundResult, BoundError> {
    check_dims(p, theta)?;
    Ok(bin_from_loss(binomial_loss(p, theta, n), categorical_kl_uniform(theta), n, spec.m, spec.delta))
}

pub fn f2_bound(p: &PredictionMatrix, wp: &WeightPosterior, spec: &BoundSpec) -> Result<BoundResult, BoundError> {
    check_dims(p, wp.theta())?;
    let prior = spec.prior_for(p.num_voters())?;
    let (theta, floored) = floor_theta(wp.theta());
    let alpha: Vec<f64> = theta.iter().map(|t| t * wp.k()).collect();
    let expected = expected_margin_loss_beta(p, &alpha, 0.0);
    let dkl = dirichlet_kl(&alpha, &prior).unwrap_or(f64::INFINITY);
    let mut r = f2_from_loss(expected, dkl, wp.k(), spec.m, spec.delta);
    r.flags.theta_floored = floored;
    Ok(r)
}

/// Margin grid and concentration search settings for [`certify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Number of log-spaced margins in `[gamma_lo, gamma_hi)`.
    pub n_gamma: usize,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    /// Explicit margin grid; overrides the log-spaced one when set.
    pub gammas: Option<Vec<f64>>,
    /// Search `K` over `[K_init, K_init · 2^k_doublings]`.
    pub k_doublings: u32,
    pub k_search: bool,
    pub k_rel_tol: f64,
    pub k_max_iter: usize,
    /// Upper end of the BG++ `T` search; `None` uses `⌈8γ⁻² ln m⌉`.
    pub t_max: Option<u64>,
    /// Voters drawn by the binomial certificate.
    pub bin_voters: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_gamma: 1000,
            gamma_lo: 1e-4,
            gamma_hi: 0.5,
            gammas: None,
            k_doublings: 16,
            k_search: true,
            k_rel_tol: 1e-3,
            k_max_iter: 200,
            t_max: None,
            bin_voters: 100,
        }
    }
}

impl SearchConfig {
    /// The margin grid, base-10 log-spaced with the upper end excluded.
    pub fn gamma_grid(&self) -> Vec<f64> {
        if let Some(g) = &self.gammas {
            return g.clone();
        }
        log_grid(self.gamma_lo, self.gamma_hi, self.n_gamma)
    }
}

/// `n` points `10^(a + i (b − a)/n)`, `i = 0..n`, with `a = log10 lo`, `b = log10 hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / n as f64)).collect()
}

/// Minimises `f` over `K ∈ [k_lo, k_lo · 2^doublings]`: a scan over the
/// doublings, then golden-section search in `ln K` around the best scan
/// point. Returns the best result seen; ties keep the earliest.
pub fn minimize_over_k<F>(f: F, k_lo: f64, cfg: &SearchConfig) -> BoundResult
where
    F: Fn(f64) -> BoundResult,
{
    let mut best = f(k_lo);
    if !cfg.k_search {
        return best;
    }
    let ln_lo = k_lo.ln();
    let step = std::f64::consts::LN_2;
    let mut best_j = 0u32;
    for j in 1..=cfg.k_doublings {
        let r = f((ln_lo + step * j as f64).exp());
        if r.is_better_than(&best) {
            best = r;
            best_j = j;
        }
    }
    if cfg.k_doublings == 0 || best.value >= 1.0 {
        return best;
    }
    let mut a = ln_lo + step * best_j.saturating_sub(1) as f64;
    let mut b = ln_lo + step * (best_j + 1).min(cfg.k_doublings) as f64;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let tol = cfg.k_rel_tol.ln_1p();
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut r1 = f(x1.exp());
    let mut r2 = f(x2.exp());
    for _ in 0..cfg.k_max_iter {
        if b - a <= tol {
            break;
        }
        if r1.value <= r2.value {
            b = x2;
            x2 = x1;
            r2 = r1.clone();
            x1 = b - inv_phi * (b - a);
            r1 = f(x1.exp());
        } else {
            a = x1;
            x1 = x2;
            r1 = r2.clone();
            x2 = a + inv_phi * (b - a);
            r2 = f(x2.exp());
        }
        for r in [&r1, &r2] {
            if r.is_better_than(&best) {
                best = r.clone();
            }
        }
    }
    best
}

/// Searches margins (and `K`, `T` where applicable) for the tightest
/// certificate of `kind` on `wp_init.theta()`.
///
/// Fixed-margin bounds pay for the grid with `δ → δ/N`; the GZ bound holds
/// uniformly over margins and pays nothing. Grid points run in parallel and
/// are reduced in grid order, so ties resolve to the smallest margin.
pub fn certify(
    p: &PredictionMatrix,
    wp_init: &WeightPosterior,
    spec: &BoundSpec,
    kind: BoundKind,
    cfg: &SearchConfig,
) -> Result<BoundResult, BoundError> {
    check_dims(p, wp_init.theta())?;
    let d = p.num_voters();
    let m = spec.m;
    let prior = spec.prior_for(d)?;
    let theta_raw = wp_init.theta();
    let grid = if kind.uses_gamma() { cfg.gamma_grid() } else { Vec::new() };
    if kind.uses_gamma() && grid.is_empty() {
        return Err(BoundError::BadSpec("empty margin grid".into()));
    }
    let delta = if kind.needs_grid_union() { spec.delta / grid.len() as f64 } else { spec.delta };
    let k0 = wp_init.k();

    let reduce = |results: Vec<BoundResult>| {
        let mut best: Option<BoundResult> = None;
        for r in results {
            if best.as_ref().is_none_or(|b| r.is_better_than(b)) {
                best = Some(r);
            }
        }
        best
    };

    let best = match kind {
        BoundKind::Thm1 => {
            let (theta, floored) = floor_theta(theta_raw);
            let stats = MarginStats::compute(p, &theta)?;
            let results: Vec<BoundResult> = grid
                .par_iter()
                .map(|&g| {
                    let loss = stats.loss(g);
                    let mut r = minimize_over_k(
                        |k| thm1_from_loss(loss, scaled_dir_kl(&theta, k, &prior), k, g, m, delta),
                        k0,
                        cfg,
                    );
                    r.flags.theta_floored = floored;
                    r
                })
                .collect();
            reduce(results)
        }
        BoundKind::Thm2 => {
            let (theta, floored) = floor_theta(theta_raw);
            let profile = MassProfile::compute(p, &theta)?;
            let results: Vec<BoundResult> = grid
                .par_iter()
                .map(|&g| {
                    let mut r = minimize_over_k(
                        |k| {
                            let dkl = scaled_dir_kl(&theta, k, &prior);
                            // the Beta losses are the costly part; skip them when
                            // the rest of the bound is already vacuous
                            let eps = (-4.0 * (k + 1.0) * g * g).exp();
                            let floor = kl_inv(0.0, (dkl.max(0.0) + ln_confidence(m, delta)) / m as f64) + eps;
                            if floor >= 1.0 || !dkl.is_finite() {
                                return thm2_from_loss(1.0, dkl, k, g, m, delta);
                            }
                            thm2_from_loss(profile.expected_margin_loss(k, g), dkl, k, g, m, delta)
                        },
                        k0,
                        cfg,
                    );
                    r.flags.theta_floored = floored;
                    r
                })
                .collect();
            reduce(results)
        }
        BoundKind::F2 => {
            let (theta, floored) = floor_theta(theta_raw);
            let profile = MassProfile::compute(p, &theta)?;
            let mut r = minimize_over_k(
                |k| f2_from_loss(profile.expected_margin_loss(k, 0.0), scaled_dir_kl(&theta, k, &prior), k, m, delta),
                k0,
                cfg,
            );
            r.flags.theta_floored = floored;
            Some(r)
        }
        BoundKind::Gz => {
            let stats = MarginStats::compute(p, theta_raw)?;
            let results: Vec<BoundResult> =
                grid.iter().filter_map(|&g| gz_from_loss(stats.loss(g), d, g, m, delta).ok()).collect();
            reduce(results)
        }
        BoundKind::BgPlus | BoundKind::BgOriginal | BoundKind::BgPlusPlus => {
            let stats = MarginStats::compute(p, theta_raw)?;
            let entropy = categorical_entropy(theta_raw);
            let results: Vec<BoundResult> = grid
                .par_iter()
                .map(|&g| {
                    let loss = stats.loss(g);
                    match kind {
                        BoundKind::BgPlus => bgplus_from_loss(loss, d, g, m, delta),
                        BoundKind::BgOriginal => bg_original_from_loss(loss, d, g, m, delta),
                        _ => {
                            let t_max = cfg.t_max.unwrap_or_else(|| bgplusplus_default_t_max(g, m));
                            bgplusplus_from_loss(loss, d, entropy, g, m, delta, t_max)
                        }
                    }
                })
                .collect();
            reduce(results)
        }
        BoundKind::Fo => Some(fo_from_loss(gibbs_loss(p, theta_raw), categorical_kl_uniform(theta_raw), m, delta)),
        BoundKind::So => Some(so_from_loss(tandem_loss(p, theta_raw), categorical_kl_uniform(theta_raw), m, delta)),
        BoundKind::Bin => Some(bin_from_loss(
            binomial_loss(p, theta_raw, cfg.bin_voters),
            categorical_kl_uniform(theta_raw),
            cfg.bin_voters,
            m,
            delta,
        )),
    };
    let mut best = best.unwrap_or_else(|| BoundResult::vacuous(kind, m, delta));
    if best.value >= 1.0 {
        best.flags.vacuous = true;
    }
    Ok(best)
}
