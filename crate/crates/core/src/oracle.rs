//! Monte Carlo checks of the probabilistic statements behind the bounds.
//!
//! Everything here recomputes losses directly per sampled weight vector and
//! touches the production code only through `numkern` special functions (and,
//! for the sharpness check, the closed form being verified).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkern::{reg_inc_beta, ConcentrationVector, NumError};
use crate::votes::{expected_margin_loss_beta, PredictionMatrix};

/// Draws per parallel work unit. Results do not depend on the thread count.
const CHUNK: usize = 4096;

const STREAM_DIRICHLET: u64 = 1;
const STREAM_AGGREGATION: u64 = 2;
const STREAM_MARCHAL_ARBEL: u64 = 3;
const STREAM_THM3: u64 = 4;
const STREAM_SHARPNESS: u64 = 5;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("need at least one sample")]
    NoSamples,
    #[error("direction vector has norm {0}, expected 1")]
    NotUnit(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("partition must cover each coordinate exactly once")]
    BadPartition,
    #[error("invalid parameter {name} = {value}")]
    BadParam { name: &'static str, value: f64 },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// How an estimate is compared with the claimed value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Fails only on evidence of `estimate > claim`: `estimate − 3se ≤ claim`.
    AtMost,
    /// Fails only on evidence of `estimate < claim`: `estimate + 3se ≥ claim`.
    AtLeast,
    /// Requires `estimate + 3se ≤ claim`.
    ConfidentlyAtMost,
    /// `|estimate − claim| ≤ 3se`.
    Equal,
}

impl Rule {
    pub fn holds(self, estimate: f64, stderr: f64, claim: f64) -> bool {
        let s = 3.0 * stderr;
        match self {
            Rule::AtMost => estimate - s <= claim,
            Rule::AtLeast => estimate + s >= claim,
            Rule::ConfidentlyAtMost => estimate + s <= claim,
            Rule::Equal => (estimate - claim).abs() <= s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub check: String,
    pub estimate: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub claim_bound: f64,
    pub rule: Rule,
    pub pass: bool,
}

impl McReport {
    fn new(check: impl Into<String>, estimate: f64, stderr: f64, n_samples: usize, claim_bound: f64, rule: Rule) -> Self {
        let pass = rule.holds(estimate, stderr, claim_bound);
        Self { check: check.into(), estimate, stderr, n_samples, claim_bound, rule, pass }
    }

    /// The same report judged against a different claim.
    pub fn with_claim_bound(&self, claim_bound: f64) -> McReport {
        McReport::new(self.check.clone(), self.estimate, self.stderr, self.n_samples, claim_bound, self.rule)
    }

    /// Distance to the decision boundary in stderr units; positive when passing.
    pub fn effect(&self) -> f64 {
        let gap = match self.rule {
            Rule::AtMost | Rule::ConfidentlyAtMost => self.claim_bound - self.estimate,
            Rule::AtLeast => self.estimate - self.claim_bound,
            Rule::Equal => -(self.estimate - self.claim_bound).abs(),
        };
        let offset = match self.rule {
            Rule::ConfidentlyAtMost => -3.0,
            _ => 3.0,
        };
        if self.stderr > 0.0 {
            gap / self.stderr + offset
        } else if gap >= 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Running mean and squared deviations, mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if o.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments { n, mean: self.mean + d * o.n / n, m2: self.m2 + o.m2 + d * d * self.n * o.n / n }
    }

    /// Standard error of the mean.
    fn stderr(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        (self.m2.max(0.0) / (self.n - 1.0) / self.n).sqrt()
    }
}

fn chunk_rng(seed: u64, oracle: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((oracle << 40) | chunk as u64);
    rng
}

/// `ln G` for `G ~ Gamma(shape, 1)`; `-∞` for shape 0.
fn log_gamma_variate<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if shape < 1.0 {
        // G(a) = G(a+1)·U^{1/a}
        let u: f64 = 1.0 - rng.random::<f64>();
        return log_gamma_variate(rng, shape + 1.0) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = 1.0 - rng.random::<f64>();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return (d * v).ln();
        }
    }
}

/// One Dirichlet draw written into `out`, normalised in log space.
fn dirichlet_into<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64], out: &mut [f64]) {
    let mut top = f64::NEG_INFINITY;
    for (o, &a) in out.iter_mut().zip(alpha) {
        *o = log_gamma_variate(rng, a);
        top = top.max(*o);
    }
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - top).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Runs `f` on every draw of `n` Dirichlet samples, chunk by chunk in
/// parallel, and returns the per-chunk accumulators in chunk order.
fn for_each_draw<A, F>(alpha: &[f64], n: usize, seed: u64, oracle: u64, init: A, f: F) -> Vec<A>
where
    A: Clone + Send + Sync,
    F: Fn(&mut A, &[f64]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, oracle, c);
            let mut acc = init.clone();
            let mut xi = vec![0.0; alpha.len()];
            let len = CHUNK.min(n - c * CHUNK);
            for _ in 0..len {
                dirichlet_into(&mut rng, alpha, &mut xi);
                f(&mut acc, &xi);
            }
            acc
        })
        .collect()
}

fn moments_of_draws<F>(alpha: &[f64], n: usize, seed: u64, oracle: u64, f: F) -> Moments
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    for_each_draw(alpha, n, seed, oracle, Moments::default(), |m, xi| m.push(f(xi)))
        .into_iter()
        .fold(Moments::default(), Moments::merge)
}

/// `n` i.i.d. Dirichlet(α) draws, row-major `n × d`.
pub fn sample_dirichlet(alpha: &ConcentrationVector, n: usize, seed: u64) -> Result<Vec<f64>, OracleError> {
    if n == 0 {
        return Err(OracleError::NoSamples);
    }
    let a = alpha.as_slice();
    let rows = for_each_draw(a, n, seed, STREAM_DIRICHLET, Vec::new(), |buf: &mut Vec<f64>, xi| buf.extend_from_slice(xi));
    Ok(rows.concat())
}

/// Two-sided Kolmogorov–Smirnov statistic of `xs` against `cdf`.
pub fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov critical value at level `level` for `n` samples.
pub fn ks_critical(level: f64, n: usize) -> f64 {
    (-0.5 * (level / 2.0).ln()).sqrt() / (n as f64).sqrt()
}

/// Block sums of Dirichlet draws against Beta marginals with summed
/// parameters. The estimate is the largest KS statistic over the blocks and
/// the claim is the 1% critical value, Bonferroni-split across blocks.
/// `partition` holds 0-based coordinate indices.
pub fn verify_aggregation(alpha: &ConcentrationVector, partition: &[Vec<usize>], n: usize, seed: u64) -> Result<McReport, OracleError> {
    if n == 0 {
        return Err(OracleError::NoSamples);
    }
    let a = alpha.as_slice();
    let d = a.len();
    let mut seen = vec![false; d];
    for &i in partition.iter().flatten() {
        if i >= d || seen[i] {
            return Err(OracleError::BadPartition);
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(OracleError::BadPartition);
    }
    let blocks: Vec<&Vec<usize>> = partition.iter().filter(|b| !b.is_empty() && b.len() < d).collect();
    let sums = for_each_draw(a, n, seed, STREAM_AGGREGATION, Vec::new(), |buf: &mut Vec<f64>, xi| {
        buf.extend(blocks.iter().map(|b| b.iter().map(|&i| xi[i]).sum::<f64>()))
    })
    .concat();
    let total = alpha.total();
    let nb = blocks.len();
    let mut worst: f64 = 0.0;
    for (k, b) in blocks.iter().enumerate() {
        let ab: f64 = b.iter().map(|&i| a[i]).sum();
        let mut xs: Vec<f64> = (0..n).map(|r| sums[r * nb + k]).collect();
        let stat = ks_statistic(&mut xs, |x| reg_inc_beta(x.clamp(0.0, 1.0), ab, total - ab).unwrap_or(f64::NAN));
        worst = worst.max(stat);
    }
    let crit = ks_critical(0.01 / nb.max(1) as f64, n);
    Ok(McReport::new("aggregation", worst, 0.0, n, crit, Rule::AtMost))
}

/// Tail `Pr{u·(X − E X) > t}` against `exp(−2(Σα + 1)t²)`.
pub fn verify_marchal_arbel(alpha: &ConcentrationVector, u: &[f64], t: f64, n: usize, seed: u64) -> Result<McReport, OracleError> {
    if n == 0 {
        return Err(OracleError::NoSamples);
    }
    let a = alpha.as_slice();
    if u.len() != a.len() {
        return Err(OracleError::Dim { expected: a.len(), got: u.len() });
    }
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(OracleError::NotUnit(norm));
    }
    if !(t > 0.0) {
        return Err(OracleError::BadParam { name: "t", value: t });
    }
    let total = alpha.total();
    let centre: f64 = u.iter().zip(a).map(|(ui, ai)| ui * ai / total).sum();
    let m = moments_of_draws(a, n, seed, STREAM_MARCHAL_ARBEL, |xi| {
        let proj: f64 = u.iter().zip(xi).map(|(ui, x)| ui * x).sum();
        if proj - centre > t { 1.0 } else { 0.0 }
    });
    let claim = (-2.0 * (total + 1.0) * t * t).exp();
    Ok(McReport::new("marchal_arbel", m.mean, m.stderr(), n, claim, Rule::ConfidentlyAtMost))
}

/// Predictions and labels as 0-based arrays, read through the public API.
struct RawVotes {
    preds: Vec<usize>,
    labels: Vec<usize>,
    d: usize,
    c: usize,
}

impl RawVotes {
    fn new(p: &PredictionMatrix) -> Self {
        let (m, d) = (p.num_rows(), p.num_voters());
        let mut preds = Vec::with_capacity(m * d);
        for r in 0..m {
            preds.extend((0..d).map(|j| p.pred(r, j) - 1));
        }
        let labels = (0..m).map(|r| p.label(r) - 1).collect();
        Self { preds, labels, d, c: p.num_classes() }
    }

    /// Fraction of rows whose margin under `w` is at most `gamma`.
    fn margin_loss(&self, w: &[f64], gamma: f64, scratch: &mut [f64]) -> f64 {
        let m = self.labels.len();
        let mut bad = 0usize;
        for (r, &y) in self.labels.iter().enumerate() {
            scratch.iter_mut().for_each(|s| *s = 0.0);
            for (j, &k) in self.preds[r * self.d..(r + 1) * self.d].iter().enumerate() {
                scratch[k] += w[j];
            }
            let rival = scratch.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &s)| s).fold(f64::NEG_INFINITY, f64::max);
            if 0.5 * (scratch[y] - rival) <= gamma {
                bad += 1;
            }
        }
        bad as f64 / m as f64
    }
}

fn check_weights(p: &PredictionMatrix, w: &[f64]) -> Result<(), OracleError> {
    if w.len() != p.num_voters() {
        return Err(OracleError::Dim { expected: p.num_voters(), got: w.len() });
    }
    if p.num_rows() == 0 {
        return Err(OracleError::NoSamples);
    }
    Ok(())
}

/// The two sides of the stochastic/deterministic sandwich: with
/// `ε = e^{−4(K+1)γ²}` and `E = E_{ξ∼Dir(Kθ)} L̂_γ(ξ)`, checks
/// `L̂_0(θ) ≤ E + ε` and `E ≤ L̂_{2γ}(θ) + ε`.
pub fn verify_thm3(p: &PredictionMatrix, theta: &[f64], k: f64, gamma: f64, n: usize, seed: u64) -> Result<(McReport, McReport), OracleError> {
    check_weights(p, theta)?;
    if n == 0 {
        return Err(OracleError::NoSamples);
    }
    if !(gamma > 0.0) {
        return Err(OracleError::BadParam { name: "gamma", value: gamma });
    }
    if !(k > 0.0) {
        return Err(OracleError::BadParam { name: "k", value: k });
    }
    let raw = RawVotes::new(p);
    let mut scratch = vec![0.0; raw.c];
    let l0 = raw.margin_loss(theta, 0.0, &mut scratch);
    let l2g = raw.margin_loss(theta, 2.0 * gamma, &mut scratch);
    let alpha: Vec<f64> = theta.iter().map(|t| k * t).collect();
    let m = moments_of_draws(&alpha, n, seed, STREAM_THM3, |xi| raw.margin_loss(xi, gamma, &mut vec![0.0; raw.c]));
    let eps = (-4.0 * (k + 1.0) * gamma * gamma).exp();
    let lower = McReport::new("thm3_lower", m.mean, m.stderr(), n, l0 - eps, Rule::AtLeast);
    let upper = McReport::new("thm3_upper", m.mean, m.stderr(), n, l2g + eps, Rule::AtMost);
    Ok((lower, upper))
}

/// MC estimate of `E_{ξ∼Dir(α)} L̂_γ(ξ)` against the Beta closed form: an
/// equality for two classes, an upper bound otherwise.
pub fn verify_beta_sharpness(p: &PredictionMatrix, alpha: &ConcentrationVector, gamma: f64, n: usize, seed: u64) -> Result<McReport, OracleError> {
    let a = alpha.as_slice();
    check_weights(p, a)?;
    if n == 0 {
        return Err(OracleError::NoSamples);
    }
    let raw = RawVotes::new(p);
    let m = moments_of_draws(a, n, seed, STREAM_SHARPNESS, |xi| raw.margin_loss(xi, gamma, &mut vec![0.0; raw.c]));
    let claim = expected_margin_loss_beta(p, a, gamma);
    let rule = if p.num_classes() == 2 { Rule::Equal } else { Rule::AtMost };
    Ok(McReport::new("beta_sharpness", m.mean, m.stderr(), n, claim, rule))
}

/// One report of a battery together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub battery: String,
    pub index: usize,
    pub config: String,
    pub report: McReport,
}

impl BatteryEntry {
    fn new(battery: &str, index: usize, config: String, report: McReport) -> Self {
        Self { battery: battery.to_string(), index, config, report }
    }
}

/// Labels uniform over classes; each voter is right with probability `acc`,
/// otherwise picks a wrong class uniformly.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, m: usize, d: usize, c: usize, acc: f64) -> PredictionMatrix {
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(1..=c)).collect();
    let mut preds = Vec::with_capacity(m * d);
    for &y in &labels {
        for _ in 0..d {
            if rng.random::<f64>() < acc {
                preds.push(y);
            } else {
                let k = rng.random_range(1..c);
                preds.push(if k >= y { k + 1 } else { k });
            }
        }
    }
    PredictionMatrix::from_flat(preds, labels, d, c).expect("generated matrix is well formed")
}

fn battery_rng(seed: u64, oracle: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(oracle << 40 | 0xFF_FFFF_FFFF);
    rng
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(" "))
}

/// The fixed aggregation examples: a trivial two-coordinate split, a
/// singleton against a pair under a flat Dirichlet, and an uneven split.
pub fn aggregation_battery(n: usize, seed: u64) -> Result<Vec<BatteryEntry>, OracleError> {
    let cases: [(Vec<f64>, Vec<Vec<usize>>); 3] = [
        (vec![2.0, 3.0], vec![vec![0], vec![1]]),
        (vec![1.0, 1.0, 1.0], vec![vec![0], vec![1, 2]]),
        (vec![0.5, 2.0, 3.5], vec![vec![0, 1], vec![2]]),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (a, part))| {
            let cfg = format!("alpha={} blocks={part:?}", fmt_vec(&a));
            let r = verify_aggregation(&ConcentrationVector::new(a)?, &part, n, seed.wrapping_add(i as u64))?;
            Ok(BatteryEntry::new("aggregation", i, cfg, r))
        })
        .collect()
}

/// Random `(α, u, t)`: `d ∈ [2, 10)`, `α_i = 10^U(−1,1)`, `u` a normalised
/// uniform vector on `[−1, 1]^d`, `t ~ U(0.01, 0.6)`.
pub fn marchal_arbel_battery(configs: usize, n: usize, seed: u64) -> Result<Vec<BatteryEntry>, OracleError> {
    let mut rng = battery_rng(seed, STREAM_MARCHAL_ARBEL);
    let mut out = Vec::with_capacity(configs);
    for i in 0..configs {
        let d = rng.random_range(2..10);
        let a: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
        let mut u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        let t = rng.random_range(0.01..0.6);
        let cfg = format!("alpha={} u={} t={t:.6}", fmt_vec(&a), fmt_vec(&u));
        let r = verify_marchal_arbel(&ConcentrationVector::new(a)?, &u, t, n, seed.wrapping_add(i as u64))?;
        out.push(BatteryEntry::new("marchal_arbel", i, cfg, r));
    }
    Ok(out)
}

/// Random configurations over `d ∈ {5, 20, 100}`, `c ∈ {2, 3}`,
/// `K ∈ {5, 50, 500}`, `γ ∈ {0.02, 0.05, 0.1}` on 50-row random matrices with
/// `θ` uniform on the simplex. Two entries per configuration.
pub fn thm3_battery(configs: usize, n: usize, seed: u64) -> Result<Vec<BatteryEntry>, OracleError> {
    let mut rng = battery_rng(seed, STREAM_THM3);
    let mut out = Vec::with_capacity(2 * configs);
    for i in 0..configs {
        let d = [5, 20, 100][rng.random_range(0..3)];
        let c = [2, 3][rng.random_range(0..2)];
        let k = [5.0, 50.0, 500.0][rng.random_range(0..3)];
        let g = [0.02, 0.05, 0.1][rng.random_range(0..3)];
        let acc = rng.random_range(0.4..0.8);
        let p = random_matrix(&mut rng, 50, d, c, acc);
        let theta = sample_dirichlet(&ConcentrationVector::ones(d), 1, rng.random())?;
        let cfg = format!("d={d} c={c} K={k} gamma={g} acc={acc:.4}");
        let (lo, hi) = verify_thm3(&p, &theta, k, g, n, seed.wrapping_add(i as u64))?;
        out.push(BatteryEntry::new("thm3", i, cfg.clone(), lo));
        out.push(BatteryEntry::new("thm3", i, cfg, hi));
    }
    Ok(out)
}

/// Random binary matrices (20 rows, `d ∈ [3, 15)`) with `α_i = 10^U(−1,1)`
/// and `γ ~ U(0, 0.3)`; with `multiclass` one extra three-class case.
pub fn sharpness_battery(configs: usize, n: usize, seed: u64, multiclass: bool) -> Result<Vec<BatteryEntry>, OracleError> {
    let mut rng = battery_rng(seed, STREAM_SHARPNESS);
    let mut out = Vec::with_capacity(configs + 1);
    let total = configs + usize::from(multiclass);
    for i in 0..total {
        let c = if i < configs { 2 } else { 3 };
        let d = rng.random_range(3..15);
        let acc = rng.random_range(0.4..0.8);
        let p = random_matrix(&mut rng, 20, d, c, acc);
        let a: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
        let g = rng.random_range(0.0..0.3);
        let cfg = format!("c={c} d={d} alpha={} gamma={g:.6}", fmt_vec(&a));
        let r = verify_beta_sharpness(&p, &ConcentrationVector::new(a)?, g, n, seed.wrapping_add(i as u64))?;
        out.push(BatteryEntry::new("beta_sharpness", i, cfg, r));
    }
    Ok(out)
}
