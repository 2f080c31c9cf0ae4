//! Voter predictions and the empirical loss functionals built on them.
//!
//! Classes are 1-based at the API boundary (`1..=c`) and stored 0-based.

use std::sync::OnceLock;

use thiserror::Error;

use crate::numkern::{binomial_tail, reg_inc_beta};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VotesError {
    #[error("prediction matrix needs at least one row")]
    NoRows,
    #[error("prediction matrix needs at least two voters, got {0}")]
    TooFewVoters(usize),
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("row {row}: expected {expected} predictions, got {got}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("row {row}: class {class} outside 1..={num_classes}")]
    ClassOutOfRange { row: usize, class: usize, num_classes: usize },
    #[error("weights: {0}")]
    BadWeights(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// An `m × d` table of class predictions together with the true labels.
#[derive(Debug)]
pub struct PredictionMatrix {
    preds: Vec<u32>,
    labels: Vec<u32>,
    m: usize,
    d: usize,
    num_classes: usize,
    voter_errors: Vec<f64>,
    tandem: OnceLock<Vec<f64>>,
}

impl Clone for PredictionMatrix {
    fn clone(&self) -> Self {
        Self {
            preds: self.preds.clone(),
            labels: self.labels.clone(),
            m: self.m,
            d: self.d,
            num_classes: self.num_classes,
            voter_errors: self.voter_errors.clone(),
            tandem: OnceLock::new(),
        }
    }
}

impl PartialEq for PredictionMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
            && self.d == other.d
            && self.num_classes == other.num_classes
            && self.labels == other.labels
            && self.preds == other.preds
    }
}

impl PredictionMatrix {
    /// Builds a matrix from per-example rows of 1-based class predictions.
    pub fn from_rows(rows: &[Vec<usize>], labels: &[usize], num_classes: usize) -> Result<Self, VotesError> {
        if rows.is_empty() {
            return Err(VotesError::NoRows);
        }
        if rows.len() != labels.len() {
            return Err(VotesError::LengthMismatch(rows.len(), labels.len()));
        }
        let d = rows[0].len();
        let mut flat = Vec::with_capacity(rows.len() * d);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(VotesError::Ragged { row: r, expected: d, got: row.len() });
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(flat, labels.to_vec(), d, num_classes)
    }

    /// Builds a matrix from a row-major buffer of 1-based predictions.
    pub fn from_flat(preds: Vec<usize>, labels: Vec<usize>, d: usize, num_classes: usize) -> Result<Self, VotesError> {
        if num_classes < 2 {
            return Err(VotesError::TooFewClasses(num_classes));
        }
        if d < 2 {
            return Err(VotesError::TooFewVoters(d));
        }
        let m = labels.len();
        if m == 0 {
            return Err(VotesError::NoRows);
        }
        if preds.len() != m * d {
            return Err(VotesError::LengthMismatch(preds.len(), m * d));
        }
        let check = |row: usize, class: usize| {
            if class == 0 || class > num_classes {
                Err(VotesError::ClassOutOfRange { row, class, num_classes })
            } else {
                Ok((class - 1) as u32)
            }
        };
        let labels = labels.iter().enumerate().map(|(r, &y)| check(r, y)).collect::<Result<Vec<_>, _>>()?;
        let preds = preds.iter().enumerate().map(|(i, &k)| check(i / d, k)).collect::<Result<Vec<_>, _>>()?;
        let mut wrong = vec![0usize; d];
        for r in 0..m {
            let y = labels[r];
            for (j, &p) in preds[r * d..(r + 1) * d].iter().enumerate() {
                if p != y {
                    wrong[j] += 1;
                }
            }
        }
        let voter_errors = wrong.iter().map(|&w| w as f64 / m as f64).collect();
        Ok(Self { preds, labels, m, d, num_classes, voter_errors, tandem: OnceLock::new() })
    }

    pub fn num_rows(&self) -> usize {
        self.m
    }

    pub fn num_voters(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// 1-based prediction of voter `j` on row `r`.
    pub fn pred(&self, r: usize, j: usize) -> usize {
        self.preds[r * self.d + j] as usize + 1
    }

    /// 1-based label of row `r`.
    pub fn label(&self, r: usize) -> usize {
        self.labels[r] as usize + 1
    }

    /// 1-based predictions of row `r`.
    pub fn row(&self, r: usize) -> Vec<usize> {
        self.raw_row(r).iter().map(|&k| k as usize + 1).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&y| y as usize + 1).collect()
    }

    pub(crate) fn raw_row(&self, r: usize) -> &[u32] {
        &self.preds[r * self.d..(r + 1) * self.d]
    }

    pub(crate) fn raw_label(&self, r: usize) -> u32 {
        self.labels[r]
    }

    /// Empirical 0-1 error of each voter.
    pub fn voter_errors(&self) -> &[f64] {
        &self.voter_errors
    }

    /// Rows restricted to `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self, VotesError> {
        let mut preds = Vec::with_capacity(idx.len() * self.d);
        let mut labels = Vec::with_capacity(idx.len());
        for &r in idx {
            preds.extend(self.raw_row(r).iter().map(|&k| k as usize + 1));
            labels.push(self.label(r));
        }
        Self::from_flat(preds, labels, self.d, self.num_classes)
    }

    /// `d × d` row-major table of joint error rates.
    pub fn tandem_matrix(&self) -> &[f64] {
        self.tandem.get_or_init(|| {
            let d = self.d;
            let mut counts = vec![0u64; d * d];
            let mut wrong = Vec::with_capacity(d);
            for r in 0..self.m {
                let y = self.labels[r];
                wrong.clear();
                wrong.extend(self.raw_row(r).iter().enumerate().filter(|(_, &p)| p != y).map(|(j, _)| j));
                for &i in &wrong {
                    for &j in &wrong {
                        counts[i * d + j] += 1;
                    }
                }
            }
            counts.iter().map(|&c| c as f64 / self.m as f64).collect()
        })
    }

    /// Weight of voters predicting the true label on row `r`, and weight on the rest.
    pub fn split_mass(&self, r: usize, weights: &[f64]) -> (f64, f64) {
        let y = self.labels[r];
        let mut right = 0.0;
        let mut wrong = 0.0;
        for (&p, &w) in self.raw_row(r).iter().zip(weights) {
            if p == y {
                right += w;
            } else {
                wrong += w;
            }
        }
        (right, wrong)
    }

    fn class_sums(&self, r: usize, weights: &[f64], sums: &mut [f64]) {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (&p, &w) in self.raw_row(r).iter().zip(weights) {
            sums[p as usize] += w;
        }
    }
}

/// Simplex weights `θ` and a concentration `K`; the Dirichlet proxy has `α = Kθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPosterior {
    theta: Vec<f64>,
    k: f64,
}

impl WeightPosterior {
    /// Normalises non-negative weights onto the simplex.
    pub fn new(weights: Vec<f64>, k: f64) -> Result<Self, VotesError> {
        if weights.len() < 2 {
            return Err(VotesError::TooFewVoters(weights.len()));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(VotesError::BadWeights(format!("concentration {k} must be positive and finite")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(VotesError::BadWeights("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(VotesError::BadWeights("weights sum to zero".into()));
        }
        Ok(Self { theta: weights.into_iter().map(|w| w / total).collect(), k })
    }

    pub fn uniform(d: usize, k: f64) -> Result<Self, VotesError> {
        Self::new(vec![1.0; d], k)
    }

    /// Posterior with `θ = α / Σα` and `K = Σα`.
    pub fn from_alpha(alpha: &[f64]) -> Result<Self, VotesError> {
        let k: f64 = alpha.iter().sum();
        Self::new(alpha.to_vec(), k)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t * self.k).collect()
    }

    pub fn with_k(&self, k: f64) -> Result<Self, VotesError> {
        Self::new(self.theta.clone(), k)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Per-row margins of a fixed weight vector, with a sorted copy for fast
/// threshold counting.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginStats {
    margins: Vec<f64>,
    sorted: Vec<f64>,
}

impl MarginStats {
    pub fn compute(p: &PredictionMatrix, theta: &[f64]) -> Result<Self, VotesError> {
        if theta.len() != p.num_voters() {
            return Err(VotesError::LengthMismatch(theta.len(), p.num_voters()));
        }
        let mut sums = vec![0.0; p.num_classes()];
        let margins: Vec<f64> = (0..p.num_rows()).map(|r| row_margin(p, r, theta, &mut sums)).collect();
        let mut sorted = margins.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { margins, sorted })
    }

    pub fn margins(&self) -> &[f64] {
        &self.margins
    }

    /// Fraction of rows with margin `≤ γ`.
    pub fn loss(&self, gamma: f64) -> f64 {
        self.sorted.partition_point(|&x| x <= gamma) as f64 / self.sorted.len() as f64
    }
}

fn row_margin(p: &PredictionMatrix, r: usize, theta: &[f64], sums: &mut [f64]) -> f64 {
    p.class_sums(r, theta, sums);
    let y = p.raw_label(r) as usize;
    let rival = sums.iter().enumerate().filter(|(k, _)| *k != y).map(|(_, &s)| s).fold(0.0, f64::max);
    (0.5 * sums[y] - 0.5 * rival).clamp(-0.5, 0.5)
}

/// `M(θ, x_r, y_r)`: half the gap between the weight on the true class and
/// the heaviest other class.
pub fn margin(wp: &WeightPosterior, row: usize, p: &PredictionMatrix) -> f64 {
    let mut sums = vec![0.0; p.num_classes()];
    row_margin(p, row, wp.theta(), &mut sums)
}

/// Fraction of rows whose margin is at most `γ`; at `γ = 0` this is the
/// majority-vote training error with ties counted as mistakes.
pub fn empirical_margin_loss(p: &PredictionMatrix, wp: &WeightPosterior, gamma: f64) -> f64 {
    let mut sums = vec![0.0; p.num_classes()];
    let hits = (0..p.num_rows()).filter(|&r| row_margin(p, r, wp.theta(), &mut sums) <= gamma).count();
    hits as f64 / p.num_rows() as f64
}

/// Expected 0-1 risk of a voter drawn from `θ`.
pub fn gibbs_loss(p: &PredictionMatrix, theta: &[f64]) -> f64 {
    theta.iter().zip(p.voter_errors()).map(|(t, e)| t * e).sum()
}

/// `θᵀ M θ` where `M_ij` is the rate at which voters `i` and `j` err together.
pub fn tandem_loss(p: &PredictionMatrix, theta: &[f64]) -> f64 {
    let d = p.num_voters();
    let m = p.tandem_matrix();
    let mut acc = 0.0;
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        let inner: f64 = row.iter().zip(theta).map(|(a, t)| a * t).sum();
        acc += theta[i] * inner;
    }
    acc
}

/// Per-row weight of wrong voters, `Σ_{h_i(x) ≠ y} θ_i`, clamped to `[0, 1]`.
pub fn error_mass(p: &PredictionMatrix, theta: &[f64]) -> Vec<f64> {
    (0..p.num_rows()).map(|r| p.split_mass(r, theta).1.clamp(0.0, 1.0)).collect()
}

/// Mean over rows of the probability that at least `⌈N/2⌉` of `N` voters
/// drawn from `θ` are wrong.
pub fn binomial_loss(p: &PredictionMatrix, theta: &[f64], n: u64) -> f64 {
    let k0 = n.div_ceil(2) as i64;
    let total: f64 = error_mass(p, theta).iter().map(|&e| binomial_tail(n, e, k0)).sum();
    total / p.num_rows() as f64
}

/// `I_{½+γ}(a_y, a_¬y)`: the chance that a `Dirichlet(α)` draw leaves margin
/// at most `γ` on a binary row with correct mass `a_y`.
pub fn beta_margin_term(a_right: f64, a_wrong: f64, gamma: f64) -> f64 {
    let z = 0.5 + gamma;
    if z >= 1.0 || a_right <= 0.0 {
        return 1.0;
    }
    if a_wrong <= 0.0 {
        return 0.0;
    }
    reg_inc_beta(z.max(0.0), a_right, a_wrong).unwrap_or(f64::NAN)
}

/// Mean over rows of `I_{½+γ}(a_y, a_¬y)` where `a_y` sums `α` over voters
/// predicting the label. Exact expected margin loss for two classes, an
/// upper bound otherwise.
pub fn expected_margin_loss_beta(p: &PredictionMatrix, alpha: &[f64], gamma: f64) -> f64 {
    let total: f64 = (0..p.num_rows())
        .map(|r| {
            let (a, b) = p.split_mass(r, alpha);
            beta_margin_term(a, b, gamma)
        })
        .sum();
    total / p.num_rows() as f64
}

/// [`expected_margin_loss_beta`] at `γ = 0`.
pub fn expected_zero_one_loss_beta(p: &PredictionMatrix, alpha: &[f64]) -> f64 {
    expected_margin_loss_beta(p, alpha, 0.0)
}

/// Distinct `(correct mass, wrong mass)` pairs of a weight vector with their
/// row counts, so Beta-CDF losses are evaluated once per distinct row.
#[derive(Debug, Clone, PartialEq)]
pub struct MassProfile {
    pairs: Vec<(f64, f64, u32)>,
    m: usize,
}

impl MassProfile {
    pub fn compute(p: &PredictionMatrix, theta: &[f64]) -> Result<Self, VotesError> {
        if theta.len() != p.num_voters() {
            return Err(VotesError::LengthMismatch(theta.len(), p.num_voters()));
        }
        let mut raw: Vec<(f64, f64)> = (0..p.num_rows()).map(|r| p.split_mass(r, theta)).collect();
        raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut pairs: Vec<(f64, f64, u32)> = Vec::new();
        for (a, b) in raw {
            match pairs.last_mut() {
                Some(last) if last.0 == a && last.1 == b => last.2 += 1,
                _ => pairs.push((a, b, 1)),
            }
        }
        Ok(Self { pairs, m: p.num_rows() })
    }

    /// Distinct `(correct, wrong, count)` triples, ordered by correct mass.
    pub fn pairs(&self) -> &[(f64, f64, u32)] {
        &self.pairs
    }

    pub fn num_rows(&self) -> usize {
        self.m
    }

    /// Mean of `I_{½+γ}(K·correct, K·wrong)` over rows.
    pub fn expected_margin_loss(&self, k: f64, gamma: f64) -> f64 {
        let total: f64 = self.pairs.iter().map(|&(a, b, n)| n as f64 * beta_margin_term(k * a, k * b, gamma)).sum();
        total / self.m as f64
    }
}

/// 1-based majority-vote prediction for each row, smallest class on ties.
pub fn majority_vote(p: &PredictionMatrix, theta: &[f64]) -> Vec<usize> {
    let mut sums = vec![0.0; p.num_classes()];
    (0..p.num_rows())
        .map(|r| {
            p.class_sums(r, theta, &mut sums);
            argmax_first(&sums) + 1
        })
        .collect()
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Test error of `f_θ` with smallest-index tie-breaking.
pub fn majority_vote_error(p: &PredictionMatrix, theta: &[f64]) -> f64 {
    let wrong = majority_vote(p, theta).iter().enumerate().filter(|(r, &k)| k != p.label(*r)).count();
    wrong as f64 / p.num_rows() as f64
}
