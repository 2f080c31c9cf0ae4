//! Base classifiers: decision stumps, a small random forest, and
//! prediction tables supplied from outside.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::votes::{PredictionMatrix, VotesError};

#[derive(Debug, Error)]
pub enum VotersError {
    #[error("stumps need a binary task, got {0} classes")]
    NotBinary(usize),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no examples to evaluate")]
    Empty,
    #[error("a forest needs at least two examples, got {0}")]
    TooFewExamples(usize),
    #[error("invalid forest configuration: {0}")]
    BadConfig(String),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error(transparent)]
    Votes(#[from] VotesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Anything that maps a feature row to one class per voter.
pub trait VoterSet {
    fn num_voters(&self) -> usize;
    fn num_features(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Writes the 1-based prediction of every voter on `x` into `out`.
    fn predict_into(&self, x: &[f64], out: &mut [usize]);
}

/// `x[feature] > threshold ? above : below`, classes 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub above: usize,
    pub below: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StumpEnsemble {
    pub stumps: Vec<Stump>,
    num_features: usize,
}

/// Default thresholds per feature.
pub const STUMP_THRESHOLDS: usize = 6;

/// Evenly spaced thresholds `min + k (max − min)/(t + 1)`, `k = 1..=t`, per
/// feature, each used with both class orientations: `2 t p` stumps for `p`
/// features, ordered by feature, then threshold, then orientation.
pub fn make_stumps(ds: &Dataset, thresholds_per_feature: usize) -> Result<StumpEnsemble, VotersError> {
    if ds.num_classes() != 2 {
        return Err(VotersError::NotBinary(ds.num_classes()));
    }
    if ds.num_rows() == 0 {
        return Err(VotersError::Empty);
    }
    let p = ds.num_features();
    let mut stumps = Vec::with_capacity(2 * thresholds_per_feature * p);
    for f in 0..p {
        let (lo, hi) = (0..ds.num_rows())
            .map(|r| ds.row(r)[f])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        for k in 1..=thresholds_per_feature {
            let threshold = lo + k as f64 * (hi - lo) / (thresholds_per_feature + 1) as f64;
            stumps.push(Stump { feature: f, threshold, above: 1, below: 2 });
            stumps.push(Stump { feature: f, threshold, above: 2, below: 1 });
        }
    }
    Ok(StumpEnsemble { stumps, num_features: p })
}

impl VoterSet for StumpEnsemble {
    fn num_voters(&self) -> usize {
        self.stumps.len()
    }

    fn num_features(&self) -> usize {
        self.num_features
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn predict_into(&self, x: &[f64], out: &mut [usize]) {
        for (o, s) in out.iter_mut().zip(&self.stumps) {
            *o = if x[s.feature] > s.threshold { s.above } else { s.below };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub num_trees: usize,
    /// Bag size as a fraction of the training rows, drawn with replacement.
    pub bag_fraction: f64,
    /// Features per tree; `None` uses `⌊√p⌋`.
    pub features_per_tree: Option<usize>,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { num_trees: 10, bag_fraction: 0.5, features_per_tree: None, max_depth: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// 1-based class.
    Leaf(usize),
    /// Rows with `x[feature] ≤ threshold` go to `left`.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
    /// Features this tree was allowed to split on, ascending.
    pub features: Vec<usize>,
    /// Training rows in the bag, with repetition.
    pub bag: Vec<usize>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(k) => return k,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    num_features: usize,
    num_classes: usize,
}

impl VoterSet for Forest {
    fn num_voters(&self) -> usize {
        self.trees.len()
    }

    fn num_features(&self) -> usize {
        self.num_features
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict_into(&self, x: &[f64], out: &mut [usize]) {
        for (o, t) in out.iter_mut().zip(&self.trees) {
            *o = t.predict(x);
        }
    }
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best + 1
}

/// Gini comparisons in exact integer arithmetic: a node set's purity
/// `Σ_nodes Σ_k c_k² / n_node` as a fraction.
#[derive(Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn node(counts: &[usize]) -> Self {
        let n: usize = counts.iter().sum();
        Self { num: counts.iter().map(|&c| (c * c) as u128).sum(), den: n as u128 }
    }

    fn pair(left: &[usize], right: &[usize]) -> Self {
        let (l, r) = (Self::node(left), Self::node(right));
        Self { num: l.num * r.den + r.num * l.den, den: l.den * r.den }
    }

    fn exceeds(self, other: Self) -> bool {
        self.num * other.den > other.num * self.den
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    score: Purity,
}

fn best_split(ds: &Dataset, rows: &[usize], features: &[usize], counts: &[usize]) -> Option<SplitChoice> {
    let c = counts.len();
    let n = rows.len();
    let parent = Purity::node(counts);
    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut left = vec![0usize; c];
    let mut right = vec![0usize; c];
    for &f in features {
        order.clear();
        order.extend(rows.iter().map(|&r| (ds.row(r)[f], ds.labels()[r] - 1)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        left.iter_mut().for_each(|x| *x = 0);
        right.copy_from_slice(counts);
        for i in 0..n - 1 {
            let (v, y) = order[i];
            left[y] += 1;
            right[y] -= 1;
            let next = order[i + 1].0;
            if next == v {
                continue;
            }
            let score = Purity::pair(&left, &right);
            // Gini gain is positive exactly when the children are purer
            if score.exceeds(parent) && best.as_ref().is_none_or(|b| score.exceeds(b.score)) {
                best = Some(SplitChoice { feature: f, threshold: 0.5 * (v + next), score });
            }
        }
    }
    best
}

fn grow_tree(ds: &Dataset, bag: Vec<usize>, features: Vec<usize>, max_depth: Option<usize>) -> Tree {
    let c = ds.num_classes();
    let mut nodes = vec![Node::Leaf(1)];
    let mut stack = vec![(0usize, bag.clone(), 0usize)];
    while let Some((at, rows, depth)) = stack.pop() {
        let mut counts = vec![0usize; c];
        for &r in &rows {
            counts[ds.labels()[r] - 1] += 1;
        }
        let leaf = Node::Leaf(majority(&counts));
        let pure = counts.iter().filter(|&&k| k > 0).count() <= 1;
        if pure || max_depth.is_some_and(|m| depth >= m) {
            nodes[at] = leaf;
            continue;
        }
        match best_split(ds, &rows, &features, &counts) {
            None => nodes[at] = leaf,
            Some(s) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| ds.row(i)[s.feature] <= s.threshold);
                let li = nodes.len();
                nodes.push(Node::Leaf(1));
                nodes.push(Node::Leaf(1));
                nodes[at] = Node::Split { feature: s.feature, threshold: s.threshold, left: li, right: li + 1 };
                stack.push((li + 1, r, depth + 1));
                stack.push((li, l, depth + 1));
            }
        }
    }
    Tree { nodes, features, bag }
}

/// Trains `num_trees` Gini trees, each on its own bag and feature subset.
/// Tree `t` draws from ChaCha8 stream `t` of `seed`, so the ensemble is
/// reproducible and independent of thread scheduling.
pub fn train_forest(ds: &Dataset, cfg: &ForestConfig) -> Result<Forest, VotersError> {
    let n = ds.num_rows();
    if n < 2 {
        return Err(VotersError::TooFewExamples(n));
    }
    if cfg.num_trees == 0 {
        return Err(VotersError::BadConfig("num_trees must be at least 1".into()));
    }
    let p = ds.num_features();
    let k = cfg.features_per_tree.unwrap_or(((p as f64).sqrt().floor() as usize).max(1)).clamp(1, p.max(1));
    let bag_size = ((n as f64 * cfg.bag_fraction).floor() as usize).max(1);
    let trees = (0..cfg.num_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            let bag: Vec<usize> = (0..bag_size).map(|_| rng.random_range(0..n)).collect();
            let mut features = sample(&mut rng, p, k).into_vec();
            features.sort_unstable();
            grow_tree(ds, bag, features, cfg.max_depth)
        })
        .collect();
    Ok(Forest { trees, num_features: p, num_classes: ds.num_classes() })
}

/// Evaluates every voter on every row of `ds`.
pub fn predict_matrix(voters: &dyn VoterSet, ds: &Dataset) -> Result<PredictionMatrix, VotersError> {
    if ds.num_rows() == 0 {
        return Err(VotersError::Empty);
    }
    if ds.num_features() != voters.num_features() {
        return Err(VotersError::DimensionMismatch { expected: voters.num_features(), got: ds.num_features() });
    }
    let d = voters.num_voters();
    let mut preds = vec![0usize; ds.num_rows() * d];
    for (r, chunk) in preds.chunks_mut(d).enumerate() {
        voters.predict_into(ds.row(r), chunk);
    }
    let c = voters.num_classes().max(ds.num_classes());
    Ok(PredictionMatrix::from_flat(preds, ds.labels().to_vec(), d, c)?)
}

/// Reads `label,v1,…,vd` prediction tables with 1-based classes. The class
/// count is `num_classes` when given, otherwise the largest class seen
/// (at least 2).
pub fn read_predictions<R: Read>(reader: R, num_classes: Option<usize>) -> Result<PredictionMatrix, VotersError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let width = rdr.headers()?.len();
    if width < 3 {
        return Err(VotersError::Parse { row: 1, msg: format!("header has {width} columns; need label and two voters") });
    }
    let d = width - 1;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        if rec.len() != width {
            return Err(VotersError::Parse { row, msg: format!("expected {width} fields, found {}", rec.len()) });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: usize = field
                .trim()
                .parse()
                .map_err(|_| VotersError::Parse { row, msg: format!("field {} (`{field}`) is not a class index", j + 1) })?;
            if v == 0 || num_classes.is_some_and(|c| v > c) {
                return Err(VotersError::Parse { row, msg: format!("class index {v} out of range") });
            }
            if j == 0 {
                labels.push(v);
            } else {
                preds.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(VotersError::Empty);
    }
    let seen = labels.iter().chain(&preds).copied().max().unwrap_or(2);
    let c = num_classes.unwrap_or(seen.max(2));
    Ok(PredictionMatrix::from_flat(preds, labels, d, c)?)
}

pub fn ingest_predictions(path: &Path, num_classes: Option<usize>) -> Result<PredictionMatrix, VotersError> {
    read_predictions(std::fs::File::open(path)?, num_classes)
}

/// Writes the format read by [`read_predictions`].
pub fn write_predictions<W: Write>(p: &PredictionMatrix, out: W) -> Result<(), VotersError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((1..=p.num_voters()).map(|j| format!("v{j}")));
    w.write_record(&header)?;
    for r in 0..p.num_rows() {
        let mut rec = vec![p.label(r).to_string()];
        rec.extend(p.row(r).iter().map(|k| k.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_data() -> Dataset {
        let xs: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        Dataset::new(xs, vec![1, 1, 1, 1, 2, 2, 2, 2], 1, 2).unwrap()
    }

    #[test]
    fn stump_thresholds_evenly_spaced() {
        let e = make_stumps(&line_data(), 6).unwrap();
        assert_eq!(e.num_voters(), 12);
        for k in 1..=6 {
            assert!((e.stumps[2 * (k - 1)].threshold - k as f64 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stump_twins_are_complementary() {
        let ds = line_data();
        let p = predict_matrix(&make_stumps(&ds, 6).unwrap(), &ds).unwrap();
        for r in 0..p.num_rows() {
            for j in (0..12).step_by(2) {
                assert_eq!(p.pred(r, j) + p.pred(r, j + 1), 3);
            }
        }
    }

    #[test]
    fn pure_labels_give_single_leaves() {
        let ds = Dataset::new((0..20).map(|i| i as f64).collect(), vec![2; 10], 2, 2).unwrap();
        let f = train_forest(&ds, &ForestConfig { num_trees: 3, ..Default::default() }).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes == vec![Node::Leaf(2)]));
    }

    #[test]
    fn forest_is_seeded() {
        let ds = line_data();
        let cfg = ForestConfig { seed: 7, ..Default::default() };
        assert_eq!(train_forest(&ds, &cfg).unwrap(), train_forest(&ds, &cfg).unwrap());
        assert!(train_forest(&ds.subset(&[0]), &cfg).is_err());
    }

    #[test]
    fn prediction_table_rejects_zero_class() {
        let err = read_predictions("label,v1,v2\n1,1,2\n2,0,1\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, VotersError::Parse { row: 3, .. }));
    }
}
