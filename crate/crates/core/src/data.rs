//! Dataset ingestion, standardisation and the train/test/bound split.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Smallest standard deviation used when scaling a feature.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}, column {column}: missing value")]
    Missing { line: usize, column: usize },
    #[error("dataset has {0} rows; the split protocol needs at least 10")]
    TooSmall(usize),
    #[error("dataset needs at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn parse_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { line, msg: msg.into() }
}

/// Dense features with 1-based contiguous class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    p: usize,
    num_classes: usize,
    /// Original label token of each class, indexed by class − 1.
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, p: usize, num_classes: usize) -> Result<Self, DataError> {
        let n = labels.len();
        if features.len() != n * p {
            return Err(DataError::Invalid(format!("{} feature values for {n} rows of {p}", features.len())));
        }
        if num_classes < 2 {
            return Err(DataError::TooFewClasses(num_classes));
        }
        if let Some(r) = labels.iter().position(|&y| y == 0 || y > num_classes) {
            return Err(DataError::Invalid(format!("row {r}: label {} outside 1..={num_classes}", labels[r])));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        let class_names = (1..=num_classes).map(|k| k.to_string()).collect();
        Ok(Self { features, labels, n, p, num_classes, class_names })
    }

    pub fn num_rows(&self) -> usize {
        self.n
    }

    pub fn num_features(&self) -> usize {
        self.p
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.p..(r + 1) * self.p]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Rows `idx`, in that order; the class set is kept.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.p);
        for &r in idx {
            features.extend_from_slice(self.row(r));
        }
        Dataset {
            features,
            labels: idx.iter().map(|&r| self.labels[r]).collect(),
            n: idx.len(),
            p: self.p,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }
}

/// Orders label tokens numerically when they all parse as numbers,
/// lexicographically otherwise.
fn ordered_tokens(tokens: &BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = tokens.iter().cloned().collect();
    let numeric: Option<Vec<f64>> = out.iter().map(|t| t.parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        let mut paired: Vec<(f64, String)> = values.into_iter().zip(out).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        out = paired.into_iter().map(|(_, t)| t).collect();
    }
    out
}

fn remap_labels(raw: &[String]) -> Result<(Vec<usize>, Vec<String>), DataError> {
    let distinct: BTreeSet<String> = raw.iter().cloned().collect();
    let names = ordered_tokens(&distinct);
    if names.len() < 2 {
        return Err(DataError::TooFewClasses(names.len()));
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i + 1)).collect();
    Ok((raw.iter().map(|s| index[s.as_str()]).collect(), names))
}

/// Parses LIBSVM text: `label idx:val idx:val …` with 1-based, strictly
/// increasing indices. Absent entries are zero.
pub fn parse_libsvm_str(text: &str) -> Result<Dataset, DataError> {
    let mut raw_labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut p = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = tokens.next().ok_or_else(|| parse_err(lineno, "missing label"))?;
        label.parse::<f64>().map_err(|_| parse_err(lineno, format!("label `{label}` is not numeric")))?;
        let mut entries = Vec::new();
        let mut last = 0;
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| parse_err(lineno, format!("token `{tok}` is not idx:val")))?;
            let idx: usize = idx.parse().map_err(|_| parse_err(lineno, format!("bad index `{idx}`")))?;
            let val: f64 = val.parse().map_err(|_| parse_err(lineno, format!("bad value `{val}`")))?;
            if idx <= last {
                return Err(parse_err(lineno, format!("index {idx} is not strictly increasing")));
            }
            if !val.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value at index {idx}")));
            }
            last = idx;
            entries.push((idx, val));
        }
        p = p.max(last);
        raw_labels.push(label.to_string());
        rows.push(entries);
    }
    let (labels, names) = remap_labels(&raw_labels)?;
    let mut features = vec![0.0; rows.len() * p];
    for (r, entries) in rows.iter().enumerate() {
        for &(idx, val) in entries {
            features[r * p + idx - 1] = val;
        }
    }
    let mut ds = Dataset::new(features, labels, p, names.len())?;
    ds.class_names = names;
    Ok(ds)
}

pub fn parse_libsvm(path: &Path) -> Result<Dataset, DataError> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    parse_libsvm_str(&text)
}

/// Which CSV column carries the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    First,
    Last,
    Index(usize),
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "first" => LabelColumn::First,
            "last" => LabelColumn::Last,
            _ => match s.parse::<usize>() {
                Ok(i) => LabelColumn::Index(i),
                Err(_) => LabelColumn::Name(s.to_string()),
            },
        })
    }
}

/// Parses delimited text. Columns whose values all parse as numbers pass
/// through; the rest are ordinal-encoded in sorted order of their distinct
/// values. Empty cells and `?` are missing values and rejected.
pub fn parse_csv_reader<R: Read>(reader: R, label: &LabelColumn, has_header: bool) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).flexible(true).from_reader(reader);
    let header: Option<Vec<String>> =
        if has_header { Some(rdr.headers()?.iter().map(|s| s.trim().to_string()).collect()) } else { None };
    let first_line = if has_header { 2 } else { 1 };
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(first_line + i);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        let row: Vec<String> = rec.iter().map(|s| s.trim().to_string()).collect();
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(line, format!("expected {w} columns, found {}", row.len())));
            }
            _ => {}
        }
        if let Some(c) = row.iter().position(|s| s.is_empty() || s == "?") {
            return Err(DataError::Missing { line, column: c + 1 });
        }
        cells.push(row);
    }
    let width = width.ok_or_else(|| DataError::Invalid("no data rows".into()))?;
    if width < 2 {
        return Err(DataError::Invalid("need a label column and at least one feature".into()));
    }
    let label_col = match label {
        LabelColumn::First => 0,
        LabelColumn::Last => width - 1,
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => return Err(DataError::Invalid(format!("label column {i} out of range"))),
        LabelColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| DataError::Invalid(format!("no column named `{name}`")))?,
    };
    let raw_labels: Vec<String> = cells.iter().map(|r| r[label_col].clone()).collect();
    let (labels, names) = remap_labels(&raw_labels)?;
    let feature_cols: Vec<usize> = (0..width).filter(|&c| c != label_col).collect();
    let n = cells.len();
    let p = feature_cols.len();
    let mut features = vec![0.0; n * p];
    for (j, &c) in feature_cols.iter().enumerate() {
        let numeric: Option<Vec<f64>> = cells.iter().map(|r| r[c].parse::<f64>().ok().filter(|v| v.is_finite())).collect();
        match numeric {
            Some(values) => {
                for (r, v) in values.into_iter().enumerate() {
                    features[r * p + j] = v;
                }
            }
            None => {
                let distinct: BTreeSet<&str> = cells.iter().map(|r| r[c].as_str()).collect();
                let code: BTreeMap<&str, usize> = distinct.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
                for (r, row) in cells.iter().enumerate() {
                    features[r * p + j] = code[row[c].as_str()] as f64;
                }
            }
        }
    }
    let mut ds = Dataset::new(features, labels, p, names.len())?;
    ds.class_names = names;
    Ok(ds)
}

pub fn parse_csv(path: &Path, label: &LabelColumn, has_header: bool) -> Result<Dataset, DataError> {
    parse_csv_reader(std::fs::File::open(path)?, label, has_header)
}

/// Writes `label,f1,…,fp` with 1-based labels and shortest round-trip floats.
pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((1..=ds.p).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for r in 0..ds.n {
        let mut rec = vec![ds.labels[r].to_string()];
        rec.extend(ds.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Index sets of one trial: train/test, and within train the halves used to
/// fit voters and to evaluate bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub voter_idx: Vec<usize>,
    pub bound_idx: Vec<usize>,
    pub seed: u64,
    pub strong_voters: bool,
}

/// Seeded shuffle into 80% train and 20% test (`⌈n/5⌉` test rows). With
/// strong voters the train part is halved into voter and bound halves;
/// otherwise the bound half is the whole train part.
pub fn make_split(n: usize, seed: u64, strong_voters: bool) -> Result<SplitPlan, DataError> {
    if n < 10 {
        return Err(DataError::TooSmall(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = n.div_ceil(5);
    let test_idx = idx[..n_test].to_vec();
    let train_idx = idx[n_test..].to_vec();
    let (voter_idx, bound_idx) = if strong_voters {
        let half = train_idx.len() / 2;
        (train_idx[..half].to_vec(), train_idx[half..].to_vec())
    } else {
        (Vec::new(), train_idx.clone())
    };
    Ok(SplitPlan { train_idx, test_idx, voter_idx, bound_idx, seed, strong_voters })
}

/// Writes the plan as `role,index` rows.
pub fn write_split<W: Write>(plan: &SplitPlan, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["role", "index"])?;
    for (role, idx) in [
        ("train", &plan.train_idx),
        ("test", &plan.test_idx),
        ("voter", &plan.voter_idx),
        ("bound", &plan.bound_idx),
    ] {
        for i in idx {
            w.write_record([role, &i.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-feature mean and population standard deviation of `rows`.
pub fn feature_stats(ds: &Dataset, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let p = ds.p;
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; p];
    for &r in rows {
        for (m, x) in mean.iter_mut().zip(ds.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for &r in rows {
        for ((v, x), m) in var.iter_mut().zip(ds.row(r)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    (mean, std)
}

/// Centres and scales every row with statistics of the training rows only.
pub fn standardize(ds: &Dataset, plan: &SplitPlan) -> Dataset {
    let (mean, std) = feature_stats(ds, &plan.train_idx);
    let mut out = ds.clone();
    for r in 0..ds.n {
        for j in 0..ds.p {
            let x = &mut out.features[r * ds.p + j];
            *x = (*x - mean[j]) / std[j].max(STD_FLOOR);
        }
    }
    out
}
