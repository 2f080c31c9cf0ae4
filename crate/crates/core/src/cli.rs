//! Commands behind the `margin-cert` binary.
//!
//! Every command is driven by a [`RunManifest`]. The manifest is written next
//! to the outputs it produced, and re-running it reproduces the result files
//! byte for byte. Wall-clock timings go to `timings.csv` only.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{
    bg_original_from_loss, bgplus_from_loss, bgplusplus_default_t_max, bgplusplus_from_loss, certify, floor_theta,
    gz_from_loss, minimize_over_k, thm1_from_loss, BoundError, BoundKind, BoundResult, BoundSpec, SearchConfig,
};
use crate::data::{make_split, parse_csv, parse_libsvm, standardize, DataError, Dataset, LabelColumn};
use crate::numkern::{dirichlet_kl, ConcentrationVector};
use crate::oracle::{
    aggregation_battery, marchal_arbel_battery, sample_dirichlet, sharpness_battery, thm3_battery, BatteryEntry,
    OracleError, Rule,
};
use crate::train::{train_posterior, write_log, TrainConfig, TrainError};
use crate::voters::{ingest_predictions, make_stumps, predict_matrix, train_forest, ForestConfig, VotersError};
use crate::votes::{majority_vote_error, PredictionMatrix, VotesError, WeightPosterior};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MARGIN_CERT_OUT";
pub const DEFAULT_OUT_DIR: &str = "margin-cert-out";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const REPORTS_JSON: &str = "reports.json";
pub const REPORTS_CSV: &str = "reports.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} verification checks failed")]
    Verification { failed: usize, total: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Voters(#[from] VotersError),
    #[error(transparent)]
    Votes(#[from] VotesError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for usage errors, 4 for failed verification, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Bound(BoundError::BadSpec(_) | BoundError::UnknownBound(_)) => 2,
            CliError::Train(TrainError::BadConfig(_) | TrainError::NotTrainable(_)) => 2,
            CliError::Verification { .. } => 4,
            _ => 3,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    #[default]
    Certify,
    Train,
    Experiment,
    Verify,
    Compare,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VoterMode {
    #[default]
    Stumps,
    Rf,
    Ingest,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// `.libsvm`/`.svm` files are LIBSVM, anything else CSV.
    #[default]
    Auto,
    Csv,
    Libsvm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestSettings {
    pub num_trees: usize,
    pub bag_fraction: f64,
    pub features_per_tree: Option<usize>,
    pub max_depth: Option<usize>,
}

impl Default for ForestSettings {
    fn default() -> Self {
        let f = ForestConfig::default();
        Self { num_trees: f.num_trees, bag_fraction: f.bag_fraction, features_per_tree: None, max_depth: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySettings {
    pub seed: u64,
    /// Draws per check in the aggregation, tail and sandwich batteries.
    pub n_samples: usize,
    /// Draws per check in the sharpness battery.
    pub n_sharpness: usize,
    pub thm3_configs: usize,
    pub marchal_arbel_configs: usize,
    pub sharpness_configs: usize,
    /// Adds a three-class case to the sharpness battery.
    pub multiclass: bool,
    /// Every claim bound is multiplied by this before judging.
    pub claim_scale: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 100_000,
            n_sharpness: 1_000_000,
            thm3_configs: 30,
            marchal_arbel_configs: 50,
            sharpness_configs: 10,
            multiclass: true,
            claim_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSettings {
    pub d: usize,
    pub delta: f64,
    pub sample_sizes: Vec<usize>,
    pub margin_losses: Vec<f64>,
    /// Margins `γ_i = 0.5 i / (n_gamma + 1)`, `i = 1..=n_gamma`.
    pub n_gamma: usize,
    pub theta_draws: usize,
    pub seed: u64,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            d: 100,
            delta: 0.5,
            sample_sizes: vec![2000, 10000],
            margin_losses: vec![0.0, 0.1],
            n_gamma: 99,
            theta_draws: 3,
            seed: 0,
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunManifest {
    pub command: Command,
    pub dataset: Option<PathBuf>,
    /// Name used in result rows; defaults to the dataset file stem.
    pub dataset_id: Option<String>,
    pub format: DataFormat,
    /// `first`, `last`, a 0-based index or a header name.
    pub label_column: String,
    pub has_header: bool,
    pub voters: VoterMode,
    /// Prediction table used for bounds in `ingest` mode.
    pub predictions: Option<PathBuf>,
    /// Optional held-out prediction table in `ingest` mode.
    pub test_predictions: Option<PathBuf>,
    pub num_classes: Option<usize>,
    /// Posterior JSON for `certify`; uniform weights when absent.
    pub weights: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub delta: f64,
    /// Certificates computed for every posterior.
    pub bounds: Vec<BoundKind>,
    /// Objectives trained by `experiment`, next to the uniform posterior.
    pub objectives: Vec<BoundKind>,
    pub stump_thresholds: usize,
    pub forest: ForestSettings,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub verify: VerifySettings,
    pub compare: CompareSettings,
    pub output_dir: Option<PathBuf>,
    pub tool_version: String,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            command: Command::Certify,
            dataset: None,
            dataset_id: None,
            format: DataFormat::Auto,
            label_column: "last".into(),
            has_header: false,
            voters: VoterMode::Stumps,
            predictions: None,
            test_predictions: None,
            num_classes: None,
            weights: None,
            seeds: vec![1, 2, 3, 4, 5],
            delta: 0.05,
            bounds: BoundKind::ALL.to_vec(),
            objectives: vec![BoundKind::Thm2],
            stump_thresholds: crate::voters::STUMP_THRESHOLDS,
            forest: ForestSettings::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            verify: VerifySettings::default(),
            compare: CompareSettings::default(),
            output_dir: None,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    /// Output directory: the manifest field, else `$MARGIN_CERT_OUT`, else
    /// `margin-cert-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    fn dataset_name(&self) -> String {
        if let Some(id) = &self.dataset_id {
            return id.clone();
        }
        let path = match self.voters {
            VoterMode::Ingest => self.predictions.as_ref(),
            _ => self.dataset.as_ref(),
        };
        path.and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(usage(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if matches!(self.command, Command::Certify | Command::Train | Command::Experiment) {
            match self.voters {
                VoterMode::Ingest if self.predictions.is_none() => {
                    return Err(usage("ingest mode needs --predictions"));
                }
                VoterMode::Stumps | VoterMode::Rf if self.dataset.is_none() => {
                    return Err(usage("this voter mode needs --dataset"));
                }
                _ => {}
            }
            if self.seeds.is_empty() {
                return Err(usage("need at least one seed"));
            }
            if self.bounds.is_empty() {
                return Err(usage("need at least one bound"));
            }
        }
        Ok(())
    }
}

/// One certificate for one posterior on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub seed: u64,
    /// Where the weights came from: `uniform`, `given` or a training objective.
    pub method: String,
    pub bound: BoundKind,
    pub value: f64,
    /// Majority-vote error on held-out rows, when there are any.
    pub test_error: Option<f64>,
    pub gamma_star: Option<f64>,
    pub k_star: Option<f64>,
    pub t_star: Option<u64>,
    /// Seconds spent producing the posterior and its certificate. Written
    /// to the timings file only.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub bound: BoundKind,
    pub trials: usize,
    pub mean_value: f64,
    pub std_value: f64,
    pub mean_test_error: Option<f64>,
    pub std_test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingRow {
    seed: u64,
    method: String,
    bound: BoundKind,
    seconds: f64,
}

/// Weights as written by `train` and read by `certify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub theta: Vec<f64>,
    pub k: f64,
    pub objective: Option<BoundKind>,
    pub train_gamma: Option<f64>,
}

impl PosteriorFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    fn posterior(&self) -> Result<WeightPosterior, CliError> {
        Ok(WeightPosterior::new(self.theta.clone(), self.k)?)
    }
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub rows: Vec<ResultRow>,
    pub reports: Vec<BatteryEntry>,
}

struct Trial {
    seed: u64,
    bound: PredictionMatrix,
    test: Option<PredictionMatrix>,
}

fn load_dataset(man: &RunManifest) -> Result<Dataset, CliError> {
    let path = man.dataset.as_ref().ok_or_else(|| usage("missing --dataset"))?;
    let libsvm = match man.format {
        DataFormat::Libsvm => true,
        DataFormat::Csv => false,
        DataFormat::Auto => {
            matches!(path.extension().and_then(|e| e.to_str()), Some("libsvm" | "svm"))
        }
    };
    if libsvm {
        Ok(parse_libsvm(path)?)
    } else {
        let label: LabelColumn = man.label_column.parse().expect("label column parsing is infallible");
        Ok(parse_csv(path, &label, man.has_header)?)
    }
}

fn build_trial(man: &RunManifest, ds: Option<&Dataset>, seed: u64) -> Result<Trial, CliError> {
    if man.voters == VoterMode::Ingest {
        let p = man.predictions.as_ref().ok_or_else(|| usage("ingest mode needs --predictions"))?;
        let bound = ingest_predictions(p, man.num_classes)?;
        let test = match &man.test_predictions {
            Some(t) => Some(ingest_predictions(t, Some(bound.num_classes()))?),
            None => None,
        };
        return Ok(Trial { seed, bound, test });
    }
    let ds = ds.ok_or_else(|| usage("missing --dataset"))?;
    let strong = man.voters == VoterMode::Rf;
    let plan = make_split(ds.num_rows(), seed, strong)?;
    let ds = standardize(ds, &plan);
    let test_rows = ds.subset(&plan.test_idx);
    let bound_rows = ds.subset(&plan.bound_idx);
    let (bound, test) = if strong {
        let cfg = ForestConfig {
            num_trees: man.forest.num_trees,
            bag_fraction: man.forest.bag_fraction,
            features_per_tree: man.forest.features_per_tree,
            max_depth: man.forest.max_depth,
            seed,
        };
        let forest = train_forest(&ds.subset(&plan.voter_idx), &cfg)?;
        (predict_matrix(&forest, &bound_rows)?, predict_matrix(&forest, &test_rows)?)
    } else {
        let stumps = make_stumps(&bound_rows, man.stump_thresholds)?;
        (predict_matrix(&stumps, &bound_rows)?, predict_matrix(&stumps, &test_rows)?)
    };
    Ok(Trial { seed, bound, test: Some(test) })
}

fn search_for(man: &RunManifest) -> SearchConfig {
    let mut s = man.search.clone();
    s.bin_voters = man.train.bin_voters;
    s
}

fn certify_rows(
    man: &RunManifest,
    dataset: &str,
    trial: &Trial,
    method: &str,
    wp: &WeightPosterior,
    setup_secs: f64,
) -> Result<Vec<ResultRow>, CliError> {
    let spec = BoundSpec::for_matrix(&trial.bound, man.delta)?;
    let search = search_for(man);
    let test_error = trial.test.as_ref().map(|t| majority_vote_error(t, wp.theta()));
    man.bounds
        .iter()
        .map(|&kind| {
            let start = Instant::now();
            let r: BoundResult = certify(&trial.bound, wp, &spec, kind, &search)?;
            Ok(ResultRow {
                dataset: dataset.to_string(),
                seed: trial.seed,
                method: method.to_string(),
                bound: kind,
                value: r.value,
                test_error,
                gamma_star: r.gamma_star,
                k_star: r.k_star,
                t_star: r.t_star,
                wall_time: setup_secs + start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

fn trial_seeds(man: &RunManifest) -> Vec<u64> {
    match man.voters {
        // the table is fixed, so every seed would give the same trial
        VoterMode::Ingest if man.command == Command::Certify => man.seeds[..1].to_vec(),
        _ => man.seeds.clone(),
    }
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare_output(man: &RunManifest) -> Result<(RunManifest, PathBuf), CliError> {
    let out = man.resolved_output_dir();
    fs::create_dir_all(&out)?;
    let mut resolved = man.clone();
    resolved.output_dir = Some(out.clone());
    write_json(&out.join(MANIFEST_FILE), &resolved)?;
    Ok((resolved, out))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation over seeds per `(method, bound)`, in
/// first-appearance order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, BoundKind)> = Vec::new();
    for r in rows {
        let key = (r.dataset.clone(), r.method.clone(), r.bound);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(dataset, method, bound)| {
            let group: Vec<&ResultRow> =
                rows.iter().filter(|r| r.dataset == dataset && r.method == method && r.bound == bound).collect();
            let values: Vec<f64> = group.iter().map(|r| r.value).collect();
            let (mean_value, std_value) = mean_std(&values);
            let errs: Option<Vec<f64>> = group.iter().map(|r| r.test_error).collect();
            let (mean_test_error, std_test_error) = match errs {
                Some(e) if !e.is_empty() => {
                    let (m, s) = mean_std(&e);
                    (Some(m), Some(s))
                }
                _ => (None, None),
            };
            SummaryRow { dataset, method, bound, trials: group.len(), mean_value, std_value, mean_test_error, std_test_error }
        })
        .collect()
}

fn write_results(out: &Path, rows: &[ResultRow], files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let results = out.join(RESULTS_FILE);
    write_csv_rows(&results, rows)?;
    let summary = out.join(SUMMARY_FILE);
    write_csv_rows(&summary, &summarize(rows))?;
    let timings: Vec<TimingRow> = rows
        .iter()
        .map(|r| TimingRow { seed: r.seed, method: r.method.clone(), bound: r.bound, seconds: r.wall_time })
        .collect();
    let timing_path = out.join(TIMINGS_FILE);
    write_csv_rows(&timing_path, &timings)?;
    files.extend([results, summary, timing_path]);
    Ok(())
}

/// Certifies given (or uniform) weights with every requested bound.
pub fn cmd_certify(man: &RunManifest) -> Result<RunSummary, CliError> {
    man.validate()?;
    let given = match &man.weights {
        Some(p) => Some(PosteriorFile::load(p)?.posterior()?),
        None => None,
    };
    let ds = if man.voters == VoterMode::Ingest { None } else { Some(load_dataset(man)?) };
    let (man, out) = prepare_output(man)?;
    let name = man.dataset_name();
    let per_seed: Vec<Vec<ResultRow>> = trial_seeds(&man)
        .par_iter()
        .map(|&seed| {
            let trial = build_trial(&man, ds.as_ref(), seed)?;
            let (method, wp) = match &given {
                Some(wp) => ("given", wp.clone()),
                None => ("uniform", WeightPosterior::uniform(trial.bound.num_voters(), 1.0)?),
            };
            if wp.len() != trial.bound.num_voters() {
                return Err(usage(format!(
                    "weights have {} entries but the ensemble has {} voters",
                    wp.len(),
                    trial.bound.num_voters()
                )));
            }
            certify_rows(&man, &name, &trial, method, &wp, 0.0)
        })
        .collect::<Result<_, CliError>>()?;
    let rows: Vec<ResultRow> = per_seed.into_iter().flatten().collect();
    let mut files = vec![out.join(MANIFEST_FILE)];
    write_results(&out, &rows, &mut files)?;
    Ok(RunSummary { output_dir: out, files, rows, reports: Vec::new() })
}

struct TrainedTrial {
    rows: Vec<ResultRow>,
    posterior: PosteriorFile,
    log: Vec<crate::train::LogRow>,
}

fn train_trial(man: &RunManifest, name: &str, trial: &Trial, objective: BoundKind) -> Result<TrainedTrial, CliError> {
    let start = Instant::now();
    let spec = BoundSpec::for_matrix(&trial.bound, man.delta)?;
    let cfg = TrainConfig { objective, seed: trial.seed, search: man.search.clone(), ..man.train.clone() };
    let outcome = train_posterior(&trial.bound, &cfg, &spec)?;
    let secs = start.elapsed().as_secs_f64();
    let rows = certify_rows(man, name, trial, objective.name(), &outcome.posterior, secs)?;
    let posterior = PosteriorFile {
        theta: outcome.posterior.theta().to_vec(),
        k: outcome.posterior.k(),
        objective: Some(objective),
        train_gamma: objective.uses_gamma().then_some(outcome.train_gamma),
    };
    Ok(TrainedTrial { rows, posterior, log: outcome.log })
}

/// Trains `train.objective` per seed and certifies the result with every
/// requested bound. Writes `posterior_s<seed>.json` and `trainlog_s<seed>.csv`.
pub fn cmd_train(man: &RunManifest) -> Result<RunSummary, CliError> {
    man.validate()?;
    man.train.validate()?;
    let ds = if man.voters == VoterMode::Ingest { None } else { Some(load_dataset(man)?) };
    let (man, out) = prepare_output(man)?;
    let name = man.dataset_name();
    let trained: Vec<(u64, TrainedTrial)> = trial_seeds(&man)
        .par_iter()
        .map(|&seed| {
            let trial = build_trial(&man, ds.as_ref(), seed)?;
            Ok((seed, train_trial(&man, &name, &trial, man.train.objective)?))
        })
        .collect::<Result<_, CliError>>()?;
    let mut files = vec![out.join(MANIFEST_FILE)];
    let mut rows = Vec::new();
    for (seed, t) in trained {
        let post = out.join(format!("posterior_s{seed}.json"));
        write_json(&post, &t.posterior)?;
        let log = out.join(format!("trainlog_s{seed}.csv"));
        write_log(&t.log, BufWriter::new(File::create(&log)?))?;
        files.extend([post, log]);
        rows.extend(t.rows);
    }
    write_results(&out, &rows, &mut files)?;
    Ok(RunSummary { output_dir: out, files, rows, reports: Vec::new() })
}

/// Full pipeline per seed: split, voters, the uniform posterior and one
/// trained posterior per objective, each certified with every bound and
/// scored on the held-out rows.
pub fn cmd_experiment(man: &RunManifest) -> Result<RunSummary, CliError> {
    man.validate()?;
    man.train.validate()?;
    let ds = if man.voters == VoterMode::Ingest { None } else { Some(load_dataset(man)?) };
    let (man, out) = prepare_output(man)?;
    let name = man.dataset_name();
    let per_seed: Vec<Vec<ResultRow>> = trial_seeds(&man)
        .par_iter()
        .map(|&seed| {
            let trial = build_trial(&man, ds.as_ref(), seed)?;
            let uniform = WeightPosterior::uniform(trial.bound.num_voters(), 1.0)?;
            let mut rows = certify_rows(&man, &name, &trial, "uniform", &uniform, 0.0)?;
            for &obj in &man.objectives {
                rows.extend(train_trial(&man, &name, &trial, obj)?.rows);
            }
            Ok(rows)
        })
        .collect::<Result<_, CliError>>()?;
    let rows: Vec<ResultRow> = per_seed.into_iter().flatten().collect();
    let mut files = vec![out.join(MANIFEST_FILE)];
    write_results(&out, &rows, &mut files)?;
    Ok(RunSummary { output_dir: out, files, rows, reports: Vec::new() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    battery: String,
    index: usize,
    check: String,
    config: String,
    estimate: f64,
    stderr: f64,
    n_samples: usize,
    claim_bound: f64,
    rule: Rule,
    effect: f64,
    pass: bool,
}

/// Runs the Monte Carlo batteries and writes every report. Fails with
/// [`CliError::Verification`] after writing if any check fails.
pub fn cmd_verify(man: &RunManifest) -> Result<RunSummary, CliError> {
    man.validate()?;
    let v = &man.verify;
    if v.n_samples == 0 || v.n_sharpness == 0 {
        return Err(usage("sample counts must be positive"));
    }
    let (man, out) = prepare_output(man)?;
    let v = &man.verify;
    let mut entries = aggregation_battery(v.n_samples, v.seed)?;
    entries.extend(marchal_arbel_battery(v.marchal_arbel_configs, v.n_samples, v.seed)?);
    entries.extend(thm3_battery(v.thm3_configs, v.n_samples, v.seed)?);
    entries.extend(sharpness_battery(v.sharpness_configs, v.n_sharpness, v.seed, v.multiclass)?);
    if v.claim_scale != 1.0 {
        for e in &mut entries {
            e.report = e.report.with_claim_bound(e.report.claim_bound * v.claim_scale);
        }
    }
    let json = out.join(REPORTS_JSON);
    write_json(&json, &entries)?;
    let rows: Vec<ReportRow> = entries
        .iter()
        .map(|e| ReportRow {
            battery: e.battery.clone(),
            index: e.index,
            check: e.report.check.clone(),
            config: e.config.clone(),
            estimate: e.report.estimate,
            stderr: e.report.stderr,
            n_samples: e.report.n_samples,
            claim_bound: e.report.claim_bound,
            rule: e.report.rule,
            effect: e.report.effect(),
            pass: e.report.pass,
        })
        .collect();
    let csv_path = out.join(REPORTS_CSV);
    write_csv_rows(&csv_path, &rows)?;
    let failed = entries.iter().filter(|e| !e.report.pass).count();
    if failed > 0 {
        return Err(CliError::Verification { failed, total: entries.len() });
    }
    Ok(RunSummary {
        output_dir: out.clone(),
        files: vec![out.join(MANIFEST_FILE), json, csv_path],
        rows: Vec::new(),
        reports: entries,
    })
}

/// One point of a comparison curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub gamma: f64,
    pub method: String,
    pub value: f64,
}

/// Name of the comparison CSV for one panel.
pub fn compare_file_name(m: usize, loss: f64) -> String {
    format!("compare_m{m}_loss{loss}.csv")
}

/// Curves of one panel: the margin loss itself, the categorical family
/// (BG, BG+, BG++ at zero entropy, GZ where applicable) and the Dirichlet
/// certificate for each `θ` draw, all at the fixed loss `loss`.
pub fn compare_panel(
    settings: &CompareSettings,
    search: &SearchConfig,
    thetas: &[Vec<f64>],
    m: usize,
    loss: f64,
) -> Vec<CompareRow> {
    let d = settings.d;
    let delta = settings.delta;
    let prior = vec![1.0; d];
    let n = settings.n_gamma;
    let mut rows = Vec::new();
    for i in 1..=n {
        let g = 0.5 * i as f64 / (n + 1) as f64;
        let mut push = |method: String, value: f64| rows.push(CompareRow { gamma: g, method, value });
        push("margin_loss".into(), loss);
        push("bg".into(), bg_original_from_loss(loss, d, g, m, delta).value);
        push("bgplus".into(), bgplus_from_loss(loss, d, g, m, delta).value);
        let t_max = search.t_max.unwrap_or_else(|| bgplusplus_default_t_max(g, m));
        push("bgplusplus".into(), bgplusplus_from_loss(loss, d, 0.0, g, m, delta, t_max).value);
        if let Ok(r) = gz_from_loss(loss, d, g, m, delta) {
            push("gz".into(), r.value);
        }
        for (j, theta) in thetas.iter().enumerate() {
            let r = minimize_over_k(
                |k| {
                    let alpha: Vec<f64> = theta.iter().map(|t| t * k).collect();
                    let kl = dirichlet_kl(&alpha, &prior).unwrap_or(f64::INFINITY);
                    thm1_from_loss(loss, kl, k, g, m, delta)
                },
                1.0,
                search,
            );
            push(format!("thm1_theta{}", j + 1), r.value);
        }
    }
    rows
}

/// Seeded uniform-simplex weight vectors for the comparison panels.
pub fn compare_thetas(settings: &CompareSettings) -> Result<Vec<Vec<f64>>, CliError> {
    let d = settings.d;
    let flat = sample_dirichlet(&ConcentrationVector::ones(d), settings.theta_draws.max(1), settings.seed)?;
    Ok(flat.chunks(d).take(settings.theta_draws).map(|t| floor_theta(t).0).collect())
}

/// Bound-versus-margin curves at fixed margin losses, one CSV per
/// `(m, loss)` panel.
pub fn cmd_compare(man: &RunManifest) -> Result<RunSummary, CliError> {
    let c = &man.compare;
    if c.d < 2 || c.n_gamma == 0 || !(c.delta > 0.0 && c.delta < 1.0) {
        return Err(usage("compare needs d >= 2, n_gamma >= 1 and delta in (0, 1)"));
    }
    if c.sample_sizes.iter().any(|&m| m == 0) || c.margin_losses.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(usage("sample sizes must be positive and losses in [0, 1]"));
    }
    let (man, out) = prepare_output(man)?;
    let c = &man.compare;
    let thetas = compare_thetas(c)?;
    let panels: Vec<(usize, f64)> =
        c.sample_sizes.iter().flat_map(|&m| c.margin_losses.iter().map(move |&l| (m, l))).collect();
    let tables: Vec<Vec<CompareRow>> =
        panels.par_iter().map(|&(m, l)| compare_panel(c, &man.search, &thetas, m, l)).collect();
    let mut files = vec![out.join(MANIFEST_FILE)];
    for (&(m, l), rows) in panels.iter().zip(&tables) {
        let path = out.join(compare_file_name(m, l));
        write_csv_rows(&path, rows)?;
        files.push(path);
    }
    Ok(RunSummary { output_dir: out, files, rows: Vec::new(), reports: Vec::new() })
}

pub fn run_manifest(man: &RunManifest) -> Result<RunSummary, CliError> {
    match man.command {
        Command::Certify => cmd_certify(man),
        Command::Train => cmd_train(man),
        Command::Experiment => cmd_experiment(man),
        Command::Verify => cmd_verify(man),
        Command::Compare => cmd_compare(man),
    }
}

#[derive(Debug, Parser)]
#[command(name = "margin-cert", version, about = "Margin certificates for weighted majority votes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Certify given or uniform weights with every requested bound.
    Certify(RunArgs),
    /// Train weights by minimising a certificate, then certify them.
    Train(RunArgs),
    /// Split, build voters, train and certify across seeds.
    Experiment(RunArgs),
    /// Run the Monte Carlo verification batteries.
    Verify(RunArgs),
    /// Emit bound-versus-margin curves at fixed margin losses.
    Compare(RunArgs),
}

fn parse_kind(s: &str) -> Result<BoundKind, String> {
    s.parse().map_err(|e: BoundError| e.to_string())
}

/// Flags mirroring manifest fields. A flag given on the command line wins
/// over the manifest.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON manifest supplying every field not given as a flag.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub dataset_id: Option<String>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    /// `first`, `last`, a 0-based index or a header name.
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub has_header: Option<bool>,
    #[arg(long, value_enum)]
    pub voters: Option<VoterMode>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub test_predictions: Option<PathBuf>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub bounds: Option<Vec<BoundKind>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub objectives: Option<Vec<BoundKind>>,
    /// Objective for `train`.
    #[arg(long, value_parser = parse_kind)]
    pub objective: Option<BoundKind>,
    #[arg(long)]
    pub n_gamma: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub gamma_candidates: Option<Vec<f64>>,
    #[arg(long)]
    pub stump_thresholds: Option<usize>,
    #[arg(long)]
    pub num_trees: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Seed for `verify` and `compare`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draws per check for `verify`.
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub n_sharpness: Option<usize>,
    #[arg(long)]
    pub claim_scale: Option<f64>,
    /// Voter count for `compare`.
    #[arg(long)]
    pub d: Option<usize>,
}

impl RunArgs {
    /// Loads the manifest (or defaults) and applies the flags on top.
    pub fn into_manifest(self, command: Command) -> Result<RunManifest, CliError> {
        let mut m = match &self.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        m.command = command;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { m.$($field).+ = v; })*
            };
        }
        macro_rules! set_some {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { m.$($field).+ = Some(v); })*
            };
        }
        set_some!(
            dataset => dataset,
            dataset_id => dataset_id,
            predictions => predictions,
            test_predictions => test_predictions,
            num_classes => num_classes,
            weights => weights,
            output_dir => output_dir,
        );
        set!(
            format => format,
            label_column => label_column,
            has_header => has_header,
            voters => voters,
            seeds => seeds,
            bounds => bounds,
            objectives => objectives,
            objective => train.objective,
            n_gamma => search.n_gamma,
            max_epochs => train.max_epochs,
            learning_rate => train.learning_rate,
            gamma_candidates => train.gamma_candidates,
            stump_thresholds => stump_thresholds,
            num_trees => forest.num_trees,
            n_samples => verify.n_samples,
            n_sharpness => verify.n_sharpness,
            claim_scale => verify.claim_scale,
            d => compare.d,
        );
        if let Some(seed) = self.seed {
            m.verify.seed = seed;
            m.compare.seed = seed;
        }
        if let Some(delta) = self.delta {
            if command == Command::Compare {
                m.compare.delta = delta;
            } else {
                m.delta = delta;
            }
        }
        Ok(m)
    }
}

impl Cli {
    pub fn into_manifest(self) -> Result<RunManifest, CliError> {
        match self.command {
            CliCommand::Certify(a) => a.into_manifest(Command::Certify),
            CliCommand::Train(a) => a.into_manifest(Command::Train),
            CliCommand::Experiment(a) => a.into_manifest(Command::Experiment),
            CliCommand::Verify(a) => a.into_manifest(Command::Verify),
            CliCommand::Compare(a) => a.into_manifest(Command::Compare),
        }
    }
}
