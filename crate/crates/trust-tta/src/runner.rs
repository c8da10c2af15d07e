//! Experiment driver: builds corrupted target streams from a checkpoint's
//! dataset, dispatches the adaptation methods, and emits reports.
//!
//! Every run is fully described by its [`ExperimentConfig`]; the emitted
//! [`RunReport`] echoes that config plus the dataset provenance, so re-running
//! from a report reproduces identical accuracy values.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    make_batches, rank_permutations, run_baseline, trust_run, AdaptationConfig, Batch,
    BaselineKind, BatchMetric, EntropyRanking, ExecMode, LabelSource, LayerDiversity, Mode,
    PhaseTimings, Polarity, RankingEntry,
};
use crate::checkpoint::Checkpoint;
use crate::data::{corrupt, gen_dataset, phase_seed, CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::model::{accuracy, Model, ModelConfig, NormMode, TrainConfig};
use crate::scan2d::Permutation;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Trust,
    TrustNaive,
    Tent,
    Source,
    Ensemble,
    Repetition,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Trust => "trust",
            Method::TrustNaive => "trust-naive",
            Method::Tent => "tent",
            Method::Source => "source",
            Method::Ensemble => "ensemble",
            Method::Repetition => "repetition",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trust" => Ok(Method::Trust),
            "trust-naive" => Ok(Method::TrustNaive),
            "tent" => Ok(Method::Tent),
            "source" => Ok(Method::Source),
            "ensemble" => Ok(Method::Ensemble),
            "repetition" => Ok(Method::Repetition),
            other => Err(Error::InvalidArgument(format!("unknown method {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub checkpoint: String,
    pub method: Method,
    pub mode: Mode,
    pub exec: ExecMode,
    pub k: usize,
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub calib_batches: usize,
    pub polarity: Polarity,
    /// Candidate permutations; `None` means the full pool of 24.
    pub pool: Option<Vec<Permutation>>,
    pub entropy_weighted: bool,
    pub label_source: LabelSource,
    /// Rank on the clean calibration slice instead of the corrupted stream.
    pub rank_on_clean: bool,
}

impl ExperimentConfig {
    pub fn new(checkpoint: &str, method: Method) -> Self {
        ExperimentConfig {
            checkpoint: checkpoint.to_string(),
            method,
            mode: Mode::Online,
            exec: ExecMode::Sequential,
            k: 6,
            iterations: 1,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            corruption: CorruptionKind::GaussianNoise,
            severity: 3,
            calib_batches: 4,
            polarity: Polarity::Lowest,
            pool: None,
            entropy_weighted: false,
            label_source: LabelSource::Identity,
            rank_on_clean: false,
        }
    }

    fn adaptation_config(&self, pool: Vec<Permutation>) -> AdaptationConfig {
        AdaptationConfig {
            k: self.k,
            iterations: self.iterations,
            lr: self.lr,
            batch_size: self.batch_size,
            mode: self.mode,
            exec: self.exec,
            polarity: self.polarity,
            calib_batches: self.calib_batches,
            entropy_weighted: self.entropy_weighted,
            label_source: self.label_source,
            pool,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub dataset_seed: u64,
    pub dataset_n: usize,
    pub test_samples: usize,
    pub batches: usize,
    pub selected: Vec<Permutation>,
    pub ranking: Option<Vec<RankingEntry>>,
    pub per_batch: Vec<BatchMetric>,
    pub mean_accuracy: f64,
    /// Top-1 accuracy in percent, one decimal.
    pub mean_accuracy_pct: f64,
    /// Per-permutation evaluation accuracies (eval-perm diagnostics only).
    pub eval_perm_accuracy: Vec<(Permutation, f64)>,
    pub diversity: Vec<LayerDiversity>,
    pub timings: PhaseTimings,
}

pub fn percent(acc: f64) -> f64 {
    (acc * 1000.0).round() / 10.0
}

/// The corrupted target stream for a run, plus the clean variant of the
/// same batches (used when ranking on clean data).
pub struct StreamBundle {
    pub stream: Vec<Batch>,
    pub clean_stream: Vec<Batch>,
}

pub fn build_stream(
    checkpoint: &Checkpoint,
    config: &ExperimentConfig,
) -> Result<(Model, StreamBundle)> {
    let dataset_seed = checkpoint.meta_u64("dataset_seed")?;
    let dataset_n = checkpoint.meta_u64("dataset_n")? as usize;
    let dataset = gen_dataset(dataset_seed, dataset_n)?;
    let (test_images, test_labels) = dataset.test_split();
    let n_test = test_labels.len();

    let spec = CorruptionSpec {
        kind: config.corruption,
        severity: config.severity,
        seed: config.seed,
    };
    let corrupted = corrupt(&test_images, n_test, &spec)?;

    let mut order: Vec<usize> = (0..n_test).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(config.seed, "order"));
    order.shuffle(&mut rng);

    let model = checkpoint.build_model()?;
    let pixels = model.config.pixels();
    let stream = make_batches(&corrupted, &test_labels, pixels, &order, config.batch_size);
    let clean_stream = make_batches(&test_images, &test_labels, pixels, &order, config.batch_size);
    Ok((model, StreamBundle { stream, clean_stream }))
}

/// Execute one configured run end to end.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with_eval_perms(config, &[])
}

/// Like [`run_experiment`], with additional read-only evaluation traversals
/// recorded for the evaluation-permutation ablation.
pub fn run_experiment_with_eval_perms(
    config: &ExperimentConfig,
    eval_perms: &[Permutation],
) -> Result<RunReport> {
    let checkpoint = Checkpoint::load(Path::new(&config.checkpoint))?;
    let (mut model, bundle) = build_stream(&checkpoint, config)?;
    let stream = &bundle.stream;
    let dataset_seed = checkpoint.meta_u64("dataset_seed")?;
    let dataset_n = checkpoint.meta_u64("dataset_n")? as usize;

    let pool = match (&config.pool, config.method) {
        (_, Method::TrustNaive) => vec![Permutation::identity()],
        (Some(pool), _) => pool.clone(),
        (None, _) => Permutation::all(),
    };
    let acfg = config.adaptation_config(pool.clone());

    // offline stage: rank on the first calibration batches of the stream
    let needs_ranking = matches!(
        config.method,
        Method::Trust | Method::TrustNaive | Method::Ensemble
    );
    let mut rank_secs = 0.0;
    let ranking: Option<EntropyRanking> = if needs_ranking {
        let calib_src = if config.rank_on_clean {
            &bundle.clean_stream
        } else {
            stream
        };
        let m = config.calib_batches.clamp(1, calib_src.len());
        let t0 = Instant::now();
        let ranking = rank_permutations(&model, &calib_src[..m], &pool)?;
        rank_secs = t0.elapsed().as_secs_f64();
        Some(ranking)
    } else {
        None
    };

    let mut selected = Vec::new();
    let mut eval_perm_accuracy = Vec::new();
    let (metrics, ranking_out) = match config.method {
        Method::Trust | Method::TrustNaive => {
            let k = if config.method == Method::TrustNaive {
                1
            } else {
                config.k
            };
            let mut cfg_k = acfg.clone();
            cfg_k.k = k;
            let run = trust_run(
                &mut model,
                &checkpoint,
                stream,
                ranking.expect("ranking computed for trust methods"),
                &cfg_k,
                eval_perms,
            )?;
            selected = run.selected;
            eval_perm_accuracy = run.eval_perm_accuracy;
            (run.metrics, Some(run.ranking))
        }
        Method::Source => (
            run_baseline(
                BaselineKind::SourceOnly,
                &mut model,
                &checkpoint,
                stream,
                None,
                &acfg,
            )?,
            None,
        ),
        Method::Tent => (
            run_baseline(
                BaselineKind::Tent,
                &mut model,
                &checkpoint,
                stream,
                None,
                &acfg,
            )?,
            None,
        ),
        Method::Ensemble => (
            run_baseline(
                BaselineKind::Ensemble,
                &mut model,
                &checkpoint,
                stream,
                ranking.as_ref(),
                &acfg,
            )?,
            ranking,
        ),
        Method::Repetition => (
            run_baseline(
                BaselineKind::Repetition,
                &mut model,
                &checkpoint,
                stream,
                None,
                &acfg,
            )?,
            None,
        ),
    };

    let mut timings = metrics.timings.clone();
    timings.rank_secs = rank_secs;
    Ok(RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config: config.clone(),
        dataset_seed,
        dataset_n,
        test_samples: metrics.total_samples,
        batches: metrics.per_batch.len(),
        selected,
        ranking: ranking_out.map(|r| r.entries),
        per_batch: metrics.per_batch,
        mean_accuracy: metrics.mean_accuracy,
        mean_accuracy_pct: percent(metrics.mean_accuracy),
        eval_perm_accuracy,
        diversity: metrics.diversity,
        timings,
    })
}

// ── Standalone ranking ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankConfig {
    pub checkpoint: String,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub batch_size: usize,
    pub seed: u64,
    pub calib_batches: usize,
    pub rank_on_clean: bool,
    pub pool: Option<Vec<Permutation>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub format_version: u32,
    pub config: RankConfig,
    pub calibration_batches: usize,
    pub calibration_samples: usize,
    pub entries: Vec<RankingEntry>,
}

/// Offline stage as a standalone artifact: entropy-rank the pool on the
/// stream's calibration slice and emit the ordering.
pub fn rank_report(config: &RankConfig) -> Result<RankReport> {
    let checkpoint = Checkpoint::load(Path::new(&config.checkpoint))?;
    let probe = ExperimentConfig {
        checkpoint: config.checkpoint.clone(),
        method: Method::Source,
        mode: Mode::Online,
        exec: ExecMode::Sequential,
        k: 1,
        iterations: 1,
        lr: 0.0,
        batch_size: config.batch_size,
        seed: config.seed,
        corruption: config.corruption,
        severity: config.severity,
        calib_batches: config.calib_batches,
        polarity: Polarity::Lowest,
        pool: config.pool.clone(),
        entropy_weighted: false,
        label_source: LabelSource::Identity,
        rank_on_clean: config.rank_on_clean,
    };
    let (model, bundle) = build_stream(&checkpoint, &probe)?;
    let calib_src = if config.rank_on_clean {
        &bundle.clean_stream
    } else {
        &bundle.stream
    };
    let m = config.calib_batches.clamp(1, calib_src.len());
    let pool = config.pool.clone().unwrap_or_else(Permutation::all);
    let ranking = rank_permutations(&model, &calib_src[..m], &pool)?;
    Ok(RankReport {
        format_version: REPORT_FORMAT_VERSION,
        config: config.clone(),
        calibration_batches: ranking.calibration_batches,
        calibration_samples: ranking.calibration_samples,
        entries: ranking.entries,
    })
}

pub fn rank_report_json(config: &RankConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(&rank_report(config)?)?)
}

// ── Source training entry point ─────────────────────────────────────

/// Train a source checkpoint on the synthetic dataset and record dataset
/// provenance plus final clean accuracy in the metadata.
pub fn train_checkpoint(
    model_config: &ModelConfig,
    dataset_seed: u64,
    dataset_n: usize,
    train_config: &TrainConfig,
) -> Result<(Checkpoint, f64)> {
    let dataset = gen_dataset(dataset_seed, dataset_n)?;
    let (train_images, train_labels) = dataset.train_split();
    let (test_images, test_labels) = dataset.test_split();

    let outcome = crate::model::train_source(model_config, &train_images, &train_labels, train_config)?;
    let preds = outcome.model.predict(
        &test_images,
        test_labels.len(),
        64,
        Permutation::identity(),
        NormMode::Running,
    )?;
    let clean = accuracy(&preds, &test_labels);

    let mut meta = BTreeMap::new();
    meta.insert("dataset_seed".to_string(), dataset_seed.to_string());
    meta.insert("dataset_n".to_string(), dataset_n.to_string());
    meta.insert("train_seed".to_string(), train_config.seed.to_string());
    meta.insert("train_epochs".to_string(), train_config.epochs.to_string());
    meta.insert("train_lr".to_string(), train_config.lr.to_string());
    meta.insert("clean_accuracy".to_string(), format!("{clean}"));
    Ok((Checkpoint::from_model(&outcome.model, meta), clean))
}

// ── CSV emission ────────────────────────────────────────────────────

pub const ACCURACY_CSV_HEADER: &str =
    "method,mode,exec,corruption,severity,seed,batch,n,correct,accuracy";
pub const ABLATION_CSV_HEADER: &str =
    "axis,value,method,mode,corruption,severity,seed,mean_accuracy";
pub const SUMMARY_CSV_HEADER: &str =
    "kind,method,axis,value,mode,corruption,severity,seeds,mean_accuracy_pct";

fn mode_str(mode: Mode) -> &'static str {
    match mode {
        Mode::Online => "online",
        Mode::Standard => "standard",
    }
}

fn exec_str(exec: ExecMode) -> &'static str {
    match exec {
        ExecMode::Sequential => "sequential",
        ExecMode::Parallel => "parallel",
    }
}

/// Per-batch accuracy CSV for one run.
pub fn accuracy_csv(report: &RunReport) -> String {
    let mut out = String::from(ACCURACY_CSV_HEADER);
    out.push('\n');
    for b in &report.per_batch {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            report.config.method,
            mode_str(report.config.mode),
            exec_str(report.config.exec),
            report.config.corruption,
            report.config.severity,
            report.config.seed,
            b.index,
            b.n,
            b.correct,
            b.accuracy
        ));
    }
    out
}

// ── Ablations ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    K,
    Iters,
    Batch,
    Polarity,
    EvalPerm,
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AblationAxis::K => "k",
            AblationAxis::Iters => "iters",
            AblationAxis::Batch => "batch",
            AblationAxis::Polarity => "polarity",
            AblationAxis::EvalPerm => "eval-perm",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(AblationAxis::K),
            "iters" => Ok(AblationAxis::Iters),
            "batch" => Ok(AblationAxis::Batch),
            "polarity" => Ok(AblationAxis::Polarity),
            "eval-perm" => Ok(AblationAxis::EvalPerm),
            other => Err(Error::InvalidArgument(format!("unknown axis {other}"))),
        }
    }
}

pub const K_SWEEP: [usize; 5] = [1, 2, 4, 6, 8];
pub const ITERS_SWEEP: [usize; 4] = [1, 2, 4, 8];
pub const BATCH_SWEEP: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub method: String,
    pub mode: String,
    pub corruption: String,
    pub severity: u8,
    pub seed: u64,
    pub mean_accuracy: f64,
}

/// One sweep over an ablation axis, repeated for each seed. Cells are
/// independent and run concurrently when the parallel feature is enabled.
pub fn run_ablation(
    axis: AblationAxis,
    base: &ExperimentConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    // (value label, configured run, eval permutations)
    let mut cells: Vec<(String, ExperimentConfig, Vec<Permutation>)> = Vec::new();
    for &seed in seeds {
        let mut seeded = base.clone();
        seeded.seed = seed;
        match axis {
            AblationAxis::K => {
                for k in K_SWEEP {
                    let mut c = seeded.clone();
                    c.k = k;
                    cells.push((k.to_string(), c, Vec::new()));
                }
            }
            AblationAxis::Iters => {
                for iters in ITERS_SWEEP {
                    let mut c = seeded.clone();
                    c.iterations = iters;
                    cells.push((iters.to_string(), c, Vec::new()));
                }
            }
            AblationAxis::Batch => {
                for batch in BATCH_SWEEP {
                    let mut c = seeded.clone();
                    c.batch_size = batch;
                    cells.push((batch.to_string(), c, Vec::new()));
                }
            }
            AblationAxis::Polarity => {
                for polarity in [Polarity::Lowest, Polarity::Highest] {
                    let mut c = seeded.clone();
                    c.polarity = polarity;
                    let label = match polarity {
                        Polarity::Lowest => "lowest",
                        Polarity::Highest => "highest",
                    };
                    cells.push((label.to_string(), c, Vec::new()));
                }
            }
            AblationAxis::EvalPerm => {
                cells.push(("*".to_string(), seeded, Permutation::all()));
            }
        }
    }

    let run_cell = |(value, config, eval_perms): &(String, ExperimentConfig, Vec<Permutation>)|
     -> Result<Vec<AblationRow>> {
        let report = run_experiment_with_eval_perms(config, eval_perms)?;
        let row = |value: String, mean_accuracy: f64| AblationRow {
            axis: axis.to_string(),
            value,
            method: config.method.to_string(),
            mode: mode_str(config.mode).to_string(),
            corruption: config.corruption.to_string(),
            severity: config.severity,
            seed: config.seed,
            mean_accuracy,
        };
        if *value == "*" {
            // one row per evaluation traversal
            Ok(report
                .eval_perm_accuracy
                .iter()
                .map(|(perm, acc)| row(perm.to_string(), *acc))
                .collect())
        } else {
            Ok(vec![row(value.clone(), report.mean_accuracy)])
        }
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Vec<AblationRow>> = {
        use rayon::prelude::*;
        cells.par_iter().map(run_cell).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Vec<AblationRow>> = cells.iter().map(run_cell).collect::<Result<_>>()?;

    Ok(results.into_iter().flatten().collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis, r.value, r.method, r.mode, r.corruption, r.severity, r.seed, r.mean_accuracy
        ));
    }
    out
}

// ── Summary aggregation ─────────────────────────────────────────────

/// Aggregate emitted CSVs (per-batch accuracy files and ablation sweeps)
/// into a summary table with seed-averaged accuracies in percent.
pub fn summarize_csv_dir(dir: &Path) -> Result<String> {
    // (kind, method, axis, value, mode, corruption, severity) -> per-seed accuracy
    type Key = (String, String, String, String, String, String, u8);
    let mut groups: BTreeMap<Key, BTreeMap<u64, (usize, usize)>> = BTreeMap::new();
    let mut ablation_groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();

    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
        .collect();
    entries.sort();

    for path in entries {
        let text = std::fs::read_to_string(&path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header == ACCURACY_CSV_HEADER {
            for line in lines {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 10 {
                    continue;
                }
                let key = (
                    "run".to_string(),
                    f[0].to_string(),
                    String::new(),
                    String::new(),
                    f[1].to_string(),
                    f[3].to_string(),
                    f[4].parse().unwrap_or(0),
                );
                let seed: u64 = f[5].parse().unwrap_or(0);
                let n: usize = f[7].parse().unwrap_or(0);
                let correct: usize = f[8].parse().unwrap_or(0);
                let cell = groups.entry(key).or_default().entry(seed).or_insert((0, 0));
                cell.0 += correct;
                cell.1 += n;
            }
        } else if header == ABLATION_CSV_HEADER {
            for line in lines {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 8 {
                    continue;
                }
                let key = (
                    "ablation".to_string(),
                    f[2].to_string(),
                    f[0].to_string(),
                    f[1].to_string(),
                    f[3].to_string(),
                    f[4].to_string(),
                    f[5].parse().unwrap_or(0),
                );
                let acc: f64 = f[7].parse().unwrap_or(0.0);
                ablation_groups.entry(key).or_default().push(acc);
            }
        }
    }

    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for ((kind, method, axis, value, mode, corruption, severity), per_seed) in &groups {
        let accs: Vec<f64> = per_seed
            .values()
            .map(|&(correct, n)| correct as f64 / n.max(1) as f64)
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        out.push_str(&format!(
            "{kind},{method},{axis},{value},{mode},{corruption},{severity},{},{:.1}\n",
            per_seed.len(),
            percent(mean)
        ));
    }
    for ((kind, method, axis, value, mode, corruption, severity), accs) in &ablation_groups {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        out.push_str(&format!(
            "{kind},{method},{axis},{value},{mode},{corruption},{severity},{},{:.1}\n",
            accs.len(),
            percent(mean)
        ));
    }
    Ok(out)
}
