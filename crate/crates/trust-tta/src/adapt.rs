//! Test-time adaptation: offline entropy ranking of traversal permutations,
//! top-K selection, per-permutation pseudo-label adaptation of the SSM
//! branch parameters, weight averaging, and evaluation under the identity
//! traversal — plus the comparison baselines.
//!
//! Per batch, each selected permutation adapts its own copy of the SSM cores
//! starting from the model state at the start of the batch, then the K
//! snapshots are averaged and loaded back. The per-permutation adaptations
//! are independent, so the sequential and data-parallel executions produce
//! bit-identical averages.
//!
//! In online mode the averaged weights carry over to the next batch and each
//! permutation keeps its own Adam moments across batches; in standard mode
//! model and optimizer state reset to the checkpoint before every batch.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{accuracy, argmax_rows, Model, NormMode, ParamSelector};
use crate::optim::Adam;
use crate::scan2d::Permutation;
use crate::tensor::{row_entropy, softmax_row, Tape, Tensor};

// ── Entropy utilities ───────────────────────────────────────────────

/// Shannon entropy −Σ p·ln p in nats, with 0·ln 0 = 0. The distribution must
/// be non-negative and sum to 1 within 1e-6.
pub fn shannon_entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidArgument("negative probability".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized(total));
    }
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

/// Row-wise softmax probabilities of a logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let cols = logits.shape()[1];
    logits.data().chunks(cols).map(softmax_row).collect()
}

/// Per-row argmax of the logits, detached from any tape. Ties break toward
/// the lowest class index.
pub fn pseudo_labels(logits: &Tensor) -> Vec<usize> {
    argmax_rows(logits)
}

// ── Batches and streams ─────────────────────────────────────────────

/// One target-stream batch: raw images plus (held-back) labels for scoring.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
}

/// Chunk a labeled image set into batches following `order`.
pub fn make_batches(
    images: &[f64],
    labels: &[usize],
    pixels: usize,
    order: &[usize],
    batch_size: usize,
) -> Vec<Batch> {
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch_images = Vec::with_capacity(chunk.len() * pixels);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                batch_images.extend_from_slice(&images[i * pixels..(i + 1) * pixels]);
                batch_labels.push(labels[i]);
            }
            Batch {
                images: batch_images,
                labels: batch_labels,
                n: chunk.len(),
            }
        })
        .collect()
}

// ── Ranking ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingEntry {
    pub permutation: Permutation,
    pub mean_entropy_nats: f64,
}

/// Mean prediction entropy per candidate permutation, sorted ascending with
/// lexicographic tie-break.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyRanking {
    pub entries: Vec<RankingEntry>,
    pub calibration_batches: usize,
    pub calibration_samples: usize,
}

/// Score every pool permutation by mean prediction entropy over the
/// calibration batches. Read-only on the model; normalization uses batch
/// statistics, matching the adaptation-phase forward.
pub fn rank_permutations(
    model: &Model,
    calibration: &[Batch],
    pool: &[Permutation],
) -> Result<EntropyRanking> {
    if calibration.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty permutation pool".into()));
    }
    let total_samples: usize = calibration.iter().map(|b| b.n).sum();
    let mut entries = Vec::with_capacity(pool.len());
    for &perm in pool {
        let mut total_entropy = 0.0;
        for batch in calibration {
            let patches = model.patchify(&batch.images, batch.n)?;
            let tape = Tape::new();
            let pass = model.forward(&tape, &patches, batch.n, perm, NormMode::Batch, None)?;
            let cols = pass.logits.shape()[1];
            for row in pass.logits.data().chunks(cols) {
                total_entropy += row_entropy(row);
            }
        }
        entries.push(RankingEntry {
            permutation: perm,
            mean_entropy_nats: total_entropy / total_samples as f64,
        });
    }
    entries.sort_by(|a, b| {
        a.mean_entropy_nats
            .partial_cmp(&b.mean_entropy_nats)
            .expect("finite entropies")
            .then_with(|| a.permutation.cmp(&b.permutation))
    });
    Ok(EntropyRanking {
        entries,
        calibration_batches: calibration.len(),
        calibration_samples: total_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Most confident permutations (the method's selection rule).
    Lowest,
    /// Least confident permutations (control experiment).
    Highest,
}

/// First (or last) K entries of the ranking, in ranking order.
pub fn select_top_k(
    ranking: &EntropyRanking,
    k: usize,
    polarity: Polarity,
) -> Result<Vec<Permutation>> {
    if k == 0 || k > ranking.entries.len() {
        return Err(Error::InvalidArgument(format!(
            "K = {k} outside 1..={}",
            ranking.entries.len()
        )));
    }
    let perms: Vec<Permutation> = match polarity {
        Polarity::Lowest => ranking.entries[..k]
            .iter()
            .map(|e| e.permutation)
            .collect(),
        Polarity::Highest => ranking.entries[ranking.entries.len() - k..]
            .iter()
            .map(|e| e.permutation)
            .collect(),
    };
    Ok(perms)
}

// ── Snapshots and averaging ─────────────────────────────────────────

/// Deep copy of the SSM-core parameters after an adaptation step, tagged
/// with the permutation that produced it.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    pub permutation: Permutation,
    pub values: BTreeMap<String, Tensor>,
}

pub fn snapshot_ssm_cores(model: &Model, permutation: Permutation) -> ParamSnapshot {
    ParamSnapshot {
        permutation,
        values: model.param_view(ParamSelector::SsmCores).into_iter().collect(),
    }
}

pub fn load_ssm_cores(model: &mut Model, values: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, value) in values {
        model.set_param(name, value.detach())?;
    }
    Ok(())
}

/// Arithmetic mean of parameter snapshots, optionally weighted.
///
/// Snapshots are first sorted by permutation tag so the result is invariant
/// to the order of the input list, and summed pairwise per element. When
/// all snapshots agree on an element the mean is that value exactly, which
/// keeps no-op adaptation (lr = 0) bit-transparent.
pub fn average_weights(
    snapshots: &[ParamSnapshot],
    weights: Option<&[f64]>,
) -> Result<BTreeMap<String, Tensor>> {
    if snapshots.is_empty() {
        return Err(Error::InvalidArgument("no snapshots to average".into()));
    }
    if let Some(w) = weights {
        if w.len() != snapshots.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} snapshots",
                w.len(),
                snapshots.len()
            )));
        }
    }
    let mut order: Vec<usize> = (0..snapshots.len()).collect();
    order.sort_by_key(|&i| snapshots[i].permutation);

    let reference = &snapshots[order[0]];
    let mut out = BTreeMap::new();
    let count = snapshots.len() as f64;
    for (name, first) in &reference.values {
        let mut slices: Vec<&[f64]> = Vec::with_capacity(snapshots.len());
        let mut ws: Vec<f64> = Vec::with_capacity(snapshots.len());
        for &i in &order {
            let tensor = snapshots[i].values.get(name).ok_or_else(|| {
                Error::InvalidArgument(format!("snapshot missing parameter {name}"))
            })?;
            if tensor.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "average_weights",
                    lhs: first.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            slices.push(tensor.data());
            if let Some(w) = weights {
                ws.push(w[i]);
            }
        }
        let mut data = vec![0.0; first.len()];
        let mut terms = vec![0.0; snapshots.len()];
        for (j, value) in data.iter_mut().enumerate() {
            let all_equal = slices
                .windows(2)
                .all(|pair| pair[0][j].to_bits() == pair[1][j].to_bits());
            *value = if all_equal && weights.is_none() {
                slices[0][j]
            } else if let Some(_w) = weights {
                for (term, (s, &w)) in terms.iter_mut().zip(slices.iter().zip(ws.iter())) {
                    *term = w * s[j];
                }
                pairwise_sum(&terms)
            } else {
                for (term, s) in terms.iter_mut().zip(slices.iter()) {
                    *term = s[j];
                }
                pairwise_sum(&terms) / count
            };
        }
        out.insert(name.clone(), Tensor::new(first.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Balanced halving tree: sum(first half) + sum(second half), recursively.
fn pairwise_sum(terms: &[f64]) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => terms[0],
        n => pairwise_sum(&terms[..n / 2]) + pairwise_sum(&terms[n / 2..]),
    }
}

// ── Adaptation steps ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Weights persist across batches.
    Online,
    /// Model resets to the checkpoint before every batch.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    Parallel,
}

/// One pseudo-label adaptation step (or several iterations) of the SSM cores
/// under traversal `perm`. With `shared_labels` the cross-entropy targets
/// are fixed for every iteration (the pseudo-labels of the default-traversal
/// forward, shared across permutation lanes); otherwise each iteration
/// labels itself from its own forward pass. Labels are detached either way.
/// Returns a deep snapshot of the cores after the update.
pub fn adapt_step(
    model: &mut Model,
    batch: &Batch,
    perm: Permutation,
    iterations: usize,
    adam: &mut Adam,
    batch_index: usize,
    shared_labels: Option<&[usize]>,
) -> Result<ParamSnapshot> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let patches = model.patchify(&batch.images, batch.n)?;
    for _ in 0..iterations {
        let tape = Tape::new();
        let pass = model.forward(
            &tape,
            &patches,
            batch.n,
            perm,
            NormMode::Batch,
            Some(ParamSelector::SsmCores),
        )?;
        let labels = match shared_labels {
            Some(l) => l.to_vec(),
            None => pseudo_labels(&pass.logits),
        };
        let loss = tape.softmax_xent(&pass.logits, &labels)?;
        if !loss.item().is_finite() {
            return Err(Error::Diverged {
                batch: batch_index,
                permutation: perm.to_string(),
            });
        }
        let grads = tape.backward(&loss)?;
        let by_name = pass.grads_by_name(&grads, ParamSelector::SsmCores);
        adam.step(model.params_mut(), &by_name)?;
    }
    Ok(snapshot_ssm_cores(model, perm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// One set of pseudo-labels per batch from the default-traversal forward,
    /// shared by every permutation lane.
    Identity,
    /// Each lane labels itself from its own permuted forward.
    PerPermutation,
}

/// Entropy-minimization step on the normalization affines (the TENT-style
/// baseline objective).
fn entropy_step(
    model: &mut Model,
    batch: &Batch,
    adam: &mut Adam,
    batch_index: usize,
) -> Result<()> {
    let patches = model.patchify(&batch.images, batch.n)?;
    let tape = Tape::new();
    let pass = model.forward(
        &tape,
        &patches,
        batch.n,
        Permutation::identity(),
        NormMode::Batch,
        Some(ParamSelector::NormAffines),
    )?;
    let loss = tape.entropy_mean(&pass.logits)?;
    if !loss.item().is_finite() {
        return Err(Error::Diverged {
            batch: batch_index,
            permutation: Permutation::identity().to_string(),
        });
    }
    let grads = tape.backward(&loss)?;
    let by_name = pass.grads_by_name(&grads, ParamSelector::NormAffines);
    adam.step(model.params_mut(), &by_name)
}

// ── Run configuration and metrics ───────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub k: usize,
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mode: Mode,
    pub exec: ExecMode,
    pub polarity: Polarity,
    pub calib_batches: usize,
    /// Entropy-softmax weighting of the averaged snapshots; uniform when off.
    pub entropy_weighted: bool,
    pub label_source: LabelSource,
    pub pool: Vec<Permutation>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            k: 6,
            iterations: 1,
            lr: 1e-3,
            batch_size: 32,
            mode: Mode::Online,
            exec: ExecMode::Sequential,
            polarity: Polarity::Lowest,
            calib_batches: 4,
            entropy_weighted: false,
            label_source: LabelSource::Identity,
            pool: Permutation::all(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchMetric {
    pub index: usize,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Per-layer spread of the adapted snapshots: mean and standard deviation of
/// the parameter L2 norms across the K snapshots of the final batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDiversity {
    pub name: String,
    pub norm_mean: f64,
    pub norm_std: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub rank_secs: f64,
    pub adapt_secs: f64,
    pub predict_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_batch: Vec<BatchMetric>,
    pub mean_accuracy: f64,
    pub total_samples: usize,
    pub total_correct: usize,
    /// Predicted class per sample, in stream order.
    pub predictions: Vec<Vec<usize>>,
    pub diversity: Vec<LayerDiversity>,
    pub timings: PhaseTimings,
}

fn finish_metrics(
    per_batch: Vec<BatchMetric>,
    predictions: Vec<Vec<usize>>,
    diversity: Vec<LayerDiversity>,
    timings: PhaseTimings,
) -> RunMetrics {
    let total_samples: usize = per_batch.iter().map(|m| m.n).sum();
    let total_correct: usize = per_batch.iter().map(|m| m.correct).sum();
    RunMetrics {
        mean_accuracy: if total_samples == 0 {
            0.0
        } else {
            total_correct as f64 / total_samples as f64
        },
        total_samples,
        total_correct,
        per_batch,
        predictions,
        diversity,
        timings,
    }
}

fn diversity_of(snapshots: &[ParamSnapshot]) -> Vec<LayerDiversity> {
    if snapshots.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for name in snapshots[0].values.keys() {
        let norms: Vec<f64> = snapshots
            .iter()
            .map(|s| s.values[name].data().iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let var = norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / norms.len() as f64;
        out.push(LayerDiversity {
            name: name.clone(),
            norm_mean: mean,
            norm_std: var.sqrt(),
        });
    }
    out
}

/// Evaluation of the current weights on one batch, always under the identity
/// traversal (the prediction path takes no permutation argument by design).
fn predict_batch(model: &Model, batch: &Batch) -> Result<Vec<usize>> {
    let patches = model.patchify(&batch.images, batch.n)?;
    let tape = Tape::new();
    let pass = model.forward(
        &tape,
        &patches,
        batch.n,
        Permutation::identity(),
        NormMode::Batch,
        None,
    )?;
    Ok(argmax_rows(&pass.logits))
}

fn batch_metric(index: usize, preds: &[usize], labels: &[usize]) -> BatchMetric {
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    BatchMetric {
        index,
        n: labels.len(),
        correct,
        accuracy: accuracy(preds, labels),
    }
}

/// Audit that adaptation never touched anything outside the SSM cores.
fn frozen_trunk_audit(model: &Model, checkpoint: &Checkpoint) -> Result<()> {
    for (name, value) in model.params() {
        if ParamSelector::SsmCores.matches(name) {
            continue;
        }
        let reference = checkpoint
            .params
            .get(name)
            .ok_or_else(|| Error::FrozenParamChanged(name.clone()))?;
        let same = value
            .data()
            .iter()
            .zip(reference.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::FrozenParamChanged(name.clone()));
        }
    }
    Ok(())
}

// ── TRUST run ───────────────────────────────────────────────────────

pub struct TrustRun {
    pub metrics: RunMetrics,
    pub ranking: EntropyRanking,
    pub selected: Vec<Permutation>,
    /// Per-permutation evaluation accuracies for diagnostics runs; empty
    /// unless requested.
    pub eval_perm_accuracy: Vec<(Permutation, f64)>,
}

/// Snapshot weights for the entropy-softmax weighting option: w ∝ exp(-H).
fn entropy_weights(ranking: &EntropyRanking, selected: &[Permutation]) -> Vec<f64> {
    let h: Vec<f64> = selected
        .iter()
        .map(|p| {
            ranking
                .entries
                .iter()
                .find(|e| e.permutation == *p)
                .map(|e| e.mean_entropy_nats)
                .unwrap_or(0.0)
        })
        .collect();
    let m = h.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = h.iter().map(|&v| (-(v - m)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Adapt each selected permutation's own copy of the SSM cores from `base`,
/// sequentially or in parallel. Lane order follows `selected`.
fn adapt_lanes(
    model: &Model,
    base: &ParamSnapshot,
    batch: &Batch,
    selected: &[Permutation],
    adams: &mut [Adam],
    iterations: usize,
    exec: ExecMode,
    batch_index: usize,
    shared_labels: Option<&[usize]>,
) -> Result<Vec<ParamSnapshot>> {
    let run_lane = |perm: Permutation, adam: &mut Adam| -> Result<ParamSnapshot> {
        let mut lane_model = model.clone();
        load_ssm_cores(&mut lane_model, &base.values)?;
        adapt_step(
            &mut lane_model,
            batch,
            perm,
            iterations,
            adam,
            batch_index,
            shared_labels,
        )
    };
    match exec {
        ExecMode::Sequential => selected
            .iter()
            .zip(adams.iter_mut())
            .map(|(&perm, adam)| run_lane(perm, adam))
            .collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                selected
                    .par_iter()
                    .zip(adams.par_iter_mut())
                    .map(|(&perm, adam)| run_lane(perm, adam))
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                // sequential fallback: identical math, one lane at a time
                selected
                    .iter()
                    .zip(adams.iter_mut())
                    .map(|(&perm, adam)| run_lane(perm, adam))
                    .collect()
            }
        }
    }
}

/// The full adaptation pipeline over a target stream. The ranking must come
/// from the offline stage (computed on the stream's first calibration
/// batches). Evaluation always uses the identity traversal; `eval_perms`
/// adds read-only diagnostic evaluations under other traversals.
pub fn trust_run(
    model: &mut Model,
    checkpoint: &Checkpoint,
    stream: &[Batch],
    ranking: EntropyRanking,
    config: &AdaptationConfig,
    eval_perms: &[Permutation],
) -> Result<TrustRun> {
    let selected = select_top_k(&ranking, config.k, config.polarity)?;
    let weights = config
        .entropy_weighted
        .then(|| entropy_weights(&ranking, &selected));

    let mut adams: Vec<Adam> = selected.iter().map(|_| Adam::new(config.lr)).collect();
    let mut per_batch = Vec::with_capacity(stream.len());
    let mut predictions = Vec::with_capacity(stream.len());
    let mut diversity = Vec::new();
    let mut timings = PhaseTimings::default();
    let mut eval_accumulator: Vec<(Permutation, usize)> =
        eval_perms.iter().map(|&p| (p, 0usize)).collect();

    for (index, batch) in stream.iter().enumerate() {
        if config.mode == Mode::Standard {
            model.reset(checkpoint)?;
            for adam in &mut adams {
                *adam = Adam::new(config.lr);
            }
        }
        let base = snapshot_ssm_cores(model, Permutation::identity());

        let t0 = Instant::now();
        let shared_labels = match config.label_source {
            LabelSource::Identity => Some(predict_batch(model, batch)?),
            LabelSource::PerPermutation => None,
        };
        let snapshots = adapt_lanes(
            model,
            &base,
            batch,
            &selected,
            &mut adams,
            config.iterations,
            config.exec,
            index,
            shared_labels.as_deref(),
        )?;
        let averaged = average_weights(&snapshots, weights.as_deref())?;
        load_ssm_cores(model, &averaged)?;
        timings.adapt_secs += t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let preds = predict_batch(model, batch)?;
        timings.predict_secs += t1.elapsed().as_secs_f64();

        per_batch.push(batch_metric(index, &preds, &batch.labels));
        predictions.push(preds);

        for (perm, correct) in &mut eval_accumulator {
            let patches = model.patchify(&batch.images, batch.n)?;
            let tape = Tape::new();
            let pass = model.forward(&tape, &patches, batch.n, *perm, NormMode::Batch, None)?;
            let preds = argmax_rows(&pass.logits);
            *correct += preds
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
        }

        if index + 1 == stream.len() {
            diversity = diversity_of(&snapshots);
        }
    }

    frozen_trunk_audit(model, checkpoint)?;

    let total: usize = stream.iter().map(|b| b.n).sum();
    let eval_perm_accuracy = eval_accumulator
        .into_iter()
        .map(|(p, correct)| (p, correct as f64 / total.max(1) as f64))
        .collect();

    Ok(TrustRun {
        metrics: finish_metrics(per_batch, predictions, diversity, timings),
        ranking,
        selected,
        eval_perm_accuracy,
    })
}

// ── Baselines ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    SourceOnly,
    Tent,
    Ensemble,
    Repetition,
}

/// Comparison baselines sharing the stream and batch conventions of
/// [`trust_run`].
pub fn run_baseline(
    kind: BaselineKind,
    model: &mut Model,
    checkpoint: &Checkpoint,
    stream: &[Batch],
    ranking: Option<&EntropyRanking>,
    config: &AdaptationConfig,
) -> Result<RunMetrics> {
    match kind {
        BaselineKind::SourceOnly => {
            let mut per_batch = Vec::new();
            let mut predictions = Vec::new();
            let mut timings = PhaseTimings::default();
            for (index, batch) in stream.iter().enumerate() {
                let t0 = Instant::now();
                let preds = predict_batch(model, batch)?;
                timings.predict_secs += t0.elapsed().as_secs_f64();
                per_batch.push(batch_metric(index, &preds, &batch.labels));
                predictions.push(preds);
            }
            Ok(finish_metrics(per_batch, predictions, Vec::new(), timings))
        }
        BaselineKind::Tent => {
            let mut adam = Adam::new(config.lr);
            let mut per_batch = Vec::new();
            let mut predictions = Vec::new();
            let mut timings = PhaseTimings::default();
            for (index, batch) in stream.iter().enumerate() {
                if config.mode == Mode::Standard {
                    model.reset(checkpoint)?;
                    adam = Adam::new(config.lr);
                }
                let t0 = Instant::now();
                for _ in 0..config.iterations {
                    entropy_step(model, batch, &mut adam, index)?;
                }
                timings.adapt_secs += t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let preds = predict_batch(model, batch)?;
                timings.predict_secs += t1.elapsed().as_secs_f64();
                per_batch.push(batch_metric(index, &preds, &batch.labels));
                predictions.push(preds);
            }
            Ok(finish_metrics(per_batch, predictions, Vec::new(), timings))
        }
        BaselineKind::Ensemble => {
            let ranking = ranking.ok_or_else(|| {
                Error::InvalidArgument("ensemble baseline needs a ranking".into())
            })?;
            let selected = select_top_k(ranking, config.k, config.polarity)?;
            // one persistent lane per permutation; predictions are averaged
            // in probability space and the lanes are never weight-averaged
            let mut lanes: Vec<(Permutation, BTreeMap<String, Tensor>, Adam)> = selected
                .iter()
                .map(|&p| {
                    (
                        p,
                        snapshot_ssm_cores(model, p).values,
                        Adam::new(config.lr),
                    )
                })
                .collect();
            let classes = model.config.num_classes;
            let mut per_batch = Vec::new();
            let mut predictions = Vec::new();
            let mut timings = PhaseTimings::default();
            for (index, batch) in stream.iter().enumerate() {
                if config.mode == Mode::Standard {
                    model.reset(checkpoint)?;
                    let fresh = snapshot_ssm_cores(model, Permutation::identity()).values;
                    for (_, values, adam) in &mut lanes {
                        *values = fresh.clone();
                        *adam = Adam::new(config.lr);
                    }
                }
                let t0 = Instant::now();
                let mut prob_sum = vec![0.0f64; batch.n * classes];
                for (perm, values, adam) in &mut lanes {
                    let mut lane_model = model.clone();
                    load_ssm_cores(&mut lane_model, values)?;
                    let lane_labels = match config.label_source {
                        LabelSource::Identity => Some(predict_batch(&lane_model, batch)?),
                        LabelSource::PerPermutation => None,
                    };
                    let snapshot = adapt_step(
                        &mut lane_model,
                        batch,
                        *perm,
                        config.iterations,
                        adam,
                        index,
                        lane_labels.as_deref(),
                    )?;
                    *values = snapshot.values;
                    // each lane predicts under its own traversal
                    let patches = lane_model.patchify(&batch.images, batch.n)?;
                    let tape = Tape::new();
                    let pass =
                        lane_model.forward(&tape, &patches, batch.n, *perm, NormMode::Batch, None)?;
                    for (i, row) in softmax_rows(&pass.logits).into_iter().enumerate() {
                        for (c, p) in row.into_iter().enumerate() {
                            prob_sum[i * classes + c] += p;
                        }
                    }
                }
                timings.adapt_secs += t0.elapsed().as_secs_f64();
                let preds: Vec<usize> = prob_sum
                    .chunks(classes)
                    .map(|row| {
                        let mut best = 0;
                        for (i, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect();
                per_batch.push(batch_metric(index, &preds, &batch.labels));
                predictions.push(preds);
            }
            Ok(finish_metrics(per_batch, predictions, Vec::new(), timings))
        }
        BaselineKind::Repetition => {
            // identity traversal applied K times sequentially (chained
            // updates), then the K snapshots along the chain are averaged
            let mut adam = Adam::new(config.lr);
            let mut per_batch = Vec::new();
            let mut predictions = Vec::new();
            let mut diversity = Vec::new();
            let mut timings = PhaseTimings::default();
            for (index, batch) in stream.iter().enumerate() {
                if config.mode == Mode::Standard {
                    model.reset(checkpoint)?;
                    adam = Adam::new(config.lr);
                }
                let t0 = Instant::now();
                let mut snapshots = Vec::with_capacity(config.k);
                for _ in 0..config.k {
                    snapshots.push(adapt_step(
                        model,
                        batch,
                        Permutation::identity(),
                        config.iterations,
                        &mut adam,
                        index,
                        None,
                    )?);
                }
                let averaged = average_weights(&snapshots, None)?;
                load_ssm_cores(model, &averaged)?;
                timings.adapt_secs += t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let preds = predict_batch(model, batch)?;
                timings.predict_secs += t1.elapsed().as_secs_f64();
                per_batch.push(batch_metric(index, &preds, &batch.labels));
                predictions.push(preds);
                if index + 1 == stream.len() {
                    diversity = diversity_of(&snapshots);
                }
            }
            frozen_trunk_audit(model, checkpoint)?;
            Ok(finish_metrics(per_batch, predictions, diversity, timings))
        }
    }
}
