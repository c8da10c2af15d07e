//! Micro image classifier built from SS2D blocks.
//!
//! Dataflow: patch embedding → repeated [batch-norm → SS2D(π) → residual] →
//! global average pool → linear head. Parameters live in a flat name → tensor
//! map so checkpointing, adaptation views, and weight averaging all operate
//! on the same namespace.
//!
//! Normalization has two explicit modes. `Batch` computes statistics from
//! the current batch (used for every forward during test-time adaptation,
//! and during source training, where it also feeds the running-average
//! update). `Running` uses the stored running statistics (used for clean
//! evaluation). Both are deterministic.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan2d::{ss2d_forward, Permutation, Ss2dParams};
use crate::ssm::SsmCore;
use crate::tensor::{GradStore, Tape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub state_dim: usize,
    pub num_classes: usize,
    /// Projections inside SS2D carry biases; tests use bias-free setups.
    pub linear_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            in_channels: 1,
            patch_size: 4,
            embed_dim: 16,
            num_blocks: 2,
            state_dim: 4,
            num_classes: 8,
            linear_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::ConfigMismatch(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::ConfigMismatch("need at least 2 classes".into()));
        }
        if self.embed_dim == 0 || self.state_dim == 0 || self.num_blocks == 0 {
            return Err(Error::ConfigMismatch("zero-sized model".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patches per image.
    pub fn seq_len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.in_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics from the current batch (test-time adaptation convention).
    Batch,
    /// Stored running statistics (clean evaluation).
    Running,
}

/// Selector over the named parameter map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamSelector {
    /// The four branch SSM cores of every SS2D block — the adaptation target.
    SsmCores,
    /// Batch-norm scale/shift, for the entropy-minimization baseline.
    NormAffines,
    All,
}

impl ParamSelector {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            ParamSelector::SsmCores => name.contains(".ss2d.branch."),
            ParamSelector::NormAffines => {
                name.ends_with(".norm.gamma") || name.ends_with(".norm.beta")
            }
            ParamSelector::All => true,
        }
    }
}

/// Result of one forward pass.
pub struct ForwardPass {
    pub logits: Tensor,
    /// Tape handles for every parameter, keyed by name. Handles for
    /// selector-matched parameters are differentiation targets.
    pub bound: BTreeMap<String, Tensor>,
    /// Per-block (mean, var) of this batch, present in `Batch` mode.
    pub batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl ForwardPass {
    /// Gradients by parameter name for selector-matched parameters.
    /// Parameters the loss never reached get zero gradients.
    pub fn grads_by_name(
        &self,
        store: &GradStore,
        selector: ParamSelector,
    ) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, handle) in &self.bound {
            if selector.matches(name) && handle.requires_grad() {
                let g = store
                    .get(handle)
                    .map(|t| t.to_vec())
                    .unwrap_or_else(|| vec![0.0; handle.len()]);
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    stats: BTreeMap<String, Vec<f64>>,
}

impl Model {
    /// Deterministic seeded initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut stats = BTreeMap::new();
        let e = config.embed_dim;
        let n = config.state_dim;

        let uniform = |shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng| {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
            Tensor::new(shape, data).expect("init shape")
        };

        let pd = config.patch_dim();
        params.insert(
            "patch_embed.weight".into(),
            uniform(vec![pd, e], 1.0 / (pd as f64).sqrt(), &mut rng),
        );
        params.insert("patch_embed.bias".into(), Tensor::zeros(vec![1, e]));

        let proj_scale = 1.0 / (e as f64).sqrt();
        // softplus(dt_b) ~ 0.1 at init
        let dt_bias_init = (0.1f64.exp() - 1.0).ln();
        let a_log_init: Vec<f64> = (1..=n).map(|k| (k as f64).ln()).collect();

        for blk in 0..config.num_blocks {
            let p = format!("blocks.{blk}");
            params.insert(format!("{p}.norm.gamma"), Tensor::filled(vec![1, e], 1.0));
            params.insert(format!("{p}.norm.beta"), Tensor::zeros(vec![1, e]));
            stats.insert(format!("{p}.norm.running_mean"), vec![0.0; e]);
            stats.insert(format!("{p}.norm.running_var"), vec![1.0; e]);

            for proj in ["in_proj", "gate_proj", "out_proj"] {
                params.insert(
                    format!("{p}.ss2d.{proj}.weight"),
                    uniform(vec![e, e], proj_scale, &mut rng),
                );
                if config.linear_bias {
                    params.insert(format!("{p}.ss2d.{proj}.bias"), Tensor::zeros(vec![1, e]));
                }
            }
            for k in 0..4 {
                let b = format!("{p}.ss2d.branch.{k}");
                params.insert(
                    format!("{b}.a_log"),
                    Tensor::new(vec![1, n], a_log_init.clone())?,
                );
                params.insert(
                    format!("{b}.b_proj"),
                    uniform(vec![e, n], proj_scale, &mut rng),
                );
                params.insert(
                    format!("{b}.c_proj"),
                    uniform(vec![e, n], proj_scale, &mut rng),
                );
                params.insert(
                    format!("{b}.dt_w"),
                    uniform(vec![e, 1], proj_scale, &mut rng),
                );
                params.insert(
                    format!("{b}.dt_b"),
                    Tensor::new(vec![1, 1], vec![dt_bias_init])?,
                );
                params.insert(format!("{b}.d_skip"), Tensor::filled(vec![1, e], 1.0));
            }
        }

        params.insert(
            "head.weight".into(),
            uniform(vec![e, config.num_classes], proj_scale, &mut rng),
        );
        params.insert("head.bias".into(), Tensor::zeros(vec![1, config.num_classes]));

        Ok(Model {
            config: config.clone(),
            params,
            stats,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn stats(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.stats
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let current = self.param(name)?;
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.params.insert(name.to_string(), value.detach());
        Ok(())
    }

    pub fn set_stat(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        let current = self.stats.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown statistic {name}"))
        })?;
        if current.len() != value.len() {
            return Err(Error::DataLength {
                shape: vec![current.len()],
                len: value.len(),
            });
        }
        self.stats.insert(name.to_string(), value);
        Ok(())
    }

    /// Ordered view of the parameters a selector matches.
    pub fn param_view(&self, selector: ParamSelector) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|(name, _)| selector.matches(name))
            .map(|(name, t)| (name.clone(), t.detach()))
            .collect()
    }

    /// Extract images into the patch-row layout the forward pass consumes:
    /// [n·T, patch_dim] with row (sample, patch) = sample·T + pr·grid + pc.
    pub fn patchify(&self, images: &[f64], n: usize) -> Result<Tensor> {
        let cfg = &self.config;
        if images.len() != n * cfg.pixels() {
            return Err(Error::DataLength {
                shape: vec![n, cfg.pixels()],
                len: images.len(),
            });
        }
        let side = cfg.image_size;
        let ps = cfg.patch_size;
        let grid = cfg.grid_side();
        let t = cfg.seq_len();
        let pd = cfg.patch_dim();
        let ch = cfg.in_channels;
        let mut out = Vec::with_capacity(n * t * pd);
        for img in 0..n {
            let base = img * cfg.pixels();
            for pr in 0..grid {
                for pc in 0..grid {
                    for dr in 0..ps {
                        for dc in 0..ps {
                            for c in 0..ch {
                                let row = pr * ps + dr;
                                let col = pc * ps + dc;
                                out.push(images[base + (row * side + col) * ch + c]);
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n * t, pd], out)
    }

    fn bind(&self, tape: &Tape, grad_selector: Option<ParamSelector>) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, value)| {
                let tracked = match grad_selector {
                    Some(sel) if sel.matches(name) => tape.param(value),
                    _ => value.detach(),
                };
                (name.clone(), tracked)
            })
            .collect()
    }

    fn ss2d_view(bound: &BTreeMap<String, Tensor>, blk: usize, bias: bool) -> Result<Ss2dParams> {
        let p = format!("blocks.{blk}.ss2d");
        let get = |suffix: &str| -> Result<Tensor> {
            bound
                .get(&format!("{p}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("missing {p}.{suffix}")))
        };
        let mut branches = Vec::with_capacity(4);
        for k in 0..4 {
            branches.push(SsmCore::selective(
                get(&format!("branch.{k}.a_log"))?,
                get(&format!("branch.{k}.b_proj"))?,
                get(&format!("branch.{k}.c_proj"))?,
                get(&format!("branch.{k}.dt_w"))?,
                get(&format!("branch.{k}.dt_b"))?,
                get(&format!("branch.{k}.d_skip"))?,
            )?);
        }
        let branches: [SsmCore; 4] = branches
            .try_into()
            .map_err(|_| Error::InvalidArgument("branch count".into()))?;
        Ok(Ss2dParams {
            in_w: get("in_proj.weight")?,
            in_b: if bias { Some(get("in_proj.bias")?) } else { None },
            gate_w: get("gate_proj.weight")?,
            gate_b: if bias { Some(get("gate_proj.bias")?) } else { None },
            out_w: get("out_proj.weight")?,
            out_b: if bias { Some(get("out_proj.bias")?) } else { None },
            branches,
        })
    }

    fn batch_norm(
        &self,
        tape: &Tape,
        x: &Tensor,
        blk: usize,
        bound: &BTreeMap<String, Tensor>,
        mode: NormMode,
    ) -> Result<(Tensor, Option<(Vec<f64>, Vec<f64>)>)> {
        let gamma = &bound[&format!("blocks.{blk}.norm.gamma")];
        let beta = &bound[&format!("blocks.{blk}.norm.beta")];
        let rows = x.shape()[0] as f64;
        let (centered, var, stats) = match mode {
            NormMode::Batch => {
                let averager = Tensor::filled(vec![1, x.shape()[0]], 1.0 / rows);
                let mean = tape.matmul(&averager, x)?; // [1, C]
                let centered = tape.sub(x, &mean)?;
                let sq = tape.mul(&centered, &centered)?;
                let var = tape.matmul(&averager, &sq)?; // biased, matches running update
                let stats = Some((mean.to_vec(), var.to_vec()));
                (centered, var, stats)
            }
            NormMode::Running => {
                let e = self.config.embed_dim;
                let rm = Tensor::new(
                    vec![1, e],
                    self.stats[&format!("blocks.{blk}.norm.running_mean")].clone(),
                )?;
                let rv = Tensor::new(
                    vec![1, e],
                    self.stats[&format!("blocks.{blk}.norm.running_var")].clone(),
                )?;
                (tape.sub(x, &rm)?, tape.constant(&rv), None)
            }
        };
        let inv_std = tape.powf(&tape.add_const(&var, BN_EPS), -0.5);
        let normalized = tape.mul(&centered, &inv_std)?;
        let out = tape.add(&tape.mul(&normalized, gamma)?, beta)?;
        Ok((out, stats))
    }

    /// Forward a batch of patch rows ([B·T, patch_dim]) under traversal
    /// permutation `perm`, producing logits [B, classes].
    pub fn forward(
        &self,
        tape: &Tape,
        patches: &Tensor,
        batch: usize,
        perm: Permutation,
        mode: NormMode,
        grad_selector: Option<ParamSelector>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let t = cfg.seq_len();
        if patches.shape() != [batch * t, cfg.patch_dim()] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: patches.shape().to_vec(),
                rhs: vec![batch * t, cfg.patch_dim()],
            });
        }
        let bound = self.bind(tape, grad_selector);
        let mut batch_stats = Vec::new();

        let mut x = tape.linear(
            patches,
            &bound["patch_embed.weight"],
            Some(&bound["patch_embed.bias"]),
        )?;

        let grid = cfg.grid_side();
        for blk in 0..cfg.num_blocks {
            let (normed, stats) = self.batch_norm(tape, &x, blk, &bound, mode)?;
            if let Some((mean, var)) = stats {
                batch_stats.push((format!("blocks.{blk}.norm"), mean, var));
            }
            let ss2d = Self::ss2d_view(&bound, blk, cfg.linear_bias)?;
            let mixed = ss2d_forward(tape, &ss2d, &normed, batch, grid, grid, perm)?;
            x = tape.add(&x, &mixed)?;
        }

        // global average pool: [B, B·T] matrix with 1/T at each (b, b·T+t)
        let mut pool = vec![0.0; batch * batch * t];
        for b in 0..batch {
            for i in 0..t {
                pool[b * batch * t + b * t + i] = 1.0 / t as f64;
            }
        }
        let pool = Tensor::new(vec![batch, batch * t], pool)?;
        let pooled = tape.matmul(&pool, &x)?;

        let logits = tape.linear(&pooled, &bound["head.weight"], Some(&bound["head.bias"]))?;
        Ok(ForwardPass {
            logits,
            bound,
            batch_stats,
        })
    }

    /// Fold a batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, batch_stats: &[(String, Vec<f64>, Vec<f64>)]) {
        for (prefix, mean, var) in batch_stats {
            let rm = self
                .stats
                .get_mut(&format!("{prefix}.running_mean"))
                .expect("known block");
            for (r, &m) in rm.iter_mut().zip(mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self
                .stats
                .get_mut(&format!("{prefix}.running_var"))
                .expect("known block");
            for (r, &v) in rv.iter_mut().zip(var.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Argmax predictions for raw images, batched.
    pub fn predict(
        &self,
        images: &[f64],
        n: usize,
        batch_size: usize,
        perm: Permutation,
        mode: NormMode,
    ) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(n);
        let pixels = self.config.pixels();
        let mut start = 0;
        while start < n {
            let b = batch_size.min(n - start);
            let patches = self.patchify(&images[start * pixels..(start + b) * pixels], b)?;
            let tape = Tape::new();
            let pass = self.forward(&tape, &patches, b, perm, mode, None)?;
            preds.extend(argmax_rows(&pass.logits));
            start += b;
        }
        Ok(preds)
    }
}

/// Row argmax with lowest-index tie-break.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of positions where prediction equals label.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return 0.0;
    }
    let correct = preds
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / preds.len() as f64
}

/// Tape-vs-central-difference comparison of the batch loss gradient over
/// every ssm-core parameter. The loss is cross-entropy against `labels`
/// under the identity traversal with batch-statistics normalization.
pub fn gradient_check_ssm_cores(
    model: &Model,
    images: &[f64],
    labels: &[usize],
    eps: f64,
) -> Result<crate::tensor::FdReport> {
    let batch = labels.len();
    let patches = model.patchify(images, batch)?;

    let tape = Tape::new();
    let pass = model.forward(
        &tape,
        &patches,
        batch,
        Permutation::identity(),
        NormMode::Batch,
        Some(ParamSelector::SsmCores),
    )?;
    let loss = tape.softmax_xent(&pass.logits, labels)?;
    let grads = tape.backward(&loss)?;
    let analytic = pass.grads_by_name(&grads, ParamSelector::SsmCores);

    let params: BTreeMap<String, Tensor> =
        model.param_view(ParamSelector::SsmCores).into_iter().collect();
    let mut scratch = model.clone();
    crate::tensor::finite_difference_check(
        move |ps| {
            for (name, value) in ps {
                scratch.set_param(name, value.detach())?;
            }
            let tape = Tape::new();
            let pass = scratch.forward(
                &tape,
                &patches,
                batch,
                Permutation::identity(),
                NormMode::Batch,
                None,
            )?;
            Ok(tape.softmax_xent(&pass.logits, labels)?.item())
        },
        &params,
        &analytic,
        eps,
    )
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub final_loss: f64,
}

/// Supervised source training with Adam on the full parameter set, always
/// under the identity traversal. Aborts on non-finite loss.
pub fn train_source(
    config: &ModelConfig,
    images: &[f64],
    labels: &[usize],
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    use crate::optim::Adam;
    use rand::seq::SliceRandom;

    let n = labels.len();
    let mut model = Model::init(config, train_cfg.seed)?;
    let mut adam = Adam::new(train_cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed_0f_ba7c4e5);
    let pixels = config.pixels();
    let mut last_loss = f64::NAN;

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let mut batch_images = Vec::with_capacity(chunk.len() * pixels);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                batch_images.extend_from_slice(&images[i * pixels..(i + 1) * pixels]);
                batch_labels.push(labels[i]);
            }
            let patches = model.patchify(&batch_images, chunk.len())?;
            let tape = Tape::new();
            let pass = model.forward(
                &tape,
                &patches,
                chunk.len(),
                Permutation::identity(),
                NormMode::Batch,
                Some(ParamSelector::All),
            )?;
            let loss = tape.softmax_xent(&pass.logits, &batch_labels)?;
            last_loss = loss.item();
            if !last_loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, step {step}"),
                });
            }
            let grads = tape.backward(&loss)?;
            let by_name = pass.grads_by_name(&grads, ParamSelector::All);
            model.update_running_stats(&pass.batch_stats);
            adam.step(model.params_mut(), &by_name)?;
        }
    }

    Ok(TrainOutcome {
        model,
        final_loss: last_loss,
    })
}

#[cfg(test)]
mod tests;
