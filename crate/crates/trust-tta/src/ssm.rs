//! 1D state-space primitive: linear recurrence over a token sequence with
//! zero-order-hold discretization.
//!
//! For step size Δ > 0 the continuous system is discretized as
//! Ā = exp(Δ·A), B̄ ≈ Δ·B, giving the recurrence
//!
//!   h(t) = Ā h(t-1) + B̄ x(t),    y(t) = C h(t) + D x(t),    h(0) = 0.
//!
//! A is diagonal and stored as `a_log` with A = -exp(a_log), so every mode is
//! strictly negative and |Ā| < 1 elementwise regardless of parameter drift.
//!
//! Two variants exist. The time-invariant form (fixed Δ, B, C) admits an
//! equivalent convolution kernel K̄ = (CB̄, CĀB̄, …) used to cross-check the
//! recurrence. The selective form used by the classifier derives Δ(t), B(t),
//! C(t) from the current input feature via learned projections.
//!
//! Multi-channel inputs run one recurrence per channel with shared Ā, B̄,
//! C(t) and a per-channel skip gain, so the hidden state is [channels, N]
//! per step.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Parameters of one scan branch.
#[derive(Debug, Clone)]
pub struct SsmCore {
    pub state_dim: usize,
    pub channels: usize,
    /// [1, N]; A = -exp(a_log) elementwise.
    pub a_log: Tensor,
    /// [1, C] per-channel skip gain.
    pub d_skip: Tensor,
    pub variant: SsmVariant,
}

#[derive(Debug, Clone)]
pub enum SsmVariant {
    /// Fixed discretization; admits the convolution-kernel form.
    TimeInvariant {
        delta: f64,
        /// [1, N]
        b: Tensor,
        /// [1, N]
        c: Tensor,
    },
    /// Input-dependent Δ(t), B(t), C(t) from the current feature vector.
    Selective {
        /// [C, N]
        b_proj: Tensor,
        /// [C, N]
        c_proj: Tensor,
        /// [C, 1]; Δ(t) = softplus(x(t)·dt_w + dt_b)
        dt_w: Tensor,
        /// [1, 1]
        dt_b: Tensor,
    },
}

impl SsmCore {
    pub fn time_invariant(
        a_log: Tensor,
        b: Tensor,
        c: Tensor,
        delta: f64,
        d_skip: Tensor,
    ) -> Result<Self> {
        if delta <= 0.0 {
            return Err(Error::NonPositiveDelta(delta));
        }
        let n = a_log.len();
        if b.len() != n || c.len() != n {
            return Err(Error::ShapeMismatch {
                op: "ssm_core",
                lhs: a_log.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(SsmCore {
            state_dim: n,
            channels: d_skip.len(),
            a_log,
            d_skip,
            variant: SsmVariant::TimeInvariant { delta, b, c },
        })
    }

    pub fn selective(
        a_log: Tensor,
        b_proj: Tensor,
        c_proj: Tensor,
        dt_w: Tensor,
        dt_b: Tensor,
        d_skip: Tensor,
    ) -> Result<Self> {
        let n = a_log.len();
        let channels = d_skip.len();
        if b_proj.shape() != [channels, n] || c_proj.shape() != [channels, n] {
            return Err(Error::ShapeMismatch {
                op: "ssm_core",
                lhs: b_proj.shape().to_vec(),
                rhs: vec![channels, n],
            });
        }
        if dt_w.shape() != [channels, 1] || dt_b.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "ssm_core",
                lhs: dt_w.shape().to_vec(),
                rhs: vec![channels, 1],
            });
        }
        Ok(SsmCore {
            state_dim: n,
            channels,
            a_log,
            d_skip,
            variant: SsmVariant::Selective {
                b_proj,
                c_proj,
                dt_w,
                dt_b,
            },
        })
    }

    pub fn is_selective(&self) -> bool {
        matches!(self.variant, SsmVariant::Selective { .. })
    }
}

/// Hidden states h(t) for t = 1..T, flattened per step as [batch, C, N].
#[derive(Debug, Clone)]
pub struct HiddenTrajectory {
    pub states: Vec<Vec<f64>>,
    pub state_dim: usize,
    pub channels: usize,
}

impl HiddenTrajectory {
    /// 1-indexed step access.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t - 1]
    }

    pub fn steps(&self) -> usize {
        self.states.len()
    }
}

pub struct ScanOutput {
    /// [B·T, C], rows batch-major (row b·T + t).
    pub y: Tensor,
    pub trajectory: Option<HiddenTrajectory>,
}

/// ZOH discretization of a diagonal system: Ā = exp(Δ·A) elementwise,
/// B̄ = Δ·B.
pub fn discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if delta <= 0.0 {
        return Err(Error::NonPositiveDelta(delta));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "discretize",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let a_bar = a.iter().map(|&ai| (delta * ai).exp()).collect();
    let b_bar = b.iter().map(|&bi| delta * bi).collect();
    Ok((a_bar, b_bar))
}

/// Run the recurrence over a batch of sequences laid out as [B·T, C] with
/// batch-major rows. Participates in differentiation when the core's tensors
/// are tracked on `tape`.
pub fn scan_batched(
    tape: &Tape,
    core: &SsmCore,
    x: &Tensor,
    batch: usize,
    seq_len: usize,
    collect_trajectory: bool,
) -> Result<ScanOutput> {
    if seq_len == 0 || batch == 0 {
        return Err(Error::InvalidArgument("scan needs T >= 1 and B >= 1".into()));
    }
    let channels = core.channels;
    if x.shape() != [batch * seq_len, channels] {
        return Err(Error::ShapeMismatch {
            op: "scan",
            lhs: x.shape().to_vec(),
            rhs: vec![batch * seq_len, channels],
        });
    }
    let n = core.state_dim;
    let rows = batch * channels;

    // row b·C + ch of the expanded per-(batch,channel) layout reads row b
    let expand_idx: Arc<Vec<usize>> = Arc::new(
        (0..batch)
            .flat_map(|b| std::iter::repeat(b).take(channels))
            .collect(),
    );
    let ones_col = Tensor::filled(vec![n, 1], 1.0);

    // A = -exp(a_log), shared by both variants
    let a = tape.neg(&tape.exp(&core.a_log));

    // time-invariant coefficients are step-independent
    let ti_coeffs = match &core.variant {
        SsmVariant::TimeInvariant { delta, b, c } => {
            if *delta <= 0.0 {
                return Err(Error::NonPositiveDelta(*delta));
            }
            let a_bar = tape.exp(&tape.scale(&a, *delta));
            let b_bar = tape.scale(b, *delta);
            Some((a_bar, b_bar, c.clone()))
        }
        SsmVariant::Selective { .. } => None,
    };

    let mut h = Tensor::zeros(vec![rows, n]);
    let mut traj = Vec::new();
    let mut y_steps: Vec<Tensor> = Vec::with_capacity(seq_len);

    for t in 0..seq_len {
        let step_idx: Arc<Vec<usize>> =
            Arc::new((0..batch).map(|b| b * seq_len + t).collect());
        let x_t = tape.gather_rows(x, step_idx)?; // [B, C]
        let x_col = tape.reshape(&x_t, vec![rows, 1])?;

        let (h_next, y_lin) = match &core.variant {
            SsmVariant::TimeInvariant { .. } => {
                let (a_bar, b_bar, c) = ti_coeffs.as_ref().expect("set for time-invariant");
                // h = Ā⊙h + B̄·x, with [1,N] coefficients broadcast over rows
                let decay = tape.mul(a_bar, &h)?;
                let drive = tape.mul(b_bar, &x_col)?;
                let h_next = tape.add(&decay, &drive)?;
                let y = tape.matmul(&tape.mul(c, &h_next)?, &ones_col)?;
                (h_next, y)
            }
            SsmVariant::Selective {
                b_proj,
                c_proj,
                dt_w,
                dt_b,
            } => {
                let delta_t = tape.softplus(&tape.linear(&x_t, dt_w, Some(dt_b))?); // [B,1]
                let b_t = tape.matmul(&x_t, b_proj)?; // [B,N]
                let c_t = tape.matmul(&x_t, c_proj)?; // [B,N]
                let a_bar = tape.exp(&tape.matmul(&delta_t, &a)?); // [B,N]
                let b_bar = tape.mul(&delta_t, &b_t)?; // [B,N]
                // per-(batch,channel) rows share the per-batch coefficients
                let a_bar_e = tape.gather_rows(&a_bar, Arc::clone(&expand_idx))?;
                let b_bar_e = tape.gather_rows(&b_bar, Arc::clone(&expand_idx))?;
                let c_e = tape.gather_rows(&c_t, Arc::clone(&expand_idx))?;
                let decay = tape.mul(&a_bar_e, &h)?;
                let drive = tape.mul(&b_bar_e, &x_col)?;
                let h_next = tape.add(&decay, &drive)?;
                let y = tape.matmul(&tape.mul(&c_e, &h_next)?, &ones_col)?;
                (h_next, y)
            }
        };

        if collect_trajectory {
            traj.push(h_next.to_vec());
        }
        let y_t = tape.reshape(&y_lin, vec![batch, channels])?;
        let skip = tape.mul(&core.d_skip, &x_t)?;
        y_steps.push(tape.add(&y_t, &skip)?);
        h = h_next;
    }

    // steps are time-major after concat; regroup rows batch-major
    let stacked = tape.concat_rows(&y_steps)?; // [T·B, C], row t·B + b
    let regroup: Arc<Vec<usize>> = Arc::new(
        (0..batch)
            .flat_map(|b| (0..seq_len).map(move |t| t * batch + b))
            .collect(),
    );
    let y = tape.gather_rows(&stacked, regroup)?;

    Ok(ScanOutput {
        y,
        trajectory: collect_trajectory.then_some(HiddenTrajectory {
            states: traj,
            state_dim: n,
            channels,
        }),
    })
}

/// Single-sequence scan: x is [T, C].
pub fn scan_recurrence(
    tape: &Tape,
    core: &SsmCore,
    x: &Tensor,
) -> Result<(Tensor, HiddenTrajectory)> {
    let seq_len = x.shape()[0];
    let out = scan_batched(tape, core, x, 1, seq_len, true)?;
    Ok((out.y, out.trajectory.expect("trajectory requested")))
}

/// Convolution kernel K̄[l] = Σ_n C[n]·Ā[n]^l·B̄[n] of a time-invariant core.
/// Causal convolution with K̄ reproduces the scan output minus the skip term.
pub fn conv_kernel(core: &SsmCore, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::InvalidArgument("kernel length must be >= 1".into()));
    }
    let (delta, b, c) = match &core.variant {
        SsmVariant::TimeInvariant { delta, b, c } => (*delta, b, c),
        SsmVariant::Selective { .. } => return Err(Error::SelectiveModeUnsupported),
    };
    let a: Vec<f64> = core.a_log.data().iter().map(|&l| -l.exp()).collect();
    let (a_bar, b_bar) = discretize(&a, b.data(), delta)?;
    let mut pow = vec![1.0; core.state_dim];
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        let mut k = 0.0;
        for i in 0..core.state_dim {
            k += c.data()[i] * pow[i] * b_bar[i];
        }
        kernel.push(k);
        for i in 0..core.state_dim {
            pow[i] *= a_bar[i];
        }
    }
    Ok(kernel)
}

/// Causal convolution y(t) = Σ_{l<=t} k[l]·x(t-l) of a scalar sequence.
pub fn convolve_causal(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for t in 0..x.len() {
        let mut acc = 0.0;
        for (l, &k) in kernel.iter().enumerate().take(t + 1) {
            acc += k * x[t - l];
        }
        y[t] = acc;
    }
    y
}

/// Inject `eps` into the token at `t_eps` (1-indexed) and report the first
/// step whose hidden state departs from the clean trajectory by more than
/// 1e-12 (L2). `None` when the perturbation never measurably alters the
/// state. By causality the onset equals `t_eps` whenever it is measurable.
pub fn artifact_divergence(
    core: &SsmCore,
    x: &Tensor,
    t_eps: usize,
    eps: &[f64],
) -> Result<Option<usize>> {
    let seq_len = x.shape()[0];
    let channels = core.channels;
    if t_eps == 0 || t_eps > seq_len {
        return Err(Error::InvalidArgument(format!(
            "perturbation step {t_eps} outside 1..={seq_len}"
        )));
    }
    if eps.len() != channels {
        return Err(Error::ShapeMismatch {
            op: "artifact_divergence",
            lhs: vec![eps.len()],
            rhs: vec![channels],
        });
    }
    if eps.iter().all(|&e| e == 0.0) {
        return Err(Error::InvalidArgument("perturbation must be non-zero".into()));
    }

    let mut perturbed = x.to_vec();
    for (ch, &e) in eps.iter().enumerate() {
        perturbed[(t_eps - 1) * channels + ch] += e;
    }
    let x_pert = Tensor::new(x.shape().to_vec(), perturbed)?;

    let tape = Tape::new();
    let (_, clean) = scan_recurrence(&tape, core, x)?;
    let tape = Tape::new();
    let (_, pert) = scan_recurrence(&tape, core, &x_pert)?;

    for t in 1..=seq_len {
        let d2: f64 = clean
            .state(t)
            .iter()
            .zip(pert.state(t).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d2.sqrt() > 1e-12 {
            return Ok(Some(t));
        }
    }
    Ok(None)
}
