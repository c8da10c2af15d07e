use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::row_entropy;

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 6,
        num_blocks: 1,
        state_dim: 3,
        num_classes: 4,
        ..ModelConfig::default()
    }
}

fn rand_images(rng: &mut ChaCha8Rng, n: usize, cfg: &ModelConfig) -> Vec<f64> {
    (0..n * cfg.pixels()).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn forward_images(
    model: &Model,
    images: &[f64],
    n: usize,
    perm: Permutation,
    mode: NormMode,
) -> Tensor {
    let patches = model.patchify(images, n).unwrap();
    let tape = Tape::new();
    model
        .forward(&tape, &patches, n, perm, mode, None)
        .unwrap()
        .logits
}

fn make_branches_identical(model: &mut Model) {
    for blk in 0..model.config.num_blocks {
        for field in ["a_log", "b_proj", "c_proj", "dt_w", "dt_b", "d_skip"] {
            let source = model
                .param(&format!("blocks.{blk}.ss2d.branch.0.{field}"))
                .unwrap()
                .detach();
            for k in 1..4 {
                model
                    .set_param(&format!("blocks.{blk}.ss2d.branch.{k}.{field}"), source.detach())
                    .unwrap();
            }
        }
    }
}

// ── Forward ─────────────────────────────────────────────────────────

#[test]
fn zero_head_gives_uniform_entropy() {
    let cfg = small_config();
    let mut model = Model::init(&cfg, 3).unwrap();
    model
        .set_param("head.weight", Tensor::zeros(vec![cfg.embed_dim, cfg.num_classes]))
        .unwrap();
    model
        .set_param("head.bias", Tensor::zeros(vec![1, cfg.num_classes]))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = rand_images(&mut rng, 3, &cfg);
    let logits = forward_images(&model, &images, 3, Permutation::identity(), NormMode::Batch);
    assert!(logits.data().iter().all(|&v| v == 0.0));
    for row in logits.data().chunks(cfg.num_classes) {
        let h = row_entropy(row);
        assert!((h - (cfg.num_classes as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn duplicated_sample_gets_identical_logits_in_eval_mode() {
    let cfg = small_config();
    let model = Model::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = rand_images(&mut rng, 1, &cfg);
    let mut two = one.clone();
    two.extend_from_slice(&one);
    let logits = forward_images(&model, &two, 2, Permutation::identity(), NormMode::Running);
    let (r0, r1) = logits.data().split_at(cfg.num_classes);
    assert_eq!(r0, r1);
}

#[test]
fn identical_branch_cores_make_logits_permutation_invariant() {
    let cfg = small_config();
    let mut model = Model::init(&cfg, 5).unwrap();
    make_branches_identical(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = rand_images(&mut rng, 2, &cfg);
    let reference = forward_images(&model, &images, 2, Permutation::identity(), NormMode::Batch);
    for perm in Permutation::all() {
        let logits = forward_images(&model, &images, 2, perm, NormMode::Batch);
        assert_eq!(logits.data(), reference.data(), "permutation {perm}");
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config();
    let model = Model::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = rand_images(&mut rng, 4, &cfg);
    for mode in [NormMode::Batch, NormMode::Running] {
        let a = forward_images(&model, &images, 4, Permutation::identity(), mode);
        let b = forward_images(&model, &images, 4, Permutation::identity(), mode);
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn forward_rejects_wrong_shape() {
    let cfg = small_config();
    let model = Model::init(&cfg, 7).unwrap();
    let tape = Tape::new();
    let bad = Tensor::zeros(vec![3, cfg.patch_dim()]);
    assert!(model
        .forward(&tape, &bad, 1, Permutation::identity(), NormMode::Batch, None)
        .is_err());
}

// ── Parameter views ─────────────────────────────────────────────────

#[test]
fn ssm_core_view_has_expected_structure() {
    let model = Model::init(&ModelConfig::default(), 0).unwrap();
    let cores = model.param_view(ParamSelector::SsmCores);
    // 2 blocks × 4 branches × {a_log, b_proj, c_proj, dt_w, dt_b, d_skip}
    assert_eq!(cores.len(), 2 * 4 * 6);
    for field in ["a_log", "b_proj", "c_proj", "dt_w", "dt_b", "d_skip"] {
        let count = cores
            .iter()
            .filter(|(name, _)| name.ends_with(&format!(".{field}")))
            .count();
        assert_eq!(count, 8, "{field}");
    }
}

#[test]
fn selectors_are_disjoint_and_cover_with_frozen_rest() {
    let model = Model::init(&ModelConfig::default(), 0).unwrap();
    let cores: Vec<String> = model
        .param_view(ParamSelector::SsmCores)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let norms: Vec<String> = model
        .param_view(ParamSelector::NormAffines)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let all: Vec<String> = model
        .param_view(ParamSelector::All)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for n in &cores {
        assert!(!norms.contains(n));
    }
    let frozen: Vec<&String> = all
        .iter()
        .filter(|n| !cores.contains(n) && !norms.contains(n))
        .collect();
    assert_eq!(cores.len() + norms.len() + frozen.len(), all.len());
    assert!(frozen.iter().any(|n| n.as_str() == "head.weight"));
    assert!(frozen.iter().any(|n| n.as_str() == "patch_embed.weight"));
    assert!(frozen.iter().any(|n| n.contains("in_proj")));
}

// ── Gradients ───────────────────────────────────────────────────────

#[test]
fn ssm_core_gradients_match_finite_differences_end_to_end() {
    let cfg = small_config();
    let model = Model::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let images = rand_images(&mut rng, 4, &cfg);
    let labels = vec![0usize, 1, 2, 3];
    let report = gradient_check_ssm_cores(&model, &images, &labels, 1e-5).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "rel err {} at {}[{}]: {} vs {}",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric
    );
}

// ── Training ────────────────────────────────────────────────────────

fn tiny_training_set(cfg: &ModelConfig, n: usize) -> (Vec<f64>, Vec<usize>) {
    // two separable classes: bright left half vs bright right half
    let mut images = Vec::with_capacity(n * cfg.pixels());
    let mut labels = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let side = cfg.image_size;
    for i in 0..n {
        let class = i % 2;
        for r in 0..side {
            for c in 0..side {
                let lit = if class == 0 { c < side / 2 } else { c >= side / 2 };
                let base: f64 = if lit { 0.85 } else { 0.15 };
                let _ = r;
                images.push((base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    (images, labels)
}

#[test]
fn zero_lr_training_changes_nothing() {
    let cfg = small_config();
    let (images, labels) = tiny_training_set(&cfg, 16);
    let init = Model::init(&cfg, 9).unwrap();
    let outcome = train_source(
        &cfg,
        &images,
        &labels,
        &TrainConfig {
            epochs: 2,
            lr: 0.0,
            batch_size: 8,
            seed: 9,
        },
    )
    .unwrap();
    for (name, value) in init.params() {
        assert_eq!(
            value.data(),
            outcome.model.param(name).unwrap().data(),
            "{name} changed under lr=0"
        );
    }
}

#[test]
fn same_seed_trains_bit_identical_models() {
    let cfg = small_config();
    let (images, labels) = tiny_training_set(&cfg, 16);
    let tc = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        batch_size: 8,
        seed: 77,
    };
    let a = train_source(&cfg, &images, &labels, &tc).unwrap().model;
    let b = train_source(&cfg, &images, &labels, &tc).unwrap().model;
    for (name, value) in a.params() {
        assert_eq!(value.data(), b.param(name).unwrap().data(), "{name}");
    }
    for (name, value) in a.stats() {
        assert_eq!(value, &b.stats()[name], "{name}");
    }
}

#[test]
fn training_learns_a_separable_problem() {
    let mut cfg = small_config();
    cfg.num_classes = 2;
    let (images, labels) = tiny_training_set(&cfg, 32);
    let outcome = train_source(
        &cfg,
        &images,
        &labels,
        &TrainConfig {
            epochs: 40,
            lr: 3e-3,
            batch_size: 8,
            seed: 21,
        },
    )
    .unwrap();
    let preds = outcome
        .model
        .predict(&images, 32, 8, Permutation::identity(), NormMode::Running)
        .unwrap();
    let acc = accuracy(&preds, &labels);
    assert!(acc >= 0.9, "train accuracy {acc}");
}

// ── Helpers ─────────────────────────────────────────────────────────

#[test]
fn argmax_breaks_ties_toward_lowest_index() {
    let t = Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.1, -1.0, -2.0, -1.0]).unwrap();
    assert_eq!(argmax_rows(&t), vec![0, 0]);
}

#[test]
fn accuracy_of_exact_predictions_is_one() {
    let labels = vec![0usize, 3, 2, 1];
    assert_eq!(accuracy(&labels, &labels), 1.0);
    assert_eq!(accuracy(&[0, 0, 0, 0], &labels), 0.25);
}
