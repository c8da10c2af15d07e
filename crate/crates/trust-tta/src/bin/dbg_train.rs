use std::collections::BTreeMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trust_tta::adapt::*;
use trust_tta::checkpoint::Checkpoint;
use trust_tta::data::*;
use trust_tta::model::*;
use trust_tta::optim::Adam;
use trust_tta::scan2d::Permutation;
use trust_tta::tensor::Tape;

fn main() {
    let cfg = ModelConfig::default();
    let mut agg: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in [1u64, 2, 3] {
        let ds = gen_dataset(seed, 8192).unwrap();
        let (train_images, train_labels) = ds.train_split();
        let (test_images, test_labels) = ds.test_split();
        let out = train_source(&cfg, &train_images, &train_labels, &TrainConfig {
            epochs: 40, lr: 3e-3, batch_size: 32, seed,
        }).unwrap();
        let model = out.model;
        let ckpt = Checkpoint::from_model(&model, BTreeMap::new());
        let n_test = test_labels.len();
        let preds = model.predict(&test_images, n_test, 64, Permutation::identity(), NormMode::Running).unwrap();
        let clean = accuracy(&preds, &test_labels);
        let spec = CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3, seed };
        let corr = corrupt(&test_images, n_test, &spec).unwrap();
        let mut order: Vec<usize> = (0..n_test).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(seed, "order"));
        order.shuffle(&mut rng);
        let stream = make_batches(&corr, &test_labels, cfg.pixels(), &order, 32);

        let base = AdaptationConfig::default();
        let ranking = rank_permutations(&model, &stream[..4], &base.pool).unwrap();
        let mut m = model.clone();
        let source = run_baseline(BaselineKind::SourceOnly, &mut m, &ckpt, &stream, None, &base).unwrap();
        println!("seed={seed} clean={clean:.3} batches={} source={:.4}", stream.len(), source.mean_accuracy);
        agg.entry("source".into()).or_default().push(source.mean_accuracy);
        for lr in [3e-4, 1e-3] {
            // oracle ceiling
            let mut m = ckpt.build_model().unwrap();
            let mut adam = Adam::new(lr);
            let mut correct = 0usize; let mut total = 0usize;
            for (i, b) in stream.iter().enumerate() {
                adapt_step(&mut m, b, Permutation::identity(), 1, &mut adam, i, Some(&b.labels)).unwrap();
                let patches = m.patchify(&b.images, b.n).unwrap();
                let tape = Tape::new();
                let pass = m.forward(&tape, &patches, b.n, Permutation::identity(), NormMode::Batch, None).unwrap();
                let preds = argmax_rows(&pass.logits);
                correct += preds.iter().zip(&b.labels).filter(|(p,l)| p==l).count();
                total += b.n;
            }
            let orc = correct as f64/total as f64;
            // trust shared + tent
            let mut c = base.clone(); c.lr = lr;
            let mut m = model.clone();
            let trust = trust_run(&mut m, &ckpt, &stream, ranking.clone(), &c, &[]).unwrap();
            let mut m = model.clone();
            let tent = run_baseline(BaselineKind::Tent, &mut m, &ckpt, &stream, None, &c).unwrap();
            println!("  seed={seed} @{lr}: orc={orc:.4} trust={:.4} tent={:.4}", trust.metrics.mean_accuracy, tent.mean_accuracy);
            agg.entry(format!("orc_{lr}")).or_default().push(orc);
            agg.entry(format!("trust_{lr}")).or_default().push(trust.metrics.mean_accuracy);
            agg.entry(format!("tent_{lr}")).or_default().push(tent.mean_accuracy);
        }
        println!();
    }
    println!("--- 3-seed means ---");
    for (k, v) in &agg { println!("{k}: {:.4}", v.iter().sum::<f64>()/v.len() as f64); }
}
