//! End-to-end acceptance checks at desk scale on MNIST.
//!
//! Every criterion prints one `PASS`/`FAIL` line. Set `ACCEPTANCE_ONLY=4,6`
//! to run a subset.

use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use transpose_core::dataset::{load_mnist_dir, Split};
use transpose_core::detect::{bim_probe, default_ladder, detection_auc, select_threshold, DetectConfig};
use transpose_core::gradcheck::run_suite;
use transpose_core::index::gray_encode;
use transpose_core::metrics::{extract_all, retrain_utility};
use transpose_core::model::transpose_layers;
use transpose_core::stego::{
    embed, images_to_bytes, noise_sweep, default_sigmas, StegoCarrier, StegoMethod, TransposeCarrier,
};
use transpose_core::train::{accuracy, memorization_mse, train, train_primary_only, MemorySet};
use transpose_core::*;

const MNIST: [usize; 3] = [1, 28, 28];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn mnist(split: Split) -> LabeledDataset {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    load_mnist_dir(&dir, split).expect("MNIST under data/mnist")
}

fn majority(flags: &[bool]) -> bool {
    flags.iter().filter(|&&f| f).count() * 2 > flags.len()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn tandem(
    specs: &[LayerSpec],
    train_set: &LabeledDataset,
    mem: &MemorySet,
    epochs: usize,
    seed: u64,
) -> (Model, TrainReport) {
    let mut model = Model::build(specs, &MNIST, seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    let report = train(&mut model, train_set, Some(mem), None, &cfg, |_| {}).unwrap();
    (model, report)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let cases = run_suite(10, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    let worst = cases
        .iter()
        .map(|c| c.max_rel_error / c.tolerance)
        .fold(0.0, f64::max);
    outcome(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} cases x 10 seeds, worst error/tolerance {worst:.3}, failing {failing:?}, {secs:.1}s (limit 120s)",
            cases.len()
        ),
    )
}

fn indexer_suite() -> Outcome {
    let mut problems = Vec::new();
    for base in 2..=4usize {
        for len in 1..=6u32 {
            let total = base.pow(len);
            let codes: Vec<Vec<u8>> = (0..total).map(|i| gray_encode(i, base, len as usize).unwrap()).collect();
            let distinct: HashSet<&Vec<u8>> = codes.iter().collect();
            if distinct.len() != total || codes.iter().flatten().any(|&g| g as usize >= base) {
                problems.push(format!("n={base} d={len} not bijective"));
            }
            for w in codes.windows(2) {
                let diffs: Vec<i32> = w[0].iter().zip(&w[1]).map(|(a, b)| *b as i32 - *a as i32).filter(|d| *d != 0).collect();
                if diffs.len() != 1 || diffs[0].abs() != 1 {
                    problems.push(format!("n={base} d={len} step {:?} -> {:?}", w[0], w[1]));
                    break;
                }
            }
        }
    }
    if gray_encode(15, 2, 5).unwrap() != [0, 1, 0, 0, 0] || gray_encode(16, 2, 5).unwrap() != [1, 1, 0, 0, 0] {
        problems.push("15/16 example".into());
    }
    let ix = SpatialIndexer::n_hot(3, 3).unwrap();
    let entries = ix.enumerate(&[27, 27, 27]).unwrap();
    let keys: HashSet<Vec<u32>> = entries.iter().map(|e| e.vector.iter().map(|v| v.to_bits()).collect()).collect();
    if keys.len() != 81 {
        problems.push(format!("I(i, c) gave {} distinct of 81", keys.len()));
    }
    outcome(
        problems.is_empty(),
        format!("n in 2..=4, d in 1..=6 exhaustive; 3 classes x 27 indices; problems {problems:?}"),
    )
}

fn transposition_invariants() -> Outcome {
    let zoo = zoo::test_zoo();
    let mut problems = Vec::new();
    for (name, specs, shape) in &zoo {
        let model = Model::build(specs, shape, 0).unwrap();
        let layers = model.layers().to_vec();
        if transpose_layers(&transpose_layers(&layers)) != layers {
            problems.push(format!("{name}: layer involution"));
        }
        let t = model.transposed_layers();
        if t.first().unwrap().in_shape != model.output_shape() || t.last().unwrap().out_shape != model.input_shape() {
            problems.push(format!("{name}: end shapes"));
        }
        for (a, b) in t.iter().zip(t.iter().skip(1)) {
            if a.out_shape != b.in_shape {
                problems.push(format!("{name}: transposed chain {} -> {}", a.kind.name(), b.kind.name()));
            }
        }
        let ids = |ls: &[Layer]| -> HashSet<ParamId> {
            ls.iter()
                .flat_map(|l| {
                    l.params.weight.into_iter().chain(l.params.bias).chain(l.params.transposed_bias).chain(l.params.extra.iter().copied())
                })
                .collect()
        };
        if ids(&layers) != ids(t) {
            problems.push(format!("{name}: transposed layers use other parameters"));
        }
        let ptrs: Vec<*const f32> = model.params().ids().map(|id| model.params().get(id).data().as_ptr()).collect();
        let code = vec![0.5f32; model.output_len()];
        let img = model.infer(&code, Direction::Transposed).unwrap();
        if img.shape()[1..] != shape[..] {
            problems.push(format!("{name}: transposed output {:?}", img.shape()));
        }
        let flipped = model.transpose();
        if flipped.input_shape() != [10] || flipped.output_shape() != shape.as_slice() {
            problems.push(format!("{name}: transposed model shapes"));
        }
        let back = flipped.transpose();
        let after: Vec<*const f32> = back.params().ids().map(|id| back.params().get(id).data().as_ptr()).collect();
        if back.layers() != layers.as_slice() || after != ptrs {
            problems.push(format!("{name}: model involution or buffer identity"));
        }
    }
    outcome(problems.is_empty(), format!("{} architectures; problems {problems:?}", zoo.len()))
}

struct MemorizationRuns {
    models: Vec<Model>,
    mses: Vec<f64>,
    d_mem: LabeledDataset,
    indexer: SpatialIndexer,
}

fn memorization(train_set: &LabeledDataset, test: &LabeledDataset) -> (Outcome, MemorizationRuns) {
    let start = Instant::now();
    let specs = zoo::fc(&MNIST, 512, 3, 10);
    let indexer = SpatialIndexer::n_hot(2, 10).unwrap();
    let d_mem = train_set.memorization_set(256).unwrap();
    let mem = MemorySet::new(&d_mem, &indexer).unwrap();
    let mut flags = Vec::new();
    let mut lines = Vec::new();
    let mut models = Vec::new();
    let mut mses = Vec::new();
    for seed in 0..3 {
        let (model, _) = tandem(&specs, train_set, &mem, 5, seed);
        let mse = memorization_mse(&model, &mem).unwrap();
        let acc = accuracy(&model, test).unwrap();
        flags.push(mse <= 0.02 && acc >= 0.90);
        lines.push(format!("seed {seed}: mse {mse:.4} acc {acc:.4}"));
        models.push(model);
        mses.push(mse);
    }
    let secs = start.elapsed().as_secs_f64();
    (
        outcome(
            majority(&flags) && secs <= 1800.0,
            format!("fc 3x512, 256 memorized; {} (need mse <= 0.02, acc >= 0.90); {secs:.0}s", lines.join(", ")),
        ),
        MemorizationRuns {
            models,
            mses,
            d_mem,
            indexer,
        },
    )
}

fn degradation(train_set: &LabeledDataset, small: &[f64]) -> Outcome {
    let specs = zoo::fc(&MNIST, 512, 3, 10);
    let indexer = SpatialIndexer::n_hot(2, 10).unwrap();
    let d_mem = train_set.memorization_set(1024).unwrap();
    let mem = MemorySet::new(&d_mem, &indexer).unwrap();
    let large: Vec<f64> = (0..3)
        .map(|seed| {
            let (model, _) = tandem(&specs, train_set, &mem, 5, seed);
            memorization_mse(&model, &mem).unwrap()
        })
        .collect();
    let (a, b) = (mean(small), mean(&large));
    outcome(b >= a, format!("mean mse 256 samples {a:.4}, 1024 samples {b:.4}"))
}

fn ip_theft(runs: &MemorizationRuns, test: &LabeledDataset) -> Outcome {
    let counts = runs.d_mem.class_counts();
    let extracted = extract_all(&runs.models[0], &runs.indexer, &counts).unwrap();
    let stolen = extracted.to_labeled(10).unwrap();
    let arch = zoo::fc(&MNIST, 256, 1, 10);
    let cfg = TrainConfig {
        epochs: 30,
        ..Default::default()
    };
    let original = retrain_utility(&runs.d_mem, &arch, &cfg, test).unwrap();
    let copied = retrain_utility(&stolen, &arch, &cfg, test).unwrap();
    let gap = original - copied;
    outcome(
        gap.abs() <= 0.05,
        format!("fc 1x256 on 256 originals {original:.4}, on 256 extracted {copied:.4}, gap {gap:+.4} (limit 0.05)"),
    )
}

fn stego_contrast(train_set: &LabeledDataset, test: &LabeledDataset) -> Outcome {
    let small = train_set.take(1000);
    let specs = zoo::fc(&MNIST, 256, 2, 10);
    let d_mem = small.memorization_set(64).unwrap();
    let indexer = SpatialIndexer::n_hot(2, 10).unwrap();
    let mem = MemorySet::new(&d_mem, &indexer).unwrap();
    let (transposed, _) = tandem(&specs, &small, &mem, 20, 0);
    let mut benign = Model::build(&specs, &MNIST, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        ..Default::default()
    };
    train_primary_only(&mut benign, &small, None, &cfg).unwrap();
    let payload = images_to_bytes(&d_mem.images);
    let carriers: Vec<_> = [StegoMethod::Lsb, StegoMethod::LastBytes, StegoMethod::DeadKernel]
        .into_iter()
        .map(|m| embed(&benign, &payload, m, 8).unwrap())
        .collect();
    let stego: Vec<StegoCarrier> = carriers
        .iter()
        .map(|(model, manifest)| StegoCarrier {
            model,
            manifest,
            payload: &payload,
            image_shape: &MNIST,
        })
        .collect();
    let carrier = TransposeCarrier {
        model: &transposed,
        memory: &mem,
        image_shape: &MNIST,
        test_set: test,
    };
    let report = noise_sweep(&carrier, &stego, &default_sigmas(), 0).unwrap();
    let clean = &report.rows[0];
    assert_eq!(clean.sigma, 0.0);
    let hit = report.rows.iter().skip(1).find(|r| {
        let destroyed = r.stego.iter().all(|s| s.bit_error_rate > 0.10 || s.ssim < 0.5);
        let kept = (r.transpose_mse - clean.transpose_mse).abs() / clean.transpose_mse < 0.10
            && clean.primary_accuracy - r.primary_accuracy < 0.01;
        destroyed && kept
    });
    let detail = match hit {
        Some(r) => format!(
            "sigma {:e}: stego (ber, ssim) {:?}; transpose mse {:.5} -> {:.5}, acc {:.4} -> {:.4}",
            r.sigma,
            r.stego.iter().map(|s| (format!("{:.3}", s.bit_error_rate), format!("{:.3}", s.ssim))).collect::<Vec<_>>(),
            clean.transpose_mse,
            r.transpose_mse,
            clean.primary_accuracy,
            r.primary_accuracy
        ),
        None => "no sigma separates stego from transpose extraction".into(),
    };
    outcome(hit.is_some(), detail)
}

fn detection(train_set: &LabeledDataset) -> Outcome {
    let start = Instant::now();
    let small = train_set.take(2000);
    let xbar = train_set.take(5000).mean_image().unwrap();
    let choice = select_threshold(&xbar, &MNIST, &default_ladder(), 0.5, 0).unwrap();
    let specs = zoo::fc(&MNIST, 256, 2, 10);
    let d_mem = small.memorization_set(64).unwrap();
    let mem = MemorySet::new(&d_mem, &SpatialIndexer::n_hot(2, 10).unwrap()).unwrap();
    let probe = DetectConfig::default();
    let (mut benign, mut malicious) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let cfg = TrainConfig {
            epochs: 10,
            seed,
            ..Default::default()
        };
        let mut clean = Model::build(&specs, &MNIST, seed).unwrap();
        train_primary_only(&mut clean, &small, None, &cfg).unwrap();
        let before = clean.params().flatten();
        benign.push(bim_probe(&clean, &xbar, &DetectConfig { seed, ..probe.clone() }).unwrap().min_score);
        assert_eq!(before, clean.params().flatten(), "probe changed the parameters");
        let (bad, _) = tandem(&specs, &small, &mem, 10, seed + 100);
        malicious.push(bim_probe(&bad, &xbar, &DetectConfig { seed, ..probe.clone() }).unwrap().min_score);
    }
    let auc = detection_auc(&benign, &malicious).unwrap();
    let tpr = malicious.iter().filter(|&&s| s <= choice.threshold).count() as f64 / malicious.len() as f64;
    let fpr = benign.iter().filter(|&&s| s <= choice.threshold).count() as f64 / benign.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let fmt = |xs: &[f64]| xs.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ");
    outcome(
        auc >= 0.95 && tpr == 1.0 && fpr <= 0.1 && secs <= 1200.0,
        format!(
            "auc {auc:.3}, threshold {:.5} (sigma {:.2}), tpr {tpr:.2}, fpr {fpr:.2}; benign [{}] transposed [{}]; {secs:.0}s",
            choice.threshold,
            choice.sigma,
            fmt(&benign),
            fmt(&malicious)
        ),
    )
}

fn fine_tuning(train_set: &LabeledDataset) -> Outcome {
    let small = train_set.take(1000);
    let d_mem = small.memorization_set(64).unwrap();
    let mem = MemorySet::new(&d_mem, &SpatialIndexer::n_hot(2, 10).unwrap()).unwrap();
    let mut flags = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let mut ratios = Vec::new();
        for specs in [zoo::cnn(&MNIST, 16, 3, 10), zoo::fc(&MNIST, 512, 3, 10)] {
            let (mut model, _) = tandem(&specs, &small, &mem, 30, seed);
            let before = memorization_mse(&model, &mem).unwrap();
            let cfg = TrainConfig {
                epochs: 5,
                seed,
                optimizer: OptimizerKind::Sgd,
                learning_rate: 0.05,
                ..Default::default()
            };
            train_primary_only(&mut model, &small, None, &cfg).unwrap();
            ratios.push(memorization_mse(&model, &mem).unwrap() / before);
        }
        flags.push(ratios[0] >= 5.0 && (ratios[1] - 1.0).abs() < 0.5);
        lines.push(format!("seed {seed}: cnn x{:.2}, fc x{:.2}", ratios[0], ratios[1]));
    }
    outcome(
        majority(&flags),
        format!("{} (need cnn >= 5, fc within 0.5 of 1)", lines.join(", ")),
    )
}

fn ablation(train_set: &LabeledDataset) -> Outcome {
    let small = train_set.take(1000);
    let d_mem = small.memorization_set(256).unwrap();
    let specs = zoo::fc(&MNIST, 256, 2, 10);
    let mut flags = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let mut mses = Vec::new();
        for (code, embedding) in [(CodeKind::Gray, EmbeddingScheme::NHot), (CodeKind::Nary, EmbeddingScheme::None)] {
            let indexer = SpatialIndexer::new(IndexerConfig {
                base: 2,
                code_length: 10,
                code,
                embedding,
                seed,
            })
            .unwrap();
            let mem = MemorySet::new(&d_mem, &indexer).unwrap();
            let (model, _) = tandem(&specs, &small, &mem, 20, seed);
            mses.push(memorization_mse(&model, &mem).unwrap());
        }
        flags.push(mses[0] < mses[1]);
        lines.push(format!("seed {seed}: gray+n-hot {:.5} vs n-ary {:.5}", mses[0], mses[1]));
    }
    outcome(majority(&flags), lines.join(", "))
}

/// Straight to stderr, past the test harness's output capture.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

#[test]
fn acceptance() {
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |k: usize| only.as_ref().is_none_or(|set| set.contains(&k));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |k: usize, name: &'static str, o: Outcome| {
        say(&format!("[{}] criterion {k} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail));
        results.push((k, name, o));
    };

    if want(1) {
        report(1, "gradient oracle", gradient_oracle());
    }
    if want(2) {
        report(2, "indexer suite", indexer_suite());
    }
    if want(3) {
        report(3, "transposition invariants", transposition_invariants());
    }
    if (4..=10).any(want) {
        let full = mnist(Split::Train);
        let test = mnist(Split::Test);
        let train_set = full.take(8000);
        if want(4) || want(5) || want(6) {
            let (o, runs) = memorization(&train_set, &test);
            if want(4) {
                report(4, "desk-scale memorization", o);
            }
            if want(5) {
                report(5, "degradation trend", degradation(&train_set, &runs.mses));
            }
            if want(6) {
                report(6, "ip-theft utility", ip_theft(&runs, &test));
            }
        }
        if want(7) {
            report(7, "stego contrast", stego_contrast(&train_set, &test));
        }
        if want(8) {
            report(8, "detection", detection(&train_set));
        }
        if want(9) {
            report(9, "fine-tuning contrast", fine_tuning(&train_set));
        }
        if want(10) {
            report(10, "ablation direction", ablation(&train_set));
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    say(&format!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
