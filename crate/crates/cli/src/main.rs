use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use transpose_core::config::{Architecture, ExperimentConfig};
use transpose_core::dataset::{load_mnist_dir, Split};
use transpose_core::detect::{default_ladder, detect, select_threshold, DetectConfig, Verdict};
use transpose_core::gradcheck::run_suite;
use transpose_core::metrics::{extract_all, quality_report, retrain_utility, ExtractedDataset};
use transpose_core::stego::{
    default_sigmas, embed, extract, images_to_bytes, noise_sweep, verify_payload, StegoCarrier, StegoManifest,
    StegoMethod, TransposeCarrier,
};
use transpose_core::storage::{load_extracted, load_model, save_extracted, save_model, sha256_hex};
use transpose_core::train::{train, MemorySet};
use transpose_core::{CodeKind, EmbeddingScheme, IndexerConfig, LabeledDataset, Model, SpatialIndexer, TrainConfig};

const MODEL_FILE: &str = "model.tpsm";
const INDEXER_FILE: &str = "indexer.json";
const MEMORIZED_DIR: &str = "memorized";
const EXTRACTED_DIR: &str = "extracted";

#[derive(Parser)]
#[command(name = "transpose", version, about = "Train, inspect and audit transposed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tandem training from an experiment config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// classification only (benign baselines, fine-tuning an existing model)
        #[arg(long)]
        primary_only: bool,
        /// start from this model instead of a fresh one
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Read every indexed sample out of a transposed model
    Extract {
        #[arg(long)]
        model: PathBuf,
        /// per-class counts `n0,n1,…` or `CLASSESxPER_CLASS`
        #[arg(long)]
        counts: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        indexer: IndexerArgs,
    },
    /// MSE/SSIM (and feature accuracy with --aux) of extracted samples
    Eval {
        #[arg(long)]
        extracted: PathBuf,
        /// image-set directory, MNIST directory or experiment config
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
    },
    /// Accuracy of a fresh classifier trained on extracted samples
    Retrain {
        #[arg(long)]
        extracted: PathBuf,
        /// `fc:WxD`, `cnn:CxB`, `vit:P/D/H/B` or a TOML file
        #[arg(long)]
        arch: String,
        /// image-set directory, MNIST directory or experiment config
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Weight-steganography baselines
    Stego {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(subcommand)]
        action: StegoAction,
    },
    /// Gaussian parameter noise against transpose runs and stego carriers
    NoiseSweep {
        /// run directories (from `train`) and stego carriers `MODEL:MANIFEST`, comma separated
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        /// test data for primary accuracy: image-set directory, MNIST directory or experiment config
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gradient probe toward the dataset mean; exits with status 2 on a malicious verdict
    Detect {
        #[arg(long)]
        model: PathBuf,
        /// image-set directory, MNIST directory or experiment config
        #[arg(long)]
        mean_from: PathBuf,
        /// number of images averaged into the mean (0 = all)
        #[arg(long, default_value_t = 0)]
        samples: usize,
        /// a number or `auto`
        #[arg(long, default_value = "auto")]
        threshold: String,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 300)]
        iterations: usize,
        #[arg(long, default_value_t = 20)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every differentiable operation
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long)]
        filter: Option<String>,
    },
}

#[derive(Subcommand)]
enum StegoAction {
    Embed {
        #[arg(long)]
        model: PathBuf,
        /// a file of raw bytes, or an image-set directory whose images are quantized to bytes
        #[arg(long)]
        payload: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// bits per parameter for `lsb`
        #[arg(long, default_value_t = 8)]
        bits: u32,
    },
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lsb,
    LastBytes,
    DeadKernel,
}

impl From<MethodArg> for StegoMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lsb => StegoMethod::Lsb,
            MethodArg::LastBytes => StegoMethod::LastBytes,
            MethodArg::DeadKernel => StegoMethod::DeadKernel,
        }
    }
}

#[derive(Args)]
struct IndexerArgs {
    /// indexer JSON written by `train`; overrides the flags below
    #[arg(long)]
    indexer: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    base: usize,
    /// defaults to the model's class count
    #[arg(long)]
    code_length: Option<usize>,
    #[arg(long, default_value = "gray")]
    code: String,
    #[arg(long, default_value = "n_hot")]
    embedding: String,
    #[arg(long, default_value_t = 0)]
    embedding_seed: u64,
}

impl IndexerArgs {
    fn build(&self, model: &Model) -> Result<SpatialIndexer> {
        if let Some(path) = &self.indexer {
            return read_indexer(path);
        }
        let code = match self.code.as_str() {
            "gray" => CodeKind::Gray,
            "nary" => CodeKind::Nary,
            other => bail!("unknown code {other:?}; use gray or nary"),
        };
        let embedding = match self.embedding.as_str() {
            "n_hot" => EmbeddingScheme::NHot,
            "random" => EmbeddingScheme::Random,
            "none" => EmbeddingScheme::None,
            other => bail!("unknown embedding {other:?}; use n_hot, random or none"),
        };
        Ok(SpatialIndexer::new(IndexerConfig {
            base: self.base,
            code_length: self.code_length.unwrap_or(model.output_len()),
            code,
            embedding,
            seed: self.embedding_seed,
        })?)
    }
}

fn read_indexer(path: &Path) -> Result<SpatialIndexer> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: IndexerConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(SpatialIndexer::new(cfg)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn parse_counts(spec: &str) -> Result<Vec<usize>> {
    if let Some((c, k)) = spec.split_once('x') {
        let classes: usize = c.trim().parse().context("class count")?;
        let per: usize = k.trim().parse().context("samples per class")?;
        return Ok(vec![per; classes]);
    }
    spec.split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad count {t:?}")))
        .collect()
}

/// Labeled images stored as an image-set directory (labels in `classes`).
fn image_set(ds: &LabeledDataset) -> ExtractedDataset {
    let mut seen = vec![0usize; ds.classes];
    let indices = ds
        .labels
        .iter()
        .map(|&c| {
            seen[c] += 1;
            seen[c] - 1
        })
        .collect();
    ExtractedDataset {
        shape: ds.shape.clone(),
        classes: ds.labels.clone(),
        indices,
        images: ds.images.clone(),
        source_hash: String::new(),
    }
}

fn as_labeled(set: &ExtractedDataset, classes: Option<usize>) -> Result<LabeledDataset> {
    let n = classes.unwrap_or_else(|| set.classes.iter().max().map_or(1, |m| m + 1));
    Ok(set.to_labeled(n)?)
}

/// An image-set directory, a directory of MNIST IDX files, or an experiment
/// config (its dataset, `split` side).
fn load_dataset_arg(path: &Path, split: Split) -> Result<LabeledDataset> {
    if path.join("manifest.json").is_file() {
        return as_labeled(&load_extracted(path)?, None);
    }
    if path.is_dir() {
        return Ok(load_mnist_dir(path, split)?);
    }
    let cfg = ExperimentConfig::load(path)?;
    let (train, test) = cfg.dataset.load(cfg.seed)?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test.with_context(|| format!("{} has no test split", path.display()))?,
    })
}

fn cmd_train(config: &Path, primary_only: bool, init: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::copy(config, out.join("config.toml")).context("copying config")?;
    let (train_set, test_set) = cfg.dataset.load(cfg.seed)?;
    let mut model = match init {
        Some(p) => load_model(p)?,
        None => Model::build(&cfg.architecture.specs(&train_set.shape, train_set.classes)?, &train_set.shape, cfg.seed)?,
    };
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let indexer = SpatialIndexer::new(cfg.indexer.clone())?;
    let memorize = !primary_only && cfg.memorize > 0;
    let d_mem = if memorize {
        Some(train_set.memorization_set(cfg.memorize)?)
    } else {
        None
    };
    let mem = d_mem.as_ref().map(|d| MemorySet::new(d, &indexer)).transpose()?;
    eprintln!(
        "training {} on {} samples ({} memorized), config hash {}",
        cfg.architecture,
        train_set.len(),
        mem.as_ref().map_or(0, |m| m.len()),
        &cfg.hash()[..12]
    );
    let report = train(&mut model, &train_set, mem.as_ref(), test_set.as_ref(), &train_cfg, |e| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  acc {:.4}  mse {}  test {}  {:.1}s",
            e.epoch,
            e.primary_loss,
            e.primary_accuracy,
            e.secondary_mse.map_or("-".into(), |v| format!("{v:.5}")),
            e.test_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
            e.seconds
        );
    })?;
    fs::write(out.join("train_log.jsonl"), report.to_json_lines()).context("writing train_log.jsonl")?;
    save_model(&model, out.join(MODEL_FILE))?;
    write_json(&out.join(INDEXER_FILE), indexer.config())?;
    write_json(&out.join("report.json"), &report)?;

    if let (Some(d_mem), true) = (&d_mem, memorize) {
        save_extracted(&image_set(d_mem), out.join(MEMORIZED_DIR))?;
        if cfg.toggles.extract || cfg.toggles.evaluate {
            let mut extracted = extract_all(&model, &indexer, &d_mem.class_counts())?;
            extracted.source_hash = sha256_hex(&fs::read(out.join(MODEL_FILE)).context("rereading model")?);
            if cfg.toggles.extract {
                save_extracted(&extracted, out.join(EXTRACTED_DIR))?;
            }
            if cfg.toggles.evaluate {
                write_json(&out.join("quality.json"), &quality_report(&extracted, d_mem, None)?)?;
            }
        }
        if cfg.toggles.noise_sweep {
            let test = test_set.as_ref().context("noise sweep needs a test split")?;
            let mut benign = Model::build(&model.specs(), &train_set.shape, cfg.seed.wrapping_add(1))?;
            train(&mut benign, &train_set, None, None, &train_cfg, |_| {})?;
            let payload = images_to_bytes(&d_mem.images);
            let carriers = [StegoMethod::Lsb, StegoMethod::LastBytes, StegoMethod::DeadKernel]
                .into_iter()
                .map(|m| embed(&benign, &payload, m, 8))
                .collect::<transpose_core::Result<Vec<_>>>()?;
            let stego: Vec<StegoCarrier> = carriers
                .iter()
                .map(|(m, man)| StegoCarrier {
                    model: m,
                    manifest: man,
                    payload: &payload,
                    image_shape: &train_set.shape,
                })
                .collect();
            let carrier = TransposeCarrier {
                model: &model,
                memory: mem.as_ref().expect("memorizing"),
                image_shape: &train_set.shape,
                test_set: test,
            };
            write_json(&out.join("noise_sweep.json"), &noise_sweep(&carrier, &stego, &default_sigmas(), cfg.seed)?)?;
        }
    }
    if cfg.toggles.detect {
        let xbar = train_set.mean_image()?;
        let choice = select_threshold(&xbar, &train_set.shape, &default_ladder(), 0.5, cfg.seed)?;
        let dc = DetectConfig {
            seed: cfg.seed,
            ..Default::default()
        };
        write_json(&out.join("detection.json"), &detect(&model, &xbar, choice.threshold, &dc)?)?;
    }
    let summary = serde_json::json!({
        "epochs": report.epochs.len(),
        "stop_reason": report.stop_reason,
        "final_secondary_mse": report.final_secondary_mse,
        "final_test_accuracy": report.final_test_accuracy,
        "wall_clock_secs": report.wall_clock_secs,
    });
    println!("{summary}");
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_extract(model: &Path, counts: &str, out: &Path, ix: &IndexerArgs) -> Result<()> {
    let m = load_model(model)?;
    let indexer = ix.build(&m)?;
    let mut extracted = extract_all(&m, &indexer, &parse_counts(counts)?)?;
    extracted.source_hash = sha256_hex(&fs::read(model).with_context(|| format!("reading {}", model.display()))?);
    save_extracted(&extracted, out)?;
    eprintln!("extracted {} samples to {}", extracted.len(), out.display());
    Ok(())
}

fn cmd_eval(extracted: &Path, reference: &Path, aux: Option<&Path>) -> Result<()> {
    let ex = load_extracted(extracted)?;
    let reference = if reference.join("manifest.json").is_file() {
        as_labeled(&load_extracted(reference)?, None)?
    } else {
        load_dataset_arg(reference, Split::Train)?.memorization_set(ex.len())?
    };
    let aux = aux.map(load_model).transpose()?;
    let report = quality_report(&ex, &reference, aux.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_retrain(extracted: &Path, arch: &str, test: &Path, classes: Option<usize>, epochs: usize, seed: u64) -> Result<()> {
    let test_set = load_dataset_arg(test, Split::Test)?;
    let classes = classes.unwrap_or(test_set.classes);
    let train_set = as_labeled(&load_extracted(extracted)?, Some(classes))?;
    let arch: Architecture = arch.parse()?;
    let cfg = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    let acc = retrain_utility(&train_set, &arch.specs(&train_set.shape, classes)?, &cfg, &test_set)?;
    println!(
        "{}",
        serde_json::json!({ "architecture": arch.to_string(), "train_samples": train_set.len(), "test_accuracy": acc })
    );
    Ok(())
}

fn cmd_stego(method: StegoMethod, action: &StegoAction) -> Result<()> {
    match action {
        StegoAction::Embed {
            model,
            payload,
            out,
            manifest,
            bits,
        } => {
            let m = load_model(model)?;
            let (bytes, shapes) = if payload.join("manifest.json").is_file() {
                let set = load_extracted(payload)?;
                let shapes = vec![set.shape.clone(); set.len()];
                (images_to_bytes(&set.images), shapes)
            } else {
                (fs::read(payload).with_context(|| format!("reading {}", payload.display()))?, Vec::new())
            };
            let (carrier, mut man) = embed(&m, &bytes, method, *bits)?;
            man.image_shapes = shapes;
            save_model(&carrier, out)?;
            write_json(manifest, &man)?;
            eprintln!("embedded {} bytes ({:.1}% of capacity)", bytes.len(), 100.0 * man.capacity_used);
        }
        StegoAction::Extract { model, manifest, out } => {
            let man = read_manifest(manifest)?;
            if man.method != method {
                bail!("manifest was written by {:?}, not {:?}", man.method, method);
            }
            let bytes = extract(&load_model(model)?, &man)?;
            fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            match verify_payload(&bytes, &man) {
                Ok(()) => eprintln!("recovered {} bytes, hash verified", bytes.len()),
                Err(e) => eprintln!("recovered {} bytes, {e}", bytes.len()),
            }
        }
    }
    Ok(())
}

fn read_manifest(path: &Path) -> Result<StegoManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_noise_sweep(models: &[String], sigmas: Option<&[f64]>, test: &Path, seed: u64) -> Result<()> {
    let test_set = load_dataset_arg(test, Split::Test)?;
    let sigmas = sigmas.map_or_else(default_sigmas, <[f64]>::to_vec);
    let mut runs = Vec::new();
    let mut stego = Vec::new();
    for entry in models {
        if let Some((model, manifest)) = entry.split_once(':') {
            let m = load_model(model)?;
            let man = read_manifest(Path::new(manifest))?;
            let payload = extract(&m, &man)?;
            verify_payload(&payload, &man).with_context(|| format!("{model} does not carry its payload"))?;
            let shape = man.image_shapes.first().cloned().unwrap_or_else(|| vec![1, 1, payload.len()]);
            stego.push((m, man, payload, shape));
        } else {
            let dir = Path::new(entry);
            let m = load_model(dir.join(MODEL_FILE))?;
            let indexer = read_indexer(&dir.join(INDEXER_FILE))?;
            let d_mem = as_labeled(&load_extracted(dir.join(MEMORIZED_DIR))?, Some(m.output_len()))?;
            let mem = MemorySet::new(&d_mem, &indexer)?;
            runs.push((entry.clone(), m, mem, d_mem.shape.clone()));
        }
    }
    if runs.is_empty() {
        bail!("noise-sweep needs at least one run directory");
    }
    let carriers: Vec<StegoCarrier> = stego
        .iter()
        .map(|(m, man, payload, shape)| StegoCarrier {
            model: m,
            manifest: man,
            payload,
            image_shape: shape,
        })
        .collect();
    let mut out = Vec::new();
    for (name, m, mem, shape) in &runs {
        let carrier = TransposeCarrier {
            model: m,
            memory: mem,
            image_shape: shape,
            test_set: &test_set,
        };
        let report = noise_sweep(&carrier, &carriers, &sigmas, seed)?;
        out.push(serde_json::json!({ "run": name, "rows": report.rows }));
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_detect(
    model: &Path,
    mean_from: &Path,
    samples: usize,
    threshold: &str,
    alpha: f64,
    iterations: usize,
    restarts: usize,
    seed: u64,
) -> Result<Verdict> {
    let m = load_model(model)?;
    let mut ds = load_dataset_arg(mean_from, Split::Train)?;
    if samples > 0 {
        ds = ds.take(samples);
    }
    let xbar = ds.mean_image()?;
    let threshold = if threshold == "auto" {
        let choice = select_threshold(&xbar, &ds.shape, &default_ladder(), 0.5, seed)?;
        eprintln!("auto threshold {:.5} at sigma {:.2} (ssim {:.3})", choice.threshold, choice.sigma, choice.ssim);
        choice.threshold
    } else {
        threshold.parse().with_context(|| format!("threshold {threshold:?} is neither a number nor auto"))?
    };
    let cfg = DetectConfig {
        alpha,
        iterations,
        restarts,
        seed,
        ..Default::default()
    };
    let report = detect(&m, &xbar, threshold, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.verdict)
}

fn cmd_gradcheck(seeds: usize, filter: Option<&str>) -> Result<bool> {
    let cases = run_suite(seeds, filter)?;
    if cases.is_empty() {
        bail!("no gradient case matches {filter:?}");
    }
    for c in &cases {
        println!(
            "{:<28} {}  max rel error {:.2e} (tolerance {:.0e}, {} seeds)",
            c.name,
            if c.passed { "ok  " } else { "FAIL" },
            c.max_rel_error,
            c.tolerance,
            c.seeds
        );
    }
    Ok(cases.iter().all(|c| c.passed))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train {
            config,
            primary_only,
            init,
        } => cmd_train(config, *primary_only, init.as_deref())?,
        Command::Extract {
            model,
            counts,
            out,
            indexer,
        } => cmd_extract(model, counts, out, indexer)?,
        Command::Eval {
            extracted,
            reference,
            aux,
        } => cmd_eval(extracted, reference, aux.as_deref())?,
        Command::Retrain {
            extracted,
            arch,
            test,
            classes,
            epochs,
            seed,
        } => cmd_retrain(extracted, arch, test, *classes, *epochs, *seed)?,
        Command::Stego { method, action } => cmd_stego((*method).into(), action)?,
        Command::NoiseSweep {
            models,
            sigmas,
            test,
            seed,
        } => cmd_noise_sweep(models, sigmas.as_deref(), test, *seed)?,
        Command::Detect {
            model,
            mean_from,
            samples,
            threshold,
            alpha,
            iterations,
            restarts,
            seed,
        } => {
            let verdict = cmd_detect(model, mean_from, *samples, threshold, *alpha, *iterations, *restarts, *seed)?;
            if verdict == Verdict::Malicious {
                eprintln!("verdict: malicious");
                return Ok(ExitCode::from(2));
            }
            eprintln!("verdict: benign");
        }
        Command::Gradcheck { seeds, filter } => {
            if !cmd_gradcheck(*seeds, filter.as_deref())? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
