//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_idx, load_mnist_dir, synth_dataset, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::index::{IndexerConfig, SpatialIndexer};
use crate::layers::LayerSpec;
use crate::storage::sha256_hex;
use crate::train::TrainConfig;
use crate::zoo;

pub const OUTPUT_DIR_ENV: &str = "TRANSPOSE_OUTPUT_DIR";
pub const THREADS_ENV: &str = "TRANSPOSE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// a directory holding the four standard MNIST IDX files (plain or gzip)
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    Synthetic {
        classes: usize,
        per_class: usize,
        shape: Vec<usize>,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
}

fn default_test_per_class() -> usize {
    50
}

impl DatasetSource {
    /// Train split and, where the source has one, the test split.
    pub fn load(&self, seed: u64) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
        match self {
            DatasetSource::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let mut train = load_mnist_dir(dir, Split::Train)?;
                let mut test = load_mnist_dir(dir, Split::Test)?;
                if let Some(n) = train_limit {
                    train = train.take(*n);
                }
                if let Some(n) = test_limit {
                    test = test.take(*n);
                }
                Ok((train, Some(test)))
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels, Split::Train)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l, Split::Test)?),
                    (None, None) => None,
                    _ => return Err(Error::Config("test_images and test_labels go together".into())),
                };
                Ok((train, test))
            }
            DatasetSource::Synthetic {
                classes,
                per_class,
                shape,
                test_per_class,
            } => {
                // one draw split by prefix: same class centres, disjoint samples
                let all = synth_dataset(*classes, *per_class + *test_per_class, shape, seed)?;
                let n_train = classes * per_class;
                let train = all.take(n_train);
                let rest: Vec<usize> = (n_train..all.len()).collect();
                let mut test = all.subset(&rest);
                test.split = Split::Test;
                Ok((train, Some(test)))
            }
        }
    }
}

/// A classifier architecture, either from the built-in families or spelled
/// out layer by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Fc { width: usize, depth: usize },
    Cnn { channels: usize, blocks: usize },
    Vit { patch: usize, dim: usize, heads: usize, blocks: usize },
    Layers { layers: Vec<LayerSpec> },
}

impl Architecture {
    pub fn specs(&self, image: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
        let need_chw = || {
            if image.len() == 3 {
                Ok(())
            } else {
                Err(Error::Config(format!("{self} needs [c, h, w] images, got {image:?}")))
            }
        };
        Ok(match self {
            Architecture::Fc { width, depth } => zoo::fc(image, *width, *depth, classes),
            Architecture::Cnn { channels, blocks } => {
                need_chw()?;
                zoo::cnn(image, *channels, *blocks, classes)
            }
            Architecture::Vit { patch, dim, heads, blocks } => {
                need_chw()?;
                zoo::vit(image, *patch, *dim, *heads, *blocks, classes)
            }
            Architecture::Layers { layers } => layers.clone(),
        })
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::Fc { width, depth } => write!(f, "fc:{width}x{depth}"),
            Architecture::Cnn { channels, blocks } => write!(f, "cnn:{channels}x{blocks}"),
            Architecture::Vit { patch, dim, heads, blocks } => write!(f, "vit:{patch}/{dim}/{heads}/{blocks}"),
            Architecture::Layers { layers } => write!(f, "layers:{}", layers.len()),
        }
    }
}

/// Short forms `fc:WIDTHxDEPTH`, `cnn:CHANNELSxBLOCKS`, `vit:PATCH/DIM/HEADS/BLOCKS`,
/// or a path to a TOML file holding an `[architecture]`-style table.
impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let nums = |body: &str, sep: char, n: usize| -> Result<Vec<usize>> {
            let v: Vec<usize> = body
                .split(sep)
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("cannot read architecture {s:?}")))?;
            if v.len() != n || v.contains(&0) {
                return Err(Error::Config(format!("architecture {s:?} needs {n} positive numbers")));
            }
            Ok(v)
        };
        if let Some(body) = s.strip_prefix("fc:") {
            let v = nums(body, 'x', 2)?;
            return Ok(Architecture::Fc { width: v[0], depth: v[1] });
        }
        if let Some(body) = s.strip_prefix("cnn:") {
            let v = nums(body, 'x', 2)?;
            return Ok(Architecture::Cnn {
                channels: v[0],
                blocks: v[1],
            });
        }
        if let Some(body) = s.strip_prefix("vit:") {
            let v = nums(body, '/', 4)?;
            return Ok(Architecture::Vit {
                patch: v[0],
                dim: v[1],
                heads: v[2],
                blocks: v[3],
            });
        }
        let path = Path::new(s);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return toml::from_str(&text).map_err(|e| Error::Config(format!("{s}: {e}")));
        }
        Err(Error::Config(format!(
            "unknown architecture {s:?}; use fc:WxD, cnn:CxB, vit:P/D/H/B or a TOML file"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// write the extracted samples after training
    pub extract: bool,
    /// MSE/SSIM report of the extracted samples against the originals
    pub evaluate: bool,
    pub noise_sweep: bool,
    pub detect: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            extract: true,
            evaluate: true,
            noise_sweep: false,
            detect: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// samples memorized, taken from the head of the training split
    #[serde(default)]
    pub memorize: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub dataset: DatasetSource,
    pub architecture: Architecture,
    pub indexer: IndexerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub toggles: Toggles,
}

fn default_threads() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = get(OUTPUT_DIR_ENV).filter(|s| !s.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(t) = get(THREADS_ENV).filter(|s| !s.is_empty()) {
            self.threads = t
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={t:?} is not a positive integer")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let indexer = SpatialIndexer::new(self.indexer.clone()).map_err(|e| Error::Config(format!("indexer: {e}")))?;
        if self.memorize > 0 && indexer.capacity() == 0 {
            return Err(Error::Config("indexer has no codes".into()));
        }
        if let DatasetSource::Synthetic {
            classes,
            per_class,
            shape,
            ..
        } = &self.dataset
        {
            if *classes == 0 || *per_class == 0 || shape.is_empty() || shape.contains(&0) {
                return Err(Error::Config("synthetic dataset parameters must be positive".into()));
            }
            if self.memorize > classes * per_class {
                return Err(Error::Config(format!(
                    "memorize = {} exceeds the {} synthetic samples",
                    self.memorize,
                    classes * per_class
                )));
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; together with the seed it names a run.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seed = 3
output_dir = "runs/a"
memorize = 20

[dataset]
kind = "synthetic"
classes = 3
per_class = 30
shape = [1, 8, 8]

[architecture]
kind = "fc"
width = 32
depth = 2

[indexer]
base = 2
code_length = 6

[train]
epochs = 4
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.architecture, Architecture::Fc { width: 32, depth: 2 });
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_primary, 64);
        assert!(cfg.toggles.extract);
        let bad = EXAMPLE.replace("epochs = 4", "epochs = 4\nepochz = 1");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = EXAMPLE.replace("memorize = 20", "memorize = 200");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        let h = cfg.hash();
        cfg.apply_env(|k| match k {
            OUTPUT_DIR_ENV => Some("/tmp/x".into()),
            THREADS_ENV => Some("2".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.threads, 2);
        assert_ne!(cfg.hash(), h);
        assert!(cfg.apply_env(|_| Some("zero".into())).is_err());
    }

    #[test]
    fn architecture_short_forms() {
        assert_eq!("fc:512x3".parse::<Architecture>().unwrap(), Architecture::Fc { width: 512, depth: 3 });
        assert_eq!(
            "cnn:16x3".parse::<Architecture>().unwrap(),
            Architecture::Cnn { channels: 16, blocks: 3 }
        );
        let vit: Architecture = "vit:7/32/4/2".parse().unwrap();
        assert_eq!(vit.to_string(), "vit:7/32/4/2");
        assert!("fc:0x3".parse::<Architecture>().is_err());
        assert!("mlp".parse::<Architecture>().is_err());
    }

    #[test]
    fn synthetic_splits_differ() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        let (train, test) = cfg.dataset.load(cfg.seed).unwrap();
        let test = test.unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(test.len(), 150);
        assert_ne!(train.image(0), test.image(0));
    }
}
