use std::fs;
use std::path::{Path, PathBuf};

use lrgrad::evaluation::AttackSpec;
use lrgrad::layers::{LayerSpec, NoiseEntry, NoisePlan, Network};
use lrgrad::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::ablation::AblationConfig;
use crate::CliError;

/// One experiment: a model, its data, how to train it, which attacks to
/// evaluate and, optionally, an ablation grid. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Defaults to the class count of the dataset.
    #[serde(default)]
    pub classes: Option<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian clusters on hypercube vertices.
    Blobs {
        #[serde(default = "two")]
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// IDX image/label pair. `keep_classes` selects and relabels classes in
    /// the order given; `limit` then keeps the first samples.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        keep_classes: Option<Vec<usize>>,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Node classification on an edge-list graph.
    EdgeList {
        nodes: PathBuf,
        edges: PathBuf,
        train_per_class: usize,
    },
    /// Labelled token sequences.
    Tokens {
        path: PathBuf,
        vocab_limit: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn two() -> usize {
    2
}

fn default_test_fraction() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string() + &span_note(text, e.span())))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Idx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DatasetSpec::EdgeList { nodes, edges, .. } => {
                fix(nodes);
                fix(edges);
            }
            DatasetSpec::Tokens { path, .. } => fix(path),
            DatasetSpec::Blobs { .. } => {}
        }
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
    }

    /// Applies the seed everywhere it is consumed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Checks every field that can be checked without data.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: lrgrad::Error| CliError::Config(format!("{name}: {e}"));
        self.train.validate().map_err(|e| field("train", e))?;
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate().map_err(|e| field(&format!("attacks[{i}]"), e))?;
        }
        if self.model.layers.is_empty() {
            return Err(CliError::Config("model.layers: at least one layer is required".into()));
        }
        match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                separation,
                test_fraction,
                dim,
                ..
            } => {
                if *classes < 2 {
                    return Err(CliError::Config("dataset.classes: need at least two classes".into()));
                }
                if !(*separation > 0.0) {
                    return Err(CliError::Config("dataset.separation: must be positive".into()));
                }
                if *dim == 0 {
                    return Err(CliError::Config("dataset.dim: must be positive".into()));
                }
                check_fraction(*test_fraction)?;
            }
            DatasetSpec::Idx {
                test_fraction,
                keep_classes,
                ..
            } => {
                check_fraction(*test_fraction)?;
                if keep_classes.as_ref().is_some_and(|k| k.len() < 2) {
                    return Err(CliError::Config("dataset.keep_classes: need at least two classes".into()));
                }
            }
            DatasetSpec::Tokens {
                test_fraction,
                vocab_limit,
                ..
            } => {
                check_fraction(*test_fraction)?;
                if *vocab_limit < 3 {
                    return Err(CliError::Config(
                        "dataset.vocab_limit: must leave room for a word beside the mask and OOV indices".into(),
                    ));
                }
            }
            DatasetSpec::EdgeList { train_per_class, .. } => {
                if *train_per_class == 0 {
                    return Err(CliError::Config("dataset.train_per_class: must be positive".into()));
                }
            }
        }
        if let Some(a) = &self.ablation {
            a.validate()?;
        }
        Ok(())
    }

    /// Builds the initial network and checks the configured noise plan against it.
    pub fn build_network(&self, classes: usize) -> Result<Network, CliError> {
        let classes = self.model.classes.unwrap_or(classes);
        let net = Network::from_specs(&self.model.layers, classes, self.seed)
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        if let Some(entries) = &self.train.estimator.hybrid_map {
            NoisePlan {
                entries: entries.clone(),
            }
            .validate(&net)
            .map_err(|e| CliError::Config(format!("train.estimator.hybrid_map: {e}")))?;
        }
        Ok(net)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}

/// A noise entry constructor used by config defaults and the ablation grid.
pub(crate) fn entry_for(mode: lrgrad::layers::NoiseMode, sigma: f64) -> NoiseEntry {
    match mode {
        lrgrad::layers::NoiseMode::Weight => NoiseEntry::weight(sigma),
        lrgrad::layers::NoiseMode::Logit => NoiseEntry::logit(sigma),
        lrgrad::layers::NoiseMode::Off => NoiseEntry::off(),
    }
}

fn check_fraction(f: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&f) && f > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("dataset.test_fraction: must lie in (0, 1), got {f}")))
    }
}

fn span_note(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
