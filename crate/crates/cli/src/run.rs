use std::fs;
use std::path::{Path, PathBuf};

use lrgrad::data::{load_edge_list, load_idx, load_token_csv, split_nodes, synth_blobs, Dataset, Split};
use lrgrad::evaluation::{accuracy, attacked_sample, evaluate_accuracy};
use lrgrad::layers::Network;
use lrgrad::numerics::RngStream;
use lrgrad::training::{train, EpochMetrics};

use crate::ablation::{ablation_run, similarity_table, summarize, summary_table};
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::metrics::{emit_metrics, fmt_f64, Table};
use crate::CliError;

const DATA_TAG: u64 = 0xDA7A;
const EVAL_TAG: u64 = 0xE7A1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const SIMILARITY_SUMMARY_FILE: &str = "similarity_summary.csv";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.resolved.toml";
pub const MODEL_FILE: &str = "model.json";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Leave wall-clock columns out so reruns are byte-identical.
    pub deterministic: bool,
}

/// A validated config with its output directory settled.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub deterministic: bool,
}

pub fn prepare(config: ExperimentConfig, opts: &RunOptions) -> Result<Prepared, CliError> {
    let seed = opts.seed.unwrap_or(config.seed);
    let config = config.with_seed(seed);
    config.validate()?;
    let out = opts
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| CliError::Config("output_dir: set it in the config or pass --out".into()))?;
    Ok(Prepared {
        config,
        out,
        deterministic: opts.deterministic,
    })
}

/// Loads and splits the configured dataset. Returns the split and class count.
pub fn load_data(config: &ExperimentConfig) -> Result<(Split, usize), CliError> {
    let stream = RngStream::new(config.seed, DATA_TAG);
    let (ds, fraction) = match &config.dataset {
        DatasetSpec::Blobs {
            classes,
            per_class,
            dim,
            separation,
            test_fraction,
        } => (
            synth_blobs(*classes, *per_class, *dim, *separation, &stream.derive(&[0]))?,
            *test_fraction,
        ),
        DatasetSpec::Idx {
            images,
            labels,
            keep_classes,
            limit,
            test_fraction,
        } => {
            let mut ds = load_idx(images, labels, None)?;
            if let Some(keep) = keep_classes {
                ds = ds.select_classes(keep)?;
            }
            if let Some(limit) = limit {
                ds.samples.truncate(*limit);
            }
            (ds, *test_fraction)
        }
        DatasetSpec::Tokens {
            path,
            vocab_limit,
            test_fraction,
        } => (load_token_csv(path, *vocab_limit)?, *test_fraction),
        DatasetSpec::EdgeList {
            nodes,
            edges,
            train_per_class,
        } => {
            let g = split_nodes(&load_edge_list(nodes, edges)?, *train_per_class, &stream.derive(&[1]))?;
            let classes = g.classes;
            return Ok((Dataset::from_graph(g)?, classes));
        }
    };
    if ds.len() < 2 {
        return Err(CliError::Config(format!("dataset: only {} samples after filtering", ds.len())));
    }
    let classes = ds.classes;
    Ok((ds.split(fraction, &stream.derive(&[2]))?, classes))
}

/// Data and a freshly initialized network, checked by one forward and one
/// trial of each attack so mismatches surface before any training.
pub fn setup(config: &ExperimentConfig) -> Result<(Split, Network), CliError> {
    let (split, classes) = load_data(config)?;
    let net = config.build_network(classes)?;
    net.logits(&split.train[0])
        .map_err(|e| CliError::Config(format!("model does not fit the dataset: {e}")))?;
    let mut rng = RngStream::new(config.seed, EVAL_TAG);
    for (i, a) in config.attacks.iter().enumerate() {
        attacked_sample(&net, &split.test[0], a, &mut rng)
            .map_err(|e| CliError::Config(format!("attacks[{i}] does not fit the dataset: {e}")))?;
    }
    Ok((split, net))
}

fn write_snapshot(p: &Prepared) -> Result<(), CliError> {
    fs::create_dir_all(&p.out)?;
    fs::write(p.out.join(CONFIG_SNAPSHOT_FILE), p.config.to_toml()?)?;
    Ok(())
}

/// Accuracy on `samples` under each configured attack.
pub fn attack_accuracies(config: &ExperimentConfig, net: &Network, samples: &[lrgrad::layers::Sample]) -> Result<Vec<f64>, CliError> {
    let stream = RngStream::new(config.seed, EVAL_TAG);
    config
        .attacks
        .iter()
        .enumerate()
        .map(|(i, a)| Ok(evaluate_accuracy(net, samples, Some(a), &stream.derive(&[i as u64]))?))
        .collect()
}

/// Per-epoch metrics. Attack accuracies are measured once, on the trained
/// network, and fill the last row only.
pub fn metrics_table(
    config: &ExperimentConfig,
    history: &[EpochMetrics],
    attacks: &[f64],
    deterministic: bool,
) -> Result<Table, CliError> {
    let sigma_layers: Vec<usize> = history
        .first()
        .map(|h| h.sigmas.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| i).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = ["epoch", "train_loss", "test_accuracy"].map(String::from).to_vec();
    header.extend(config.attacks.iter().map(|a| format!("accuracy_{}", a.label())));
    header.extend(["copies", "skipped_steps"].map(String::from));
    header.extend(sigma_layers.iter().map(|l| format!("sigma_layer{l}")));
    if !deterministic {
        header.push("wall_clock_secs".into());
    }
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    for (k, h) in history.iter().enumerate() {
        let last = k + 1 == history.len();
        let mut row = vec![h.epoch.to_string(), fmt_f64(h.train_loss), fmt_f64(h.test_accuracy)];
        row.extend(attacks.iter().map(|&a| if last { fmt_f64(a) } else { String::new() }));
        row.push(h.copies.to_string());
        row.push(h.skipped_steps.to_string());
        row.extend(sigma_layers.iter().map(|&l| h.sigmas[l].map(fmt_f64).unwrap_or_default()));
        if !deterministic {
            row.push(fmt_f64(h.wall_clock_secs));
        }
        table.push(row)?;
    }
    Ok(table)
}

/// Trains, evaluates the configured attacks, and writes metrics, the
/// trained model and the resolved config.
pub fn run_train(p: &Prepared) -> Result<Vec<EpochMetrics>, CliError> {
    let (split, mut net) = setup(&p.config)?;
    write_snapshot(p)?;
    let history = train(&mut net, &split.train, &split.test, &p.config.train)?;
    let attacks = attack_accuracies(&p.config, &net, &split.test)?;
    emit_metrics(
        &metrics_table(&p.config, &history, &attacks, p.deterministic)?,
        &p.out.join(METRICS_FILE),
    )?;
    fs::write(p.out.join(MODEL_FILE), serde_json::to_string(&net)?)?;
    Ok(history)
}

pub fn load_model(path: &Path) -> Result<Network, CliError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Clean and attacked test accuracy of the model saved by `train` (or of the
/// untrained network when no model file exists yet).
pub fn run_evaluate(p: &Prepared) -> Result<Table, CliError> {
    let (split, fresh) = setup(&p.config)?;
    let model_path = p.out.join(MODEL_FILE);
    let net = if model_path.exists() { load_model(&model_path)? } else { fresh };
    write_snapshot(p)?;
    let mut t = Table::new(&["attack", "accuracy"]);
    t.push(vec!["clean".into(), fmt_f64(accuracy(&net, &split.test)?)])?;
    for (a, acc) in p.config.attacks.iter().zip(attack_accuracies(&p.config, &net, &split.test)?) {
        t.push(vec![a.label(), fmt_f64(acc)])?;
    }
    emit_metrics(&t, &p.out.join(EVALUATION_FILE))?;
    Ok(t)
}

/// Runs the ablation grid on the first training samples of the freshly
/// initialized network and writes the long-format and summary CSVs.
pub fn run_ablate(p: &Prepared) -> Result<Table, CliError> {
    let (split, net) = setup(&p.config)?;
    let ablation = p.config.ablation.clone().unwrap_or_default();
    ablation.validate()?;
    write_snapshot(p)?;
    let batch: Vec<_> = split.train.iter().take(ablation.batch_size).cloned().collect();
    let rows = ablation_run(&net, &batch, &ablation, p.config.seed)?;
    let table = similarity_table(&rows);
    emit_metrics(&table, &p.out.join(SIMILARITY_FILE))?;
    emit_metrics(&summary_table(&summarize(&rows)), &p.out.join(SIMILARITY_SUMMARY_FILE))?;
    Ok(table)
}
