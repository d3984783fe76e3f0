//! Cosine-similarity ablation: how close do LR estimates come to the
//! backpropagation gradient as the copy count, noise target, noise magnitude
//! and variance-reduction switches change.

use std::collections::BTreeMap;

use lrgrad::estimators::{Estimator, EstimatorConfig, Schedule};
use lrgrad::layers::{NoiseMode, NoisePlan, Network, Sample};
use lrgrad::numerics::RngStream;
use lrgrad::oracle::{bp_grad, compare, BpGrad};
use serde::{Deserialize, Serialize};

use crate::config::entry_for;
use crate::metrics::{fmt_f64, Table};
use crate::CliError;

const ABLATION_TAG: u64 = 0xAB1A;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantNoise {
    Logit,
    Weight,
    /// Weight noise on the first two convolutions (or on `weight_layers`),
    /// logit noise elsewhere.
    Hybrid,
}

/// One estimator configuration in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub noise: VariantNoise,
    /// Noise magnitude for pure modes; defaults to 1e-1 for logit and 1e-3
    /// for weight noise. Hybrid runs always use those defaults.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "yes")]
    pub antithetic: bool,
    /// Give each layer its own copies instead of perturbing all at once.
    #[serde(default = "yes")]
    pub layerwise: bool,
    #[serde(default)]
    pub qmc: bool,
    /// Hybrid only: the layers that get weight noise instead of the default
    /// choice.
    #[serde(default)]
    pub weight_layers: Option<Vec<usize>>,
}

fn yes() -> bool {
    true
}

impl Variant {
    pub fn new(name: &str, noise: VariantNoise, sigma: Option<f64>) -> Self {
        Variant {
            name: name.to_string(),
            noise,
            sigma,
            antithetic: true,
            layerwise: true,
            qmc: false,
            weight_layers: None,
        }
    }

    pub fn plan(&self, net: &Network) -> NoisePlan {
        let with = |mode, default| {
            let entry = entry_for(mode, self.sigma.unwrap_or(default));
            NoisePlan {
                entries: net
                    .layers
                    .iter()
                    .map(|l| if l.has_params() { entry } else { entry_for(NoiseMode::Off, 1.0) })
                    .collect(),
            }
        };
        match self.noise {
            VariantNoise::Logit => with(NoiseMode::Logit, lrgrad::layers::NoiseEntry::DEFAULT_LOGIT_SIGMA),
            VariantNoise::Weight => with(NoiseMode::Weight, lrgrad::layers::NoiseEntry::DEFAULT_WEIGHT_SIGMA),
            VariantNoise::Hybrid => match &self.weight_layers {
                None => NoisePlan::hybrid(net),
                Some(weighted) => {
                    let mut plan = with(NoiseMode::Logit, lrgrad::layers::NoiseEntry::DEFAULT_LOGIT_SIGMA);
                    for &l in weighted {
                        if net.layers.get(l).is_some_and(|x| x.has_params()) {
                            plan.entries[l] = entry_for(NoiseMode::Weight, lrgrad::layers::NoiseEntry::DEFAULT_WEIGHT_SIGMA);
                        }
                    }
                    plan
                }
            },
        }
    }

    /// Rejects `weight_layers` entries that name no parameterized layer.
    pub fn check(&self, net: &Network) -> Result<(), CliError> {
        for &l in self.weight_layers.iter().flatten() {
            if !net.layers.get(l).is_some_and(|x| x.has_params()) {
                return Err(CliError::Config(format!(
                    "variant {}: weight_layers entry {l} is not a parameterized layer",
                    self.name
                )));
            }
        }
        if self.weight_layers.is_some() && self.noise != VariantNoise::Hybrid {
            return Err(CliError::Config(format!(
                "variant {}: weight_layers applies to hybrid variants only",
                self.name
            )));
        }
        Ok(())
    }

    pub fn estimator_config(&self, net: &Network, copies: usize) -> EstimatorConfig {
        EstimatorConfig {
            antithetic: self.antithetic,
            qmc: self.qmc,
            schedule: if self.layerwise {
                Schedule::FullSweep
            } else {
                Schedule::Simultaneous
            },
            ..EstimatorConfig::with_plan(copies, self.plan(net))
        }
    }
}

/// The default grid: the three noise targets, the sigma sweep for each pure
/// mode, and each variance-reduction switch flipped on the hybrid.
pub fn default_variants() -> Vec<Variant> {
    let mut v = vec![Variant::new("hybrid", VariantNoise::Hybrid, None)];
    for (noise, tag) in [(VariantNoise::Logit, "logit"), (VariantNoise::Weight, "weight")] {
        for s in [1e-1, 1e-2, 1e-3] {
            v.push(Variant::new(&format!("{tag}_sigma_{s:e}"), noise, Some(s)));
        }
    }
    v.push(Variant {
        antithetic: false,
        ..Variant::new("hybrid_no_antithetic", VariantNoise::Hybrid, None)
    });
    v.push(Variant {
        layerwise: false,
        ..Variant::new("hybrid_simultaneous", VariantNoise::Hybrid, None)
    });
    v.push(Variant {
        qmc: true,
        ..Variant::new("hybrid_qmc", VariantNoise::Hybrid, None)
    });
    v
}

fn default_copies() -> Vec<usize> {
    vec![100, 1_000, 10_000]
}

fn default_seeds() -> usize {
    10
}

fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_copies")]
    pub copies: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// The fixed batch is the first `batch_size` training samples.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Empty means [`default_variants`].
    #[serde(default)]
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            copies: default_copies(),
            seeds: default_seeds(),
            batch_size: default_batch(),
            variants: Vec::new(),
        }
    }
}

impl AblationConfig {
    pub fn variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            default_variants()
        } else {
            self.variants.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(format!("ablation.{m}")));
        if self.copies.is_empty() || self.copies.contains(&0) {
            return bad("copies: need at least one positive copy count".into());
        }
        if self.seeds == 0 {
            return bad("seeds: must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size: must be positive".into());
        }
        for (i, v) in self.variants().iter().enumerate() {
            if v.sigma.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
                return bad(format!("variants[{i}].sigma: must be positive"));
            }
            if v.noise == VariantNoise::Hybrid && v.sigma.is_some() {
                return bad(format!("variants[{i}].sigma: hybrid runs use the default magnitudes"));
            }
            if v.antithetic && self.copies.iter().any(|c| c % 2 != 0) {
                return bad(format!("variants[{i}]: antithetic pairing needs even copy counts"));
            }
        }
        Ok(())
    }
}

/// Similarity of one estimate to the reference on one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub variant: String,
    pub copies: usize,
    pub seed: usize,
    pub layer: usize,
    pub layer_name: String,
    pub similarity: f64,
    pub degenerate: bool,
}

/// Runs every (variant, copy count, seed) cell on `batch` and compares the
/// estimate with the backpropagation gradient layer by layer. All variants
/// at the same copy count and seed draw from the same noise stream.
pub fn ablation_run(net: &Network, batch: &[Sample], config: &AblationConfig, seed: u64) -> Result<Vec<SimilarityRow>, CliError> {
    config.validate()?;
    let reference = bp_grad(net, batch)?;
    let base = RngStream::new(seed, ABLATION_TAG);
    let mut rows = Vec::new();
    for variant in config.variants() {
        variant.check(net)?;
        for &copies in &config.copies {
            for s in 0..config.seeds {
                let stream = base.derive(&[copies as u64, s as u64]);
                rows.extend(cell(net, batch, &reference, &variant, copies, s, &stream)?);
            }
        }
    }
    Ok(rows)
}

fn cell(
    net: &Network,
    batch: &[Sample],
    reference: &BpGrad,
    variant: &Variant,
    copies: usize,
    seed: usize,
    stream: &RngStream,
) -> Result<Vec<SimilarityRow>, CliError> {
    let mut est = Estimator::new(variant.estimator_config(net, copies))?;
    let g = est.estimate(net, batch, stream)?;
    let cmp = compare(&variant.name, net, &g, &reference.grads)?;
    Ok(cmp
        .layers
        .into_iter()
        .map(|(layer, sim)| SimilarityRow {
            variant: variant.name.clone(),
            copies,
            seed,
            layer,
            layer_name: net.layers[layer].name().to_string(),
            similarity: sim.value,
            degenerate: sim.degenerate,
        })
        .collect())
}

pub fn similarity_table(rows: &[SimilarityRow]) -> Table {
    let mut t = Table::new(&["variant", "copies", "seed", "layer", "layer_name", "similarity", "degenerate"]);
    for r in rows {
        t.rows.push(vec![
            r.variant.clone(),
            r.copies.to_string(),
            r.seed.to_string(),
            r.layer.to_string(),
            r.layer_name.clone(),
            fmt_f64(r.similarity),
            r.degenerate.to_string(),
        ]);
    }
    t
}

/// Spread of one (variant, copies, layer) group over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilaritySummary {
    pub variant: String,
    pub copies: usize,
    pub layer: usize,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub degenerate: usize,
}

/// Groups rows by variant (in first-seen order), copies and layer.
pub fn summarize(rows: &[SimilarityRow]) -> Vec<SimilaritySummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, usize, usize), Vec<&SimilarityRow>> = BTreeMap::new();
    for r in rows {
        let v = match order.iter().position(|n| *n == r.variant) {
            Some(v) => v,
            None => {
                order.push(&r.variant);
                order.len() - 1
            }
        };
        groups.entry((v, r.copies, r.layer)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((v, copies, layer), g)| {
            let mut vals: Vec<f64> = g.iter().map(|r| r.similarity).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            SimilaritySummary {
                variant: order[v].to_string(),
                copies,
                layer,
                seeds: vals.len(),
                mean,
                std: var.sqrt(),
                median: median(&mut vals),
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                degenerate: g.iter().filter(|r| r.degenerate).count(),
            }
        })
        .collect()
}

pub fn median(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

pub fn summary_table(summary: &[SimilaritySummary]) -> Table {
    let mut t = Table::new(&[
        "variant", "copies", "layer", "seeds", "mean", "std", "median", "min", "max", "degenerate",
    ]);
    for s in summary {
        t.rows.push(vec![
            s.variant.clone(),
            s.copies.to_string(),
            s.layer.to_string(),
            s.seeds.to_string(),
            fmt_f64(s.mean),
            fmt_f64(s.std),
            fmt_f64(s.median),
            fmt_f64(s.min),
            fmt_f64(s.max),
            s.degenerate.to_string(),
        ]);
    }
    t
}
