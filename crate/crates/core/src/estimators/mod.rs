//! Likelihood-ratio gradient estimators and the copy orchestration around
//! them: layer-wise injection schedules, antithetic pairs, quasi-Monte Carlo
//! noise, an optional mean-loss baseline and the hybrid weight/logit mode.
//!
//! A *unit* is one copy, or one antithetic pair of copies, evaluated on every
//! sample of the batch. Logit noise is drawn independently per sample; weight
//! noise is shared across the batch. A unit's value for a coordinate is
//! `(1/B) sum_b A_b s_b`, where `s_b` is the score of the draws seen by
//! sample `b` and `A_b` is its loss, or `(L+ - L-)/2` for a pair. Standard
//! errors come from the spread of unit values.

mod score;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use score::{
    lr_conv_grad, lr_dense_grad, lr_gat_grad, lr_gcn_grad, lr_recurrent_grad, lr_sigma_grad,
    lr_weight_perturb_grad, LayerGrad,
};

use crate::error::{ensure, Error, Result};
use crate::layers::{
    FragmentKind, Layer, Network, NoiseEntry, NoiseMode, NoisePlan, Sample, TraceFragment,
};
use crate::numerics::{mix64, NoiseSource, QmcNoise, Recording, Replay, RngStream, Tensor};
use score::{add_score, sigma_score, split_flat};

/// Units evaluated by one parallel task. Fixed so that the reduction order,
/// and with it every floating-point result, is independent of thread count.
const CHUNK_UNITS: usize = 16;

/// Order in which perturbed layers are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every perturbed layer gets its own block of copies on every call.
    #[default]
    FullSweep,
    /// One layer per call, cycling; other layers keep their last estimate.
    RoundRobin,
    /// All perturbed layers share the same copies.
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Subtract the mean loss of the block before weighting.
    BatchMean,
}

fn default_copies() -> usize {
    32
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Loss evaluations per sample per layer block, twins included.
    #[serde(default = "default_copies")]
    pub copies: usize,
    #[serde(default = "default_true")]
    pub antithetic: bool,
    #[serde(default)]
    pub qmc: bool,
    #[serde(default)]
    pub schedule: Schedule,
    /// Per-layer noise settings. `None` selects [`NoisePlan::hybrid`].
    #[serde(default)]
    pub hybrid_map: Option<Vec<NoiseEntry>>,
    #[serde(default)]
    pub baseline: Baseline,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            copies: default_copies(),
            antithetic: true,
            qmc: false,
            schedule: Schedule::FullSweep,
            hybrid_map: None,
            baseline: Baseline::None,
        }
    }
}

impl EstimatorConfig {
    pub fn with_plan(copies: usize, plan: NoisePlan) -> Self {
        EstimatorConfig {
            copies,
            hybrid_map: Some(plan.entries),
            ..Default::default()
        }
    }

    /// Evolution strategies: all parameters perturbed at once in weight mode.
    pub fn evolution_strategies(net: &Network, copies: usize, sigma: f64) -> Self {
        EstimatorConfig {
            copies,
            schedule: Schedule::Simultaneous,
            hybrid_map: Some(NoisePlan::weight_all(net, sigma).entries),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.copies == 0 {
            return Err(Error::Config("copies must be positive".into()));
        }
        if self.antithetic && self.copies % 2 != 0 {
            return Err(Error::Config(format!(
                "antithetic pairing needs an even copy count, got {}",
                self.copies
            )));
        }
        Ok(())
    }

    pub fn plan_for(&self, net: &Network) -> Result<NoisePlan> {
        let plan = match &self.hybrid_map {
            Some(entries) => NoisePlan {
                entries: entries.clone(),
            },
            None => NoisePlan::hybrid(net),
        };
        plan.validate(net)?;
        ensure!(
            plan.perturbed_layers().next().is_some(),
            "noise plan perturbs no layer"
        );
        Ok(plan)
    }
}

/// Gradient estimate for every layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    /// `grads[l][p]` matches `net.layers[l].params()[p]`.
    pub grads: Vec<Vec<Tensor>>,
    pub std_errors: Vec<Vec<Tensor>>,
    /// `dE[L]/d(sigma^2)` for layers with a trainable magnitude.
    pub sigma_grads: Vec<Option<f64>>,
    pub copies_used: usize,
}

impl GradEstimate {
    pub fn zeros(net: &Network) -> Self {
        let z: Vec<Vec<Tensor>> = net
            .layers
            .iter()
            .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        GradEstimate {
            grads: z.clone(),
            std_errors: z,
            sigma_grads: vec![None; net.layers.len()],
            copies_used: 0,
        }
    }

    pub fn layer_flat(&self, layer: usize) -> Vec<f64> {
        self.grads[layer]
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }

    pub fn layer_std_errors(&self, layer: usize) -> Vec<f64> {
        self.std_errors[layer]
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        (0..self.grads.len()).flat_map(|l| self.layer_flat(l)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
            && self.sigma_grads.iter().flatten().all(|v| v.is_finite())
    }
}

/// Stateful estimator; the state only matters for [`Schedule::RoundRobin`].
#[derive(Debug, Clone)]
pub struct Estimator {
    config: EstimatorConfig,
    cursor: usize,
    carry: Option<GradEstimate>,
}

impl Estimator {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Estimator {
            config,
            cursor: 0,
            carry: None,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// Replaces the per-layer noise settings, keeping the schedule state.
    pub fn set_noise(&mut self, entries: Vec<NoiseEntry>) {
        self.config.hybrid_map = Some(entries);
    }

    pub fn estimate(&mut self, net: &Network, batch: &[Sample], stream: &RngStream) -> Result<GradEstimate> {
        ensure!(!batch.is_empty(), "cannot estimate a gradient on an empty batch");
        let plan = self.config.plan_for(net)?;
        let perturbed: Vec<usize> = plan.perturbed_layers().collect();
        let blocks: Vec<Vec<usize>> = match self.config.schedule {
            Schedule::FullSweep => perturbed.iter().map(|&l| vec![l]).collect(),
            Schedule::RoundRobin => vec![vec![perturbed[self.cursor % perturbed.len()]]],
            Schedule::Simultaneous => vec![perturbed.clone()],
        };
        // Clean activations, shared by every block: a block only re-runs the
        // layers from its first perturbed layer onward.
        let acts: Vec<Vec<Tensor>> = batch
            .iter()
            .map(|s| net.activations(s))
            .collect::<Result<_>>()?;

        let mut out = match (&self.config.schedule, &self.carry) {
            (Schedule::RoundRobin, Some(prev)) => prev.clone(),
            _ => GradEstimate::zeros(net),
        };
        out.copies_used = 0;
        for block in &blocks {
            let key = block.iter().fold(0xB10C_u64, |acc, &l| mix64(acc, l as u64));
            let start = *block.iter().min().expect("non-empty block");
            let inputs: Vec<&Tensor> = acts.iter().map(|a| &a[start]).collect();
            let job = Block {
                net,
                batch,
                inputs: &inputs,
                input_layer: start,
                plan: &plan,
                layers: block,
                config: &self.config,
                stream: stream.derive(&[key]),
            };
            job.run(&mut out)?;
        }
        if self.config.schedule == Schedule::RoundRobin {
            self.cursor += 1;
            self.carry = Some(out.clone());
        }
        Ok(out)
    }
}

/// One-shot estimate with a fresh [`Estimator`].
pub fn estimate_gradient(
    net: &Network,
    batch: &[Sample],
    config: &EstimatorConfig,
    stream: &RngStream,
) -> Result<GradEstimate> {
    Estimator::new(config.clone())?.estimate(net, batch, stream)
}

/// Running sums for one layer: `P` is the raw weighted score, `Q` the
/// unweighted score used to apply the baseline afterwards.
#[derive(Debug, Clone)]
struct Sums {
    p: Vec<f64>,
    q: Vec<f64>,
    pp: Vec<f64>,
    pq: Vec<f64>,
    qq: Vec<f64>,
    sigma: [f64; 5],
}

impl Sums {
    fn new(len: usize) -> Self {
        Sums {
            p: vec![0.0; len],
            q: vec![0.0; len],
            pp: vec![0.0; len],
            pq: vec![0.0; len],
            qq: vec![0.0; len],
            sigma: [0.0; 5],
        }
    }

    fn add_unit(&mut self, p: &[f64], q: &[f64], sp: f64, sq: f64) {
        for i in 0..p.len() {
            self.p[i] += p[i];
            self.q[i] += q[i];
            self.pp[i] += p[i] * p[i];
            self.pq[i] += p[i] * q[i];
            self.qq[i] += q[i] * q[i];
        }
        let s = &mut self.sigma;
        s[0] += sp;
        s[1] += sq;
        s[2] += sp * sp;
        s[3] += sp * sq;
        s[4] += sq * sq;
    }

    fn merge(&mut self, other: &Sums) {
        for (a, b) in [
            (&mut self.p, &other.p),
            (&mut self.q, &other.q),
            (&mut self.pp, &other.pp),
            (&mut self.pq, &other.pq),
            (&mut self.qq, &other.qq),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for k in 0..5 {
            self.sigma[k] += other.sigma[k];
        }
    }
}

/// Mean and standard error of unit values `P - c Q` from running sums.
fn finish(p: f64, q: f64, pp: f64, pq: f64, qq: f64, c: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = (p - c * q) / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = pp - 2.0 * c * pq + c * c * qq - nf * mean * mean;
    (mean, (ss.max(0.0) / (nf - 1.0) / nf).sqrt())
}

#[derive(Debug, Clone)]
struct Partial {
    sums: Vec<Sums>,
    loss: f64,
    units: usize,
}

impl Partial {
    fn merge(&mut self, other: &Partial) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.merge(b);
        }
        self.loss += other.loss;
        self.units += other.units;
    }
}

struct Block<'a> {
    net: &'a Network,
    batch: &'a [Sample],
    inputs: &'a [&'a Tensor],
    input_layer: usize,
    plan: &'a NoisePlan,
    layers: &'a [usize],
    config: &'a EstimatorConfig,
    stream: RngStream,
}

const WEIGHT_TAG: u64 = 0x5745_4947;

impl Block<'_> {
    fn units(&self) -> usize {
        if self.config.antithetic {
            self.config.copies / 2
        } else {
            self.config.copies
        }
    }

    fn needs_q(&self) -> bool {
        self.config.baseline == Baseline::BatchMean && !self.config.antithetic
    }

    fn run(&self, out: &mut GradEstimate) -> Result<()> {
        let units = self.units();
        let chunks = units.div_ceil(CHUNK_UNITS);
        let partials: Vec<Partial> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = self.empty();
                for u in c * CHUNK_UNITS..((c + 1) * CHUNK_UNITS).min(units) {
                    self.unit(u, &mut acc)?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut total = self.empty();
        for p in &partials {
            total.merge(p);
        }
        let c = match self.config.baseline {
            Baseline::None => 0.0,
            Baseline::BatchMean => total.loss / total.units as f64,
        };
        for (sums, &l) in total.sums.iter().zip(self.layers) {
            let n = total.units;
            let (mut mean, mut se) = (vec![0.0; sums.p.len()], vec![0.0; sums.p.len()]);
            for i in 0..sums.p.len() {
                (mean[i], se[i]) = finish(sums.p[i], sums.q[i], sums.pp[i], sums.pq[i], sums.qq[i], c, n);
            }
            let shapes: Vec<Vec<usize>> = self.net.layers[l]
                .params()
                .iter()
                .map(|p| p.shape().to_vec())
                .collect();
            out.grads[l] = split_flat(&mean, &shapes);
            out.std_errors[l] = split_flat(&se, &shapes);
            let s = &sums.sigma;
            out.sigma_grads[l] = self.plan.entries[l]
                .trainable_sigma
                .then(|| finish(s[0], s[1], s[2], s[3], s[4], c, n).0);
        }
        out.copies_used += self.config.copies * self.batch.len();
        Ok(())
    }

    fn empty(&self) -> Partial {
        Partial {
            sums: self
                .layers
                .iter()
                .map(|&l| Sums::new(self.net.layers[l].param_count()))
                .collect(),
            loss: 0.0,
            units: 0,
        }
    }

    /// Digital-shift key of one Sobol sequence; the point index is the unit.
    fn qmc_key(&self, tag: u64) -> u64 {
        mix64(mix64(self.stream.seed(), self.stream.stream_id()), tag)
    }

    fn weight_source(&self, unit: usize) -> Box<dyn NoiseSource> {
        if self.config.qmc {
            Box::new(QmcNoise::new(unit as u64 + 1, self.qmc_key(WEIGHT_TAG)))
        } else {
            Box::new(self.stream.derive(&[unit as u64, WEIGHT_TAG]))
        }
    }

    fn logit_source(&self, unit: usize, sample: usize, first_dim: usize) -> Box<dyn NoiseSource> {
        if self.config.qmc {
            let key = self.qmc_key(sample as u64);
            Box::new(QmcNoise::starting_at(unit as u64 + 1, key, first_dim))
        } else {
            Box::new(self.stream.derive(&[unit as u64, sample as u64]))
        }
    }

    /// Evaluates one unit on the whole batch and adds it to `acc`.
    fn unit(&self, u: usize, acc: &mut Partial) -> Result<()> {
        let net = self.net;
        let nl = net.layers.len();
        let anti = self.config.antithetic;
        let inv_b = 1.0 / self.batch.len() as f64;

        // Weight noise: drawn once per unit, shared by the whole batch.
        let mut plus: Vec<Option<Layer>> = vec![None; nl];
        let mut minus: Vec<Option<Layer>> = vec![None; nl];
        let mut weight_eps: Vec<(usize, Vec<Tensor>)> = Vec::new();
        let weight_layers: Vec<usize> = self
            .layers
            .iter()
            .copied()
            .filter(|&l| self.plan.entries[l].mode == NoiseMode::Weight)
            .collect();
        let mut weight_dims = 0;
        if !weight_layers.is_empty() {
            let mut src = self.weight_source(u);
            let mut rec = Recording::new(src.as_mut());
            for &l in &weight_layers {
                let (noisy, eps) = net.layers[l].perturbed(self.plan.entries[l].sigma, &mut rec)?;
                weight_dims += net.layers[l].param_count();
                plus[l] = Some(noisy);
                weight_eps.push((l, eps));
            }
            if anti {
                let mut rep = Replay::new(&rec.blocks, true);
                for &l in &weight_layers {
                    minus[l] = Some(net.layers[l].perturbed(self.plan.entries[l].sigma, &mut rep)?.0);
                }
            }
        }

        let mut unit_plan = NoisePlan::off(nl);
        for &l in self.layers {
            if self.plan.entries[l].mode == NoiseMode::Logit {
                unit_plan.entries[l] = self.plan.entries[l];
            }
        }

        let slot = |l: usize| self.layers.iter().position(|&x| x == l).expect("layer in block");
        let lens: Vec<usize> = self.layers.iter().map(|&l| net.layers[l].param_count()).collect();
        let mut p: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.0; n]).collect();
        let mut q: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.0; n]).collect();
        let mut sp = vec![0.0; self.layers.len()];
        let mut sq = vec![0.0; self.layers.len()];
        let (mut odd_mean, mut even_mean) = (0.0, 0.0);

        for (b, (sample, input)) in self.batch.iter().zip(self.inputs).enumerate() {
            let mut src = self.logit_source(u, b, weight_dims);
            let mut rec = Recording::new(src.as_mut());
            let tp = net.forward_with(self.input_layer, input, sample, &unit_plan, &mut rec, &plus)?;
            // Each mirrored trace is scored with its own record: a score is odd
            // in the noise only when the layer input does not depend on it,
            // which fails for recurrent state and for layers above another
            // perturbed layer.
            let tm = if anti {
                let mut rep = Replay::new(&rec.blocks, true);
                Some(net.forward_with(self.input_layer, input, sample, &unit_plan, &mut rep, &minus)?)
            } else {
                None
            };
            let (odd, even) = match &tm {
                Some(tm) => ((tp.loss - tm.loss) / 2.0, (tp.loss + tm.loss) / 2.0),
                None => (tp.loss, tp.loss),
            };
            let half = if anti { 0.5 * inv_b } else { inv_b };
            for t in std::iter::once(&tp).chain(&tm) {
                for frag in &t.fragments {
                    let i = slot(frag.layer);
                    add_score(frag, t.loss * half, &mut p[i])?;
                    if self.needs_q() {
                        add_score(frag, inv_b, &mut q[i])?;
                    }
                    let s = sigma_score(frag)?;
                    sp[i] += t.loss * s * half;
                    sq[i] += s * half;
                }
            }
            odd_mean += odd * inv_b;
            even_mean += even * inv_b;
        }

        for (l, eps) in weight_eps {
            let i = slot(l);
            let entry = &self.plan.entries[l];
            let frag = TraceFragment {
                layer: l,
                mode: NoiseMode::Weight,
                sigma: entry.sigma,
                attn_sigma: entry.attn_sigma(),
                kind: FragmentKind::Weight { eps },
            };
            add_score(&frag, odd_mean, &mut p[i])?;
            if self.needs_q() {
                add_score(&frag, 1.0, &mut q[i])?;
            }
            let s = sigma_score(&frag)?;
            sp[i] += even_mean * s;
            sq[i] += s;
        }

        for (i, sums) in acc.sums.iter_mut().enumerate() {
            sums.add_unit(&p[i], &q[i], sp[i], sq[i]);
        }
        acc.loss += even_mean;
        acc.units += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
