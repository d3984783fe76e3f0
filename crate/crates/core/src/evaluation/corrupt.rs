use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, Poisson};

use super::{ratio_count, AttackMethod, AttackSpec};
use crate::error::{ensure, Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Reserved token index that masked sequence positions are set to.
pub const MASK_TOKEN: usize = 0;
/// Photon-count scale of the Poisson corruption: `x <- Poisson(lambda x) / lambda`.
pub const POISSON_SCALE: f64 = 255.0;

fn is_token_sequence(x: &Tensor) -> bool {
    x.rank() == 1 && x.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0)
}

/// Applies a non-gradient corruption to one input. Image methods expect
/// values in `[0, 1]` and keep them there; sequence methods expect a rank-1
/// tensor of token indices.
pub fn corrupt(input: &Tensor, spec: &AttackSpec, rng: &mut RngStream) -> Result<Tensor> {
    spec.validate()?;
    let method = spec.method;
    ensure!(
        !method.is_gradient() && !method.is_graph(),
        "{} is not an input corruption",
        method.name()
    );
    let seq = matches!(method, AttackMethod::RanmaskSeq | AttackMethod::Shuffle);
    if seq {
        ensure!(
            is_token_sequence(input),
            "{} expects a token sequence, got shape {:?}",
            method.name(),
            input.shape()
        );
    } else {
        ensure!(
            input.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "{} expects image values in [0, 1]",
            method.name()
        );
    }
    let mut out = input.clone();
    let clip = |v: f64| v.clamp(0.0, 1.0);
    match method {
        AttackMethod::Gaussian => {
            for v in out.data_mut() {
                *v = clip(*v + spec.epsilon * rng.next_gaussian());
            }
        }
        AttackMethod::Uniform => {
            for v in out.data_mut() {
                *v = clip(*v + spec.epsilon * (2.0 * rng.next_uniform() - 1.0));
            }
        }
        AttackMethod::Poisson => {
            for v in out.data_mut() {
                let rate = *v * POISSON_SCALE;
                if rate > 0.0 {
                    let count = Poisson::new(rate)
                        .map_err(|e| Error::Domain(format!("poisson rate {rate}: {e}")))?
                        .sample(rng);
                    *v = clip(count / POISSON_SCALE);
                }
            }
        }
        AttackMethod::Grey => {
            // Channel mean replicated back to every channel of a c x h x w image.
            if input.rank() == 3 && input.shape()[0] > 1 {
                let c = input.shape()[0];
                let plane = input.len() / c;
                for p in 0..plane {
                    let first = input.data()[p];
                    if (1..c).all(|k| input.data()[k * plane + p] == first) {
                        continue;
                    }
                    let mean = (0..c).map(|k| input.data()[k * plane + p]).sum::<f64>() / c as f64;
                    for k in 0..c {
                        out.data_mut()[k * plane + p] = mean;
                    }
                }
            }
        }
        AttackMethod::RanmaskImage => {
            let n = out.len();
            for i in sample_indices(rng, n, ratio_count(spec.ratio(), n)) {
                out.data_mut()[i] = 0.0;
            }
        }
        AttackMethod::RanmaskSeq => {
            let n = out.len();
            for i in sample_indices(rng, n, ratio_count(spec.ratio(), n)) {
                out.data_mut()[i] = MASK_TOKEN as f64;
            }
        }
        AttackMethod::Shuffle => rng.shuffle(out.data_mut()),
        _ => unreachable!("filtered above"),
    }
    Ok(out)
}
