use super::{AttackMethod, AttackSpec};
use crate::error::{ensure, Result};
use crate::layers::{Network, Sample};
use crate::numerics::Tensor;
use crate::oracle::bp_grad;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub input: Tensor,
    /// The input gradient was zero everywhere, so the input was returned as is.
    pub degenerate: bool,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `v` into `[x - eps, x + eps] ∩ [0, 1]` such that `|v - x| <= eps`
/// also holds in floating point.
fn project(v: f64, x: f64, eps: f64) -> f64 {
    let mut r = v.clamp(x - eps, x + eps).clamp(0.0, 1.0);
    while r - x > eps {
        r = r.next_down();
    }
    while x - r > eps {
        r = r.next_up();
    }
    r
}

fn input_grad(net: &Network, sample: &Sample, input: &Tensor) -> Result<Tensor> {
    let mut s = sample.clone();
    s.input = input.clone();
    Ok(bp_grad(net, &[s])?.input_grads.swap_remove(0))
}

/// Gradient-sign attack within the `epsilon` ℓ∞ ball and the pixel range
/// `[0, 1]`, using the reverse-mode input gradient of the clean network.
/// MI-FGSM accumulates `g / |g|_1` with decay `spec.momentum`.
pub fn adversarial_example(net: &Network, sample: &Sample, spec: &AttackSpec) -> Result<AttackOutcome> {
    ensure!(
        spec.method.is_gradient(),
        "{} is not a gradient attack",
        spec.method.name()
    );
    spec.validate()?;
    let x0 = &sample.input;
    ensure!(
        x0.data().iter().all(|v| (0.0..=1.0).contains(v)),
        "{} expects image values in [0, 1]",
        spec.method.name()
    );
    let (eps, steps, alpha) = match spec.method {
        AttackMethod::Fgsm => (spec.epsilon, 1, spec.epsilon),
        _ => (spec.epsilon, spec.iterations, spec.step_size()),
    };
    let mut x = x0.clone();
    let mut velocity = vec![0.0; x.len()];
    for k in 0..steps {
        let g = input_grad(net, sample, &x)?;
        if k == 0 && g.data().iter().all(|&v| v == 0.0) {
            return Ok(AttackOutcome {
                input: x0.clone(),
                degenerate: true,
            });
        }
        let direction: Vec<f64> = if spec.method == AttackMethod::Mifgsm {
            let l1: f64 = g.data().iter().map(|v| v.abs()).sum();
            for (m, gv) in velocity.iter_mut().zip(g.data()) {
                *m = spec.momentum * *m + if l1 > 0.0 { gv / l1 } else { 0.0 };
            }
            velocity.iter().map(|&v| sign(v)).collect()
        } else {
            g.data().iter().map(|&v| sign(v)).collect()
        };
        for ((xv, &orig), d) in x.data_mut().iter_mut().zip(x0.data()).zip(direction) {
            *xv = project(*xv + alpha * d, orig, eps);
        }
    }
    Ok(AttackOutcome {
        input: x,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_respects_budget_in_floating_point() {
        let eps = 8.0 / 255.0;
        for i in 0..1000 {
            let x = i as f64 / 999.0;
            for v in [x + eps, x - eps, x + 3.0 * eps, x - 0.5 * eps] {
                let r = project(v, x, eps);
                assert!((r - x).abs() <= eps && (0.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(-3.0), -1.0);
    }

    #[test]
    fn inputs_outside_the_pixel_range_are_rejected() {
        let net = Network::from_specs(
            &[crate::layers::LayerSpec::Dense {
                d_in: 2,
                d_out: 2,
                activation: Default::default(),
                init_scale: 1.0,
            }],
            2,
            0,
        )
        .unwrap();
        let sample = Sample::class(Tensor::from_vec(vec![2], vec![3.0, 0.5]).unwrap(), 0);
        let spec = AttackSpec::new(AttackMethod::Fgsm);
        assert!(adversarial_example(&net, &sample, &spec).is_err());
    }
}
