use crate::diff::{DiffError, Tape, Tensor};

use super::{LocalModule, NetError};

/// Stabiliser added under the square root when deltas are row-normalised.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgrSettings {
    pub lambda: f64,
    /// Compare per-sample unit-normalised deltas instead of raw ones.
    pub normalize: bool,
}

impl Default for SgrSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub local: f64,
    /// Reconciliation loss, measured whenever a predecessor delta is given
    /// (even with `lambda = 0`).
    pub sgr: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// One gradient per entry of [`LocalModule::params`].
    pub grads: Vec<Tensor>,
    pub output: Tensor,
    /// `∂L_local/∂output` at the pre-update parameters.
    pub delta_out: Tensor,
    pub record: LossRecord,
}

/// Mean squared mismatch between the current input gradient and the
/// predecessor's output gradient, optionally on unit-normalised rows.
pub fn sgr_value(delta_now: &Tensor, delta_pre: &Tensor, normalize: bool) -> Result<f64, DiffError> {
    let tape = Tape::new();
    let a = tape.constant(delta_now.clone());
    let b = tape.constant(delta_pre.clone());
    let (a, b) = if normalize {
        (a.l2_normalize_rows(NORM_EPS)?, b.l2_normalize_rows(NORM_EPS)?)
    } else {
        (a, b)
    };
    Ok(a.mse(b)?.value().item())
}

/// One gradient-isolated step for a module: local cross-entropy through the
/// auxiliary head, plus `lambda` times the reconciliation loss when a
/// predecessor delta is supplied. Parameters are not modified.
pub fn module_local_step(
    module: &LocalModule,
    input: &Tensor,
    labels: &[usize],
    delta_pre: Option<&Tensor>,
    settings: SgrSettings,
) -> Result<StepOutput, NetError> {
    module.check_input(input)?;
    if let Some(d) = delta_pre {
        if d.shape() != input.shape() {
            return Err(NetError::DeltaShape {
                want: input.shape().to_vec(),
                got: d.shape().to_vec(),
            });
        }
    }
    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let p = module.bind(&tape);
    let out = module.block_forward_var(x, &p)?;
    let logits = module.head_forward_var(out, &p)?;
    let local = logits.softmax_cross_entropy(labels)?;
    let local_v = local.value().item();
    let delta_out = tape.grad(local, &[out])?.remove(0);

    let (total, sgr) = match delta_pre {
        None => (local, None),
        Some(dp) if settings.lambda == 0.0 => {
            let now = tape.grad(local, &[x])?.remove(0);
            (local, Some(sgr_value(&now, dp, settings.normalize)?))
        }
        Some(dp) => {
            let now = tape.grad_graph(local, &[x])?.remove(0);
            let pre = tape.constant(dp.clone());
            let (a, b) = if settings.normalize {
                (now.l2_normalize_rows(NORM_EPS)?, pre.l2_normalize_rows(NORM_EPS)?)
            } else {
                (now, pre)
            };
            let s = a.mse(b)?;
            let sv = s.value().item();
            (local.add(s.scale(settings.lambda)?)?, Some(sv))
        }
    };
    let total_v = total.value().item();
    let grads = tape.grad(total, &p.vars)?;
    Ok(StepOutput {
        grads,
        output: out.value(),
        delta_out,
        record: LossRecord {
            local: local_v,
            sgr,
            total: total_v,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_grad, max_rel_err};
    use crate::localnet::{HeadSpec, Network};

    fn batch(b: usize, d: usize, seed: f64) -> (Tensor, Vec<usize>) {
        let x = Tensor::from_fn(b, d, |i, j| ((i * d + j) as f64 * 0.37 + seed).sin());
        let y = (0..b).map(|i| i % 3).collect();
        (x, y)
    }

    /// Total loss recomputed from scratch for a perturbed parameter.
    fn total_loss(
        m: &LocalModule,
        x: &Tensor,
        y: &[usize],
        dp: Option<&Tensor>,
        s: SgrSettings,
    ) -> f64 {
        module_local_step(m, x, y, dp, s).unwrap().record.total
    }

    /// Non-zero biases keep pre-activations away from the ReLU kink, where
    /// finite differences are meaningless.
    fn offset_biases(net: &mut Network) {
        for m in &mut net.modules {
            for (i, p) in m.params_mut().into_iter().enumerate() {
                if p.rank() == 1 {
                    *p = p.map(|_| 0.05 + 0.01 * i as f64);
                }
            }
        }
    }

    fn check_against_fd(head: HeadSpec, settings: SgrSettings) {
        let mut net = Network::build(&[5, 6, 4], 1, 3, head, 4).unwrap();
        offset_biases(&mut net);
        let (x, y) = batch(4, 5, 0.2);
        let first = module_local_step(&net.modules[0], &x, &y, None, settings).unwrap();
        let m = &net.modules[1];
        let dp = first.delta_out.clone();
        let h = first.output.clone();
        let got = module_local_step(m, &h, &y, Some(&dp), settings).unwrap();
        assert!(got.record.sgr.unwrap() > 0.0);
        let n = m.params().len();
        let mut fd = Vec::with_capacity(n);
        for i in 0..n {
            let base = m.params()[i].clone();
            fd.push(finite_diff_grad(
                |t| {
                    let mut mm = m.clone();
                    *mm.params_mut()[i] = t.clone();
                    total_loss(&mm, &h, &y, Some(&dp), settings)
                },
                &base,
                1e-5,
            ));
        }
        let err = max_rel_err(&got.grads, &fd);
        assert!(err < 1e-5, "rel err {err:e}");
    }

    #[test]
    fn sgr_gradient_matches_finite_differences() {
        check_against_fd(HeadSpec::Etf, SgrSettings::default());
        check_against_fd(
            HeadSpec::Etf,
            SgrSettings {
                lambda: 0.7,
                normalize: false,
            },
        );
        check_against_fd(HeadSpec::Mlp { hidden: 5 }, SgrSettings::default());
    }

    #[test]
    fn lambda_zero_matches_plain_local_loss() {
        let net = Network::build(&[5, 6, 4], 1, 3, HeadSpec::Etf, 1).unwrap();
        let (x, y) = batch(6, 5, 0.9);
        let s0 = SgrSettings {
            lambda: 0.0,
            normalize: true,
        };
        let a = module_local_step(&net.modules[0], &x, &y, None, s0).unwrap();
        let h = a.output.clone();
        let with = module_local_step(&net.modules[1], &h, &y, Some(&a.delta_out), s0).unwrap();
        let without = module_local_step(&net.modules[1], &h, &y, None, s0).unwrap();
        for (g1, g2) in with.grads.iter().zip(&without.grads) {
            assert_eq!(g1, g2);
        }
        assert!(with.record.sgr.is_some());
        assert_eq!(with.record.total, with.record.local);
    }

    #[test]
    fn sgr_zero_when_deltas_agree() {
        // A module whose own input gradient is the supplied delta sees no
        // reconciliation loss, so its gradient is the plain local gradient.
        let net = Network::build(&[5, 6], 1, 3, HeadSpec::Etf, 2).unwrap();
        let m = &net.modules[0];
        let (x, y) = batch(3, 5, 0.1);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let p = m.bind_frozen(&tape);
        let l = m
            .head_forward_var(m.block_forward_var(xv, &p).unwrap(), &p)
            .unwrap()
            .softmax_cross_entropy(&y)
            .unwrap();
        let own = tape.grad(l, &[xv]).unwrap().remove(0);
        let s = module_local_step(m, &x, &y, Some(&own), SgrSettings::default()).unwrap();
        assert!(s.record.sgr.unwrap() < 1e-20);
        let plain = module_local_step(m, &x, &y, None, SgrSettings::default()).unwrap();
        assert!(max_rel_err(&s.grads, &plain.grads) < 1e-9);
    }

    #[test]
    fn normalised_value_is_bounded() {
        let a = Tensor::from_fn(3, 4, |i, j| (i + j) as f64 - 2.0);
        let b = a.scale(-5.0);
        // opposite unit rows differ by 2 in norm: mse = 4 / d
        let v = sgr_value(&a, &b, true).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        assert!(sgr_value(&a, &a.scale(3.0), true).unwrap() < 1e-20);
        assert!(sgr_value(&a, &a.scale(3.0), false).unwrap() > 1.0);
    }

    #[test]
    fn shape_errors() {
        let net = Network::build(&[5, 6], 1, 3, HeadSpec::Etf, 2).unwrap();
        let (x, y) = batch(3, 5, 0.1);
        let bad = Tensor::zeros(&[3, 4]);
        assert!(matches!(
            module_local_step(&net.modules[0], &x, &y, Some(&bad), SgrSettings::default()),
            Err(NetError::DeltaShape { .. })
        ));
        assert!(module_local_step(&net.modules[0], &bad, &y, None, SgrSettings::default()).is_err());
        assert!(module_local_step(&net.modules[0], &x, &[0, 1, 7], None, SgrSettings::default()).is_err());
    }
}
