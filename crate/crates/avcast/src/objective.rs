//! Losses: reconstruction + KL (the variational bound), the six-term
//! adversarial discriminator loss, the generator's adversarial term,
//! and the combined breakdown. Log arguments are clamped to
//! [1e-7, 1 - 1e-7] so every loss stays finite.

use crate::error::{AvError, Result};
use crate::net::LatentGaussian;
use diffcore::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub adv_g: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Closed-form KL(post || prior) between diagonal Gaussians, summed
/// over coordinates.
pub fn kl_diag_gauss(post: &LatentGaussian, prior: &LatentGaussian) -> Result<f64> {
    if post.dim() != prior.dim() {
        return Err(AvError::invalid(
            "kl_diag_gauss",
            format!("dim {} vs {}", post.dim(), prior.dim()),
        ));
    }
    let mut acc = 0.0;
    for i in 0..post.dim() {
        let (m1, lv1) = (post.mu.data()[i], post.log_var.data()[i]);
        let (m0, lv0) = (prior.mu.data()[i], prior.log_var.data()[i]);
        acc += 0.5 * (lv0 - lv1 + (lv1 - lv0).exp() + (m1 - m0).powi(2) * (-lv0).exp() - 1.0);
    }
    Ok(acc)
}

/// Tape version of [`kl_diag_gauss`] over batched [B, z] parameters;
/// returns the scalar sum over batch and coordinates.
pub fn kl_diag_gauss_node(
    tape: &mut Tape,
    post_mu: NodeId,
    post_lv: NodeId,
    prior_mu: NodeId,
    prior_lv: NodeId,
) -> Result<NodeId> {
    let a = tape.sub(prior_lv, post_lv)?;
    let ratio = tape.sub(post_lv, prior_lv)?;
    let b = tape.exp(ratio)?;
    let diff = tape.sub(post_mu, prior_mu)?;
    let diff_sq = tape.mul(diff, diff)?;
    let neg_prior = tape.neg(prior_lv)?;
    let inv_var = tape.exp(neg_prior)?;
    let c = tape.mul(diff_sq, inv_var)?;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    let shifted = tape.add_scalar(abc, -1.0)?;
    let half = tape.scale(shifted, 0.5)?;
    Ok(tape.sum_all(half)?)
}

/// Sum over generated frames of squared pixel error.
pub fn recon_loss(pred: &[Tensor], target: &[Tensor]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(AvError::invalid(
            "recon_loss",
            format!("{} predicted frames vs {} targets", pred.len(), target.len()),
        ));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(AvError::invalid(
                "recon_loss",
                format!("frame shapes {:?} vs {:?}", p.shape(), t.shape()),
            ));
        }
        acc += p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc)
}

/// Tape reconstruction term: sum of squared differences accumulated
/// over (prediction, target) pairs.
pub fn recon_loss_node(tape: &mut Tape, pairs: &[(NodeId, NodeId)]) -> Result<NodeId> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    let mut total: Option<NodeId> = None;
    for &(p, t) in pairs {
        let d = tape.sub(p, t)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum_all(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.unwrap())
}

fn ln_clamped(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let c = tape.clamp(p, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    Ok(tape.ln(c)?)
}

fn ln_clamped_one_minus(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let neg = tape.neg(p)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let c = tape.clamp(one_minus, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    Ok(tape.ln(c)?)
}

/// Discriminator probabilities for one judged time step. Shapes [B, 1].
#[derive(Clone, Copy, Debug)]
pub struct DiscTermNodes {
    /// D_std on a frame from an arbitrary real clip.
    pub real_std: NodeId,
    /// D_std on the generated frame.
    pub fake_std: NodeId,
    /// Judge on real frame with aligned neighborhood audio.
    pub real_md: NodeId,
    /// Judge on real frame with time-shifted audio.
    pub real_aa: NodeId,
    /// Judge on the generated frame with its true aligned context.
    pub fake_md: NodeId,
    /// Judge on the generated frame with time-shifted audio.
    pub fake_aa: NodeId,
}

/// Six-term adversarial loss, cast as a minimization for the
/// discriminator: batch mean per term, summed over judged steps.
pub fn discriminator_loss(tape: &mut Tape, terms: &[DiscTermNodes]) -> Result<NodeId> {
    if terms.is_empty() {
        return Err(AvError::invalid("discriminator_loss", "no term sets supplied"));
    }
    let mut total: Option<NodeId> = None;
    for t in terms {
        let parts = [
            ln_clamped(tape, t.real_std)?,
            ln_clamped_one_minus(tape, t.fake_std)?,
            ln_clamped(tape, t.real_md)?,
            ln_clamped_one_minus(tape, t.real_aa)?,
            ln_clamped_one_minus(tape, t.fake_md)?,
            ln_clamped_one_minus(tape, t.fake_aa)?,
        ];
        for p in parts {
            let m = tape.mean_all(p)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, m)?,
                None => m,
            });
        }
    }
    Ok(tape.neg(total.unwrap())?)
}

/// Generated-sample probabilities feeding the generator's adversarial
/// term: (D_std, judge-aligned, judge-mismatched) per step.
#[derive(Clone, Copy, Debug)]
pub struct FakeTermNodes {
    pub fake_std: NodeId,
    pub fake_md: NodeId,
    pub fake_aa: NodeId,
}

/// The fake-term restriction of the adversarial loss; the generator
/// maximizes this (it enters the total negatively).
pub fn generator_adv_term(tape: &mut Tape, terms: &[FakeTermNodes]) -> Result<NodeId> {
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    let mut total: Option<NodeId> = None;
    for t in terms {
        let parts = [
            ln_clamped_one_minus(tape, t.fake_std)?,
            ln_clamped_one_minus(tape, t.fake_md)?,
            ln_clamped_one_minus(tape, t.fake_aa)?,
        ];
        for p in parts {
            let m = tape.mean_all(p)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, m)?,
                None => m,
            });
        }
    }
    Ok(tape.neg(total.unwrap())?)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub recon: f64,
    pub kl: f64,
    pub adv_g: f64,
    pub total_d: f64,
}

/// Assembles the scalar breakdown: total_g = recon + beta*kl - gamma*adv_g.
pub fn total_losses(parts: LossParts, beta: f64, gamma: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("recon", parts.recon),
        ("kl", parts.kl),
        ("adv_g", parts.adv_g),
        ("total_d", parts.total_d),
    ] {
        if !v.is_finite() {
            return Err(AvError::invalid("total_losses", format!("non-finite term '{name}'")));
        }
    }
    Ok(LossBreakdown {
        recon: parts.recon,
        kl: parts.kl,
        adv_g: parts.adv_g,
        total_g: parts.recon + beta * parts.kl - gamma * parts.adv_g,
        total_d: parts.total_d,
        beta,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss(mu: Vec<f64>, lv: Vec<f64>) -> LatentGaussian {
        let n = mu.len();
        LatentGaussian::new(Tensor::new(vec![n], mu).unwrap(), Tensor::new(vec![n], lv).unwrap())
            .unwrap()
    }

    #[test]
    fn kl_identical_is_zero_and_unit_case_is_half() {
        let g = gauss(vec![0.3, -0.7], vec![0.2, -0.4]);
        assert!(kl_diag_gauss(&g, &g).unwrap().abs() < 1e-12);
        let post = gauss(vec![1.0], vec![0.0]);
        let prior = gauss(vec![0.0], vec![0.0]);
        assert_eq!(kl_diag_gauss(&post, &prior).unwrap(), 0.5);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = gauss(
                (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            let q = gauss(
                (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            assert!(kl_diag_gauss(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // Modest sample count here; the acceptance suite runs the full
        // 1e6-sample version over 20 pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let post = gauss(
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let prior = gauss(
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let exact = kl_diag_gauss(&post, &prior).unwrap();
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut logq = 0.0;
            let mut logp = 0.0;
            for i in 0..4 {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let std_n = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                let (m1, lv1) = (post.mu.data()[i], post.log_var.data()[i]);
                let (m0, lv0) = (prior.mu.data()[i], prior.log_var.data()[i]);
                let z = m1 + (lv1 / 2.0).exp() * std_n;
                logq += -0.5 * (lv1 + (z - m1).powi(2) * (-lv1).exp());
                logp += -0.5 * (lv0 + (z - m0).powi(2) * (-lv0).exp());
            }
            acc += logq - logp;
        }
        let mc = acc / n as f64;
        let rel = (exact - mc).abs() / exact.max(1e-9);
        assert!(rel < 0.05, "exact {exact} vs mc {mc}");
    }

    #[test]
    fn kl_node_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..10).map(|_| rng.gen_range(-1.5..1.5)).collect() };
        let (m1, lv1, m0, lv0) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let plain = kl_diag_gauss(
            &gauss(m1.clone(), lv1.clone()),
            &gauss(m0.clone(), lv0.clone()),
        )
        .unwrap();
        let mut tape = Tape::new();
        let pm = tape.constant(Tensor::new(vec![1, 10], m1).unwrap()).unwrap();
        let pl = tape.constant(Tensor::new(vec![1, 10], lv1).unwrap()).unwrap();
        let qm = tape.constant(Tensor::new(vec![1, 10], m0).unwrap()).unwrap();
        let ql = tape.constant(Tensor::new(vec![1, 10], lv0).unwrap()).unwrap();
        let node = kl_diag_gauss_node(&mut tape, pm, pl, qm, ql).unwrap();
        assert!((tape.value(node).item().unwrap() - plain).abs() < 1e-12);
    }

    #[test]
    fn recon_trivial_and_bruteforce() {
        let a = Tensor::full(vec![1, 1, 4, 4], 0.5);
        assert_eq!(recon_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);

        let mut b = a.clone();
        b.data_mut()[5] += 0.5;
        assert!((recon_loss(&[a.clone()], &[b]).unwrap() - 0.25).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(vec![2, 1, 3, 3], |_| rng.gen_range(0.0..1.0)))
            .collect();
        let tgt: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(vec![2, 1, 3, 3], |_| rng.gen_range(0.0..1.0)))
            .collect();
        // Independent double-loop accumulation.
        let mut oracle = 0.0;
        for f in 0..3 {
            for i in 0..pred[f].len() {
                let d = pred[f].data()[i] - tgt[f].data()[i];
                oracle += d * d;
            }
        }
        let got = recon_loss(&pred, &tgt).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        // Symmetry.
        let swapped = recon_loss(&tgt, &pred).unwrap();
        assert!((got - swapped).abs() < 1e-12);
    }

    fn const_prob(tape: &mut Tape, v: f64) -> NodeId {
        tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap()).unwrap()
    }

    #[test]
    fn discriminator_loss_perfect_and_symmetric_cases() {
        let mut tape = Tape::new();
        let perfect = DiscTermNodes {
            real_std: const_prob(&mut tape, 1.0),
            fake_std: const_prob(&mut tape, 0.0),
            real_md: const_prob(&mut tape, 1.0),
            real_aa: const_prob(&mut tape, 0.0),
            fake_md: const_prob(&mut tape, 0.0),
            fake_aa: const_prob(&mut tape, 0.0),
        };
        let loss = discriminator_loss(&mut tape, &[perfect]).unwrap();
        let v = tape.value(loss).item().unwrap();
        let expected = 6.0 * -(1.0 - LOG_CLAMP).ln();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        assert!(v < 1e-6);

        let mut tape2 = Tape::new();
        let half = DiscTermNodes {
            real_std: const_prob(&mut tape2, 0.5),
            fake_std: const_prob(&mut tape2, 0.5),
            real_md: const_prob(&mut tape2, 0.5),
            real_aa: const_prob(&mut tape2, 0.5),
            fake_md: const_prob(&mut tape2, 0.5),
            fake_aa: const_prob(&mut tape2, 0.5),
        };
        let loss2 = discriminator_loss(&mut tape2, &[half]).unwrap();
        let v2 = tape2.value(loss2).item().unwrap();
        assert!((v2 - 6.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn generator_adv_saturates_and_half_case() {
        let mut tape = Tape::new();
        let ones = FakeTermNodes {
            fake_std: const_prob(&mut tape, 1.0),
            fake_md: const_prob(&mut tape, 1.0),
            fake_aa: const_prob(&mut tape, 1.0),
        };
        let t = generator_adv_term(&mut tape, &[ones]).unwrap();
        let v = tape.value(t).item().unwrap();
        assert!((v - 3.0 * -(LOG_CLAMP.ln())).abs() < 1e-9, "{v}");
        let mut tape2 = Tape::new();
        let halves = FakeTermNodes {
            fake_std: const_prob(&mut tape2, 0.5),
            fake_md: const_prob(&mut tape2, 0.5),
            fake_aa: const_prob(&mut tape2, 0.5),
        };
        let t2 = generator_adv_term(&mut tape2, &[halves]).unwrap();
        assert!((tape2.value(t2).item().unwrap() - 3.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn total_losses_arithmetic_and_validation() {
        let b = total_losses(
            LossParts {
                recon: 1.0,
                kl: 2.0,
                adv_g: 3.0,
                total_d: 0.0,
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!((b.total_g - (1.0 + 0.0002 - 0.0003)).abs() < 1e-15);

        let zero = total_losses(
            LossParts {
                recon: 5.5,
                kl: 2.0,
                adv_g: 3.0,
                total_d: 0.0,
            },
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(zero.total_g, 5.5);

        let err = total_losses(
            LossParts {
                recon: f64::NAN,
                kl: 0.0,
                adv_g: 0.0,
                total_d: 0.0,
            },
            0.0,
            0.0,
        );
        let msg = err.err().unwrap().to_string();
        assert!(msg.contains("recon"), "{msg}");
    }
}
