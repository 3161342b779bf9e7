//! Loss functions and scalar schedules.
//!
//! The similarity losses (`mse_loss`, `neg_cosine_loss`) normalize their
//! arguments internally, so callers pass raw embeddings. `total_loss`
//! combines the four view pairs with the β re-weighting; gradient blocking
//! on the second member of each pair happens here.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Elem, Tensor};

/// Which per-pair similarity the combined loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Mse,
    NegCosine,
}

/// How β evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSchedule {
    Fixed,
    Cosine,
}

/// β decay configuration: the base value and its schedule.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub beta_base: Elem,
    pub schedule: BetaSchedule,
}

impl LossWeights {
    pub fn at(&self, step: u64, total_steps: u64) -> Result<Elem> {
        beta_at(step, total_steps, self.beta_base, self.schedule)
    }
}

fn rows_of(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape() {
        [_d] => Ok(1),
        [b, _d] => Ok(*b),
        other => Err(Error::Shape { op, detail: format!("need [d] or [B,d], got {other:?}") }),
    }
}

fn check_pair(z1: &Tensor, z2: &Tensor, op: &'static str) -> Result<usize> {
    if z1.shape() != z2.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", z1.shape(), z2.shape()),
        });
    }
    rows_of(z1, op)
}

/// Mean per-row cosine similarity between the rows of z1 and z2, as a tape
/// scalar. Shared core of the two similarity losses.
fn mean_cosine(tape: &Tape, z1: &Tensor, z2: &Tensor, rows: usize) -> Result<Tensor> {
    let n1 = tape.l2_normalize(z1)?;
    let n2 = tape.l2_normalize(z2)?;
    let prod = tape.mul(&n1, &n2)?;
    let total = tape.sum(&prod)?;
    tape.scalar_mul(&total, 1.0 / rows as Elem)
}

/// Normalized mean-squared-error similarity: mean over rows of
/// `2 - 2 cos(z1_i, z2_i)`. Zero-norm rows are a domain error.
pub fn mse_loss(tape: &Tape, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    let rows = check_pair(z1, z2, "mse_loss")?;
    let cos = mean_cosine(tape, z1, z2, rows)?;
    let scaled = tape.scalar_mul(&cos, -2.0)?;
    tape.add(&scaled, &Tensor::scalar(2.0))
}

/// Negative cosine similarity: mean over rows of `-cos(z1_i, z2_i)`.
/// Equals `(mse_loss - 2) / 2` pointwise.
pub fn neg_cosine_loss(tape: &Tape, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    let rows = check_pair(z1, z2, "neg_cosine_loss")?;
    let cos = mean_cosine(tape, z1, z2, rows)?;
    tape.scalar_mul(&cos, -1.0)
}

fn similarity_loss(
    tape: &Tape,
    kind: Similarity,
    z1: &Tensor,
    z2: &Tensor,
) -> Result<Tensor> {
    match kind {
        Similarity::Mse => mse_loss(tape, z1, z2),
        Similarity::NegCosine => neg_cosine_loss(tape, z1, z2),
    }
}

/// Negative example vectors, rows held at unit norm.
#[derive(Debug, Clone)]
pub struct NegSet {
    /// [count, dim]; a placeholder row when the set is empty.
    rows: Tensor,
    count: usize,
}

impl NegSet {
    /// Normalize and store negative vectors. `rows` may be empty.
    pub fn new(dim: usize, rows: &[Vec<Elem>]) -> Result<NegSet> {
        if rows.is_empty() {
            return Ok(NegSet { rows: Tensor::constant(vec![1, dim], vec![0.0; dim]), count: 0 });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape {
                    op: "neg_set",
                    detail: format!("row {i} has length {}, expected {dim}", row.len()),
                });
            }
            let norm = row.iter().map(|x| x * x).sum::<Elem>().sqrt();
            if norm <= crate::tape::NORM_FLOOR {
                return Err(Error::Domain(format!("negative row {i} has norm {norm:e}")));
            }
            data.extend(row.iter().map(|x| x / norm));
        }
        Ok(NegSet { rows: Tensor::constant(vec![rows.len(), dim], data), count: rows.len() })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn tensor(&self) -> &Tensor {
        &self.rows
    }
}

/// InfoNCE with a single positive pair and an explicit negative set.
/// z1 and z2 are normalized internally; `temperature` must be positive.
pub fn info_nce(
    tape: &Tape,
    z1: &Tensor,
    z2: &Tensor,
    negatives: &NegSet,
    temperature: Elem,
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    if z1.shape().len() != 1 || z1.shape() != z2.shape() {
        return Err(Error::Shape {
            op: "info_nce",
            detail: format!("need equal 1-d embeddings, got {:?} vs {:?}", z1.shape(), z2.shape()),
        });
    }
    let dim = z1.shape()[0];
    let n1 = tape.l2_normalize(z1)?;
    let n2 = tape.l2_normalize(z2)?;
    let pos = tape.scalar_mul(&tape.dot(&n1, &n2)?, 1.0 / temperature)?;
    let logits = if negatives.is_empty() {
        pos.clone()
    } else {
        if negatives.tensor().shape()[1] != dim {
            return Err(Error::Shape {
                op: "info_nce",
                detail: format!(
                    "negatives have dim {}, embeddings have dim {dim}",
                    negatives.tensor().shape()[1]
                ),
            });
        }
        let col = tape.reshape(&n1, vec![dim, 1])?;
        let neg_scores = tape.matmul(negatives.tensor(), &col)?;
        let neg_flat = tape.reshape(&neg_scores, vec![negatives.len()])?;
        let neg_scaled = tape.scalar_mul(&neg_flat, 1.0 / temperature)?;
        tape.concat(&[&pos, &neg_scaled])?
    };
    let lse = tape.logsumexp(&logits)?;
    tape.sub(&lse, &pos)
}

/// The re-weighted four-pair loss.
///
/// `z_on_a`, `z_on_a_prime` come from the online network on the two
/// aggressive views; `z_tg_w`, `z_tg_w_prime` from the target network on the
/// two weak views (already gradient-blocked). The second member of every
/// pair is gradient-blocked here as well; `detach_online_partner = false`
/// lets gradients flow through both members of the two β-weighted
/// online/online pairs.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &Tape,
    z_on_a: &Tensor,
    z_on_a_prime: &Tensor,
    z_tg_w: &Tensor,
    z_tg_w_prime: &Tensor,
    beta: Elem,
    similarity: Similarity,
    detach_online_partner: bool,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must lie in [0,1], got {beta}")));
    }
    let partner = |t: &Tensor| {
        if detach_online_partner {
            tape.stop_gradient(t)
        } else {
            t.clone()
        }
    };
    let t1 = similarity_loss(tape, similarity, z_on_a, &tape.stop_gradient(z_tg_w_prime))?;
    let t2 = similarity_loss(tape, similarity, z_on_a, &partner(z_on_a_prime))?;
    let t3 = similarity_loss(tape, similarity, z_on_a_prime, &tape.stop_gradient(z_tg_w))?;
    let t4 = similarity_loss(tape, similarity, z_on_a_prime, &partner(z_on_a))?;

    let weak = tape.add(&t1, &t3)?;
    let agg = tape.add(&t2, &t4)?;
    tape.add(
        &tape.scalar_mul(&weak, 1.0 - beta)?,
        &tape.scalar_mul(&agg, beta)?,
    )
}

/// β at step `k` of `total_steps` (cosine decay reaches zero at the end).
pub fn beta_at(k: u64, total_steps: u64, beta_base: Elem, mode: BetaSchedule) -> Result<Elem> {
    if total_steps == 0 {
        return Err(Error::Config("beta schedule needs a positive total step count".into()));
    }
    if k > total_steps {
        return Err(Error::Config(format!("step {k} exceeds total steps {total_steps}")));
    }
    if !(0.0..=1.0).contains(&beta_base) {
        return Err(Error::Domain(format!("beta_base must lie in [0,1], got {beta_base}")));
    }
    Ok(match mode {
        BetaSchedule::Fixed => beta_base,
        BetaSchedule::Cosine => {
            let phase = std::f64::consts::PI * k as f64 / total_steps as f64;
            beta_base * ((phase.cos() as Elem + 1.0) / 2.0)
        }
    })
}

/// Cosine-annealed learning rate from `lr0` down to zero.
pub fn cosine_lr(k: u64, total_steps: u64, lr0: Elem) -> Result<Elem> {
    if k > total_steps {
        return Err(Error::Config(format!("step {k} exceeds total steps {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let phase = std::f64::consts::PI * k as f64 / total_steps as f64;
    Ok(lr0 * ((phase.cos() as Elem + 1.0) / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(x: Elem, y: Elem) -> Tensor {
        Tensor::param(vec![2], vec![x, y])
    }

    fn close(a: Elem, b: Elem, tol: Elem) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn mse_aligned_is_zero() {
        let tape = Tape::new();
        let v = mse_loss(&tape, &vec2(1.0, 0.0), &vec2(1.0, 0.0)).unwrap();
        close(v.item(), 0.0, 1e-12);
    }

    #[test]
    fn mse_opposed_is_four() {
        let tape = Tape::new();
        let v = mse_loss(&tape, &vec2(1.0, 0.0), &vec2(-1.0, 0.0)).unwrap();
        close(v.item(), 4.0, 1e-12);
    }

    #[test]
    fn mse_orthogonal_scale_invariant() {
        let tape = Tape::new();
        let v = mse_loss(&tape, &vec2(2.0, 0.0), &vec2(0.0, 3.0)).unwrap();
        close(v.item(), 2.0, 1e-12);
    }

    #[test]
    fn mse_rejects_zero_rows() {
        let tape = Tape::new();
        let out = mse_loss(&tape, &vec2(0.0, 0.0), &vec2(1.0, 0.0));
        assert!(matches!(out, Err(Error::Domain(_))));
    }

    #[test]
    fn neg_cosine_examples() {
        let tape = Tape::new();
        let same = neg_cosine_loss(&tape, &vec2(0.5, 0.5), &vec2(0.5, 0.5)).unwrap();
        close(same.item(), -1.0, 1e-12);
        let orth = neg_cosine_loss(&tape, &vec2(1.0, 0.0), &vec2(0.0, 1.0)).unwrap();
        close(orth.item(), 0.0, 1e-12);
    }

    #[test]
    fn neg_cosine_is_shifted_mse() {
        let tape = Tape::new();
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as Elem / (1u64 << 53) as Elem - 0.5
        };
        for _ in 0..20 {
            let z1 = Tensor::param(vec![3, 4], (0..12).map(|_| next() + 0.6).collect());
            let z2 = Tensor::param(vec![3, 4], (0..12).map(|_| next() + 0.6).collect());
            let m = mse_loss(&tape, &z1, &z2).unwrap().item();
            let n = neg_cosine_loss(&tape, &z1, &z2).unwrap().item();
            close(n, (m - 2.0) / 2.0, 1e-12);
        }
    }

    #[test]
    fn info_nce_empty_negatives_is_zero() {
        let tape = Tape::new();
        let negs = NegSet::new(2, &[]).unwrap();
        let v = info_nce(&tape, &vec2(3.0, 4.0), &vec2(3.0, 4.0), &negs, 0.7).unwrap();
        assert_eq!(v.item(), 0.0);
    }

    #[test]
    fn info_nce_two_equal_logits_is_ln2() {
        let tape = Tape::new();
        let negs = NegSet::new(2, &[vec![1.0, 0.0]]).unwrap();
        let v = info_nce(&tape, &vec2(1.0, 0.0), &vec2(1.0, 0.0), &negs, 1.0).unwrap();
        close(v.item(), (2.0 as Elem).ln(), 1e-9);
    }

    #[test]
    fn info_nce_orthogonal_negative_closed_form() {
        let tape = Tape::new();
        let negs = NegSet::new(2, &[vec![0.0, 1.0]]).unwrap();
        let v = info_nce(&tape, &vec2(1.0, 0.0), &vec2(1.0, 0.0), &negs, 1.0).unwrap();
        close(v.item(), (1.0 + (-1.0 as Elem).exp()).ln(), 1e-9);
    }

    #[test]
    fn info_nce_rejects_bad_temperature() {
        let tape = Tape::new();
        let negs = NegSet::new(2, &[]).unwrap();
        assert!(info_nce(&tape, &vec2(1.0, 0.0), &vec2(1.0, 0.0), &negs, 0.0).is_err());
    }

    #[test]
    fn total_loss_identical_embeddings_vanishes() {
        let tape = Tape::new();
        let z = Tensor::param(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        for beta in [0.0, 0.3, 1.0] {
            let v = total_loss(&tape, &z, &z, &z, &z, beta, Similarity::Mse, true).unwrap();
            close(v.item(), 0.0, 1e-12);
        }
    }

    #[test]
    fn total_loss_beta_zero_is_symmetric_byol() {
        let tape = Tape::new();
        let za = vec2(0.9, 0.1);
        let zap = vec2(0.2, 0.8);
        let zw = vec2(0.5, 0.5);
        let zwp = vec2(0.7, 0.3);
        let total = total_loss(&tape, &za, &zap, &zw, &zwp, 0.0, Similarity::Mse, true)
            .unwrap()
            .item();
        let byol = mse_loss(&tape, &za, &zwp).unwrap().item()
            + mse_loss(&tape, &zap, &zw).unwrap().item();
        close(total, byol, 1e-12);
    }

    #[test]
    fn total_loss_hand_value() {
        let tape = Tape::new();
        let on = vec2(1.0, 0.0);
        let tg = vec2(0.0, 1.0);
        let v = total_loss(&tape, &on, &on, &tg, &tg, 0.5, Similarity::Mse, true).unwrap();
        close(v.item(), 2.0, 1e-12);
    }

    #[test]
    fn total_loss_is_affine_in_beta() {
        let tape = Tape::new();
        let za = vec2(0.9, 0.2);
        let zap = vec2(0.1, 0.7);
        let zw = vec2(0.4, 0.5);
        let zwp = vec2(0.8, 0.3);
        let at = |beta: Elem| {
            total_loss(&tape, &za, &zap, &zw, &zwp, beta, Similarity::Mse, true)
                .unwrap()
                .item()
        };
        let (l0, l1) = (at(0.0), at(1.0));
        for beta in [0.1, 0.25, 0.6, 0.95] {
            close(at(beta), (1.0 - beta) * l0 + beta * l1, 1e-12);
        }
    }

    #[test]
    fn total_loss_blocks_gradient_on_detached_members() {
        let tape = Tape::new();
        let za = vec2(0.9, 0.2);
        let zap = vec2(0.1, 0.7);
        let zw = vec2(0.4, 0.5);
        let zwp = vec2(0.8, 0.3);
        let loss = total_loss(&tape, &za, &zap, &zw, &zwp, 0.5, Similarity::Mse, true).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&zw).is_none());
        assert!(grads.get(&zwp).is_none());
        assert!(grads.wrt(&za).iter().any(|g| g.abs() > 0.0));
        assert!(grads.wrt(&zap).iter().any(|g| g.abs() > 0.0));
    }

    #[test]
    fn total_loss_rejects_beta_outside_unit_interval() {
        let tape = Tape::new();
        let z = vec2(1.0, 0.0);
        assert!(total_loss(&tape, &z, &z, &z, &z, 1.5, Similarity::Mse, true).is_err());
        assert!(total_loss(&tape, &z, &z, &z, &z, -0.1, Similarity::Mse, true).is_err());
    }

    #[test]
    fn beta_schedule_endpoints_and_quarter() {
        close(beta_at(0, 100, 0.4, BetaSchedule::Cosine).unwrap(), 0.4, 1e-12);
        close(beta_at(100, 100, 0.4, BetaSchedule::Cosine).unwrap(), 0.0, 1e-12);
        close(beta_at(50, 100, 0.4, BetaSchedule::Cosine).unwrap(), 0.2, 1e-12);
        let quarter = beta_at(25, 100, 0.4, BetaSchedule::Cosine).unwrap();
        close(quarter, 0.4 * ((std::f64::consts::FRAC_PI_4.cos() as Elem) + 1.0) / 2.0, 1e-12);
        close(quarter, 0.341421, 1e-6);
        close(beta_at(77, 100, 0.3, BetaSchedule::Fixed).unwrap(), 0.3, 0.0);
    }

    #[test]
    fn beta_schedule_monotone_non_increasing() {
        let mut prev = Elem::INFINITY;
        for k in 0..=200 {
            let b = beta_at(k, 200, 0.7, BetaSchedule::Cosine).unwrap();
            assert!(b <= prev + 1e-15);
            assert!((0.0..=0.7).contains(&b));
            prev = b;
        }
    }

    #[test]
    fn beta_schedule_rejects_overrun() {
        assert!(beta_at(101, 100, 0.3, BetaSchedule::Cosine).is_err());
        assert!(beta_at(0, 0, 0.3, BetaSchedule::Cosine).is_err());
    }

    #[test]
    fn cosine_lr_endpoints() {
        close(cosine_lr(0, 10, 0.1).unwrap(), 0.1, 1e-12);
        close(cosine_lr(10, 10, 0.1).unwrap(), 0.0, 1e-12);
        close(cosine_lr(5, 10, 0.1).unwrap(), 0.05, 1e-12);
        assert!(cosine_lr(11, 10, 0.1).is_err());
    }
}
