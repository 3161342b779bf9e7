//! Finite-difference gradient verification.
//!
//! [`grad_check`] compares a tape gradient against central differences for
//! one scalar-valued function of one tensor. [`check_suite`] runs that
//! comparison for every differentiable primitive and for the composed
//! losses, over many random seeds; it backs both the `gradcheck` CLI
//! command and the acceptance gate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objective::{self, NegSet, Similarity};
use crate::rng;
use crate::tape::{BnStats, Tape};
use crate::tensor::{Elem, Tensor};

pub const DEFAULT_FD_STEP: Elem = 1e-5;

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `scalar_fn` is evaluated on fresh tapes; `point` supplies the values at
/// which to differentiate.
pub fn grad_check<F>(scalar_fn: F, point: &Tensor, fd_step: Elem) -> Result<Elem>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if fd_step <= 0.0 {
        return Err(Error::Domain(format!("fd_step must be positive, got {fd_step}")));
    }
    let tape = Tape::new();
    let x = Tensor::param(point.shape().to_vec(), point.data().to_vec());
    let y = scalar_fn(&tape, &x)?;
    if y.numel() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("scalar_fn returned shape {:?}", y.shape()),
        });
    }
    let analytic = tape.backward(&y)?.wrt(&x);

    let mut max_err: Elem = 0.0;
    let mut probe = point.data().to_vec();
    for i in 0..probe.len() {
        let saved = probe[i];
        probe[i] = saved + fd_step;
        let hi = eval_at(&scalar_fn, point.shape(), &probe)?;
        probe[i] = saved - fd_step;
        let lo = eval_at(&scalar_fn, point.shape(), &probe)?;
        probe[i] = saved;
        let fd = (hi - lo) / (2.0 * fd_step);
        if !fd.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Domain(format!(
                "non-finite value at coordinate {i}: analytic {}, finite difference {fd}",
                analytic[i]
            )));
        }
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

fn eval_at<F>(scalar_fn: &F, shape: &[usize], data: &[Elem]) -> Result<Elem>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let x = Tensor::constant(shape.to_vec(), data.to_vec());
    Ok(scalar_fn(&tape, &x)?.item())
}

/// Result of checking one primitive or composed function.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: Elem,
    pub seeds: u32,
}

impl OpCheck {
    pub fn passed(&self, tolerance: Elem) -> bool {
        self.max_rel_err < tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: Elem, hi: Elem, n: usize) -> Vec<Elem> {
    (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>() as Elem).collect()
}

/// Values bounded away from zero, for kinked ops like relu.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<Elem> {
    (0..n)
        .map(|_| {
            let mag = 0.05 + 0.95 * rng.gen::<f64>() as Elem;
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Pool inputs whose within-window values are well separated, so the
/// argmax cannot move inside the finite-difference step.
fn separated_pool_input(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Vec<Elem> {
    loop {
        let data = uniform(rng, -1.0, 1.0, b * c * h * w);
        let mut ok = true;
        'outer: for bc in 0..b * c {
            for i in (0..h).step_by(2) {
                for j in (0..w).step_by(2) {
                    let vals = [
                        data[bc * h * w + i * w + j],
                        data[bc * h * w + i * w + j + 1],
                        data[bc * h * w + (i + 1) * w + j],
                        data[bc * h * w + (i + 1) * w + j + 1],
                    ];
                    for a in 0..4 {
                        for bb in a + 1..4 {
                            if (vals[a] - vals[bb]).abs() < 1e-3 {
                                ok = false;
                                break 'outer;
                            }
                        }
                    }
                }
            }
        }
        if ok {
            return data;
        }
    }
}

/// Random vector with norm bounded away from the l2_normalize floor.
fn safe_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Elem> {
    loop {
        let data = uniform(rng, -1.0, 1.0, rows * cols);
        let all_safe = (0..rows).all(|r| {
            data[r * cols..(r + 1) * cols].iter().map(|x| x * x).sum::<Elem>().sqrt() > 0.3
        });
        if all_safe {
            return data;
        }
    }
}

/// A random linear functional to project op outputs to a scalar; a plain
/// sum would hide transposition mistakes in the VJPs.
fn project(tape: &Tape, t: &Tensor, weights: &Tensor) -> Result<Tensor> {
    tape.sum(&tape.mul(t, weights)?)
}

struct Check {
    name: &'static str,
    run: Box<dyn Fn(u64) -> Result<Elem> + Sync>,
}

fn checks() -> Vec<Check> {
    let mut list: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, run: Box<dyn Fn(u64) -> Result<Elem> + Sync>| {
        list.push(Check { name, run });
    };

    push(
        "add",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let other = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let w = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let point = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            grad_check(
                |t, x| project(t, &t.add(x, &other)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "add_bias",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let base = Tensor::constant(vec![3, 4], uniform(&mut r, -1.0, 1.0, 12));
            let w = Tensor::constant(vec![3, 4], uniform(&mut r, -1.0, 1.0, 12));
            let point = Tensor::constant(vec![4], uniform(&mut r, -1.0, 1.0, 4));
            grad_check(
                |t, x| project(t, &t.add(&base, x)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "sub",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let other = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let w = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let point = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            grad_check(
                |t, x| project(t, &t.sub(x, &other)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "mul",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let other = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let w = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let point = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            grad_check(
                |t, x| project(t, &t.mul(x, &other)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "scalar_mul",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let c = 0.5 + 2.0 * r.gen::<f64>() as Elem;
            let w = Tensor::constant(vec![5], uniform(&mut r, -1.0, 1.0, 5));
            let point = Tensor::constant(vec![5], uniform(&mut r, -1.0, 1.0, 5));
            grad_check(
                move |t, x| project(t, &t.scalar_mul(x, c)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "matmul_lhs",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let rhs = Tensor::constant(vec![3, 4], uniform(&mut r, -1.0, 1.0, 12));
            let w = Tensor::constant(vec![2, 4], uniform(&mut r, -1.0, 1.0, 8));
            let point = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            grad_check(
                |t, x| project(t, &t.matmul(x, &rhs)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "matmul_rhs",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let lhs = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let w = Tensor::constant(vec![2, 4], uniform(&mut r, -1.0, 1.0, 8));
            let point = Tensor::constant(vec![3, 4], uniform(&mut r, -1.0, 1.0, 12));
            grad_check(
                |t, x| project(t, &t.matmul(&lhs, x)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "conv2d_input",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let weight = Tensor::constant(vec![3, 2, 3, 3], uniform(&mut r, -1.0, 1.0, 54));
            let w = Tensor::constant(vec![1, 3, 5, 5], uniform(&mut r, -1.0, 1.0, 75));
            let point = Tensor::constant(vec![1, 2, 5, 5], uniform(&mut r, -1.0, 1.0, 50));
            grad_check(
                |t, x| project(t, &t.conv2d(x, &weight, 1, 1)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "conv2d_weight",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let input = Tensor::constant(vec![2, 2, 5, 5], uniform(&mut r, -1.0, 1.0, 100));
            let w = Tensor::constant(vec![2, 3, 2, 2], uniform(&mut r, -1.0, 1.0, 24));
            let point = Tensor::constant(vec![3, 2, 3, 3], uniform(&mut r, -1.0, 1.0, 54));
            grad_check(
                |t, x| project(t, &t.conv2d(&input, x, 2, 0)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "max_pool2d",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let data = separated_pool_input(&mut r, 1, 2, 4, 4);
            let w = Tensor::constant(vec![1, 2, 2, 2], uniform(&mut r, -1.0, 1.0, 8));
            let point = Tensor::constant(vec![1, 2, 4, 4], data);
            grad_check(
                |t, x| project(t, &t.max_pool2d(x, 2, 2)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "global_avg_pool",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let w = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let point = Tensor::constant(vec![2, 3, 4, 4], uniform(&mut r, -1.0, 1.0, 96));
            grad_check(
                |t, x| project(t, &t.global_avg_pool(x)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "relu",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let data = off_kink(&mut r, 12);
            let w = Tensor::constant(vec![12], uniform(&mut r, -1.0, 1.0, 12));
            let point = Tensor::constant(vec![12], data);
            grad_check(
                |t, x| project(t, &t.relu(x)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "batch_norm_input",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let scale = Tensor::constant(vec![3], uniform(&mut r, 0.5, 1.5, 3));
            let shift = Tensor::constant(vec![3], uniform(&mut r, -0.5, 0.5, 3));
            let w = Tensor::constant(vec![4, 3], uniform(&mut r, -1.0, 1.0, 12));
            let point = Tensor::constant(vec![4, 3], uniform(&mut r, -1.0, 1.0, 12));
            grad_check(
                |t, x| project(t, &t.batch_norm(x, &scale, &shift, BnStats::Batch)?.out, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "batch_norm_scale_shift",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let input = Tensor::constant(vec![2, 2, 3, 3], uniform(&mut r, -1.0, 1.0, 36));
            let shift_data = uniform(&mut r, -0.5, 0.5, 2);
            let w = Tensor::constant(vec![2, 2, 3, 3], uniform(&mut r, -1.0, 1.0, 36));
            let point = Tensor::constant(vec![2], uniform(&mut r, 0.5, 1.5, 2));
            grad_check(
                |t, x| {
                    let shift = Tensor::constant(vec![2], shift_data.clone());
                    project(t, &t.batch_norm(&input, x, &shift, BnStats::Batch)?.out, &w)
                },
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "batch_norm_running",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let scale = Tensor::constant(vec![3], uniform(&mut r, 0.5, 1.5, 3));
            let shift = Tensor::constant(vec![3], uniform(&mut r, -0.5, 0.5, 3));
            let mean = uniform(&mut r, -0.3, 0.3, 3);
            let var = uniform(&mut r, 0.5, 1.5, 3);
            let w = Tensor::constant(vec![4, 3], uniform(&mut r, -1.0, 1.0, 12));
            let point = Tensor::constant(vec![4, 3], uniform(&mut r, -1.0, 1.0, 12));
            grad_check(
                |t, x| {
                    let bn = t.batch_norm(
                        x,
                        &scale,
                        &shift,
                        BnStats::Running { mean: &mean, var: &var },
                    )?;
                    project(t, &bn.out, &w)
                },
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "sum",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let point = Tensor::constant(vec![7], uniform(&mut r, -1.0, 1.0, 7));
            grad_check(|t, x| t.sum(x), &point, DEFAULT_FD_STEP)
        }),
    );
    push(
        "mean",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let point = Tensor::constant(vec![7], uniform(&mut r, -1.0, 1.0, 7));
            grad_check(|t, x| t.mean(x), &point, DEFAULT_FD_STEP)
        }),
    );
    push(
        "l2_normalize",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let data = safe_rows(&mut r, 3, 4);
            let w = Tensor::constant(vec![3, 4], uniform(&mut r, -1.0, 1.0, 12));
            let point = Tensor::constant(vec![3, 4], data);
            grad_check(
                |t, x| project(t, &t.l2_normalize(x)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "dot",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let other = Tensor::constant(vec![6], uniform(&mut r, -1.0, 1.0, 6));
            let point = Tensor::constant(vec![6], uniform(&mut r, -1.0, 1.0, 6));
            grad_check(|t, x| t.dot(x, &other), &point, DEFAULT_FD_STEP)
        }),
    );
    push(
        "log",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let w = Tensor::constant(vec![6], uniform(&mut r, -1.0, 1.0, 6));
            let point = Tensor::constant(vec![6], uniform(&mut r, 0.1, 2.0, 6));
            grad_check(
                |t, x| project(t, &t.log(x)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "exp",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let w = Tensor::constant(vec![6], uniform(&mut r, -1.0, 1.0, 6));
            let point = Tensor::constant(vec![6], uniform(&mut r, -1.0, 1.0, 6));
            grad_check(
                |t, x| project(t, &t.exp(x)?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "logsumexp",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let point = Tensor::constant(vec![6], uniform(&mut r, -2.0, 2.0, 6));
            grad_check(|t, x| t.logsumexp(x), &point, DEFAULT_FD_STEP)
        }),
    );
    push(
        "concat",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let other = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            let w = Tensor::constant(vec![4, 3], uniform(&mut r, -1.0, 1.0, 12));
            let point = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            grad_check(
                |t, x| project(t, &t.concat(&[x, &other])?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "reshape",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let w = Tensor::constant(vec![3, 2], uniform(&mut r, -1.0, 1.0, 6));
            let point = Tensor::constant(vec![2, 3], uniform(&mut r, -1.0, 1.0, 6));
            grad_check(
                |t, x| project(t, &t.reshape(x, vec![3, 2])?, &w),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "mse_loss",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let fixed = Tensor::constant(vec![8], safe_rows(&mut r, 1, 8));
            let point = Tensor::constant(vec![8], safe_rows(&mut r, 1, 8));
            grad_check(
                |t, x| objective::mse_loss(t, x, &fixed),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "neg_cosine_loss",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let fixed = Tensor::constant(vec![2, 5], safe_rows(&mut r, 2, 5));
            let point = Tensor::constant(vec![2, 5], safe_rows(&mut r, 2, 5));
            grad_check(
                |t, x| objective::neg_cosine_loss(t, x, &fixed),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "info_nce",
        Box::new(|seed| {
            let mut r = rng::stream(seed);
            let partner = Tensor::constant(vec![6], safe_rows(&mut r, 1, 6));
            let negs = NegSet::new(
                6,
                &(0..4).map(|_| safe_rows(&mut r, 1, 6)).collect::<Vec<_>>(),
            )?;
            let point = Tensor::constant(vec![6], safe_rows(&mut r, 1, 6));
            grad_check(
                |t, x| objective::info_nce(t, x, &partner, &negs, 0.5),
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "total_loss",
        Box::new(|seed| {
            // With detach_online_partner = false every occurrence of the
            // perturbed embedding is differentiable, so a central
            // difference sees exactly what the tape sees.
            let mut r = rng::stream(seed);
            let zap = Tensor::constant(vec![2, 4], safe_rows(&mut r, 2, 4));
            let zw = Tensor::constant(vec![2, 4], safe_rows(&mut r, 2, 4));
            let zwp = Tensor::constant(vec![2, 4], safe_rows(&mut r, 2, 4));
            let point = Tensor::constant(vec![2, 4], safe_rows(&mut r, 2, 4));
            grad_check(
                |t, x| {
                    objective::total_loss(t, x, &zap, &zw, &zwp, 0.4, Similarity::Mse, false)
                },
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );
    push(
        "total_loss_detached",
        Box::new(|seed| {
            // Default routing: the perturbed embedding reappears inside a
            // stop_gradient as the partner of the last pair. The oracle
            // must hold that occurrence at the unperturbed value, so the
            // pair is rebuilt here with a frozen snapshot of the point.
            let mut r = rng::stream(seed);
            let beta: Elem = 0.4;
            let zap = Tensor::constant(vec![2, 4], safe_rows(&mut r, 2, 4));
            let zw = Tensor::constant(vec![2, 4], safe_rows(&mut r, 2, 4));
            let zwp = Tensor::constant(vec![2, 4], safe_rows(&mut r, 2, 4));
            let point = Tensor::constant(vec![2, 4], safe_rows(&mut r, 2, 4));
            let frozen = Tensor::constant(vec![2, 4], point.data().to_vec());
            grad_check(
                move |t, x| {
                    let t1 = objective::mse_loss(t, x, &t.stop_gradient(&zwp))?;
                    let t2 = objective::mse_loss(t, x, &t.stop_gradient(&zap))?;
                    let t3 = objective::mse_loss(t, &zap, &t.stop_gradient(&zw))?;
                    let t4 = objective::mse_loss(t, &zap, &frozen)?;
                    let weak = t.add(&t1, &t3)?;
                    let agg = t.add(&t2, &t4)?;
                    t.add(&t.scalar_mul(&weak, 1.0 - beta)?, &t.scalar_mul(&agg, beta)?)
                },
                &point,
                DEFAULT_FD_STEP,
            )
        }),
    );

    list
}

/// Run every check over `seeds` random seeds; returns per-op worst errors.
pub fn check_suite(seeds: u32) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for check in checks() {
        let mut worst: Elem = 0.0;
        for s in 0..seeds {
            let seed = rng::derive_seed(0xC0FFEE, check.name, &[s as u64]);
            worst = worst.max((check.run)(seed)?);
        }
        out.push(OpCheck { name: check.name, max_rel_err: worst, seeds });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_with_dyadic_step() {
        // Power-of-two step and dyadic coordinates make the central
        // difference of a linear function exact.
        let point = Tensor::constant(vec![3], vec![0.5, 0.25, -0.75]);
        let err = grad_check(|t, x| t.sum(x), &point, (2.0 as Elem).powi(-17)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mse_loss_gradient_matches_finite_differences() {
        let mut r = rng::stream(11);
        let fixed = Tensor::constant(vec![8], safe_rows(&mut r, 1, 8));
        let point = Tensor::constant(vec![8], safe_rows(&mut r, 1, 8));
        let err = grad_check(
            |t, x| objective::mse_loss(t, x, &fixed),
            &point,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let mut r = rng::stream(12);
        let partner = Tensor::constant(vec![8], safe_rows(&mut r, 1, 8));
        let negs = NegSet::new(
            8,
            &(0..4).map(|_| safe_rows(&mut r, 1, 8)).collect::<Vec<_>>(),
        )
        .unwrap();
        let point = Tensor::constant(vec![8], safe_rows(&mut r, 1, 8));
        let err = grad_check(
            |t, x| objective::info_nce(t, x, &partner, &negs, 0.5),
            &point,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for check in check_suite(3).unwrap() {
            assert!(
                check.passed(1e-4),
                "{} failed with max relative error {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let point = Tensor::constant(vec![2], vec![1.0, 2.0]);
        assert!(grad_check(|t, x| t.sum(x), &point, 0.0).is_err());
    }
}
