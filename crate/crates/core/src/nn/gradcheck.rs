//! Central finite-difference verification of tape gradients (64-bit).
//!
//! Piecewise ops (ReLU6, the polyline norm) are non-differentiable at
//! isolated points. When a ±h probe crosses one of those points, as
//! reported by [`Tape::kink_signature`], the derivative falls back to a
//! second-order one-sided difference taken on the side that stays in the
//! base point's region, shrinking the step if neither side does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::LineErrMode;
use super::norm::RunningStats;
use super::tape::{Tape, Var};
use super::{NnError, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so gradients that are zero up
/// to rounding do not register as failures.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Derivative of a scalar function at offset 0. `eval(δ)` returns the
/// function value with the probed coordinate shifted by `δ`, plus its kink
/// signature. When both `±h` probes leave the base region the step shrinks
/// by 10, at most twice, before settling for a plain central difference.
pub fn fd_derivative(mut eval: impl FnMut(f64) -> (f64, Vec<u8>), h: f64) -> f64 {
    let (f0, base) = eval(0.0);
    let mut central = None;
    for step in [h, h / 10.0, h / 100.0] {
        let (fp, sp) = eval(step);
        let (fm, sm) = eval(-step);
        let c = (fp - fm) / (2.0 * step);
        central.get_or_insert(c);
        if sp == base && sm == base {
            return c;
        }
        if sp == base {
            let (fp2, sp2) = eval(2.0 * step);
            if sp2 == base {
                return (-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * step);
            }
        }
        if sm == base {
            let (fm2, sm2) = eval(-2.0 * step);
            if sm2 == base {
                return (3.0 * f0 - 4.0 * fm + fm2) / (2.0 * step);
            }
        }
    }
    central.expect("at least one step")
}

/// Compare analytic and numeric gradients of `build` with respect to every
/// element of every input. Returns the maximum relative error.
pub fn check_leaves(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError>,
) -> Result<f64, NnError> {
    let run = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var), NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = run(inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = inputs[k].data()[i];
            let mut failure = None;
            let numeric = fd_derivative(
                |d| {
                    probe[k].data_mut()[i] = orig + d;
                    match run(&probe) {
                        Ok((t, _, o)) => (t.value(o).data()[0], t.kink_signature()),
                        Err(e) => {
                            failure = Some(e);
                            (f64::NAN, Vec::new())
                        }
                    }
                },
                FD_STEP,
            );
            probe[k].data_mut()[i] = orig;
            if let Some(e) = failure {
                return Err(e);
            }
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduce an arbitrary output to a scalar through a random quadratic so
/// every output element carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = tape.value(out).len();
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.mse(out, &target, &vec![1.0; n])
}

/// Gradient check of every tape op over `seeds` random shape/value draws,
/// plus a small conv–norm–ReLU6 network.
pub fn op_suite(seeds: u64) -> Result<Vec<OpCheck>, NnError> {
    let mut results = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..3usize);
        let c = rng.random_range(1..4usize);
        let o = rng.random_range(1..4usize);
        let h = rng.random_range(3..6usize);
        let w = rng.random_range(3..6usize);
        let stride = rng.random_range(1..3usize);
        let mut push = |name, err| {
            results.push(OpCheck {
                name,
                seed,
                max_rel_err: err,
            })
        };

        for k in [1usize, 3] {
            let x = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
            let wt = rand_t(&mut rng, &[o, c, k, k], -1.0, 1.0);
            let err = check_leaves(&[x, wt], |t, v| {
                let y = t.conv2d(v[0], v[1], stride)?;
                project(t, y, seed)
            })?;
            push(if k == 1 { "conv2d_1x1" } else { "conv2d_3x3" }, err);
        }

        let x = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let wt = rand_t(&mut rng, &[c, 1, 3, 3], -1.0, 1.0);
        let err = check_leaves(&[x, wt], |t, v| {
            let y = t.depthwise_conv3x3(v[0], v[1], stride)?;
            project(t, y, seed)
        })?;
        push("depthwise_conv3x3", err);

        let bn_n = n + 1;
        let x = rand_t(&mut rng, &[bn_n, c, h, w], -2.0, 2.0);
        let g = rand_t(&mut rng, &[c], 0.5, 1.5);
        let b = rand_t(&mut rng, &[c], -0.5, 0.5);
        let err = check_leaves(&[x.clone(), g.clone(), b.clone()], |t, v| {
            let mut stats = RunningStats::new(c);
            let y = t.batch_norm_train(v[0], v[1], v[2], &mut stats)?;
            project(t, y, seed)
        })?;
        push("batch_norm_train", err);
        let stats = RunningStats {
            mean: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let err = check_leaves(&[x, g, b], |t, v| {
            let y = t.batch_norm_infer(v[0], v[1], v[2], &stats)?;
            project(t, y, seed)
        })?;
        push("batch_norm_infer", err);

        let x = rand_t(&mut rng, &[n, c, h, w], -2.0, 8.0);
        let err = check_leaves(&[x], |t, v| {
            let y = t.relu6(v[0]);
            project(t, y, seed)
        })?;
        push("relu6", err);

        let x = rand_t(&mut rng, &[n, c, h, w], -4.0, 4.0);
        let err = check_leaves(&[x], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, seed)
        })?;
        push("sigmoid", err);

        let a = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let b = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let err = check_leaves(&[a, b], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        })?;
        push("add", err);

        let x = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let b = rand_t(&mut rng, &[c], -1.0, 1.0);
        let err = check_leaves(&[x, b], |t, v| {
            let y = t.add_channel_bias(v[0], v[1])?;
            project(t, y, seed)
        })?;
        push("add_channel_bias", err);

        let x = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let err = check_leaves(&[x], |t, v| {
            let y = t.upsample2x(v[0])?;
            project(t, y, seed)
        })?;
        push("upsample2x_nearest", err);

        let a = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let b = rand_t(&mut rng, &[n, o, h, w], -1.0, 1.0);
        let err = check_leaves(&[a, b], |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, seed)
        })?;
        push("concat_channels", err);

        let x = rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let len = x.len();
        let idx: Vec<usize> = (0..len + 3).map(|_| rng.random_range(0..len)).collect();
        let err = check_leaves(&[x], |t, v| {
            let y = t.gather(v[0], idx.clone())?;
            project(t, y, seed)
        })?;
        push("gather", err);

        let m = rng.random_range(2..9usize);
        let p = rand_t(&mut rng, &[m], -2.0, 2.0);
        let target: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mask: Vec<f64> = (0..m).map(|i| f64::from(i % 3 != 1)).collect();
        let err = check_leaves(&[p], |t, v| t.mse(v[0], &target, &mask))?;
        push("mse", err);

        let z = rand_t(&mut rng, &[m], -6.0, 6.0);
        let target: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let weight: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
        let err = check_leaves(&[z], |t, v| t.bce_with_logits(v[0], &target, &weight))?;
        push("bce_with_logits", err);

        let pts = rng.random_range(2..6usize);
        let lines = rng.random_range(1..3usize);
        let p = rand_t(&mut rng, &[lines * pts * 2], -3.0, 3.0);
        let target: Vec<f64> = (0..lines * pts * 2)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        for (name, mode) in [
            ("line_err_euclidean", LineErrMode::Euclidean),
            ("line_err_squared", LineErrMode::Squared),
            ("line_err_l1", LineErrMode::L1),
        ] {
            let err = check_leaves(std::slice::from_ref(&p), |t, v| {
                t.line_err(v[0], &target, pts, mode)
            })?;
            push(name, err);
        }

        let a = rand_t(&mut rng, &[1], -1.0, 1.0);
        let b = rand_t(&mut rng, &[1], -1.0, 1.0);
        let (ka, kb) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let err = check_leaves(&[a, b], |t, v| {
            let s = t.weighted_sum(&[(v[0], ka), (v[1], kb)])?;
            let sq = t.sum_squares(s);
            t.weighted_sum(&[(sq, 1.0), (s, 0.5)])
        })?;
        push("weighted_sum", err);

        // conv → norm → relu6 → conv → mse
        let x = rand_t(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let w1 = rand_t(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let g1 = rand_t(&mut rng, &[3], 0.5, 1.5);
        let b1 = rand_t(&mut rng, &[3], 0.0, 1.0);
        let w2 = rand_t(&mut rng, &[2, 3, 1, 1], -0.5, 0.5);
        let err = check_leaves(&[x, w1, g1, b1, w2], |t, v| {
            let mut stats = RunningStats::new(3);
            let y = t.conv2d(v[0], v[1], 2)?;
            let y = t.batch_norm_train(y, v[2], v[3], &mut stats)?;
            let y = t.relu6(y);
            let y = t.conv2d(y, v[4], 1)?;
            project(t, y, seed)
        })?;
        push("micro_net", err);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_twenty_seeds() {
        let checks = op_suite(20).unwrap();
        for c in &checks {
            assert!(
                c.max_rel_err <= GRAD_TOLERANCE,
                "{} seed {}: {}",
                c.name,
                c.seed,
                c.max_rel_err
            );
        }
    }

    #[test]
    fn relu6_kink_uses_one_sided_difference() {
        // x sits 1e-6 above the kink at 0: a central ±1e-5 probe straddles it
        let x = Tensor::from_vec(&[1], vec![1e-6]).unwrap();
        let err = check_leaves(&[x], |t, v| {
            let y = t.relu6(v[0]);
            Ok(t.sum_squares(y))
        })
        .unwrap();
        assert!(err <= GRAD_TOLERANCE, "{err}");
    }
}
