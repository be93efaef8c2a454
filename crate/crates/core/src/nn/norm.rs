//! Per-channel batch normalization.

use super::tape::{Op, Tape, Var};
use super::{NnError, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean and variance of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn check<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    scale: Var,
    shift: Var,
    channels: usize,
) -> Result<(usize, usize, usize), NnError> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if tape.value(scale).len() != c || tape.value(shift).len() != c || channels != c {
        return Err(NnError::Shape(format!(
            "batch norm over {c} channels with scale {}, shift {}, stats {channels}",
            tape.value(scale).len(),
            tape.value(shift).len()
        )));
    }
    Ok((n, c, h * w))
}

impl<T: Scalar> Tape<T> {
    /// Normalize with batch statistics and fold them into `running`
    /// (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: &mut RunningStats<T>,
    ) -> Result<Var, NnError> {
        let (n, c, p) = check(self, x, scale, shift, running.channels())?;
        let count = n * p;
        let xv = self.value(x).data();
        let (gamma, beta) = (self.value(scale).data(), self.value(shift).data());
        let eps = T::of(BN_EPS);
        let mom = T::of(BN_MOMENTUM);
        let inv_count = T::one() / T::of(count as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut mean = T::zero();
            for img in 0..n {
                let base = (img * c + ch) * p;
                mean += xv[base..base + p].iter().copied().sum::<T>();
            }
            mean *= inv_count;
            let mut var = T::zero();
            for img in 0..n {
                let base = (img * c + ch) * p;
                var += xv[base..base + p]
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>();
            }
            let unbiased = if count > 1 {
                var / T::of((count - 1) as f64)
            } else {
                T::zero()
            };
            var *= inv_count;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            for img in 0..n {
                let base = (img * c + ch) * p;
                for i in base..base + p {
                    let xh = (xv[i] - mean) * istd;
                    xhat[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
            running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * mean;
            running.var[ch] = (T::one() - mom) * running.var[ch] + mom * unbiased;
        }
        let out = Tensor::from_vec(self.value(x).shape(), out)?;
        let rg = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            out,
            Op::BnTrain {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Normalize with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: &RunningStats<T>,
    ) -> Result<Var, NnError> {
        let (n, c, p) = check(self, x, scale, shift, running.channels())?;
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = running
            .var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let xv = self.value(x).data();
        let (gamma, beta) = (self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * p;
                let k = gamma[ch] * inv_std[ch];
                let b = beta[ch] - k * running.mean[ch];
                for i in base..base + p {
                    out[i] = k * xv[i] + b;
                }
            }
        }
        let out = Tensor::from_vec(self.value(x).shape(), out)?;
        let rg = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            out,
            Op::BnInfer {
                x,
                scale,
                shift,
                mean: running.mean.clone(),
                inv_std,
            },
            rg,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    mut gx: Option<&mut [T]>,
    mut gs: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (n, c, h, w) = x.dims4().expect("rank 4");
    let p = h * w;
    let m = T::of((n * p) as f64);
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for img in 0..n {
            let base = (img * c + ch) * p;
            for i in base..base + p {
                sum_g += g[i];
                sum_gx += g[i] * xhat[i];
            }
        }
        if let Some(gs) = gs.as_deref_mut() {
            gs[ch] += sum_gx;
        }
        if let Some(gb) = gb.as_deref_mut() {
            gb[ch] += sum_g;
        }
        if let Some(gx) = gx.as_deref_mut() {
            let k = gamma[ch] * inv_std[ch] / m;
            for img in 0..n {
                let base = (img * c + ch) * p;
                for i in base..base + p {
                    gx[i] += k * (m * g[i] - sum_g - xhat[i] * sum_gx);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_infer_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    g: &[T],
    mut gx: Option<&mut [T]>,
    mut gs: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (n, c, h, w) = x.dims4().expect("rank 4");
    let p = h * w;
    let xv = x.data();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * p;
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for i in base..base + p {
                sg += g[i];
                sgx += g[i] * (xv[i] - mean[ch]) * inv_std[ch];
            }
            if let Some(gs) = gs.as_deref_mut() {
                gs[ch] += sgx;
            }
            if let Some(gb) = gb.as_deref_mut() {
                gb[ch] += sg;
            }
            if let Some(gx) = gx.as_deref_mut() {
                let k = gamma[ch] * inv_std[ch];
                for i in base..base + p {
                    gx[i] += k * g[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_input_passes_through() {
        // per channel: values ±1 → mean 0, biased variance 1
        let data: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 2, 2, 2], data.clone()).unwrap());
        let s = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut rs = RunningStats::new(2);
        let y = tape.batch_norm_train(x, s, b, &mut rs).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&data) {
            assert!((a - e).abs() < 1e-5);
        }
        // running stats moved 10% toward the batch statistics
        assert!((rs.mean[0]).abs() < 1e-15);
        assert!((rs.var[0] - (0.9 + 0.1 * 8.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 1, 2, 2], 4.2));
        let s = tape.constant(Tensor::full(&[1], 2.0));
        let b = tape.constant(Tensor::full(&[1], -0.5));
        let mut rs = RunningStats::new(1);
        let y = tape.batch_norm_train(x, s, b, &mut rs).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn infer_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1, 2], 3.0));
        let s = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let rs = RunningStats {
            mean: vec![1.0],
            var: vec![4.0 - BN_EPS],
        };
        let y = tape.batch_norm_infer(x, s, b, &rs).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_scale_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let s = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut rs = RunningStats::new(3);
        assert!(tape.batch_norm_train(x, s, b, &mut rs).is_err());
    }
}
