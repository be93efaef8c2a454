//! Scalar-valued loss ops.

use super::tape::{sigmoid, Op, Tape, Var};
use super::{NnError, Scalar, Tensor};

/// Per-point deviation used by the polyline error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineErrMode {
    /// `|P − p|₂`
    #[default]
    Euclidean,
    /// `|P − p|₂²`
    Squared,
    /// `|Px − px| + |Py − py|`
    L1,
}

impl std::str::FromStr for LineErrMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "squared" => Ok(Self::Squared),
            "l1" => Ok(Self::L1),
            other => Err(format!(
                "unknown line error mode {other:?} (expected euclidean, squared or l1)"
            )),
        }
    }
}

impl std::fmt::Display for LineErrMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Squared => "squared",
            Self::L1 => "l1",
        })
    }
}

/// `log(1 + e^{-|z|}) + max(z, 0) − z·t`, stable for large `|z|`.
pub(crate) fn bce_term<T: Scalar>(z: T, t: T) -> T {
    z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) fn bce_backward<T: Scalar>(
    z: &[T],
    target: &[T],
    weight: &[T],
    denom: T,
    g: T,
    gz: &mut [T],
) {
    for i in 0..z.len() {
        gz[i] += g * weight[i] * (sigmoid(z[i]) - target[i]) / denom;
    }
}

pub(crate) fn line_err_value<T: Scalar>(
    pred: &[T],
    target: &[T],
    points: usize,
    mode: LineErrMode,
) -> T {
    let instances = pred.len() / (2 * points);
    let mut total = T::zero();
    for (p, t) in pred.chunks(2).zip(target.chunks(2)) {
        let (dx, dy) = (p[0] - t[0], p[1] - t[1]);
        total += match mode {
            LineErrMode::Euclidean => dx.hypot(dy),
            LineErrMode::Squared => dx * dx + dy * dy,
            LineErrMode::L1 => dx.abs() + dy.abs(),
        };
    }
    total / T::of((points * instances) as f64)
}

pub(crate) fn line_err_backward<T: Scalar>(
    pred: &[T],
    target: &[T],
    points: usize,
    mode: LineErrMode,
    g: T,
    gp: &mut [T],
) {
    let instances = pred.len() / (2 * points);
    let k = g / T::of((points * instances) as f64);
    for i in (0..pred.len()).step_by(2) {
        let (dx, dy) = (pred[i] - target[i], pred[i + 1] - target[i + 1]);
        let (gx, gy) = match mode {
            LineErrMode::Euclidean => {
                let d = dx.hypot(dy);
                if d > T::zero() {
                    (dx / d, dy / d)
                } else {
                    (T::zero(), T::zero())
                }
            }
            LineErrMode::Squared => (dx + dx, dy + dy),
            LineErrMode::L1 => (signum0(dx), signum0(dy)),
        };
        gp[i] += k * gx;
        gp[i + 1] += k * gy;
    }
}

fn signum0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> Tape<T> {
    /// `Σ mask·(pred − target)² / max(Σ mask, 1)`.
    pub fn mse(&mut self, pred: Var, target: &[T], mask: &[T]) -> Result<Var, NnError> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(NnError::Shape(format!(
                "mse over {} predictions, {} targets, {} mask entries",
                p.len(),
                target.len(),
                mask.len()
            )));
        }
        let denom = mask.iter().copied().sum::<T>().max(T::one());
        let sum: T = p
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((&a, &b), &m)| m * (a - b) * (a - b))
            .sum();
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(sum / denom),
            Op::Mse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Weighted mean binary cross-entropy on logits:
    /// `Σ w·ℓ(z, t) / Σ w` (zero when all weights are zero).
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        target: &[T],
        weight: &[T],
    ) -> Result<Var, NnError> {
        let z = self.value(logits).data();
        if z.len() != target.len() || z.len() != weight.len() {
            return Err(NnError::Shape(format!(
                "bce over {} logits, {} targets, {} weights",
                z.len(),
                target.len(),
                weight.len()
            )));
        }
        let wsum: T = weight.iter().copied().sum();
        let denom = if wsum > T::zero() { wsum } else { T::one() };
        let sum: T = z
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((&zi, &ti), &wi)| wi * bce_term(zi, ti))
            .sum();
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(sum / denom),
            Op::Bce {
                logits,
                target: target.to_vec(),
                weight: weight.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Mean per-point deviation between predicted and target polylines.
    ///
    /// `pred` and `target` hold interleaved `(x, y)` pairs for one or more
    /// polylines of `points` points each; the result averages over every
    /// point of every polyline.
    pub fn line_err(
        &mut self,
        pred: Var,
        target: &[T],
        points: usize,
        mode: LineErrMode,
    ) -> Result<Var, NnError> {
        let p = self.value(pred).data();
        if p.len() != target.len() || points == 0 || p.len() % (2 * points) != 0 || p.is_empty() {
            return Err(NnError::Shape(format!(
                "line error over {} predictions, {} targets, {points} points per line",
                p.len(),
                target.len()
            )));
        }
        let value = line_err_value(p, target, points, mode);
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::LineErr {
                pred,
                target: target.to_vec(),
                points,
                mode,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_cases() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 5.0, -2.0]).unwrap());
        let zero = tape.mse(p, &[1.0, 5.0, -2.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(tape.value(zero).data()[0], 0.0);
        let one = tape.mse(p, &[1.0, 3.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tape.value(one).data()[0], 4.0);
        // empty mask divides by one
        let none = tape.mse(p, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(tape.value(none).data()[0], 0.0);
    }

    #[test]
    fn bce_cases() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let l = tape.bce_with_logits(z, &[1.0], &[1.0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let z = tape.leaf(Tensor::from_vec(&[1], vec![50.0]).unwrap());
        let l = tape.bce_with_logits(z, &[1.0], &[1.0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-20);
        let z = tape.leaf(Tensor::from_vec(&[2], vec![1e4, -1e4]).unwrap());
        let l = tape.bce_with_logits(z, &[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((tape.value(l).data()[0] - 1e4).abs() < 1e-9);
    }

    #[test]
    fn line_err_constant_offset() {
        let mut tape = Tape::<f64>::new();
        let target = vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        let pred: Vec<f64> = target
            .chunks(2)
            .flat_map(|p| [p[0] + 3.0, p[1] + 4.0])
            .collect();
        let v = tape.leaf(Tensor::from_vec(&[6], pred).unwrap());
        let e = tape.line_err(v, &target, 3, LineErrMode::Euclidean).unwrap();
        assert!((tape.value(e).data()[0] - 5.0).abs() < 1e-15);
        let e = tape.line_err(v, &target, 3, LineErrMode::L1).unwrap();
        assert!((tape.value(e).data()[0] - 7.0).abs() < 1e-15);
        let e = tape.line_err(v, &target, 3, LineErrMode::Squared).unwrap();
        assert!((tape.value(e).data()[0] - 25.0).abs() < 1e-15);
        assert!(tape.line_err(v, &target, 4, LineErrMode::Euclidean).is_err());
    }
}
