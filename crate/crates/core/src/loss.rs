//! The composite training objective.
//!
//! Per enabled scale: mean squared error of the sigmoid vp offsets at the
//! positive cell, weighted logistic loss on every confidence logit, and the
//! mean polyline deviation of the two predicted lines at the positive cell.
//! Scale terms are summed, and each term averages over the batch.

use thiserror::Error;

use crate::codec::{Codec, CodecError, ScaleMask, Targets};
use crate::geometry::Polyline;
use crate::model::{DvpNet, ModelConfig, ModelError};
use crate::nn::gradcheck::{fd_derivative, relative_error, FD_STEP};
use crate::nn::{line_err_value, LineErrMode, NnError, Scalar, Tape, Tensor, Var};
use crate::synth::{scene_at, SceneConfig, SynthError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("targets have no positive cell on any enabled scale")]
    NoPositive,
    #[error("{0} targets for a batch of {1}")]
    BatchMismatch(usize, usize),
    #[error("polylines of {0} and {1} points")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_conf_pos: f64,
    pub lambda_conf_neg: f64,
    pub lambda_l: f64,
    pub line_mode: LineErrMode,
}

impl LossWeights {
    pub fn for_slices(slices: usize) -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_conf_pos: 1.0,
            lambda_conf_neg: 0.5,
            lambda_l: 2.5 / slices as f64,
            line_mode: LineErrMode::Euclidean,
        }
    }

    /// Recompute `lambda_l` for a new slice count.
    pub fn set_slices(&mut self, slices: usize) {
        self.lambda_l = 2.5 / slices as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub coord: f64,
    pub conf: f64,
    pub line_left: f64,
    pub line_right: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.lambda_coord * self.coord + self.conf + w.lambda_l * (self.line_left + self.line_right)
    }
}

/// Tape nodes of each loss component.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub coord: Var,
    pub conf: Var,
    pub line_left: Var,
    pub line_right: Var,
}

/// Mean per-point deviation between two polylines of equal length.
pub fn line_err(pred: &Polyline, target: &Polyline, mode: LineErrMode) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch(pred.len(), target.len()));
    }
    let flat = |p: &Polyline| -> Vec<f64> { p.points().iter().flat_map(|q| [q.x, q.y]).collect() };
    Ok(line_err_value(&flat(pred), &flat(target), pred.len(), mode))
}

/// Differentiable loss over a batch of raw prediction maps.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: [Var; 3],
    targets: &[Targets],
    codec: &Codec,
    weights: &LossWeights,
    scales: ScaleMask,
) -> Result<(LossVars, LossBreakdown), LossError> {
    let layout = &codec.layout;
    let b = layout.channels();
    let s_pts = layout.slices();
    let mut coord_terms = Vec::new();
    let mut conf_terms = Vec::new();
    let mut left_terms = Vec::new();
    let mut right_terms = Vec::new();
    let mut any_positive = false;

    for (scale, &pred) in preds.iter().enumerate() {
        if !scales.contains(scale) {
            continue;
        }
        let g = codec.grids[scale];
        let plane = g.cells();
        let shape = tape.value(pred).shape().to_vec();
        if shape.len() != 4 || shape[1] != b || shape[2] != g.n || shape[3] != g.n {
            return Err(CodecError::Shape(format!(
                "scale {scale}: {shape:?} vs {b} channels on a {0}×{0} grid",
                g.n
            ))
            .into());
        }
        if shape[0] != targets.len() {
            return Err(LossError::BatchMismatch(targets.len(), shape[0]));
        }

        let mut conf_idx = Vec::with_capacity(targets.len() * plane);
        let mut conf_t = vec![T::zero(); targets.len() * plane];
        let mut conf_w = vec![T::of(weights.lambda_conf_neg); targets.len() * plane];
        let mut vp_idx = Vec::new();
        let mut vp_t = Vec::new();
        let mut line_idx = [Vec::new(), Vec::new()];
        let mut line_t = [Vec::new(), Vec::new()];
        for (n, t) in targets.iter().enumerate() {
            let chan = |ch: usize| (n * b + ch) * plane;
            conf_idx.extend((0..plane).map(|c| chan(layout.conf()) + c));
            let st = &t.scales[scale];
            let Some((col, row)) = st.cell else { continue };
            let cell = row * g.n + col;
            conf_t[n * plane + cell] = T::one();
            conf_w[n * plane + cell] = T::of(weights.lambda_conf_pos);
            vp_idx.extend([chan(layout.vp_x()) + cell, chan(layout.vp_y()) + cell]);
            vp_t.extend(st.vp_offset.map(T::of));
            for line in 0..2 {
                for i in 0..s_pts {
                    for xy in 0..2 {
                        line_idx[line].push(chan(layout.line_point(line, i, xy)) + cell);
                        line_t[line].push(T::of(st.line_offsets[line * 2 * s_pts + 2 * i + xy]));
                    }
                }
            }
        }

        let confs = tape.gather(pred, conf_idx)?;
        conf_terms.push(tape.bce_with_logits(confs, &conf_t, &conf_w)?);
        if vp_idx.is_empty() {
            continue;
        }
        any_positive = true;
        let vp_logits = tape.gather(pred, vp_idx)?;
        let vp = tape.sigmoid(vp_logits);
        let ones = vec![T::one(); vp_t.len()];
        coord_terms.push(tape.mse(vp, &vp_t, &ones)?);
        for line in 0..2 {
            let idx = std::mem::take(&mut line_idx[line]);
            let pts = tape.gather(pred, idx)?;
            let term = tape.line_err(pts, &line_t[line], s_pts, weights.line_mode)?;
            if line == 0 {
                left_terms.push(term);
            } else {
                right_terms.push(term);
            }
        }
    }
    if !any_positive {
        return Err(LossError::NoPositive);
    }

    let mut sum = |terms: &[Var]| -> Result<Var, NnError> {
        let pairs: Vec<(Var, f64)> = terms.iter().map(|&v| (v, 1.0)).collect();
        tape.weighted_sum(&pairs)
    };
    let coord = sum(&coord_terms)?;
    let conf = sum(&conf_terms)?;
    let line_left = sum(&left_terms)?;
    let line_right = sum(&right_terms)?;
    let total = tape.weighted_sum(&[
        (coord, weights.lambda_coord),
        (conf, 1.0),
        (line_left, weights.lambda_l),
        (line_right, weights.lambda_l),
    ])?;
    let val = |v: Var| tape.value(v).data()[0].f64();
    let breakdown = LossBreakdown {
        total: val(total),
        coord: val(coord),
        conf: val(conf),
        line_left: val(line_left),
        line_right: val(line_right),
    };
    Ok((
        LossVars {
            total,
            coord,
            conf,
            line_left,
            line_right,
        },
        breakdown,
    ))
}

/// Finite-difference check of the full loss with respect to every
/// parameter of a freshly built network, on a batch of two synthetic scenes.
/// Returns the maximum relative error.
pub fn grad_check_loss(config: &ModelConfig, seed: u64) -> Result<f64, LossError> {
    let mut config = config.clone();
    config.init_seed = seed;
    let mut net = DvpNet::<f64>::build(&config)?;
    let scene_cfg = SceneConfig::with_size(config.input_size, seed);
    let scenes = [scene_at(&scene_cfg, 0)?, scene_at(&scene_cfg, 1)?];
    let images = Tensor::stack(&scenes.each_ref().map(|s| s.image.to_chw()))?;
    let codec = Codec::for_model(&config);
    let targets: Vec<Targets> = scenes
        .iter()
        .map(|s| codec.encode_targets(&s.labels()))
        .collect::<Result<_, _>>()?;
    let weights = LossWeights::for_slices(config.slices);
    grad_check_batch(&mut net, &images, &targets, &codec, &weights)
}

/// Finite-difference check of the loss on a given batch.
pub fn grad_check_batch(
    net: &mut DvpNet<f64>,
    images: &Tensor<f64>,
    targets: &[Targets],
    codec: &Codec,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    let eval = |net: &mut DvpNet<f64>| -> Result<(Tape<f64>, Var), LossError> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let preds = net.forward_train(&mut tape, x)?;
        let (vars, _) = total_loss(&mut tape, preds, targets, codec, weights, ScaleMask::ALL)?;
        Ok((tape, vars.total))
    };
    let (mut tape, loss) = eval(net)?;
    tape.backward(loss)?;
    net.params_mut().zero_grad();
    net.params_mut().accumulate_grads(&tape);
    let analytic: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|(_, p)| match &p.grad {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.value.len()],
        })
        .collect();

    let ids: Vec<_> = net.params().iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for (id, grads) in ids.into_iter().zip(analytic) {
        for (i, a) in grads.into_iter().enumerate() {
            let orig = net.params().get(id).value.data()[i];
            let mut failure = None;
            let numeric = fd_derivative(
                |d| {
                    net.params_mut().get_mut(id).value.data_mut()[i] = orig + d;
                    match eval(net) {
                        Ok((t, l)) => (t.value(l).data()[0], t.kink_signature()),
                        Err(e) => {
                            failure = Some(e);
                            (f64::NAN, Vec::new())
                        }
                    }
                },
                FD_STEP,
            );
            net.params_mut().get_mut(id).value.data_mut()[i] = orig;
            if let Some(e) = failure {
                return Err(e);
            }
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
