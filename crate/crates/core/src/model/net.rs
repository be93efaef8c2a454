//! The detector network: a MobileNet-v2 style backbone feeding three
//! yolo-style heads at strides 32, 16 and 8.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Operator};
use super::ModelError;
use crate::nn::{ParamGroup, ParamId, ParamStore, RunningStats, Scalar, Tape, Tensor, Var};

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the stored running statistics.
pub enum StatsMode<'a, T> {
    Train(&'a mut [RunningStats<T>]),
    Infer(&'a [RunningStats<T>]),
}

impl<T> StatsMode<'_, T> {
    fn reborrow(&mut self) -> StatsMode<'_, T> {
        match self {
            StatsMode::Train(s) => StatsMode::Train(s),
            StatsMode::Infer(s) => StatsMode::Infer(s),
        }
    }
}

/// Convolution followed by batch normalization and optional ReLU6.
#[derive(Debug, Clone)]
pub struct ConvBn {
    weight: ParamId,
    scale: ParamId,
    shift: ParamId,
    stats: usize,
    stride: usize,
    depthwise: bool,
    act: bool,
    out_channels: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamStore<T>,
        stats: &mut Vec<RunningStats<T>>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        depthwise: bool,
        act: bool,
    ) -> Result<Self, ModelError> {
        let (shape, fan_in) = if depthwise {
            (vec![cout, 1, 3, 3], 9)
        } else {
            (vec![cout, cin, k, k], cin * k * k)
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)));
        let weight = params.add(format!("{name}.weight"), group, weight)?;
        let scale = params.add(format!("{name}.bn.scale"), group, Tensor::full(&[cout], T::one()))?;
        let shift = params.add(format!("{name}.bn.shift"), group, Tensor::zeros(&[cout]))?;
        stats.push(RunningStats::new(cout));
        Ok(Self {
            weight,
            scale,
            shift,
            stats: stats.len() - 1,
            stride,
            depthwise,
            act,
            out_channels: cout,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        mut stats: StatsMode<'_, T>,
        x: Var,
    ) -> Result<Var, ModelError> {
        let w = tape.param(self.weight, &params.get(self.weight).value);
        let y = if self.depthwise {
            tape.depthwise_conv3x3(x, w, self.stride)?
        } else {
            tape.conv2d(x, w, self.stride)?
        };
        let s = tape.param(self.scale, &params.get(self.scale).value);
        let b = tape.param(self.shift, &params.get(self.shift).value);
        let y = match stats.reborrow() {
            StatsMode::Train(all) => tape.batch_norm_train(y, s, b, &mut all[self.stats])?,
            StatsMode::Infer(all) => tape.batch_norm_infer(y, s, b, &all[self.stats])?,
        };
        Ok(if self.act { tape.relu6(y) } else { y })
    }
}

/// Inverted residual: 1×1 expansion (skipped when `t = 1`), depthwise 3×3
/// with the block stride, linear 1×1 projection, and a residual add when the
/// stride is 1 and channel counts match.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    residual: bool,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamStore<T>,
        stats: &mut Vec<RunningStats<T>>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        t: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self, ModelError> {
        let g = ParamGroup::Backbone;
        let hidden = t * cin;
        let expand = if t == 1 {
            None
        } else {
            Some(ConvBn::new(
                params,
                stats,
                rng,
                &format!("{name}.expand"),
                g,
                cin,
                hidden,
                1,
                1,
                false,
                true,
            )?)
        };
        let depthwise = ConvBn::new(
            params,
            stats,
            rng,
            &format!("{name}.depthwise"),
            g,
            hidden,
            hidden,
            3,
            stride,
            true,
            true,
        )?;
        let project = ConvBn::new(
            params,
            stats,
            rng,
            &format!("{name}.project"),
            g,
            hidden,
            cout,
            1,
            1,
            false,
            false,
        )?;
        Ok(Self {
            expand,
            depthwise,
            project,
            residual: stride == 1 && cin == cout,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.depthwise.out_channels
    }

    pub fn has_residual(&self) -> bool {
        self.residual
    }

    pub fn projection(&self) -> &ConvBn {
        &self.project
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        mut stats: StatsMode<'_, T>,
        x: Var,
    ) -> Result<Var, ModelError> {
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(tape, params, stats.reborrow(), y)?;
        }
        y = self.depthwise.forward(tape, params, stats.reborrow(), y)?;
        y = self.project.forward(tape, params, stats.reborrow(), y)?;
        if self.residual {
            y = tape.add(x, y)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(ConvBn),
    Bottleneck(Bottleneck),
}

/// `n` pairs of 1×1 (c) / 3×3 (2c) conv-norm-ReLU6 layers followed by a
/// biased 1×1 detection convolution.
#[derive(Debug, Clone)]
struct Head {
    convs: Vec<ConvBn>,
    detect_w: ParamId,
    detect_b: ParamId,
}

#[derive(Debug, Clone)]
struct Arch {
    layers: Vec<Layer>,
    tap16: usize,
    tap8: usize,
    heads: Vec<Head>,
}

/// Dominant vanishing point detector.
#[derive(Debug, Clone)]
pub struct DvpNet<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    stats: Vec<RunningStats<T>>,
    arch: Arch,
}

impl<T: Scalar> DvpNet<T> {
    pub fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);

        let mut layers = Vec::new();
        let mut strides = Vec::new();
        let mut channels = Vec::new();
        let (mut cin, mut stride) = (3usize, 1usize);
        for (row_idx, row) in config.backbone_rows().enumerate() {
            let cout = config.channels(row.c);
            for rep in 0..row.n {
                let s = if rep == 0 { row.s } else { 1 };
                let name = format!("backbone.{row_idx}.{rep}");
                let layer = match row.operator {
                    Operator::Conv => Layer::Conv(ConvBn::new(
                        &mut params,
                        &mut stats,
                        &mut rng,
                        &name,
                        ParamGroup::Backbone,
                        cin,
                        cout,
                        3,
                        s,
                        false,
                        true,
                    )?),
                    _ => Layer::Bottleneck(Bottleneck::new(
                        &mut params,
                        &mut stats,
                        &mut rng,
                        &name,
                        cin,
                        row.t,
                        cout,
                        s,
                    )?),
                };
                layers.push(layer);
                stride *= s;
                strides.push(stride);
                channels.push(cout);
                cin = cout;
            }
        }
        let last_at = |target: usize| {
            strides
                .iter()
                .rposition(|&s| s == target)
                .ok_or_else(|| ModelError::InvalidConfig(format!("no backbone output at stride {target}")))
        };
        let (tap16, tap8) = (last_at(16)?, last_at(8)?);

        let b = config.channels_per_cell();
        let mut heads = Vec::new();
        let mut prev_out = 0;
        let inputs = [cin, channels[tap16], channels[tap8]];
        for (scale, row) in config.yolo_rows().iter().enumerate() {
            let c = config.channels(row.c);
            let mut hin = inputs[scale];
            if scale > 0 && config.fusion {
                hin += prev_out;
            }
            let mut convs = Vec::new();
            for pair in 0..row.n {
                for (k, cout) in [(1usize, c), (3, 2 * c)] {
                    let name = format!("head.{scale}.yolo.{pair}.conv{k}x{k}");
                    convs.push(ConvBn::new(
                        &mut params,
                        &mut stats,
                        &mut rng,
                        &name,
                        ParamGroup::Head,
                        hin,
                        cout,
                        k,
                        1,
                        false,
                        true,
                    )?);
                    hin = cout;
                }
            }
            prev_out = hin;
            let bound = 1.0 / (hin as f64).sqrt();
            let w = Tensor::from_fn(&[b, hin, 1, 1], |_| T::of(rng.random_range(-bound..bound)));
            let detect_w = params.add(format!("head.{scale}.detect.weight"), ParamGroup::Head, w)?;
            let detect_b = params.add(
                format!("head.{scale}.detect.bias"),
                ParamGroup::Head,
                Tensor::zeros(&[b]),
            )?;
            heads.push(Head {
                convs,
                detect_w,
                detect_b,
            });
        }

        Ok(Self {
            config: config.clone(),
            params,
            stats,
            arch: Arch {
                layers,
                tap16,
                tap8,
                heads,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    /// Disjoint (backbone, head) partition of all parameters.
    pub fn param_groups(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        self.params
            .iter()
            .map(|(id, p)| (id, p.group))
            .fold((Vec::new(), Vec::new()), |(mut bb, mut hd), (id, g)| {
                match g {
                    ParamGroup::Backbone => bb.push(id),
                    ParamGroup::Head => hd.push(id),
                }
                (bb, hd)
            })
    }

    /// Training-mode forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, x: Var) -> Result<[Var; 3], ModelError> {
        let Self {
            params,
            stats,
            arch,
            config,
        } = self;
        forward_impl(arch, config, params, StatsMode::Train(stats), tape, x)
    }

    /// Inference-mode forward with running statistics.
    pub fn forward_infer(&self, tape: &mut Tape<T>, x: Var) -> Result<[Var; 3], ModelError> {
        forward_impl(
            &self.arch,
            &self.config,
            &self.params,
            StatsMode::Infer(&self.stats),
            tape,
            x,
        )
    }

    /// Raw prediction maps for a batch `N×3×R×R` (inference mode).
    pub fn predict(&self, batch: &Tensor<T>) -> Result<[Tensor<T>; 3], ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward_infer(&mut tape, x)?;
        Ok(out.map(|v| tape.value(v).clone()))
    }

    /// Same network with every tensor converted to another element type.
    pub fn cast<U: Scalar>(&self) -> DvpNet<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params
                .add(p.name.clone(), p.group, p.value.cast())
                .expect("names already unique");
        }
        DvpNet {
            config: self.config.clone(),
            params,
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::of(v.f64())).collect(),
                    var: s.var.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
            arch: self.arch.clone(),
        }
    }
}

fn forward_impl<T: Scalar>(
    arch: &Arch,
    config: &ModelConfig,
    params: &ParamStore<T>,
    mut stats: StatsMode<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
) -> Result<[Var; 3], ModelError> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if c != 3 || h != config.input_size || w != config.input_size {
        return Err(ModelError::InputShape {
            expected: config.input_size,
            got: tape.value(x).shape().to_vec(),
        });
    }
    let mut y = x;
    let (mut f16, mut f8) = (x, x);
    for (i, layer) in arch.layers.iter().enumerate() {
        y = match layer {
            Layer::Conv(cb) => cb.forward(tape, params, stats.reborrow(), y)?,
            Layer::Bottleneck(b) => b.forward(tape, params, stats.reborrow(), y)?,
        };
        if i == arch.tap16 {
            f16 = y;
        }
        if i == arch.tap8 {
            f8 = y;
        }
    }
    let inputs = [y, f16, f8];
    let mut outs = Vec::with_capacity(3);
    let mut prev: Option<Var> = None;
    for (scale, head) in arch.heads.iter().enumerate() {
        let mut hx = inputs[scale];
        if let (Some(p), true) = (prev, config.fusion) {
            let up = tape.upsample2x(p)?;
            hx = tape.concat_channels(up, hx)?;
        }
        for cb in &head.convs {
            hx = cb.forward(tape, params, stats.reborrow(), hx)?;
        }
        prev = Some(hx);
        let dw = tape.param(head.detect_w, &params.get(head.detect_w).value);
        let db = tape.param(head.detect_b, &params.get(head.detect_b).value);
        let det = tape.conv2d(hx, dw, 1)?;
        outs.push(tape.add_channel_bias(det, db)?);
    }
    Ok([outs[0], outs[1], outs[2]])
}
