//! Minibatch SGD with momentum, per-group step-decayed learning rates,
//! optional flip/rotation augmentation, CSV logging and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Codec, CodecError, ScaleMask, Targets};
use crate::dataio::{load_annotations, validate, AnnotationRecord, DataError};
use crate::image::{ImageError, RgbImage};
use crate::loss::{total_loss, LossBreakdown, LossError, LossWeights};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, DvpNet, ModelError};
use crate::nn::{sgd_momentum_step, NnError, ParamGroup, Scalar, Tape, Tensor};
use crate::synth::{augment, AnnotatedScene};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },
    #[error("training diverged at epoch {epoch}, step {step}: total loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub seed: u64,
    pub augmentation: bool,
    pub flip_prob: f64,
    pub max_rot_deg: f64,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr_backbone: 0.001,
            lr_head: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 20,
            momentum: 0.9,
            seed: 0,
            augmentation: true,
            flip_prob: 0.5,
            max_rot_deg: 10.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be at least 1");
        }
        if !(self.lr_backbone >= 0.0 && self.lr_head >= 0.0 && self.lr_decay_factor > 0.0) {
            return bad("learning rates must be nonnegative and the decay factor positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.max_rot_deg >= 0.0) {
            return bad("flip probability must lie in [0, 1] and rotation be nonnegative");
        }
        Ok(())
    }
}

/// `base(group) / factor^floor(epoch / every)`.
pub fn lr_at(config: &TrainConfig, group: ParamGroup, epoch: usize) -> f64 {
    let base = match group {
        ParamGroup::Backbone => config.lr_backbone,
        ParamGroup::Head => config.lr_head,
    };
    base / config
        .lr_decay_factor
        .powi((epoch / config.lr_decay_every) as i32)
}

/// One optimizer step's log entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr_backbone: f64,
    pub lr_head: f64,
}

pub const LOG_HEADER: &str = "epoch,step,total,coord,conf,line_left,line_right,lr_backbone,lr_head";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            l.total,
            l.coord,
            l.conf,
            l.line_left,
            l.line_right,
            self.lr_backbone,
            self.lr_head
        )
    }
}

/// Load and validate an annotation file and its images. Image paths are
/// resolved relative to the annotation file.
pub fn load_dataset(annotations: &Path) -> Result<Vec<AnnotatedScene>, TrainError> {
    load_dataset_with_workers(annotations, 1)
}

/// [`load_dataset`] decoding images on `workers` threads; output order
/// follows the annotation file.
pub fn load_dataset_with_workers(annotations: &Path, workers: usize) -> Result<Vec<AnnotatedScene>, TrainError> {
    let records = load_annotations(annotations)?;
    let root = annotations.parent().unwrap_or(Path::new("."));
    let load = |index: usize, r: &AnnotationRecord| -> Result<AnnotatedScene, TrainError> {
        let invalid = |message: String| TrainError::InvalidRecord { index, message };
        let violations = validate(r);
        if !violations.is_empty() {
            let message = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            return Err(invalid(message));
        }
        let image = RgbImage::load_png(&root.join(&r.image))?;
        if (image.width(), image.height()) != (r.width, r.height) {
            return Err(invalid(format!(
                "image is {}×{}, record says {}×{}",
                image.width(),
                image.height(),
                r.width,
                r.height
            )));
        }
        let labels = r.labels().map_err(|e| invalid(e.to_string()))?;
        Ok(AnnotatedScene {
            image,
            main_lines: labels.lines,
            vp: labels.vp,
        })
    };
    let workers = workers.clamp(1, records.len().max(1));
    if workers == 1 {
        return records.iter().enumerate().map(|(i, r)| load(i, r)).collect();
    }
    let per = records.len().div_ceil(workers);
    let parts: Vec<Result<Vec<AnnotatedScene>, TrainError>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(per)
            .enumerate()
            .map(|(c, chunk)| {
                let load = &load;
                s.spawn(move || chunk.iter().enumerate().map(|(i, r)| load(c * per + i, r)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Stack scene images into an `N×3×R×R` batch.
pub fn batch_tensor<'a, T: Scalar>(images: impl IntoIterator<Item = &'a RgbImage>, size: usize) -> Tensor<T> {
    let images: Vec<&RgbImage> = images.into_iter().collect();
    let per = 3 * size * size;
    let mut t = Tensor::zeros(&[images.len(), 3, size, size]);
    for (i, img) in images.iter().enumerate() {
        img.write_chw(&mut t.data_mut()[i * per..(i + 1) * per]);
    }
    t
}

/// Training state: the network, its optimizer buffers (inside the
/// parameters) and the number of completed epochs.
pub struct Trainer<T: Scalar> {
    net: DvpNet<T>,
    config: TrainConfig,
    codec: Codec,
    weights: LossWeights,
    scales: ScaleMask,
    epoch: usize,
    out_dir: Option<PathBuf>,
    log: Vec<LogRow>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: DvpNet<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let codec = Codec::for_model(net.config());
        let weights = LossWeights::for_slices(net.config().slices);
        Ok(Self {
            net,
            config,
            codec,
            weights,
            scales: ScaleMask::ALL,
            epoch: 0,
            out_dir: None,
            log: Vec::new(),
        })
    }

    /// Continue from a checkpoint written by a trainer.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self, TrainError> {
        let (net, meta) = load_checkpoint(path)?;
        let mut t = Self::new(net, config)?;
        t.epoch = meta.epoch;
        Ok(t)
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        self.weights = weights;
        self
    }

    /// Restrict loss (and the codec used for targets) to a scale subset.
    pub fn with_scales(mut self, scales: ScaleMask) -> Self {
        self.scales = scales;
        self.codec.scales = scales;
        self
    }

    pub fn with_codec(mut self, codec: Codec) -> Self {
        self.codec = codec;
        self
    }

    /// Write `train_log.csv` and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn net(&self) -> &DvpNet<T> {
        &self.net
    }

    pub fn into_net(self) -> DvpNet<T> {
        self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    fn check_data(&self, data: &[AnnotatedScene]) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let size = self.net.config().input_size;
        for (index, s) in data.iter().enumerate() {
            if s.image.width() != size || s.image.height() != size {
                return Err(TrainError::InvalidRecord {
                    index,
                    message: format!(
                        "image is {}×{}, model input is {size}×{size}",
                        s.image.width(),
                        s.image.height()
                    ),
                });
            }
        }
        Ok(())
    }

    /// One forward/backward/update on the given scenes.
    pub fn step(&mut self, scenes: &[AnnotatedScene]) -> Result<LossBreakdown, TrainError> {
        let size = self.net.config().input_size;
        let targets: Vec<Targets> = scenes
            .iter()
            .map(|s| self.codec.encode_targets(&s.labels()))
            .collect::<Result<_, _>>()?;
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(scenes.iter().map(|s| &s.image), size));
        let preds = self.net.forward_train(&mut tape, x)?;
        let (vars, breakdown) = total_loss(&mut tape, preds, &targets, &self.codec, &self.weights, self.scales)?;
        if !breakdown.total.is_finite() || breakdown.total > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged {
                epoch: self.epoch,
                step: self.log.len(),
                loss: breakdown.total,
            });
        }
        tape.backward(vars.total)?;
        let store = self.net.params_mut();
        store.zero_grad();
        store.accumulate_grads(&tape);
        let config = &self.config;
        let epoch = self.epoch;
        sgd_momentum_step(store, |g| lr_at(config, g, epoch), config.momentum)?;
        Ok(breakdown)
    }

    /// Train one epoch: seeded shuffle, optional augmentation, minibatch
    /// updates. The shuffle and augmentation stream depends only on the
    /// seed and the epoch number, so resumed runs replay exactly.
    pub fn run_epoch(&mut self, data: &[AnnotatedScene]) -> Result<(), TrainError> {
        self.check_data(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<AnnotatedScene> = chunk
                .iter()
                .map(|&i| {
                    if self.config.augmentation {
                        augment(&data[i], &mut rng, self.config.flip_prob, self.config.max_rot_deg)
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let loss = self.step(&batch)?;
            let row = LogRow {
                epoch: self.epoch,
                step: self.log.len(),
                loss,
                lr_backbone: lr_at(&self.config, ParamGroup::Backbone, self.epoch),
                lr_head: lr_at(&self.config, ParamGroup::Head, self.epoch),
            };
            self.append_log(&row)?;
            self.log.push(row);
        }
        self.epoch += 1;
        if let Some(dir) = &self.out_dir {
            let every = self.config.checkpoint_every;
            if every > 0 && self.epoch % every == 0 {
                self.save(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
            }
        }
        Ok(())
    }

    fn append_log(&self, row: &LogRow) -> Result<(), TrainError> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let path = dir.join("train_log.csv");
        let io = |source| TrainError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        if fresh {
            writeln!(f, "{LOG_HEADER}").map_err(io)?;
        }
        writeln!(f, "{}", row.csv()).map_err(io)
    }

    /// Train until `config.epochs` epochs are complete; saves `final.ckpt`
    /// when an output directory is set.
    pub fn run(&mut self, data: &[AnnotatedScene]) -> Result<(), TrainError> {
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            extra: serde_json::to_value(&self.config).expect("config serializes"),
        };
        Ok(save_checkpoint(&self.net, &meta, path)?)
    }
}

/// Train `net` on `data` from scratch and return it with the step log.
pub fn train<T: Scalar>(
    net: DvpNet<T>,
    data: &[AnnotatedScene],
    config: &TrainConfig,
) -> Result<(DvpNet<T>, Vec<LogRow>), TrainError> {
    let mut t = Trainer::new(net, config.clone())?;
    t.run(data)?;
    let log = t.log.clone();
    Ok((t.into_net(), log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(&c, ParamGroup::Head, 0), 0.01);
        assert_eq!(lr_at(&c, ParamGroup::Head, 19), 0.01);
        assert_eq!(lr_at(&c, ParamGroup::Head, 20), 0.001);
        assert_eq!(lr_at(&c, ParamGroup::Backbone, 45), 0.00001);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lr_decay_every = 0;
        assert!(c.validate().is_err());
        c.lr_decay_every = 20;
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn log_row_format() {
        let row = LogRow {
            epoch: 2,
            step: 7,
            loss: LossBreakdown {
                total: 1.5,
                coord: 0.25,
                conf: 0.5,
                line_left: 1.0,
                line_right: 2.0,
            },
            lr_backbone: 0.001,
            lr_head: 0.01,
        };
        assert_eq!(row.csv(), "2,7,1.5,0.25,0.5,1,2,0.001,0.01");
        assert_eq!(LOG_HEADER.split(',').count(), row.csv().split(',').count());
    }
}
