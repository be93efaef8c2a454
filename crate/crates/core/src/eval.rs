//! Consistency-error evaluation, coverage curves, latency benchmarking,
//! the slice-count and scale-subset ablation drivers, and overlay images.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{Codec, CodecError, Detection, ScaleMask};
use crate::geometry::{consistency_error, discretize, GeometryError, Point2, EDGE_SAMPLES};
use crate::image::{ImageError, RgbImage};
use crate::loss::LossWeights;
use crate::model::{DvpNet, ModelConfig, ModelError};
use crate::nn::{Scalar, Tensor};
use crate::synth::AnnotatedScene;
use crate::trainer::{batch_tensor, TrainConfig, TrainError, Trainer};

/// Thresholds reported in result tables.
pub const REPORT_THRESHOLDS: [f64; 4] = [1.0, 2.0, 3.0, 5.0];

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to summarize")]
    Empty,
    #[error("thresholds must be finite and ascending")]
    Thresholds,
    #[error("scene {index} is {got}×{got}, model input is {expected}×{expected}")]
    InputSize {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("benchmark needs warmup ≥ 1 and reps ≥ 10, got {warmup} and {reps}")]
    BenchArgs { warmup: usize, reps: usize },
    #[error("invalid ablation: {0}")]
    Ablation(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub scene: usize,
    pub detection: Detection,
    /// Percent of the image diagonal.
    pub ce: f64,
    /// Each labeled segment resampled to [`EDGE_SAMPLES`] points.
    pub edges: [Vec<Point2>; 2],
}

/// Ground-truth edges of a scene as point sets.
pub fn scene_edges(scene: &AnnotatedScene) -> Result<[Vec<Point2>; 2], GeometryError> {
    let a = discretize(&scene.main_lines[0], EDGE_SAMPLES)?;
    let b = discretize(&scene.main_lines[1], EDGE_SAMPLES)?;
    Ok([a.points().to_vec(), b.points().to_vec()])
}

/// Consistency error of `vp` against a scene's labeled lines.
pub fn scene_ce(scene: &AnnotatedScene, vp: Point2) -> Result<f64, GeometryError> {
    let edges = scene_edges(scene)?;
    let (w, h) = (scene.image.width() as f64, scene.image.height() as f64);
    consistency_error(&edges, vp, w.hypot(h))
}

/// Decode every scene and score it.
pub fn evaluate<T: Scalar>(
    net: &DvpNet<T>,
    codec: &Codec,
    scenes: &[AnnotatedScene],
) -> Result<Vec<EvalRecord>, EvalError> {
    let size = net.config().input_size;
    for (index, s) in scenes.iter().enumerate() {
        if s.image.width() != size || s.image.height() != size {
            return Err(EvalError::InputSize {
                index,
                expected: size,
                got: s.image.width(),
            });
        }
    }
    let mut records = Vec::with_capacity(scenes.len());
    for (b, chunk) in scenes.chunks(EVAL_BATCH).enumerate() {
        let preds = net.predict(&batch_tensor(chunk.iter().map(|s| &s.image), size))?;
        for (i, scene) in chunk.iter().enumerate() {
            let detection = codec.decode(&preds, i)?;
            let edges = scene_edges(scene)?;
            let ce = consistency_error(&edges, detection.vp, (size as f64).hypot(size as f64))?;
            records.push(EvalRecord {
                scene: b * EVAL_BATCH + i,
                detection,
                ce,
                edges,
            });
        }
    }
    Ok(records)
}

/// CE of always predicting the image center.
pub fn center_baseline(scenes: &[AnnotatedScene]) -> Result<Vec<f64>, EvalError> {
    scenes
        .iter()
        .map(|s| {
            let c = Point2::new(s.image.width() as f64 / 2.0, s.image.height() as f64 / 2.0);
            Ok(scene_ce(s, c)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCurve {
    pub thresholds: Vec<f64>,
    pub coverage: Vec<f64>,
}

impl CoverageCurve {
    /// Coverage at an exact threshold of the curve.
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.coverage[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,coverage\n");
        for (t, c) in self.thresholds.iter().zip(&self.coverage) {
            writeln!(out, "{t},{c}").unwrap();
        }
        out
    }
}

/// `0.25, 0.5, …, 10`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=40).map(|k| k as f64 * 0.25).collect()
}

/// Fraction of `ces` at or below each threshold.
pub fn coverage_curve(ces: &[f64], thresholds: &[f64]) -> Result<CoverageCurve, EvalError> {
    if ces.is_empty() {
        return Err(EvalError::Empty);
    }
    if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Thresholds);
    }
    let mut sorted = ces.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let coverage = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&c| c <= t) as f64 / n)
        .collect();
    Ok(CoverageCurve {
        thresholds: thresholds.to_vec(),
        coverage,
    })
}

/// Per-record CE table.
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("scene,vp_x,vp_y,confidence,scale,col,row,ce\n");
    for r in records {
        let d = &r.detection;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scene, d.vp.x, d.vp.y, d.confidence, d.scale + 1, d.cell.0, d.cell.1, r.ce
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub median_ms: f64,
    pub p5_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        format!(
            "median_ms,p5_ms,p95_ms,fps\n{},{},{},{}\n",
            self.median_ms, self.p5_ms, self.p95_ms, self.fps
        )
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Median of sorted samples.
fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Time single-image forward passes on a fixed random input.
pub fn bench_latency<T: Scalar>(
    net: &DvpNet<T>,
    warmup: usize,
    reps: usize,
) -> Result<LatencyReport, EvalError> {
    if warmup < 1 || reps < 10 {
        return Err(EvalError::BenchArgs { warmup, reps });
    }
    let size = net.config().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::from_fn(&[1, 3, size, size], |_| T::of(rng.random::<f64>()));
    for _ in 0..warmup {
        net.predict(&input)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(net.predict(&input)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median_ms = median(&times);
    Ok(LatencyReport {
        median_ms,
        p5_ms: percentile(&times, 5.0),
        p95_ms: percentile(&times, 95.0),
        fps: 1000.0 / median_ms,
    })
}

/// Shared train and test data, schedule and seed for every ablation row.
#[derive(Debug, Clone)]
pub struct AblationBudget<'a> {
    pub train: &'a [AnnotatedScene],
    pub test: &'a [AnnotatedScene],
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// `S=7` or `scales=1,2`.
    pub label: String,
    pub slices: usize,
    pub lambda_l: f64,
    /// Coverage at each of [`REPORT_THRESHOLDS`], or the row's error.
    pub result: Result<Vec<f64>, String>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,S,lambda_l");
    for t in REPORT_THRESHOLDS {
        write!(out, ",cov_ce_le_{t}").unwrap();
    }
    out.push_str(",error\n");
    for r in rows {
        write!(out, "{},{},{}", r.label, r.slices, r.lambda_l).unwrap();
        match &r.result {
            Ok(cov) => {
                for c in cov {
                    write!(out, ",{c}").unwrap();
                }
                out.push_str(",\n");
            }
            Err(e) => {
                for _ in REPORT_THRESHOLDS {
                    out.push(',');
                }
                writeln!(out, ",{}", e.replace([',', '\n'], ";")).unwrap();
            }
        }
    }
    out
}

fn train_and_score(
    config: &ModelConfig,
    scales: ScaleMask,
    budget: &AblationBudget,
) -> Result<Vec<f64>, EvalError> {
    let net = DvpNet::<f32>::build(config)?;
    let mut trainer = Trainer::new(net, budget.train_config.clone())?.with_scales(scales);
    trainer.run(budget.train)?;
    let codec = trainer.codec().clone();
    let records = evaluate(trainer.net(), &codec, budget.test)?;
    let ces: Vec<f64> = records.iter().map(|r| r.ce).collect();
    Ok(coverage_curve(&ces, &REPORT_THRESHOLDS)?.coverage)
}

/// Train and evaluate one model per slice count. A failing row records its
/// error and the remaining rows still run.
pub fn ablate_s(
    base: &ModelConfig,
    s_values: &[usize],
    budget: &AblationBudget,
) -> Result<Vec<AblationRow>, EvalError> {
    if s_values.is_empty() {
        return Err(EvalError::Ablation("no S values".into()));
    }
    Ok(s_values
        .iter()
        .map(|&s| {
            let config = ModelConfig {
                slices: s,
                ..base.clone()
            };
            AblationRow {
                label: format!("S={s}"),
                slices: s,
                lambda_l: LossWeights::for_slices(s).lambda_l,
                result: train_and_score(&config, ScaleMask::ALL, budget).map_err(|e| e.to_string()),
            }
        })
        .collect())
}

/// Train and evaluate one model per scale subset (1 = stride-32 grid),
/// masking both the loss and the decoder.
pub fn ablate_scales(
    base: &ModelConfig,
    subsets: &[Vec<usize>],
    budget: &AblationBudget,
) -> Result<Vec<AblationRow>, EvalError> {
    if subsets.is_empty() {
        return Err(EvalError::Ablation("no scale subsets".into()));
    }
    let masks = subsets
        .iter()
        .map(|s| ScaleMask::from_scales(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(masks
        .into_iter()
        .map(|mask| AblationRow {
            label: format!("scales={}", mask.label()),
            slices: base.slices,
            lambda_l: LossWeights::for_slices(base.slices).lambda_l,
            result: train_and_score(base, mask, budget).map_err(|e| e.to_string()),
        })
        .collect())
}

const GT_COLOR: [f32; 3] = [0.1, 0.85, 0.2];
const LEFT_COLOR: [f32; 3] = [0.95, 0.2, 0.2];
const RIGHT_COLOR: [f32; 3] = [0.2, 0.45, 1.0];
const VP_COLOR: [f32; 3] = [1.0, 0.9, 0.1];

/// Copy of `image` with ground truth (if any), the predicted polylines and
/// a cross at the predicted vp.
pub fn overlay(image: &RgbImage, detection: &Detection, truth: Option<&AnnotatedScene>) -> RgbImage {
    let mut out = image.clone();
    let stroke = (image.width().max(image.height()) as f64 / 200.0).max(1.0);
    if let Some(t) = truth {
        for seg in &t.main_lines {
            out.draw_segment(seg.a, seg.b, stroke, GT_COLOR, 1.0);
        }
        out.draw_cross(t.vp, 2.0 * stroke, stroke, GT_COLOR);
    }
    out.draw_polyline(detection.left.points(), stroke, LEFT_COLOR);
    out.draw_polyline(detection.right.points(), stroke, RIGHT_COLOR);
    out.draw_cross(detection.vp, 4.0 * stroke, stroke, VP_COLOR);
    out
}

pub fn save_overlay(
    path: &Path,
    image: &RgbImage,
    detection: &Detection,
    truth: Option<&AnnotatedScene>,
) -> Result<(), EvalError> {
    Ok(overlay(image, detection, truth).save_png(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting() {
        let c = coverage_curve(&[0.5, 1.5, 3.0], &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!(c.coverage, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(coverage_curve(&[2.0], &[1.0]).unwrap().coverage, vec![0.0]);
        assert!(coverage_curve(&[], &[1.0]).is_err());
        assert!(coverage_curve(&[1.0], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn order_statistics() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&s, 5.0), 1.0);
        assert_eq!(percentile(&s, 95.0), 19.0);
        assert_eq!(median(&s), 10.5);
        assert_eq!(median(&[1.0, 2.0, 7.0]), 2.0);
    }

    #[test]
    fn ablation_table_keeps_failed_rows() {
        let rows = vec![
            AblationRow {
                label: "S=3".into(),
                slices: 3,
                lambda_l: 2.5 / 3.0,
                result: Ok(vec![0.1, 0.2, 0.3, 0.4]),
            },
            AblationRow {
                label: "S=1".into(),
                slices: 1,
                lambda_l: 2.5,
                result: Err("bad, config".into()),
            },
        ];
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        let width = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == width));
        assert!(lines[2].ends_with("bad; config"));
    }
}
