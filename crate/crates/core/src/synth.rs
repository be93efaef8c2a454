//! Procedural perspective scenes with exact labels.
//!
//! A scene is a smooth two-colour gradient with Gaussian noise, two thick
//! high-contrast segments lying on rays from the vanishing point, and a few
//! thinner, fainter distractor segments whose extensions miss the vanishing
//! point.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::codec::SceneLabels;
use crate::dataio::{save_annotations, validate, AnnotationRecord, DataError};
use crate::geometry::{clip_to_rect, intersect, point_line_distance, LineSegment, Point2};
use crate::image::{ImageError, RgbImage};

/// Generation attempts before giving up on a configuration.
pub const MAX_ATTEMPTS: usize = 100;
/// Distractor lines must miss the vanishing point by more than this.
pub const DISTRACTOR_CLEARANCE: f64 = 3.0;
/// Main segments start at least this fraction of the image size from the vp.
pub const MIN_VP_OFFSET: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("no valid scene after {0} attempts")]
    RetriesExhausted(usize),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// The vp is drawn from the square inset by this fraction on each side.
    pub vp_margin: f64,
    /// Minimum angle between the two main rays, degrees.
    pub min_line_angle_sep: f64,
    /// Inclusive range of distractor segment counts.
    pub distractors: (usize, usize),
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            vp_margin: 0.1,
            min_line_angle_sep: 15.0,
            distractors: (2, 6),
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn with_size(image_size: usize, seed: u64) -> Self {
        Self {
            image_size,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.image_size < 16 {
            return bad(format!("image size {} below 16", self.image_size));
        }
        if !(0.0..0.45).contains(&self.vp_margin) {
            return bad(format!("vp margin {} outside [0, 0.45)", self.vp_margin));
        }
        if !(self.min_line_angle_sep > 0.0 && self.min_line_angle_sep <= 90.0) {
            return bad(format!(
                "line angle separation {} outside (0, 90]",
                self.min_line_angle_sep
            ));
        }
        if self.distractors.0 > self.distractors.1 {
            return bad(format!("distractor range {:?} is empty", self.distractors));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} invalid", self.noise_sigma));
        }
        Ok(())
    }

    /// Deterministic generator for scene `index` of this configuration.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedScene {
    pub image: RgbImage,
    pub main_lines: [LineSegment; 2],
    pub vp: Point2,
}

impl AnnotatedScene {
    pub fn labels(&self) -> SceneLabels {
        SceneLabels {
            vp: self.vp,
            lines: self.main_lines,
        }
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }

    pub fn record(&self, image_path: String) -> AnnotationRecord {
        AnnotationRecord::from_labels(image_path, self.image.width(), self.image.height(), &self.labels())
    }
}

/// Distance along the unit direction `d` from `p` to the border of the
/// `[0, size]²` square.
fn exit_distance(p: Point2, d: Point2, size: f64) -> f64 {
    let axis = |pos: f64, dir: f64| {
        if dir > 1e-12 {
            (size - pos) / dir
        } else if dir < -1e-12 {
            -pos / dir
        } else {
            f64::INFINITY
        }
    };
    axis(p.x, d.x).min(axis(p.y, d.y))
}

fn main_segment(rng: &mut impl Rng, vp: Point2, angle: f64, size: f64) -> Option<LineSegment> {
    let dir = Point2::new(angle.cos(), angle.sin());
    let exit = exit_distance(vp, dir, size) - 1.0;
    let start_min = MIN_VP_OFFSET * size;
    let min_len = 0.15 * size;
    if exit - start_min < min_len {
        return None;
    }
    let start_max = (exit - min_len).min(0.35 * exit).max(start_min);
    let start = rng.random_range(start_min..=start_max);
    let end_lo = start + min_len.max(0.6 * (exit - start));
    let end = rng.random_range(end_lo.min(exit)..=exit);
    let at = |t: f64| Point2::new(vp.x + t * dir.x, vp.y + t * dir.y);
    LineSegment::new(at(start), at(end)).ok()
}

fn random_color(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn render(
    rng: &mut impl Rng,
    config: &SceneConfig,
    main: &[LineSegment; 2],
    distractors: &[LineSegment],
) -> RgbImage {
    let n = config.image_size;
    let size = n as f64;
    let c0 = random_color(rng, 0.2, 0.8);
    let c1 = random_color(rng, 0.2, 0.8);
    let g = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (g.cos(), g.sin());
    let mut img = RgbImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let t = (((x as f64 + 0.5) / size - 0.5) * gx + ((y as f64 + 0.5) / size - 0.5) * gy)
                / std::f64::consts::SQRT_2
                + 0.5;
            let t = t as f32;
            img.set(x, y, std::array::from_fn(|k| c0[k] + t * (c1[k] - c0[k])));
        }
    }
    let mean_lum = 0.5 * (luminance(c0) + luminance(c1));
    for d in distractors {
        let width = rng.random_range(1.0..2.0);
        let shade = rng.random_range(0.0..1.0f32);
        let opacity = rng.random_range(0.35..0.7);
        img.draw_segment(d.a, d.b, width, [shade; 3], opacity);
    }
    let ink = if mean_lum > 0.5 { 0.02 } else { 0.98 };
    for m in main {
        let width = rng.random_range(2.0..4.0);
        img.draw_segment(m.a, m.b, width, [ink; 3], 1.0);
    }
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma as f32).expect("valid sigma");
        for y in 0..n {
            for x in 0..n {
                let p = img.get(x, y);
                img.set(x, y, p.map(|v| v + noise.sample(rng)));
            }
        }
    }
    img.clamp();
    img
}

fn try_scene(config: &SceneConfig, rng: &mut impl Rng) -> Option<AnnotatedScene> {
    let size = config.image_size as f64;
    let m = config.vp_margin * size;
    let vp = Point2::new(
        rng.random_range(m..=size - m),
        rng.random_range(m..=size - m),
    );
    let sep_min = config.min_line_angle_sep.to_radians();
    let a1 = rng.random_range(0.0..2.0 * PI);
    let sep = rng.random_range(sep_min..=PI - sep_min);
    let a2 = if rng.random_bool(0.5) { a1 + sep } else { a1 - sep };
    let main = [
        main_segment(rng, vp, a1, size)?,
        main_segment(rng, vp, a2, size)?,
    ];
    let labels = SceneLabels { vp, lines: main };
    let record = AnnotationRecord::from_labels(String::new(), config.image_size, config.image_size, &labels);
    if !validate(&record).is_empty() {
        return None;
    }

    let count = rng.random_range(config.distractors.0..=config.distractors.1);
    let mut distractors = Vec::with_capacity(count);
    for _ in 0..count {
        let seg = (0..MAX_ATTEMPTS).find_map(|_| {
            let a = Point2::new(rng.random_range(0.0..size), rng.random_range(0.0..size));
            let angle = rng.random_range(0.0..2.0 * PI);
            let len = rng.random_range(0.1..0.4) * size;
            let b = Point2::new(a.x + len * angle.cos(), a.y + len * angle.sin());
            let seg = clip_to_rect(&LineSegment::new(a, b).ok()?, size, size)?;
            (seg.length() > 2.0 && point_line_distance(vp, &seg.line()) > DISTRACTOR_CLEARANCE)
                .then_some(seg)
        })?;
        distractors.push(seg);
    }
    let image = render(rng, config, &main, &distractors);
    Some(AnnotatedScene {
        image,
        main_lines: main,
        vp,
    })
}

/// One random scene. The vp is the exact intersection of the two main
/// segments' extensions.
pub fn generate_scene(config: &SceneConfig, rng: &mut impl Rng) -> Result<AnnotatedScene, SynthError> {
    config.validate()?;
    (0..MAX_ATTEMPTS)
        .find_map(|_| try_scene(config, rng))
        .ok_or(SynthError::RetriesExhausted(MAX_ATTEMPTS))
}

/// Scene `index` of the configuration's deterministic sequence.
pub fn scene_at(config: &SceneConfig, index: u64) -> Result<AnnotatedScene, SynthError> {
    generate_scene(config, &mut config.rng_for(index))
}

/// Random horizontal flip (probability `flip_prob`) and rotation about the
/// image centre by up to `max_rot_deg`, applied to image and labels alike.
/// Segments are clipped to the image. When the result would break the
/// labeling rules, the original scene is returned unchanged.
pub fn augment(scene: &AnnotatedScene, rng: &mut impl Rng, flip_prob: f64, max_rot_deg: f64) -> AnnotatedScene {
    let flip = rng.random_bool(flip_prob.clamp(0.0, 1.0));
    let angle = if max_rot_deg > 0.0 {
        rng.random_range(-max_rot_deg..=max_rot_deg).to_radians()
    } else {
        0.0
    };
    transform(scene, flip, angle).unwrap_or_else(|| scene.clone())
}

/// Flip (if `flip`) then rotate by `angle` radians about the centre.
pub fn transform(scene: &AnnotatedScene, flip: bool, angle: f64) -> Option<AnnotatedScene> {
    let (w, h) = (scene.image.width() as f64, scene.image.height() as f64);
    let center = Point2::new(w / 2.0, h / 2.0);
    let fwd = |p: Point2| {
        let p = if flip { Point2::new(w - p.x, p.y) } else { p };
        if angle == 0.0 {
            p
        } else {
            p.rotated_about(&center, angle)
        }
    };
    let vp = fwd(scene.vp);
    let mut lines = [scene.main_lines[0]; 2];
    for (dst, src) in lines.iter_mut().zip(&scene.main_lines) {
        let moved = LineSegment::new(fwd(src.a), fwd(src.b)).ok()?;
        *dst = clip_to_rect(&moved, w, h)?;
    }
    let labels = SceneLabels { vp, lines };
    let record = AnnotationRecord::from_labels(String::new(), scene.image.width(), scene.image.height(), &labels);
    let derived = intersect(&lines[0].line(), &lines[1].line()).ok()?;
    let record = AnnotationRecord {
        vp: Some([derived.x, derived.y]),
        ..record
    };
    if !validate(&record).is_empty() || derived.distance(&vp) > 1e-6 {
        return None;
    }

    let image = if !flip && angle == 0.0 {
        scene.image.clone()
    } else {
        let mut out = RgbImage::new(scene.image.width(), scene.image.height());
        for y in 0..out.height() {
            for x in 0..out.width() {
                let q = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let q = if angle == 0.0 { q } else { q.rotated_about(&center, -angle) };
                let q = if flip { Point2::new(w - q.x, q.y) } else { q };
                out.set(x, y, scene.image.sample(q.x, q.y));
            }
        }
        out
    };
    Some(AnnotatedScene {
        image,
        main_lines: lines,
        vp,
    })
}

/// Paths and sizes of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train_annotations: PathBuf,
    pub test_annotations: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
}

/// Number of training scenes for a split, `round(count · ratio)`.
pub fn train_count(count: usize, split_ratio: f64) -> usize {
    ((count as f64 * split_ratio).round() as usize).min(count)
}

/// Generate `count` scenes into `out_dir`: PNGs under `images/train` and
/// `images/test`, annotations in `train.jsonl` and `test.jsonl`. Scene `i`
/// is drawn from stream `i` of the configured seed, so output is identical
/// for identical configurations.
pub fn build_dataset(
    config: &SceneConfig,
    count: usize,
    split_ratio: f64,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    if count < 2 {
        return Err(SynthError::InvalidConfig(format!("dataset count {count} below 2")));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(SynthError::InvalidConfig(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    let n_train = train_count(count, split_ratio);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(count - n_train);
    for i in 0..count {
        let scene = scene_at(config, i as u64)?;
        let split = if i < n_train { "train" } else { "test" };
        let rel = format!("images/{split}/{i:06}.png");
        scene.image.save_png(&out_dir.join(&rel))?;
        let rec = scene.record(rel);
        if i < n_train {
            train.push(rec);
        } else {
            test.push(rec);
        }
    }
    let train_annotations = out_dir.join("train.jsonl");
    let test_annotations = out_dir.join("test.jsonl");
    save_annotations(&train, &train_annotations)?;
    save_annotations(&test, &test_annotations)?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        train_annotations,
        test_annotations,
        train_count: train.len(),
        test_count: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vp_in_inset_and_on_both_lines() {
        let cfg = SceneConfig::with_size(128, 3);
        for i in 0..50 {
            let s = scene_at(&cfg, i).unwrap();
            assert!((12.8..=115.2).contains(&s.vp.x) && (12.8..=115.2).contains(&s.vp.y));
            for l in &s.main_lines {
                assert!(point_line_distance(s.vp, &l.line()) < 1e-6);
                assert!(l.a.distance(&s.vp) >= MIN_VP_OFFSET * 128.0 - 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_per_index() {
        let cfg = SceneConfig::with_size(96, 11);
        assert_eq!(scene_at(&cfg, 5).unwrap(), scene_at(&cfg, 5).unwrap());
        assert_ne!(scene_at(&cfg, 5).unwrap().vp, scene_at(&cfg, 6).unwrap().vp);
    }

    #[test]
    fn flip_and_identity() {
        let seg = |a: (f64, f64), b: (f64, f64)| {
            LineSegment::new(Point2::new(a.0, a.1), Point2::new(b.0, b.1)).unwrap()
        };
        let s = AnnotatedScene {
            image: RgbImage::new(416, 416),
            main_lines: [seg((150.0, 150.0), (200.0, 250.0)), seg((60.0, 150.0), (20.0, 250.0))],
            vp: Point2::new(100.0, 50.0),
        };
        let f = transform(&s, true, 0.0).unwrap();
        assert_eq!(f.vp, Point2::new(316.0, 50.0));
        assert_eq!(f.main_lines[0].a, Point2::new(266.0, 150.0));
        assert_eq!(transform(&s, false, 0.0).unwrap(), s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &mut rng, 0.0, 0.0), s);
    }

    #[test]
    fn invalid_configs() {
        let mut c = SceneConfig::default();
        c.vp_margin = 0.45;
        assert!(c.validate().is_err());
        c.vp_margin = 0.1;
        c.min_line_angle_sep = 0.0;
        assert!(c.validate().is_err());
        c.min_line_angle_sep = 91.0;
        assert!(c.validate().is_err());
    }
}
