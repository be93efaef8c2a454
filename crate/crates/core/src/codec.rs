//! Mapping between image-space labels and the per-cell prediction maps.
//!
//! Every grid cell predicts `B = 3 + 4S` channels in the logical order
//! `vp_x, vp_y, conf, left[0..S].(x, y), right[0..S].(x, y)`. The vp
//! channels pass through a sigmoid and are offsets inside the cell; the line
//! channels are unbounded offsets from the cell's top-left corner, in grid
//! units. The confidence channel is a logit.

use std::cmp::Ordering;

use thiserror::Error;

use crate::dataio::{label_violations, Violation};
use crate::geometry::{discretize, GeometryError, LineSegment, Point2, Polyline};
use crate::model::ModelConfig;
use crate::nn::{sigmoid, Scalar, Tensor};

/// Logit magnitude used for saturated confidences and degenerate offsets.
pub const SATURATED_LOGIT: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("vanishing point ({x}, {y}) is not strictly inside the {size}×{size} image")]
    VpOutside { x: f64, y: f64, size: usize },
    #[error("prediction shape mismatch: {0}")]
    Shape(String),
    #[error("invalid channel permutation: {0}")]
    Layout(String),
    #[error("no scale enabled")]
    NoScale,
    #[error("non-finite prediction at scale {scale}, cell ({col}, {row})")]
    NonFinite { scale: usize, col: usize, row: usize },
    #[error("labels violate the annotation rules: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidLabels(Vec<Violation>),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One square prediction grid: `n` cells per side, `stride` pixels per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    pub n: usize,
    pub stride: usize,
}

impl GridGeometry {
    /// The three grids for a square input, coarsest first.
    pub fn for_input(input_size: usize) -> [GridGeometry; 3] {
        [32, 16, 8].map(|stride| GridGeometry {
            n: input_size / stride,
            stride,
        })
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    /// `(col, row)` of the cell containing `p`, clamped to the grid.
    pub fn cell_of(&self, p: Point2) -> (usize, usize) {
        let idx = |v: f64| ((v / self.stride as f64).floor().max(0.0) as usize).min(self.n - 1);
        (idx(p.x), idx(p.y))
    }
}

/// Per-cell channel layout. `perm[logical]` is the physical channel that
/// stores logical channel `logical`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadLayout {
    slices: usize,
    perm: Vec<usize>,
}

impl HeadLayout {
    pub fn new(slices: usize) -> Self {
        Self {
            slices,
            perm: (0..3 + 4 * slices).collect(),
        }
    }

    pub fn with_permutation(slices: usize, perm: Vec<usize>) -> Result<Self, CodecError> {
        let b = 3 + 4 * slices;
        let mut seen = vec![false; b];
        if perm.len() != b {
            return Err(CodecError::Layout(format!(
                "{} entries for {b} channels",
                perm.len()
            )));
        }
        for &p in &perm {
            if p >= b || std::mem::replace(&mut seen[p], true) {
                return Err(CodecError::Layout(format!("channel {p} repeated or out of range")));
            }
        }
        Ok(Self { slices, perm })
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    /// Channels per cell, `B = 3 + 4S`.
    pub fn channels(&self) -> usize {
        self.perm.len()
    }

    pub fn physical(&self, logical: usize) -> usize {
        self.perm[logical]
    }

    pub fn vp_x(&self) -> usize {
        self.perm[0]
    }

    pub fn vp_y(&self) -> usize {
        self.perm[1]
    }

    pub fn conf(&self) -> usize {
        self.perm[2]
    }

    /// Physical channel of coordinate `xy` (0 = x, 1 = y) of point `i` on
    /// line `line` (0 = left, 1 = right).
    pub fn line_point(&self, line: usize, i: usize, xy: usize) -> usize {
        self.perm[3 + line * 2 * self.slices + 2 * i + xy]
    }
}

/// Which grids receive a positive cell during encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositivePolicy {
    /// The cell containing the vp is positive at every scale.
    #[default]
    AllScales,
    /// Only the given scale (0 = stride 32) has a positive cell.
    Only(usize),
}

/// Subset of the three scales used for loss and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleMask(pub [bool; 3]);

impl Default for ScaleMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl ScaleMask {
    pub const ALL: ScaleMask = ScaleMask([true; 3]);

    /// From 1-based scale numbers, 1 = stride 32.
    pub fn from_scales(scales: &[usize]) -> Result<Self, CodecError> {
        let mut m = [false; 3];
        for &s in scales {
            if !(1..=3).contains(&s) {
                return Err(CodecError::Layout(format!("scale {s} outside 1..=3")));
            }
            m[s - 1] = true;
        }
        if !m.iter().any(|&b| b) {
            return Err(CodecError::NoScale);
        }
        Ok(Self(m))
    }

    pub fn contains(&self, scale: usize) -> bool {
        self.0[scale]
    }

    /// 1-based scale numbers, e.g. `"1+2"`.
    pub fn label(&self) -> String {
        (0..3)
            .filter(|&s| self.0[s])
            .map(|s| (s + 1).to_string())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// The two labeled lines and the vanishing point they define.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneLabels {
    pub vp: Point2,
    pub lines: [LineSegment; 2],
}

impl SceneLabels {
    /// Left/right assignment: the segment whose midpoint has the smaller x
    /// is left, ties broken by smaller y. Each segment is oriented to start
    /// at the endpoint nearer the vp so point `i` means the same thing
    /// across scenes.
    pub fn canonical_lines(&self) -> [LineSegment; 2] {
        let orient = |s: &LineSegment| {
            if s.b.distance(&self.vp) < s.a.distance(&self.vp) {
                s.reversed()
            } else {
                *s
            }
        };
        let [l1, l2] = self.lines.each_ref().map(orient);
        let (m1, m2) = (l1.midpoint(), l2.midpoint());
        if (m2.x, m2.y) < (m1.x, m1.y) {
            [l2, l1]
        } else {
            [l1, l2]
        }
    }
}

/// Encoded targets for one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTarget {
    /// `(col, row)` of the positive cell, if this scale has one.
    pub cell: Option<(usize, usize)>,
    /// Fractional vp offset inside the positive cell, each in `[0, 1)`.
    pub vp_offset: [f64; 2],
    /// Interleaved `(x, y)` offsets from the cell corner in grid units:
    /// `S` left points followed by `S` right points.
    pub line_offsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub scales: [ScaleTarget; 3],
}

/// A decoded vanishing point with its supporting polylines.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub vp: Point2,
    pub confidence: f64,
    pub left: Polyline,
    pub right: Polyline,
    /// Producing grid, 0 = stride 32.
    pub scale: usize,
    /// `(col, row)` of the producing cell.
    pub cell: (usize, usize),
}

/// Encoder/decoder for one model geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub grids: [GridGeometry; 3],
    pub layout: HeadLayout,
    pub image_size: usize,
    pub policy: PositivePolicy,
    pub scales: ScaleMask,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    logit: f64,
    scale: usize,
    row: usize,
    col: usize,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.logit
        .total_cmp(&a.logit)
        .then(a.scale.cmp(&b.scale))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        -SATURATED_LOGIT
    } else if p >= 1.0 {
        SATURATED_LOGIT
    } else {
        (p / (1.0 - p)).ln()
    }
}

impl Codec {
    pub fn new(image_size: usize, slices: usize) -> Self {
        Self {
            grids: GridGeometry::for_input(image_size),
            layout: HeadLayout::new(slices),
            image_size,
            policy: PositivePolicy::default(),
            scales: ScaleMask::ALL,
        }
    }

    pub fn for_model(config: &ModelConfig) -> Self {
        Self::new(config.input_size, config.slices)
    }

    pub fn slices(&self) -> usize {
        self.layout.slices()
    }

    /// Targets for labels in input-pixel coordinates. Labels must satisfy
    /// the annotation rules of [`crate::dataio::validate`].
    pub fn encode_targets(&self, labels: &SceneLabels) -> Result<Targets, CodecError> {
        let vp = labels.vp;
        let violations = label_violations(
            self.image_size,
            self.image_size,
            labels.lines.map(|s| [s.a, s.b]),
            Some(vp),
        );
        if violations.iter().any(|v| matches!(v, Violation::VpOutside { .. })) {
            return Err(CodecError::VpOutside {
                x: vp.x,
                y: vp.y,
                size: self.image_size,
            });
        }
        if !violations.is_empty() {
            return Err(CodecError::InvalidLabels(violations));
        }
        let lines = labels.canonical_lines();
        let polys = [
            discretize(&lines[0], self.slices())?,
            discretize(&lines[1], self.slices())?,
        ];
        let scales = [0, 1, 2].map(|s| {
            let g = self.grids[s];
            let positive = match self.policy {
                PositivePolicy::AllScales => true,
                PositivePolicy::Only(only) => only == s,
            };
            let st = g.stride as f64;
            let (col, row) = g.cell_of(vp);
            let (cx, cy) = (col as f64, row as f64);
            let line_offsets = polys
                .iter()
                .flat_map(|p| p.points().iter())
                .flat_map(|p| [p.x / st - cx, p.y / st - cy])
                .collect();
            ScaleTarget {
                cell: positive.then_some((col, row)),
                vp_offset: [vp.x / st - cx, vp.y / st - cy],
                line_offsets,
            }
        });
        Ok(Targets { scales })
    }

    /// Dense per-scale target and mask tensors, each `B×N×N`. The mask is 1
    /// on every confidence channel and on the coordinate channels of the
    /// positive cell.
    pub fn dense_targets(&self, targets: &Targets) -> [(Tensor<f64>, Tensor<f64>); 3] {
        [0, 1, 2].map(|s| {
            let g = self.grids[s];
            let b = self.layout.channels();
            let mut t = Tensor::zeros(&[b, g.n, g.n]);
            let mut m = Tensor::zeros(&[b, g.n, g.n]);
            let plane = g.cells();
            for cell in 0..plane {
                m.data_mut()[self.layout.conf() * plane + cell] = 1.0;
            }
            let st = &targets.scales[s];
            if let Some((col, row)) = st.cell {
                let at = |ch: usize| ch * plane + row * g.n + col;
                let mut set = |logical: usize, v: f64| {
                    let i = at(self.layout.physical(logical));
                    t.data_mut()[i] = v;
                    m.data_mut()[i] = 1.0;
                };
                set(0, st.vp_offset[0]);
                set(1, st.vp_offset[1]);
                set(2, 1.0);
                for (k, &v) in st.line_offsets.iter().enumerate() {
                    set(3 + k, v);
                }
            }
            (t, m)
        })
    }

    /// Pre-activation maps (`1×B×N×N`) that decode exactly to `targets`:
    /// inverse sigmoid on the vp offsets, identity on line offsets,
    /// confidence logits of ±[`SATURATED_LOGIT`].
    pub fn ideal_logits(&self, targets: &Targets) -> [Tensor<f64>; 3] {
        [0, 1, 2].map(|s| {
            let g = self.grids[s];
            let b = self.layout.channels();
            let plane = g.cells();
            let mut t = Tensor::zeros(&[1, b, g.n, g.n]);
            let conf = self.layout.conf();
            for cell in 0..plane {
                t.data_mut()[conf * plane + cell] = -SATURATED_LOGIT;
            }
            let st = &targets.scales[s];
            if let Some((col, row)) = st.cell {
                let cell = row * g.n + col;
                let d = t.data_mut();
                d[self.layout.vp_x() * plane + cell] = logit(st.vp_offset[0]);
                d[self.layout.vp_y() * plane + cell] = logit(st.vp_offset[1]);
                d[conf * plane + cell] = SATURATED_LOGIT;
                for (k, &v) in st.line_offsets.iter().enumerate() {
                    d[self.layout.physical(3 + k) * plane + cell] = v;
                }
            }
            t
        })
    }

    fn check<T: Scalar>(&self, preds: &[Tensor<T>; 3], item: usize) -> Result<(), CodecError> {
        if !self.scales.0.iter().any(|&b| b) {
            return Err(CodecError::NoScale);
        }
        for (s, p) in preds.iter().enumerate() {
            let g = self.grids[s];
            let shape = p.shape();
            if shape.len() != 4
                || shape[1] != self.layout.channels()
                || shape[2] != g.n
                || shape[3] != g.n
                || item >= shape[0]
            {
                return Err(CodecError::Shape(format!(
                    "scale {s}: got {shape:?}, expected N×{}×{}×{} with item {item}",
                    self.layout.channels(),
                    g.n,
                    g.n
                )));
            }
        }
        Ok(())
    }

    fn candidates<T: Scalar>(&self, preds: &[Tensor<T>; 3], item: usize) -> Vec<Candidate> {
        let mut out = Vec::new();
        for (scale, p) in preds.iter().enumerate() {
            if !self.scales.contains(scale) {
                continue;
            }
            let g = self.grids[scale];
            let plane = g.cells();
            let base = (item * self.layout.channels() + self.layout.conf()) * plane;
            for row in 0..g.n {
                for col in 0..g.n {
                    out.push(Candidate {
                        logit: p.data()[base + row * g.n + col].f64(),
                        scale,
                        row,
                        col,
                    });
                }
            }
        }
        out
    }

    fn detection<T: Scalar>(
        &self,
        preds: &[Tensor<T>; 3],
        item: usize,
        c: Candidate,
    ) -> Result<Detection, CodecError> {
        let g = self.grids[c.scale];
        let plane = g.cells();
        let map = preds[c.scale].data();
        let at = |ch: usize| map[(item * self.layout.channels() + ch) * plane + c.row * g.n + c.col].f64();
        let st = g.stride as f64;
        let (cx, cy) = (c.col as f64, c.row as f64);
        let size = self.image_size as f64;
        let vp_x = (sigmoid(at(self.layout.vp_x())) + cx) * st;
        let vp_y = (sigmoid(at(self.layout.vp_y())) + cy) * st;
        let non_finite = CodecError::NonFinite {
            scale: c.scale,
            col: c.col,
            row: c.row,
        };
        if !(vp_x.is_finite() && vp_y.is_finite() && c.logit.is_finite()) {
            return Err(non_finite);
        }
        let line = |l: usize| {
            let pts = (0..self.slices())
                .map(|i| {
                    Point2::new(
                        (at(self.layout.line_point(l, i, 0)) + cx) * st,
                        (at(self.layout.line_point(l, i, 1)) + cy) * st,
                    )
                })
                .collect();
            Polyline::new(pts).map_err(|_| non_finite.clone())
        };
        Ok(Detection {
            vp: Point2::new(vp_x.clamp(0.0, size), vp_y.clamp(0.0, size)),
            confidence: sigmoid(c.logit),
            left: line(0)?,
            right: line(1)?,
            scale: c.scale,
            cell: (c.col, c.row),
        })
    }

    /// The highest-confidence cell over all enabled scales; ties go to the
    /// coarsest scale, then row-major order.
    pub fn decode<T: Scalar>(
        &self,
        preds: &[Tensor<T>; 3],
        item: usize,
    ) -> Result<Detection, CodecError> {
        self.check(preds, item)?;
        let best = self
            .candidates(preds, item)
            .into_iter()
            .min_by(rank)
            .ok_or(CodecError::NoScale)?;
        self.detection(preds, item, best)
    }

    /// The `k` best cells, ordered by confidence then (scale, row, col).
    pub fn decode_topk<T: Scalar>(
        &self,
        preds: &[Tensor<T>; 3],
        item: usize,
        k: usize,
    ) -> Result<Vec<Detection>, CodecError> {
        self.check(preds, item)?;
        let mut cands = self.candidates(preds, item);
        cands.sort_by(rank);
        cands
            .into_iter()
            .take(k)
            .map(|c| self.detection(preds, item, c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> LineSegment {
        LineSegment::new(Point2::new(ax, ay), Point2::new(bx, by)).unwrap()
    }

    fn labels(vp: Point2) -> SceneLabels {
        SceneLabels {
            vp,
            lines: [
                seg(vp.x - 40.0, vp.y + 60.0, vp.x - 10.0, vp.y + 15.0),
                seg(vp.x + 12.0, vp.y + 20.0, vp.x + 45.0, vp.y + 75.0),
            ],
        }
    }

    #[test]
    fn grid_arithmetic() {
        let codec = Codec::new(416, 23);
        let t = codec.encode_targets(&labels(Point2::new(100.0, 50.0))).unwrap();
        assert_eq!(t.scales[0].cell, Some((3, 1)));
        assert_eq!(t.scales[0].vp_offset, [0.125, 0.5625]);
        let t = codec.encode_targets(&labels(Point2::new(208.0, 208.0))).unwrap();
        assert_eq!(t.scales[0].cell, Some((6, 6)));
        assert_eq!(t.scales[0].vp_offset, [0.5, 0.5]);
        assert_eq!(t.scales[2].cell, Some((26, 26)));
    }

    #[test]
    fn vp_outside_rejected() {
        let codec = Codec::new(128, 7);
        for vp in [Point2::new(0.0, 5.0), Point2::new(128.0, 5.0), Point2::new(5.0, -1.0)] {
            assert!(matches!(
                codec.encode_targets(&labels(vp)),
                Err(CodecError::VpOutside { .. })
            ));
        }
    }

    #[test]
    fn left_right_assignment_is_label_order_independent() {
        let l = labels(Point2::new(60.0, 40.0));
        let swapped = SceneLabels {
            vp: l.vp,
            lines: [l.lines[1].reversed(), l.lines[0].reversed()],
        };
        assert_eq!(l.canonical_lines(), swapped.canonical_lines());
        let [left, right] = l.canonical_lines();
        assert!(left.midpoint().x < right.midpoint().x);
        assert!(left.a.distance(&l.vp) < left.b.distance(&l.vp));
    }

    #[test]
    fn one_positive_cell_per_scale() {
        let codec = Codec::new(128, 7);
        let t = codec.encode_targets(&labels(Point2::new(70.3, 33.9))).unwrap();
        let dense = codec.dense_targets(&t);
        let conf = codec.layout.conf();
        let mut positives = 0;
        for (s, (target, mask)) in dense.iter().enumerate() {
            let plane = codec.grids[s].cells();
            let confs = &target.data()[conf * plane..(conf + 1) * plane];
            positives += confs.iter().filter(|&&v| v == 1.0).count();
            let masked = mask.data().iter().filter(|&&v| v == 1.0).count();
            assert_eq!(masked, plane + codec.layout.channels() - 1);
        }
        assert_eq!(positives, 3);
    }

    #[test]
    fn single_scale_policy() {
        let mut codec = Codec::new(128, 7);
        codec.policy = PositivePolicy::Only(1);
        let t = codec.encode_targets(&labels(Point2::new(70.3, 33.9))).unwrap();
        let cells: Vec<_> = t.scales.iter().map(|s| s.cell.is_some()).collect();
        assert_eq!(cells, [false, true, false]);
    }

    #[test]
    fn decode_cell_center() {
        let codec = Codec::new(416, 2);
        let mut preds = [0, 1, 2].map(|s| {
            let g = codec.grids[s];
            let mut t = Tensor::<f64>::zeros(&[1, 11, g.n, g.n]);
            let plane = g.cells();
            for c in 0..plane {
                t.data_mut()[2 * plane + c] = -50.0;
            }
            t
        });
        preds[0].data_mut()[2 * 169] = 0.0;
        let d = codec.decode(&preds, 0).unwrap();
        assert_eq!(d.vp, Point2::new(16.0, 16.0));
        assert_eq!(d.confidence, 0.5);
        assert_eq!((d.scale, d.cell), (0, (0, 0)));
    }

    #[test]
    fn ties_go_to_coarsest_scale() {
        let codec = Codec::new(128, 2);
        let preds = [0, 1, 2].map(|s| {
            let g = codec.grids[s];
            Tensor::<f64>::zeros(&[1, 11, g.n, g.n])
        });
        let d = codec.decode(&preds, 0).unwrap();
        assert_eq!((d.scale, d.cell), (0, (0, 0)));
        let mut masked = codec.clone();
        masked.scales = ScaleMask::from_scales(&[2, 3]).unwrap();
        assert_eq!(masked.decode(&preds, 0).unwrap().scale, 1);
    }

    #[test]
    fn topk_full_sort_and_k1() {
        let codec = Codec::new(96, 3);
        let mut state = 17u64;
        let preds = [0, 1, 2].map(|s| {
            let g = codec.grids[s];
            Tensor::<f64>::from_fn(&[1, 15, g.n, g.n], |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                // coarse values force ties
                ((state >> 40) % 7) as f64 - 3.0
            })
        });
        let total: usize = codec.grids.iter().map(|g| g.cells()).sum();
        let all = codec.decode_topk(&preds, 0, total + 5).unwrap();
        assert_eq!(all.len(), total);
        for w in all.windows(2) {
            let key = |d: &Detection| (d.scale, d.cell.1, d.cell.0);
            assert!(
                w[0].confidence > w[1].confidence
                    || (w[0].confidence == w[1].confidence && key(&w[0]) < key(&w[1]))
            );
        }
        assert_eq!(codec.decode_topk(&preds, 0, 1).unwrap()[0], codec.decode(&preds, 0).unwrap());
    }

    #[test]
    fn shape_mismatch_reported() {
        let codec = Codec::new(128, 7);
        let preds = [0, 1, 2].map(|_| Tensor::<f64>::zeros(&[1, 31, 4, 4]));
        assert!(matches!(codec.decode(&preds, 0), Err(CodecError::Shape(_))));
    }

    #[test]
    fn bad_permutations_rejected() {
        assert!(HeadLayout::with_permutation(2, vec![0; 11]).is_err());
        assert!(HeadLayout::with_permutation(2, (0..10).collect()).is_err());
        assert!(HeadLayout::with_permutation(2, (0..11).rev().collect()).is_ok());
    }
}
