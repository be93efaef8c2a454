//! Planar projective geometry used for labels, targets and the consistency
//! error metric.
//!
//! Lines are kept in homogeneous form `a·x + b·y + c = 0`. Intersections are
//! computed with the homogeneous cross product, and the RMS point-to-line
//! distance through a fixed point is solved in closed form from the 2×2
//! second-moment matrix.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Segments shorter than this are degenerate.
pub const MIN_SEGMENT_LENGTH: f64 = 1e-9;
/// Two unit-normalized lines whose cross product has `|w|` at or below this
/// are treated as parallel.
pub const PARALLEL_TOLERANCE: f64 = 1e-12;
/// Ground-truth edges are resampled to this many points before scoring.
pub const EDGE_SAMPLES: usize = 64;
/// Image diagonal length after rescaling for the consistency error.
pub const DIAGONAL_UNITS: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate segment: endpoints coincide at ({x}, {y})")]
    DegenerateSegment { x: f64, y: f64 },
    #[error("lines are parallel and have no finite intersection")]
    ParallelLines,
    #[error("slice count must be at least 2, got {0}")]
    TooFewSlices(usize),
    #[error("edge point set is empty")]
    EmptyEdge,
    #[error("no edges supplied")]
    NoEdges,
    #[error("angle sweep needs at least 2 steps, got {0}")]
    TooFewAngles(usize),
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn scaled(&self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    /// Rotate about `center` by `angle` radians (counter-clockwise in a
    /// y-up frame, clockwise on screen).
    pub fn rotated_about(&self, center: &Point2, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        let dx = self.x - center.x;
        let dy = self.y - center.y;
        Point2::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub a: Point2,
    pub b: Point2,
}

impl LineSegment {
    pub fn new(a: Point2, b: Point2) -> Result<Self, GeometryError> {
        if !a.is_finite() || !b.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if a.distance(&b) <= MIN_SEGMENT_LENGTH {
            return Err(GeometryError::DegenerateSegment { x: a.x, y: a.y });
        }
        Ok(Self { a, b })
    }

    pub fn length(&self) -> f64 {
        self.a.distance(&self.b)
    }

    pub fn midpoint(&self) -> Point2 {
        self.a.lerp(&self.b, 0.5)
    }

    pub fn reversed(&self) -> LineSegment {
        LineSegment {
            a: self.b,
            b: self.a,
        }
    }

    /// The infinite line carrying this segment.
    pub fn line(&self) -> HomoLine {
        // endpoints are distinct by construction
        line_through(self.a, self.b).expect("segment endpoints are distinct")
    }
}

/// Homogeneous line `a·x + b·y + c = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomoLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl HomoLine {
    /// Scale so that `(a, b)` is a unit normal.
    pub fn normalized(&self) -> HomoLine {
        let n = self.a.hypot(self.b);
        HomoLine {
            a: self.a / n,
            b: self.b / n,
            c: self.c / n,
        }
    }
}

/// Ordered sequence of points sampled along a line.
///
/// The first point is the start index and the last is the end index, so
/// `len() == end_index - start_index + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point2>,
}

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewSlices(points.len()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Point2 {
        self.points[0]
    }

    pub fn last(&self) -> Point2 {
        self.points[self.points.len() - 1]
    }
}

pub fn line_through(p: Point2, q: Point2) -> Result<HomoLine, GeometryError> {
    if !p.is_finite() || !q.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    if p.distance(&q) <= MIN_SEGMENT_LENGTH {
        return Err(GeometryError::DegenerateSegment { x: p.x, y: p.y });
    }
    // (p.x, p.y, 1) × (q.x, q.y, 1)
    let line = HomoLine {
        a: p.y - q.y,
        b: q.x - p.x,
        c: p.x * q.y - q.x * p.y,
    };
    Ok(line.normalized())
}

pub fn intersect(l1: &HomoLine, l2: &HomoLine) -> Result<Point2, GeometryError> {
    let l1 = l1.normalized();
    let l2 = l2.normalized();
    let x = l1.b * l2.c - l1.c * l2.b;
    let y = l1.c * l2.a - l1.a * l2.c;
    let w = l1.a * l2.b - l1.b * l2.a;
    if w.abs() <= PARALLEL_TOLERANCE {
        return Err(GeometryError::ParallelLines);
    }
    Ok(Point2::new(x / w, y / w))
}

/// `s` equally spaced points from `seg.a` to `seg.b`, both included exactly.
pub fn discretize(seg: &LineSegment, s: usize) -> Result<Polyline, GeometryError> {
    if s < 2 {
        return Err(GeometryError::TooFewSlices(s));
    }
    let last = (s - 1) as f64;
    let points = (0..s)
        .map(|i| {
            if i == 0 {
                seg.a
            } else if i == s - 1 {
                seg.b
            } else {
                seg.a.lerp(&seg.b, i as f64 / last)
            }
        })
        .collect();
    Polyline::new(points)
}

pub fn point_line_distance(p: Point2, l: &HomoLine) -> f64 {
    (l.a * p.x + l.b * p.y + l.c).abs() / l.a.hypot(l.b)
}

/// Minimum RMS distance from `edge` to any line through `v`.
///
/// This is the square root of the smallest eigenvalue of the second-moment
/// matrix of `edge - v`. The determinant is accumulated from pairwise cross
/// products so nearly collinear inputs do not lose precision to
/// cancellation.
pub fn d_rms(edge: &[Point2], v: Point2) -> Result<f64, GeometryError> {
    if edge.is_empty() {
        return Err(GeometryError::EmptyEdge);
    }
    let n = edge.len() as f64;
    let d: Vec<(f64, f64)> = edge.iter().map(|p| (p.x - v.x, p.y - v.y)).collect();
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &d {
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let mut cross_sq = 0.0;
    for (i, &(xi, yi)) in d.iter().enumerate() {
        for &(xj, yj) in &d[i + 1..] {
            let c = xi * yj - xj * yi;
            cross_sq += c * c;
        }
    }
    let (a, c, b) = (sxx / n, syy / n, sxy / n);
    let det = cross_sq / (n * n);
    let half_gap = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let lambda_max = 0.5 * (a + c) + half_gap;
    if lambda_max <= 0.0 {
        // every point coincides with v
        return Ok(0.0);
    }
    let lambda_min = (det / lambda_max).max(0.0);
    Ok(lambda_min.sqrt())
}

/// Brute-force version of [`d_rms`]: sweeps `angle_steps` line directions
/// through `v`, uniformly spaced on `[0, π)`.
pub fn d_rms_bruteforce(
    edge: &[Point2],
    v: Point2,
    angle_steps: usize,
) -> Result<f64, GeometryError> {
    if edge.is_empty() {
        return Err(GeometryError::EmptyEdge);
    }
    if angle_steps < 2 {
        return Err(GeometryError::TooFewAngles(angle_steps));
    }
    let n = edge.len() as f64;
    let mut best = f64::INFINITY;
    for k in 0..angle_steps {
        let theta = PI * k as f64 / angle_steps as f64;
        // unit normal of the line with direction theta
        let (nx, ny) = (-theta.sin(), theta.cos());
        let ms = edge
            .iter()
            .map(|p| {
                let r = nx * (p.x - v.x) + ny * (p.y - v.y);
                r * r
            })
            .sum::<f64>()
            / n;
        best = best.min(ms);
    }
    Ok(best.sqrt())
}

/// Mean [`d_rms`] over `edges`, expressed in units where the image diagonal
/// measures [`DIAGONAL_UNITS`].
pub fn consistency_error(
    edges: &[Vec<Point2>],
    v: Point2,
    image_diagonal: f64,
) -> Result<f64, GeometryError> {
    if edges.is_empty() {
        return Err(GeometryError::NoEdges);
    }
    let scale = DIAGONAL_UNITS / image_diagonal;
    let mut sum = 0.0;
    for edge in edges {
        sum += d_rms(edge, v)?;
    }
    Ok(scale * sum / edges.len() as f64)
}

/// Clip a segment to the rectangle `[0, w] × [0, h]` (Liang–Barsky).
pub fn clip_to_rect(seg: &LineSegment, w: f64, h: f64) -> Option<LineSegment> {
    let dx = seg.b.x - seg.a.x;
    let dy = seg.b.y - seg.a.y;
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [
        (-dx, seg.a.x),
        (dx, w - seg.a.x),
        (-dy, seg.a.y),
        (dy, h - seg.a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    LineSegment::new(seg.a.lerp(&seg.b, t0), seg.a.lerp(&seg.b, t1)).ok()
}
