//! Line-delimited JSON annotation files and the labeling rules they must
//! satisfy.
//!
//! One record per line, UTF-8:
//!
//! ```text
//! {"image":"images/train/000000.png","width":128,"height":128,
//!  "line1":[[x,y],[x,y]],"line2":[[x,y],[x,y]],"vp":[x,y]}
//! ```
//!
//! `vp` is optional and derived from the two lines when absent. Paths are
//! relative to the annotation file's directory.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::codec::SceneLabels;
use crate::geometry::{intersect, GeometryError, LineSegment, Point2};

/// Minimum labeled segment length as a fraction of the image diagonal.
pub const MIN_SEGMENT_FRACTION: f64 = 0.05;
/// Allowed distance between a stored vp and the lines' intersection.
pub const VP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub line1: [[f64; 2]; 2],
    pub line2: [[f64; 2]; 2],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vp: Option<[f64; 2]>,
}

fn pt(p: [f64; 2]) -> Point2 {
    Point2::new(p[0], p[1])
}

impl AnnotationRecord {
    pub fn from_labels(image: String, width: usize, height: usize, labels: &SceneLabels) -> Self {
        let seg = |s: &LineSegment| [[s.a.x, s.a.y], [s.b.x, s.b.y]];
        Self {
            image,
            width,
            height,
            line1: seg(&labels.lines[0]),
            line2: seg(&labels.lines[1]),
            vp: Some([labels.vp.x, labels.vp.y]),
        }
    }

    pub fn segments(&self) -> Result<[LineSegment; 2], GeometryError> {
        Ok([
            LineSegment::new(pt(self.line1[0]), pt(self.line1[1]))?,
            LineSegment::new(pt(self.line2[0]), pt(self.line2[1]))?,
        ])
    }

    /// Labels with the stored vp, or the derived one when absent.
    pub fn labels(&self) -> Result<SceneLabels, GeometryError> {
        let vp = match self.vp {
            Some(v) => pt(v),
            None => derive_vp(self)?,
        };
        Ok(SceneLabels {
            vp,
            lines: self.segments()?,
        })
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}

/// Intersection of the extensions of the two labeled lines.
pub fn derive_vp(record: &AnnotationRecord) -> Result<Point2, GeometryError> {
    let [a, b] = record.segments()?;
    intersect(&a.line(), &b.line())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DegenerateSegment { line: usize },
    EndpointOutside { line: usize, x: f64, y: f64 },
    NoIntersection,
    VpOutside { x: f64, y: f64 },
    SegmentTooShort { line: usize, length: f64, min: f64 },
    VpMismatch { distance: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DegenerateSegment { line } => write!(f, "line{line} has coincident endpoints"),
            Violation::EndpointOutside { line, x, y } => {
                write!(f, "line{line} endpoint ({x}, {y}) outside image")
            }
            Violation::NoIntersection => f.write_str("no finite intersection"),
            Violation::VpOutside { x, y } => write!(f, "vp outside image at ({x}, {y})"),
            Violation::SegmentTooShort { line, length, min } => {
                write!(f, "line{line} length {length:.3} below {min:.3}")
            }
            Violation::VpMismatch { distance } => {
                write!(f, "stored vp is {distance:e} px from the lines' intersection")
            }
        }
    }
}

/// Labeling-rule checks on labels for a `width×height` image: endpoints in
/// bounds, segments at least [`MIN_SEGMENT_FRACTION`] of the diagonal,
/// non-parallel lines, vp strictly inside the image and consistent with
/// the lines.
pub fn label_violations(
    width: usize,
    height: usize,
    lines: [[Point2; 2]; 2],
    stored_vp: Option<Point2>,
) -> Vec<Violation> {
    let (w, h) = (width as f64, height as f64);
    let min_len = MIN_SEGMENT_FRACTION * w.hypot(h);
    let mut out = Vec::new();
    let mut segs = Vec::new();
    for (i, [a, b]) in lines.into_iter().enumerate() {
        let line = i + 1;
        for p in [a, b] {
            if !(p.is_finite() && (0.0..=w).contains(&p.x) && (0.0..=h).contains(&p.y)) {
                out.push(Violation::EndpointOutside { line, x: p.x, y: p.y });
            }
        }
        match LineSegment::new(a, b) {
            Ok(s) => {
                if s.length() < min_len {
                    out.push(Violation::SegmentTooShort {
                        line,
                        length: s.length(),
                        min: min_len,
                    });
                }
                segs.push(s);
            }
            Err(_) => out.push(Violation::DegenerateSegment { line }),
        }
    }
    if segs.len() == 2 {
        match intersect(&segs[0].line(), &segs[1].line()) {
            Ok(v) => {
                let vp = stored_vp.unwrap_or(v);
                if !(vp.x > 0.0 && vp.x < w && vp.y > 0.0 && vp.y < h) {
                    out.push(Violation::VpOutside { x: vp.x, y: vp.y });
                }
                let distance = vp.distance(&v);
                if !(distance <= VP_TOLERANCE) {
                    out.push(Violation::VpMismatch { distance });
                }
            }
            Err(_) => out.push(Violation::NoIntersection),
        }
    }
    out
}

/// All labeling-rule violations of a record; empty when valid.
pub fn validate(record: &AnnotationRecord) -> Vec<Violation> {
    label_violations(
        record.width,
        record.height,
        [
            [pt(record.line1[0]), pt(record.line1[1])],
            [pt(record.line2[0]), pt(record.line2[1])],
        ],
        record.vp.map(pt),
    )
}

pub fn save_annotations(records: &[AnnotationRecord], path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io)
}

fn parse_record(value: &Value) -> Result<AnnotationRecord, (String, String)> {
    let obj = value
        .as_object()
        .ok_or_else(|| ("<record>".to_string(), "expected a JSON object".to_string()))?;
    let known = ["image", "width", "height", "line1", "line2", "vp"];
    if let Some(k) = obj.keys().find(|k| !known.contains(&k.as_str())) {
        return Err((k.clone(), "unknown field".into()));
    }
    let field = |name: &str| {
        obj.get(name)
            .ok_or_else(|| (name.to_string(), "missing".to_string()))
    };
    let num = |name: &str, v: &Value| {
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| (name.to_string(), format!("expected a number, got {v}")))
    };
    let point = |name: &str, v: &Value| -> Result<[f64; 2], (String, String)> {
        match v.as_array().map(Vec::as_slice) {
            Some([x, y]) => Ok([num(name, x)?, num(name, y)?]),
            _ => Err((name.to_string(), format!("expected [x, y], got {v}"))),
        }
    };
    let segment = |name: &str| -> Result<[[f64; 2]; 2], (String, String)> {
        let v = field(name)?;
        match v.as_array().map(Vec::as_slice) {
            Some([a, b]) => Ok([point(name, a)?, point(name, b)?]),
            _ => Err((name.to_string(), format!("expected [[x, y], [x, y]], got {v}"))),
        }
    };
    let size = |name: &str| -> Result<usize, (String, String)> {
        let v = field(name)?;
        v.as_u64()
            .filter(|&s| s > 0)
            .map(|s| s as usize)
            .ok_or_else(|| (name.to_string(), format!("expected a positive integer, got {v}")))
    };
    Ok(AnnotationRecord {
        image: field("image")?
            .as_str()
            .ok_or_else(|| ("image".to_string(), "expected a string".to_string()))?
            .to_string(),
        width: size("width")?,
        height: size("height")?,
        line1: segment("line1")?,
        line2: segment("line2")?,
        vp: match obj.get("vp") {
            None | Some(Value::Null) => None,
            Some(v) => Some(point("vp", v)?),
        },
    })
}

/// Parse annotation text; blank lines are skipped. `path` only labels
/// errors.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |(field, message): (String, String)| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            field,
            message,
        };
        let value: Value = serde_json::from_str(line)
            .map_err(|e| err(("<record>".to_string(), e.to_string())))?;
        out.push(parse_record(&value).map_err(err)?);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_annotations(&text, path)
}
