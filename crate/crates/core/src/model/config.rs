use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Conv,
    Bottleneck,
    Yolo,
    Detection,
}

/// One row of the architecture table: `n` repeated layers of `operator`
/// with `c` output channels, expansion `t` and first-layer stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub operator: Operator,
    pub t: usize,
    pub c: usize,
    pub n: usize,
    pub s: usize,
}

impl StageSpec {
    pub const fn new(operator: Operator, t: usize, c: usize, n: usize, s: usize) -> Self {
        Self {
            operator,
            t,
            c,
            n,
            s,
        }
    }
}

/// MobileNet-v2 backbone followed by three yolo/detection pairs, coarsest
/// scale first. Detection rows carry `c = 0`; their width is the per-cell
/// channel count derived from the slice count.
pub fn default_stages() -> Vec<StageSpec> {
    use Operator::*;
    vec![
        StageSpec::new(Conv, 1, 32, 1, 2),
        StageSpec::new(Bottleneck, 1, 16, 1, 1),
        StageSpec::new(Bottleneck, 6, 24, 2, 2),
        StageSpec::new(Bottleneck, 6, 32, 3, 2),
        StageSpec::new(Bottleneck, 6, 64, 4, 2),
        StageSpec::new(Bottleneck, 6, 96, 3, 1),
        StageSpec::new(Bottleneck, 6, 160, 3, 2),
        StageSpec::new(Bottleneck, 6, 320, 1, 1),
        StageSpec::new(Bottleneck, 6, 1280, 1, 1),
        StageSpec::new(Yolo, 1, 320, 3, 1),
        StageSpec::new(Detection, 1, 0, 1, 1),
        StageSpec::new(Yolo, 1, 64, 3, 1),
        StageSpec::new(Detection, 1, 0, 1, 1),
        StageSpec::new(Yolo, 1, 24, 3, 1),
        StageSpec::new(Detection, 1, 0, 1, 1),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels; divisible by 32.
    pub input_size: usize,
    pub width_multiplier: f64,
    /// Points per predicted line.
    pub slices: usize,
    pub stages: Vec<StageSpec>,
    /// Upsample-and-concatenate coarser head features into finer heads.
    pub fusion: bool,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 416,
            width_multiplier: 1.0,
            slices: 23,
            stages: default_stages(),
            fusion: true,
            init_seed: 0,
        }
    }
}

/// Scale `c` by `width`, rounded to the nearest multiple of 4, at least 4.
pub fn scale_channels(c: usize, width: f64) -> usize {
    (((c as f64 * width) / 4.0).round() as usize * 4).max(4)
}

impl ModelConfig {
    pub fn desk(input_size: usize, width_multiplier: f64, slices: usize) -> Self {
        Self {
            input_size,
            width_multiplier,
            slices,
            ..Self::default()
        }
    }

    /// A few-thousand-parameter network with the full topology (stem,
    /// residual and strided bottlenecks, three fused heads), small enough
    /// for finite-difference checks of every weight.
    pub fn micro() -> Self {
        use Operator::*;
        Self {
            input_size: 96,
            width_multiplier: 1.0,
            slices: 3,
            stages: vec![
                StageSpec::new(Conv, 1, 4, 1, 2),
                StageSpec::new(Bottleneck, 1, 4, 1, 1),
                StageSpec::new(Bottleneck, 2, 4, 1, 2),
                StageSpec::new(Bottleneck, 2, 8, 1, 2),
                StageSpec::new(Bottleneck, 2, 8, 1, 2),
                StageSpec::new(Bottleneck, 2, 8, 1, 2),
                StageSpec::new(Yolo, 1, 4, 1, 1),
                StageSpec::new(Detection, 1, 0, 1, 1),
                StageSpec::new(Yolo, 1, 4, 1, 1),
                StageSpec::new(Detection, 1, 0, 1, 1),
                StageSpec::new(Yolo, 1, 4, 1, 1),
                StageSpec::new(Detection, 1, 0, 1, 1),
            ],
            fusion: true,
            init_seed: 0,
        }
    }

    /// Channels per grid cell: 2 vp offsets, 1 confidence, 2 lines × S points × (x, y).
    pub fn channels_per_cell(&self) -> usize {
        3 + 4 * self.slices
    }

    /// Grid sides at strides 32, 16 and 8.
    pub fn grid_sizes(&self) -> [usize; 3] {
        [
            self.input_size / 32,
            self.input_size / 16,
            self.input_size / 8,
        ]
    }

    pub fn channels(&self, c: usize) -> usize {
        scale_channels(c, self.width_multiplier)
    }

    pub(crate) fn backbone_rows(&self) -> impl Iterator<Item = &StageSpec> {
        self.stages
            .iter()
            .filter(|s| matches!(s.operator, Operator::Conv | Operator::Bottleneck))
    }

    pub(crate) fn yolo_rows(&self) -> Vec<StageSpec> {
        self.stages
            .iter()
            .filter(|s| s.operator == Operator::Yolo)
            .copied()
            .collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            ));
        }
        if self.input_size < 96 {
            return bad(format!(
                "input size {} below 96 leaves the coarsest grid smaller than a 3×3 kernel",
                self.input_size
            ));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return bad(format!(
                "width multiplier {} outside (0, 1]",
                self.width_multiplier
            ));
        }
        if self.slices < 2 {
            return bad(format!("slice count {} below 2", self.slices));
        }
        let mut stride = 1;
        for (i, row) in self.stages.iter().enumerate() {
            if row.n == 0 || row.t == 0 || !(row.s == 1 || row.s == 2) {
                return bad(format!("stage {i}: need n ≥ 1, t ≥ 1, s ∈ {{1, 2}}"));
            }
            match row.operator {
                Operator::Conv | Operator::Bottleneck => {
                    if row.c == 0 {
                        return bad(format!("stage {i}: zero output channels"));
                    }
                    stride *= row.s;
                }
                Operator::Yolo if row.c == 0 => {
                    return bad(format!("stage {i}: zero yolo channels"));
                }
                _ => {}
            }
        }
        if !matches!(
            self.stages.first().map(|s| s.operator),
            Some(Operator::Conv)
        ) {
            return bad("the first stage must be a convolution".into());
        }
        if stride != 32 {
            return bad(format!("backbone total stride is {stride}, expected 32"));
        }
        let head: Vec<Operator> = self
            .stages
            .iter()
            .map(|s| s.operator)
            .filter(|o| matches!(o, Operator::Yolo | Operator::Detection))
            .collect();
        if head
            != [
                Operator::Yolo,
                Operator::Detection,
                Operator::Yolo,
                Operator::Detection,
                Operator::Yolo,
                Operator::Detection,
            ]
        {
            return bad("head must be three yolo/detection row pairs".into());
        }
        Ok(())
    }
}
