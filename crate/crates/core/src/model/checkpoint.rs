//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `DVPCKPT1`, a little-endian u64 manifest length,
//! a UTF-8 JSON manifest, then every array listed in the manifest's
//! `entries` back to back, row-major, little-endian, at `numeric_width` bits.
//! Arrays cover parameters, optimizer velocities and normalization running
//! statistics, so a reloaded checkpoint resumes training exactly.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DvpNet, ModelConfig, ModelError};
use crate::nn::{ParamGroup, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DVPCKPT1";
pub const FORMAT_VERSION: u32 = 1;
/// Version of the per-cell channel order below. Bump on any change.
pub const CHANNEL_ORDER_VERSION: u32 = 1;
const CHANNEL_ORDER: &str = "vp_x, vp_y, conf, left[0..S].(x, y), right[0..S].(x, y)";

/// Training state stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: usize,
    /// Free-form caller data, e.g. the training configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    Velocity,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    group: Option<ParamGroup>,
    kind: EntryKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChannelLayout {
    version: u32,
    order: String,
    per_cell: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    numeric_width: u32,
    byte_order: String,
    config: ModelConfig,
    channel_layout: ChannelLayout,
    meta: CheckpointMeta,
    entries: Vec<Entry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize a network and its training state.
pub fn checkpoint_bytes<T: Scalar>(net: &DvpNet<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut push = |entry: Entry, values: &[T]| {
        for &v in values {
            v.write_le(&mut payload);
        }
        entries.push(entry);
    };
    for (_, p) in net.params().iter() {
        push(
            Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                group: Some(p.group),
                kind: EntryKind::Param,
            },
            p.value.data(),
        );
        if let Some(v) = &p.velocity {
            push(
                Entry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    group: Some(p.group),
                    kind: EntryKind::Velocity,
                },
                v,
            );
        }
    }
    for (i, s) in net.running_stats().iter().enumerate() {
        for (kind, values) in [
            (EntryKind::RunningMean, &s.mean),
            (EntryKind::RunningVar, &s.var),
        ] {
            push(
                Entry {
                    name: format!("norm.{i}"),
                    shape: vec![values.len()],
                    group: None,
                    kind,
                },
                values,
            );
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        numeric_width: T::BITS,
        byte_order: "little".into(),
        config: net.config().clone(),
        channel_layout: ChannelLayout {
            version: CHANNEL_ORDER_VERSION,
            order: CHANNEL_ORDER.into(),
            per_cell: net.config().channels_per_cell(),
        },
        meta: meta.clone(),
        entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Rebuild a network from checkpoint bytes. Arrays stored at a different
/// width are converted; same-width loads are bit-exact.
pub fn checkpoint_from_bytes<T: Scalar>(
    bytes: &[u8],
) -> Result<(DvpNet<T>, CheckpointMeta), ModelError> {
    let bad = |m: String| ModelError::Format(m);
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.byte_order != "little" {
        return Err(bad(format!("unsupported byte order {}", manifest.byte_order)));
    }
    if manifest.channel_layout.version != CHANNEL_ORDER_VERSION {
        return Err(bad(format!(
            "unsupported channel order version {}",
            manifest.channel_layout.version
        )));
    }
    let width = manifest.numeric_width;
    if width != 32 && width != 64 {
        return Err(bad(format!("unsupported numeric width {width}")));
    }
    let step = width as usize / 8;

    let mut net = DvpNet::<T>::build(&manifest.config)?;
    let mut cursor = &bytes[16 + len..];
    let mut seen_params = 0;
    let mut seen_stats = 0;
    for entry in &manifest.entries {
        let count: usize = entry.shape.iter().product();
        let raw = cursor
            .get(..count * step)
            .ok_or_else(|| bad(format!("truncated data for {}", entry.name)))?;
        cursor = &cursor[count * step..];
        let values: Vec<T> = raw
            .chunks_exact(step)
            .map(|c| {
                if width == 64 {
                    T::of(f64::read_le(c))
                } else if T::BITS == 32 {
                    T::read_le(c)
                } else {
                    T::of(f32::read_le(c) as f64)
                }
            })
            .collect();
        match entry.kind {
            EntryKind::Param | EntryKind::Velocity => {
                let id = net
                    .params()
                    .by_name(&entry.name)
                    .ok_or_else(|| bad(format!("unknown parameter {}", entry.name)))?;
                let p = net.params_mut().get_mut(id);
                if p.value.shape() != entry.shape.as_slice() {
                    return Err(bad(format!(
                        "{}: stored shape {:?}, model shape {:?}",
                        entry.name,
                        entry.shape,
                        p.value.shape()
                    )));
                }
                if entry.kind == EntryKind::Param {
                    p.value = Tensor::from_vec(&entry.shape, values)?;
                    seen_params += 1;
                } else {
                    p.velocity = Some(values);
                }
            }
            EntryKind::RunningMean | EntryKind::RunningVar => {
                let idx: usize = entry
                    .name
                    .strip_prefix("norm.")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("bad statistics name {}", entry.name)))?;
                let stats = net
                    .running_stats_mut()
                    .get_mut(idx)
                    .ok_or_else(|| bad(format!("unknown statistics {}", entry.name)))?;
                let slot = if entry.kind == EntryKind::RunningMean {
                    &mut stats.mean
                } else {
                    &mut stats.var
                };
                if slot.len() != values.len() {
                    return Err(bad(format!("{}: channel count mismatch", entry.name)));
                }
                *slot = values;
                seen_stats += 1;
            }
        }
    }
    if !cursor.is_empty() {
        return Err(bad(format!("{} trailing bytes", cursor.len())));
    }
    if seen_params != net.params().len() || seen_stats != 2 * net.running_stats().len() {
        return Err(bad("checkpoint does not cover every model tensor".into()));
    }
    Ok((net, manifest.meta))
}

pub fn save_checkpoint<T: Scalar>(
    net: &DvpNet<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, checkpoint_bytes(net, meta)).map_err(io_err(path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(DvpNet<T>, CheckpointMeta), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_ish() -> DvpNet<f64> {
        let mut net = DvpNet::<f64>::build(&ModelConfig::desk(96, 0.25, 3)).unwrap();
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            p.velocity = Some(vec![i as f64 * 1e-3 + 1.0 / 3.0; p.value.len()]);
        }
        net.running_stats_mut()[0].mean[0] = std::f64::consts::PI;
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = trained_ish();
        let meta = CheckpointMeta {
            epoch: 7,
            extra: serde_json::json!({"note": "x"}),
        };
        let bytes = checkpoint_bytes(&net, &meta);
        let (back, meta2) = checkpoint_from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.params(), net.params());
        assert_eq!(back.running_stats(), net.running_stats());
        assert_eq!(checkpoint_bytes(&back, &meta2), bytes);
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let net = trained_ish().cast::<f32>();
        let bytes = checkpoint_bytes(&net, &CheckpointMeta::default());
        let (back, _) = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn width_conversion_on_load() {
        let net = trained_ish();
        let bytes = checkpoint_bytes(&net, &CheckpointMeta::default());
        let (back, _) = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        let id = net.params().by_name("head.0.detect.weight").unwrap();
        let a = net.params().get(id).value.data()[0];
        let b = back.params().get(id).value.data()[0];
        assert_eq!(b, a as f32);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let net = trained_ish();
        let bytes = checkpoint_bytes(&net, &CheckpointMeta::default());
        assert!(checkpoint_from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(checkpoint_from_bytes::<f64>(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(checkpoint_from_bytes::<f64>(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let net = trained_ish();
        save_checkpoint(&net, &CheckpointMeta::default(), &path).unwrap();
        let (back, _) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back.params(), net.params());
        assert!(matches!(
            load_checkpoint::<f64>(&dir.path().join("missing")),
            Err(ModelError::Io { .. })
        ));
    }
}
