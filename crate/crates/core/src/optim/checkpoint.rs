//! Binary checkpoint files.
//!
//! ```text
//! "GUNC" | u32 version | u64 payload length | u32 CRC32(payload) | payload
//! payload = u32 header length | UTF-8 JSON header | raw little-endian arrays
//! ```
//!
//! Array offsets in the header are relative to the first byte after the
//! JSON header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::train::{TraceRow, TrainConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::net::{Network, NetworkSpec, ParamKind};
use crate::tensor::{Element, Shape4, Tensor4};

pub const MAGIC: [u8; 4] = *b"GUNC";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8 + 4;

/// Position of the sampling streams: the next iteration index to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHeader {
    pub config: AdamConfig,
    pub step: u64,
}

/// The JSON block at the front of the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub spec: NetworkSpec,
    pub iteration: u64,
    pub rng: RngState,
    pub adam: AdamHeader,
    pub trace: Vec<TraceRow>,
    pub train_config: Option<TrainConfig>,
    pub arrays: Vec<ArrayEntry>,
}

/// Everything needed to continue a run or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: NetworkSpec,
    pub iteration: u64,
    pub rng: RngState,
    /// Named parameter arrays in [`Network::parameters`] order.
    pub parameters: Vec<(String, Tensor4<T>)>,
    pub adam: AdamState<T>,
    pub trace: Vec<TraceRow>,
    pub train_config: Option<TrainConfig>,
}

impl<T: Element> Checkpoint<T> {
    /// Snapshot of an untrained network with fresh optimizer state.
    pub fn from_network(net: &Network<T>, seed: u64) -> Self {
        Checkpoint {
            spec: net.spec().clone(),
            iteration: 0,
            rng: RngState { seed, next_index: 0 },
            parameters: named_parameters(net),
            adam: AdamState::for_network(AdamConfig::default(), net),
            trace: Vec::new(),
            train_config: None,
        }
    }

    /// Rebuilds the network, checking every name and shape.
    pub fn network(&self) -> Result<Network<T>> {
        let mut net = Network::zeros(&self.spec)?;
        let mut params = net.parameters_mut();
        if params.len() != self.parameters.len() {
            return Err(header_err(format!(
                "spec needs {} parameter arrays, checkpoint has {}",
                params.len(),
                self.parameters.len()
            )));
        }
        for (slot, (name, value)) in params.iter_mut().zip(&self.parameters) {
            if &slot.name != name || slot.value.shape() != value.shape() {
                return Err(header_err(format!(
                    "expected `{}` {}, found `{name}` {}",
                    slot.name,
                    slot.value.shape(),
                    value.shape()
                )));
            }
            slot.value.data_mut().copy_from_slice(value.data());
        }
        Ok(net)
    }
}

pub(crate) fn named_parameters<T: Element>(net: &Network<T>) -> Vec<(String, Tensor4<T>)> {
    net.parameters()
        .into_iter()
        .map(|p| (p.name, p.value.clone()))
        .collect()
}

fn header_err(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

/// Biases are stored as rank-1 arrays.
fn stored_shape(shape: Shape4, kind: ParamKind) -> Vec<usize> {
    match kind {
        ParamKind::Weight => shape.dims().to_vec(),
        ParamKind::Bias => vec![shape.c],
    }
}

fn kind_of(name: &str) -> ParamKind {
    if name.ends_with(".bias") {
        ParamKind::Bias
    } else {
        ParamKind::Weight
    }
}

/// Serializes to the exact bytes [`save_checkpoint`] writes.
pub fn encode_checkpoint<T: Element>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    if ckpt.adam.m.len() != ckpt.parameters.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} arrays for {} parameters",
            ckpt.adam.m.len(),
            ckpt.parameters.len()
        )));
    }
    let mut arrays = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[T], blob: &mut Vec<u8>| {
        arrays.push(ArrayEntry {
            name,
            dtype: T::DTYPE.to_string(),
            shape,
            offset: blob.len() as u64,
        });
        for &v in data {
            v.write_le(blob);
        }
    };
    for (name, value) in &ckpt.parameters {
        push(
            name.clone(),
            stored_shape(value.shape(), kind_of(name)),
            value.data(),
            &mut blob,
        );
    }
    for (prefix, moments) in [("adam.m", &ckpt.adam.m), ("adam.v", &ckpt.adam.v)] {
        for ((name, value), mom) in ckpt.parameters.iter().zip(moments) {
            if mom.len() != value.shape().len() {
                return Err(Error::shape(
                    "save_checkpoint",
                    format!("moment for `{name}` has {} values", mom.len()),
                ));
            }
            push(
                format!("{prefix}.{name}"),
                stored_shape(value.shape(), kind_of(name)),
                mom,
                &mut blob,
            );
        }
    }

    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        spec: ckpt.spec.clone(),
        iteration: ckpt.iteration,
        rng: ckpt.rng,
        adam: AdamHeader {
            config: ckpt.adam.config,
            step: ckpt.adam.step,
        },
        trace: ckpt.trace.clone(),
        train_config: ckpt.train_config.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|e| header_err(e.to_string()))?;

    let mut payload = Vec::with_capacity(4 + json.len() + blob.len());
    payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&json);
    payload.extend_from_slice(&blob);

    let mut out = Vec::with_capacity(PREAMBLE + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Validates framing and checksum; returns the header and the array blob.
fn split_payload(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated(format!("{} byte preamble", bytes.len())).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let stored = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let payload = &bytes[PREAMBLE..];
    if payload.len() as u64 != declared {
        return Err(CheckpointError::Truncated(format!(
            "payload is {} bytes, header declares {declared}",
            payload.len()
        ))
        .into());
    }
    let computed = crc32fast::hash(payload);
    if computed != stored {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }
    if payload.len() < 4 {
        return Err(CheckpointError::Truncated("missing header length".into()).into());
    }
    let json_len = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
    let json = payload
        .get(4..4 + json_len)
        .ok_or_else(|| CheckpointError::Truncated(format!("header of {json_len} bytes")))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| header_err(e.to_string()))?;
    Ok((header, &payload[4 + json_len..]))
}

/// Header of an encoded checkpoint, without decoding the arrays.
pub fn decode_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    split_payload(bytes).map(|(h, _)| h)
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, blob) = split_payload(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: header.dtype,
            expected: T::DTYPE.to_string(),
        }
        .into());
    }
    header.spec.validate()?;
    let template = Network::<T>::zeros(&header.spec)?;
    let slots: Vec<(String, Shape4, ParamKind)> = template
        .parameters()
        .into_iter()
        .map(|p| (p.name, p.value.shape(), p.kind))
        .collect();
    if header.arrays.len() != 3 * slots.len() {
        return Err(header_err(format!(
            "{} arrays listed, spec requires {}",
            header.arrays.len(),
            3 * slots.len()
        )));
    }

    let read = |entry: &ArrayEntry, name: &str, shape: Shape4, kind: ParamKind| -> Result<Vec<T>> {
        if entry.name != name {
            return Err(header_err(format!("expected array `{name}`, found `{}`", entry.name)));
        }
        if entry.dtype != T::DTYPE {
            return Err(CheckpointError::Dtype {
                found: entry.dtype.clone(),
                expected: T::DTYPE.to_string(),
            }
            .into());
        }
        if entry.shape != stored_shape(shape, kind) {
            return Err(header_err(format!(
                "array `{name}` has shape {:?}, expected {shape}",
                entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + shape.len() * T::BYTES;
        let raw = blob
            .get(start..end)
            .ok_or_else(|| CheckpointError::Truncated(format!("array `{name}` ends past the payload")))?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    };

    let n = slots.len();
    let mut parameters = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, (name, shape, kind)) in slots.iter().enumerate() {
        let data = read(&header.arrays[i], name, *shape, *kind)?;
        parameters.push((name.clone(), Tensor4::new(*shape, data)?));
        m.push(read(&header.arrays[n + i], &format!("adam.m.{name}"), *shape, *kind)?);
        v.push(read(
            &header.arrays[2 * n + i],
            &format!("adam.v.{name}"),
            *shape,
            *kind,
        )?);
    }
    Ok(Checkpoint {
        spec: header.spec,
        iteration: header.iteration,
        rng: header.rng,
        parameters,
        adam: AdamState {
            config: header.adam.config,
            step: header.adam.step,
            m,
            v,
        },
        trace: header.trace,
        train_config: header.train_config,
    })
}

/// Writes atomically: a sibling temp file is renamed into place.
pub fn save_checkpoint<T: Element>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("gunc.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint<f32> {
        let spec = NetworkSpec {
            encoder_channels: [2, 2, 2, 2, 2],
            ..NetworkSpec::narrow()
        };
        let net = Network::<f32>::build(&spec).unwrap();
        let mut ckpt = Checkpoint::from_network(&net, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mom in ckpt.adam.m.iter_mut().chain(ckpt.adam.v.iter_mut()) {
            mom.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
        }
        ckpt.adam.step = 7;
        ckpt.iteration = 7;
        ckpt.rng.next_index = 7;
        ckpt.trace = vec![
            TraceRow {
                iter: 1,
                loss: 0.1 + 0.2,
                val_mae: None,
            },
            TraceRow {
                iter: 2,
                loss: 1.0 / 3.0,
                val_mae: Some(2.5e-7),
            },
        ];
        ckpt
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn network_restores_parameters() {
        let ckpt = sample_checkpoint();
        let net = ckpt.network().unwrap();
        assert_eq!(named_parameters(&net), ckpt.parameters);
    }

    #[test]
    fn bias_arrays_are_rank_one() {
        let bytes = encode_checkpoint(&sample_checkpoint()).unwrap();
        let header = decode_header(&bytes).unwrap();
        let bias = header.arrays.iter().find(|a| a.name == "encoder.1.bias").unwrap();
        assert_eq!(bias.shape, vec![2]);
    }

    #[test]
    fn corruptions_are_rejected() {
        let bytes = encode_checkpoint(&sample_checkpoint()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f32>(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint::<f32>(&bad),
            Err(Error::Checkpoint(CheckpointError::Version { found: 9, .. }))
        ));

        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x40;
        assert!(matches!(
            decode_checkpoint::<f32>(&bad),
            Err(Error::Checkpoint(CheckpointError::Checksum { .. }))
        ));

        let bad = &bytes[..bytes.len() - 10];
        assert!(matches!(
            decode_checkpoint::<f32>(bad),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..6]),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));

        assert!(matches!(
            decode_checkpoint::<f64>(&bytes),
            Err(Error::Checkpoint(CheckpointError::Dtype { .. }))
        ));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt_7.gunc");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(read_checkpoint_header(&path).unwrap().iteration, 7);
        assert!(matches!(
            load_checkpoint::<f32>(&dir.path().join("missing.gunc")),
            Err(Error::Io { .. })
        ));
    }
}
