//! Binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! "TSCNCKPT"            8 bytes
//! version               u32 LE
//! header length H       u32 LE
//! header                H bytes of JSON
//! per parameterized layer, in order:
//!     weight            f64 LE, row-major
//!     bias              f64 LE
//!     mask              1 bit per weight, least significant bit first, padded to a byte
//! momentum (if the header says so), per parameterized layer:
//!     weight velocity, bias velocity  f64 LE
//! SHA-256 of all preceding bytes      32 bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, MaskedLayer, Network};
use crate::tensor::Tensor;
use crate::trainer::{SgdState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"TSCNCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerHeader {
    kind: LayerKind,
    prunable: bool,
    weight_shape: Option<Vec<usize>>,
    bias_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: String,
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<LayerHeader>,
    config: Option<TrainConfig>,
    epoch: usize,
    momentum: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: String,
    pub net: Network,
    pub state: Option<SgdState>,
    pub config: Option<TrainConfig>,
    pub epoch: usize,
}

/// Packs a 0/1 mask, least significant bit first: `[1,0,1,1]` → `0b0000_1101`.
pub fn pack_mask(mask: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &z) in mask.iter().enumerate() {
        if z != 0.0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_mask(bytes: &[u8], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| f64::from((bytes[i / 8] >> (i % 8)) & 1))
        .collect()
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let net = &ckpt.net;
    if let Some(s) = &ckpt.state {
        if s.velocity.len() != net.layers().len() {
            return Err(Error::dim("momentum state does not match the network"));
        }
    }
    let header = Header {
        architecture: ckpt.architecture.clone(),
        input_shape: net.input_shape().to_vec(),
        classes: net.classes(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerHeader {
                kind: l.kind,
                prunable: l.prunable,
                weight_shape: l.weight().map(|w| w.shape().to_vec()),
                bias_len: l.bias().map(|b| b.len()),
            })
            .collect(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        momentum: ckpt.state.is_some(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for l in net.layers().iter().filter(|l| l.is_parameterized()) {
        put_f64s(&mut out, l.weight().unwrap().data());
        put_f64s(&mut out, l.bias().unwrap().data());
        out.extend_from_slice(&pack_mask(l.mask().unwrap().data()));
    }
    if let Some(s) = &ckpt.state {
        for (vw, vb) in s.velocity.iter().flatten() {
            put_f64s(&mut out, vw.data());
            put_f64s(&mut out, vb.data());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos as u64, format!("truncated {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(Error::format(0, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            8,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let body_end = bytes.len() - DIGEST_LEN;
    if Sha256::digest(&bytes[..body_end])[..] != bytes[body_end..] {
        return Err(Error::format(body_end as u64, "checksum mismatch"));
    }
    let body = &bytes[..body_end];
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut r = Reader {
        bytes: body,
        pos: PREAMBLE,
    };
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::format(PREAMBLE as u64, format!("bad header: {e}")))?;

    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let at = r.pos as u64;
        let shape_err = |m: &str| Error::format(at, m.to_string());
        let mut layer = match (lh.kind, &lh.weight_shape, lh.bias_len) {
            (LayerKind::Relu, None, None) => MaskedLayer::relu(),
            (LayerKind::Flatten, None, None) => MaskedLayer::flatten(),
            (kind, Some(ws), Some(bl)) => {
                let w = r.f64s(ws, "weights")?;
                let b = r.f64s(&[bl], "bias")?;
                let n = w.len();
                let mask = unpack_mask(r.take(n.div_ceil(8), "mask")?, n);
                let mut l = match kind {
                    LayerKind::Linear => MaskedLayer::linear(w, b),
                    LayerKind::Conv2d {
                        kernel,
                        stride,
                        pad,
                    } => MaskedLayer::conv2d(w, b, kernel, stride, pad),
                    _ => return Err(shape_err("parameter-free layer with parameters")),
                }
                .map_err(|e| Error::format(at, e.to_string()))?;
                l.set_mask(Tensor::new(ws, mask)?)?;
                l
            }
            _ => return Err(shape_err("layer kind does not match its parameters")),
        };
        layer.prunable = lh.prunable;
        layers.push(layer);
    }
    let net = Network::new(&header.input_shape, layers, header.classes)
        .map_err(|e| Error::format(PREAMBLE as u64, e.to_string()))?;
    let state = if header.momentum {
        let mut velocity = Vec::with_capacity(header.layers.len());
        for lh in &header.layers {
            velocity.push(match (&lh.weight_shape, lh.bias_len) {
                (Some(ws), Some(bl)) => Some((r.f64s(ws, "momentum")?, r.f64s(&[bl], "momentum")?)),
                _ => None,
            });
        }
        Some(SgdState { velocity })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::format(
            r.pos as u64,
            "trailing bytes after the last blob",
        ));
    }
    Ok(Checkpoint {
        architecture: header.architecture,
        net,
        state,
        config: header.config,
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
