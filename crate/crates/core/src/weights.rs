//! `TBCW` weight files.
//!
//! ```text
//! "TBCW" | u32 version = 1 | u8 kind (0 = TEM, 1 = SCM)
//! TEM: u32 BC | u32 L          SCM: u32 classes
//! every parameter tensor in construction order, weight before bias, f32 LE
//! u64 FNV-1a of all preceding bytes, LE
//! ```
//!
//! Integers are little-endian. Tensor shapes are implied by the header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Padding, KERNEL};
use crate::scm::{ScmNet, CHANNELS};
use crate::tem::TemNet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TBCW";
const VERSION: u32 = 1;
const KIND_TEM: u8 = 0;
const KIND_SCM: u8 = 1;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Tem,
    Scm,
}

fn header(kind: u8, dims: &[u32]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

fn finish(mut out: Vec<u8>, params: &[&Tensor]) -> Vec<u8> {
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn encode_tem(net: &TemNet) -> Vec<u8> {
    finish(
        header(KIND_TEM, &[net.bc() as u32, net.levels() as u32]),
        &net.params(),
    )
}

pub fn encode_scm(net: &ScmNet) -> Vec<u8> {
    finish(header(KIND_SCM, &[net.classes() as u32]), &net.params())
}

/// Checksum identifying a set of SCM weights.
pub fn scm_hash(net: &ScmNet) -> u64 {
    fnv1a64(&encode_scm(net))
}

pub fn tem_hash(net: &TemNet) -> u64 {
    fnv1a64(&encode_tem(net))
}

/// Verifies magic, version and checksum; returns the kind and the bytes
/// between the kind byte and the trailer.
fn open(bytes: &[u8]) -> Result<(ModelKind, &[u8])> {
    if bytes.len() < 4 + 4 + 1 + 8 || &bytes[..4] != MAGIC {
        return Err(Error::format("TBCW", "bad magic or truncated file"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(Error::format("TBCW", "checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format("TBCW", format!("unsupported version {version}")));
    }
    let kind = match body[8] {
        KIND_TEM => ModelKind::Tem,
        KIND_SCM => ModelKind::Scm,
        k => return Err(Error::format("TBCW", format!("unknown model kind {k}"))),
    };
    Ok((kind, &body[9..]))
}

pub fn peek_kind(bytes: &[u8]) -> Result<ModelKind> {
    open(bytes).map(|(k, _)| k)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        if self.bytes.len() < 4 {
            return Err(Error::format("TBCW", "truncated header"));
        }
        let (head, rest) = self.bytes.split_at(4);
        self.bytes = rest;
        Ok(u32::from_le_bytes(head.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if self.bytes.len() < 4 * n {
            return Err(Error::format("TBCW", "payload shorter than the header implies"));
        }
        let (head, rest) = self.bytes.split_at(4 * n);
        self.bytes = rest;
        let data = head
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format("TBCW", e.to_string()))
    }

    fn conv(&mut self, c_in: usize, c_out: usize, bias: bool, padding: Padding) -> Result<Conv2d> {
        let w = self.tensor(vec![c_out, c_in, KERNEL, KERNEL])?;
        let b = if bias { Some(self.tensor(vec![c_out])?) } else { None };
        Conv2d::from_parts(w, b, padding)
    }
}

pub fn decode_tem(bytes: &[u8]) -> Result<TemNet> {
    let (kind, body) = open(bytes)?;
    if kind != ModelKind::Tem {
        return Err(Error::format("TBCW", "expected TEM weights, found SCM"));
    }
    let mut r = Reader { bytes: body };
    let bc = r.u32()? as usize;
    let l = r.u32()? as usize;
    if bc == 0 || l == 0 || l > 16 || bc > 1 << 16 {
        return Err(Error::format("TBCW", format!("implausible TEM header BC={bc} L={l}")));
    }
    let mut layers = vec![r.conv(1, bc, false, Padding::Replicate)?];
    for i in 0..l {
        layers.push(r.conv(bc << i, bc << (i + 1), false, Padding::Replicate)?);
    }
    for j in 0..l {
        layers.push(r.conv(bc << (l - j), bc << (l - j - 1), false, Padding::Replicate)?);
    }
    layers.push(r.conv(bc, 1, false, Padding::Replicate)?);
    if !r.bytes.is_empty() {
        return Err(Error::format("TBCW", "trailing bytes after TEM weights"));
    }
    TemNet::from_layers(bc, l, layers)
}

pub fn decode_scm(bytes: &[u8]) -> Result<ScmNet> {
    let (kind, body) = open(bytes)?;
    if kind != ModelKind::Scm {
        return Err(Error::format("TBCW", "expected SCM weights, found TEM"));
    }
    let mut r = Reader { bytes: body };
    let classes = r.u32()? as usize;
    if classes < 2 {
        return Err(Error::format("TBCW", format!("SCM with {classes} classes")));
    }
    let mut c_in = 1;
    let mut convs = Vec::with_capacity(CHANNELS.len());
    for &c_out in &CHANNELS {
        convs.push(r.conv(c_in, c_out, true, Padding::Zero)?);
        c_in = c_out;
    }
    // the classifier width depends on the training resolution
    let floats = r.bytes.len() / 4;
    if r.bytes.len() % 4 != 0 || floats < 2 * classes || (floats - classes) % classes != 0 {
        return Err(Error::format("TBCW", "SCM classifier payload has the wrong length"));
    }
    let fc_in = (floats - classes) / classes;
    let w = r.tensor(vec![classes, fc_in])?;
    let b = r.tensor(vec![classes])?;
    ScmNet::from_parts(convs, Linear::from_parts(w, b)?)
}

pub fn save_tem(net: &TemNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tem(net))?;
    Ok(())
}

pub fn load_tem(path: impl AsRef<Path>) -> Result<TemNet> {
    decode_tem(&fs::read(path)?)
}

pub fn save_scm(net: &ScmNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_scm(net))?;
    Ok(())
}

pub fn load_scm(path: impl AsRef<Path>) -> Result<ScmNet> {
    decode_scm(&fs::read(path)?)
}
