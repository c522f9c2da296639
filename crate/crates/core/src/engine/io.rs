//! Binary kernel and feature-map files: one line of JSON header, a newline,
//! then raw little-endian elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Affine, BlockKernel, DenseKernel, FactorWeights, FeatureMap, Scalar, Shape};
use crate::error::{Error, Result};
use crate::structure::{ChainDocument, FactorChain};

pub const KERNEL_FORMAT: &str = "igc-kernel";
pub const FEATURE_MAP_FORMAT: &str = "igc-feature-map";
pub const FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Factored,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelHeader {
    pub format: String,
    pub version: u32,
    pub kind: KernelKind,
    pub dtype: String,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainDocument>,
    /// Per factor `[branches, weights per factor]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shapes: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_shape: Option<[usize; 3]>,
    /// Scale then shift per factor follow the weights.
    #[serde(default)]
    pub affine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapHeader {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub dtype: String,
    pub endianness: String,
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

fn encode<T: Scalar>(values: impl IntoIterator<Item = T>, out: &mut Vec<u8>) {
    for v in values {
        v.write_le(out);
    }
}

fn decode<T: Scalar>(body: &[u8], count: usize) -> Result<Vec<T>> {
    if body.len() != count * T::BYTES {
        return Err(Error::Format(format!(
            "expected {count} {} values ({} bytes), found {} bytes",
            T::DTYPE,
            count * T::BYTES,
            body.len()
        )));
    }
    let values: Vec<T> = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stored values".into()));
    }
    Ok(values)
}

fn check_common(
    format: &str,
    expected: &str,
    version: u32,
    dtype: &str,
    endianness: &str,
    want: &str,
) -> Result<()> {
    if format != expected || version != FILE_VERSION {
        return Err(Error::Format(format!(
            "expected {expected} v{FILE_VERSION}, found {format} v{version}"
        )));
    }
    if endianness != "little" {
        return Err(Error::Format(format!(
            "unsupported endianness `{endianness}`"
        )));
    }
    if dtype != want {
        return Err(Error::Format(format!(
            "file holds {dtype}, reader expects {want}"
        )));
    }
    Ok(())
}

fn with_header<H: Serialize>(header: &H, body: Vec<u8>) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    out.extend(body);
    out
}

/// Raw weights of a chain in factor order, branch order, row-major blocks.
pub fn encode_weights<T: Scalar>(kernel: &BlockKernel<T>) -> Vec<u8> {
    let mut body = Vec::new();
    for f in &kernel.factors {
        encode(f.data().iter().copied(), &mut body);
    }
    body
}

/// Inverse of [`encode_weights`] for a known chain.
pub fn decode_weights<T: Scalar>(chain: &FactorChain, body: &[u8]) -> Result<BlockKernel<T>> {
    let total: u64 = chain.nonzeros();
    let values = decode::<T>(body, total as usize)?;
    let mut factors = Vec::with_capacity(chain.depth());
    let mut at = 0;
    for spec in chain.factors() {
        let len = spec.nonzeros() as usize;
        factors.push(FactorWeights::new(
            spec.clone(),
            values[at..at + len].to_vec(),
        )?);
        at += len;
    }
    Ok(BlockKernel::new(factors))
}

pub fn encode_block_kernel<T: Scalar>(
    chain: &FactorChain,
    kernel: &BlockKernel<T>,
) -> Result<Vec<u8>> {
    kernel.validate(chain)?;
    let mut body = encode_weights(kernel);
    if let Some(affine) = &kernel.affine {
        for a in affine {
            encode(a.scale.iter().chain(&a.shift).copied(), &mut body);
        }
    }
    let header = KernelHeader {
        format: KERNEL_FORMAT.into(),
        version: FILE_VERSION,
        kind: KernelKind::Factored,
        dtype: T::DTYPE.into(),
        endianness: "little".into(),
        chain: Some(chain.to_document()),
        shapes: chain
            .factors()
            .iter()
            .map(|f| [f.branches, f.nonzeros() as usize])
            .collect(),
        dense_shape: None,
        affine: kernel.affine.is_some(),
    };
    Ok(with_header(&header, body))
}

pub fn encode_dense_kernel<T: Scalar>(kernel: &DenseKernel<T>) -> Result<Vec<u8>> {
    kernel.validate()?;
    let mut body = Vec::new();
    encode(kernel.data.iter().copied(), &mut body);
    let header = KernelHeader {
        format: KERNEL_FORMAT.into(),
        version: FILE_VERSION,
        kind: KernelKind::Dense,
        dtype: T::DTYPE.into(),
        endianness: "little".into(),
        chain: None,
        shapes: Vec::new(),
        dense_shape: Some([kernel.channels_out, kernel.channels_in, kernel.taps]),
        affine: false,
    };
    Ok(with_header(&header, body))
}

pub fn read_kernel_header(bytes: &[u8]) -> Result<(KernelHeader, &[u8])> {
    let (head, body) = split_header(bytes)?;
    let header: KernelHeader =
        serde_json::from_slice(head).map_err(|e| Error::Format(format!("kernel header: {e}")))?;
    Ok((header, body))
}

/// True when `bytes` starts with a kernel manifest header.
pub fn is_kernel_manifest(bytes: &[u8]) -> bool {
    read_kernel_header(bytes).is_ok_and(|(h, _)| h.format == KERNEL_FORMAT)
}

pub fn decode_block_kernel<T: Scalar>(bytes: &[u8]) -> Result<(FactorChain, BlockKernel<T>)> {
    let (header, body) = read_kernel_header(bytes)?;
    check_common(
        &header.format,
        KERNEL_FORMAT,
        header.version,
        &header.dtype,
        &header.endianness,
        T::DTYPE,
    )?;
    if header.kind != KernelKind::Factored {
        return Err(Error::Format("expected a factored kernel".into()));
    }
    let doc = header
        .chain
        .as_ref()
        .ok_or_else(|| Error::Format("factored kernel without chain".into()))?;
    let chain = FactorChain::from_document(doc)?;
    let weights = chain.nonzeros() as usize * T::BYTES;
    let affine_len: usize = chain
        .factors()
        .iter()
        .map(|f| 2 * f.channels_out)
        .sum::<usize>()
        * T::BYTES;
    let expected = weights + if header.affine { affine_len } else { 0 };
    if body.len() != expected {
        return Err(Error::Format(format!(
            "kernel body has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let mut kernel = decode_weights(&chain, &body[..weights])?;
    if header.affine {
        let mut at = weights;
        let mut affine = Vec::with_capacity(chain.depth());
        for f in chain.factors() {
            let c = f.channels_out;
            let v = decode::<T>(&body[at..at + 2 * c * T::BYTES], 2 * c)?;
            affine.push(Affine {
                scale: v[..c].to_vec(),
                shift: v[c..].to_vec(),
            });
            at += 2 * c * T::BYTES;
        }
        kernel.affine = Some(affine);
    }
    Ok((chain, kernel))
}

pub fn decode_dense_kernel<T: Scalar>(bytes: &[u8]) -> Result<DenseKernel<T>> {
    let (header, body) = read_kernel_header(bytes)?;
    check_common(
        &header.format,
        KERNEL_FORMAT,
        header.version,
        &header.dtype,
        &header.endianness,
        T::DTYPE,
    )?;
    let [co, ci, s] = match (header.kind, header.dense_shape) {
        (KernelKind::Dense, Some(shape)) => shape,
        _ => return Err(Error::Format("expected a dense kernel".into())),
    };
    let kernel = DenseKernel {
        channels_out: co,
        channels_in: ci,
        taps: s,
        data: decode(body, co * ci * s)?,
    };
    kernel.validate()?;
    Ok(kernel)
}

pub fn encode_feature_map<T: Scalar>(x: &FeatureMap<T>) -> Vec<u8> {
    let s = x.shape();
    let header = FeatureMapHeader {
        format: FEATURE_MAP_FORMAT.into(),
        version: FILE_VERSION,
        n: s.n,
        c: s.c,
        h: s.h,
        w: s.w,
        dtype: T::DTYPE.into(),
        endianness: "little".into(),
    };
    let mut body = Vec::with_capacity(s.len() * T::BYTES);
    encode(x.data().iter().copied(), &mut body);
    with_header(&header, body)
}

pub fn decode_feature_map<T: Scalar>(bytes: &[u8]) -> Result<FeatureMap<T>> {
    let (head, body) = split_header(bytes)?;
    let h: FeatureMapHeader = serde_json::from_slice(head)
        .map_err(|e| Error::Format(format!("feature map header: {e}")))?;
    check_common(
        &h.format,
        FEATURE_MAP_FORMAT,
        h.version,
        &h.dtype,
        &h.endianness,
        T::DTYPE,
    )?;
    let shape = Shape::new(h.n, h.c, h.h, h.w);
    FeatureMap::from_vec(shape, decode(body, shape.len())?)
}

pub fn save(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}
