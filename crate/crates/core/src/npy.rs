//! NPY v1.0 array file reader/writer.
//!
//! Layout: magic `\x93NUMPY`, version bytes `\x01\x00`, a little-endian u16
//! header length, then a Python-dict header padded with spaces and terminated
//! by `\n` so the payload starts on a 64-byte boundary, then the raw
//! little-endian row-major payload. Only IEEE float dtypes `<f4`/`<f8` and
//! C order are supported.
//!
//! Writing always emits 5-D shapes. Reading accepts 1-D through 5-D arrays,
//! left-padding the shape with 1s to 5-D, so plain (T,H,W) volumes and
//! (C,T,H,W) feature maps load directly.

use std::fs;
use std::path::Path;

use crate::tensor::{DynTensor, Element, Shape5D, Tensor5D};
use crate::{Error, Result};

const MAGIC: [u8; 6] = *b"\x93NUMPY";
const VERSION: [u8; 2] = [1, 0];
const ALIGN: usize = 64;

/// Serializes a tensor to NPY v1.0 bytes.
pub fn npy_write_bytes<E: Element>(t: &Tensor5D<E>) -> Vec<u8> {
    let s = t.shape();
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}, {}, {}, {}), }}",
        E::WIDTH.npy_descr(),
        s.n,
        s.c,
        s.t,
        s.h,
        s.w
    );
    // Pad with spaces, then a final newline, so the full preamble length is a
    // multiple of ALIGN.
    let preamble = MAGIC.len() + VERSION.len() + 2;
    let unpadded = preamble + dict.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + padding + 1;
    assert!(header_len <= u16::MAX as usize, "header cannot exceed u16 in v1.0");

    let mut out = Vec::with_capacity(preamble + header_len + t.data().len() * E::WIDTH.byte_width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(out.len() + padding, b' ');
    out.push(b'\n');
    for &v in t.data() {
        v.append_le_bytes(&mut out);
    }
    out
}

pub fn npy_write<E: Element>(t: &Tensor5D<E>, path: &Path) -> Result<()> {
    fs::write(path, npy_write_bytes(t))?;
    Ok(())
}

/// Reads an NPY file; values must be finite.
pub fn npy_read(path: &Path) -> Result<DynTensor> {
    npy_read_with(path, true)
}

/// Reads an NPY file, optionally tolerating non-finite values.
pub fn npy_read_with(path: &Path, finite_only: bool) -> Result<DynTensor> {
    let bytes = fs::read(path)?;
    npy_read_bytes(&bytes, finite_only)
}

pub fn npy_read_bytes(bytes: &[u8], finite_only: bool) -> Result<DynTensor> {
    let (descr, shape, payload) = parse_header(bytes)?;
    match descr {
        Descr::F32 => Ok(DynTensor::F32(decode::<f32>(shape, payload, finite_only)?)),
        Descr::F64 => Ok(DynTensor::F64(decode::<f64>(shape, payload, finite_only)?)),
    }
}

enum Descr {
    F32,
    F64,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedNpy(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<(Descr, Shape5D, &[u8])> {
    if bytes.len() < 10 || bytes[..6] != MAGIC {
        return Err(malformed("missing NPY magic"));
    }
    if bytes[6..8] != VERSION {
        return Err(malformed(format!(
            "unsupported format version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header_end = 10 + header_len;
    if bytes.len() < header_end {
        return Err(malformed("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..header_end])
        .map_err(|_| malformed("header is not ASCII"))?;

    let descr = match dict_value(header, "descr")? {
        "'<f4'" => Descr::F32,
        "'<f8'" => Descr::F64,
        other => return Err(malformed(format!("unsupported dtype {other}, need '<f4' or '<f8'"))),
    };
    match dict_value(header, "fortran_order")? {
        "False" => {}
        "True" => return Err(malformed("fortran_order arrays are not supported")),
        other => return Err(malformed(format!("bad fortran_order value {other}"))),
    }
    let shape = parse_shape(dict_value(header, "shape")?)?;
    Ok((descr, shape, &bytes[header_end..]))
}

/// Pulls one value out of the header dict. The writer-side format is rigid
/// enough that simple string scanning is reliable; odd inputs fail cleanly.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| malformed(format!("header missing key '{key}'")))?;
    let rest = header[at + pat.len()..].trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1).ok_or_else(|| malformed("unterminated shape tuple"))?
    } else {
        rest.find([',', '}']).ok_or_else(|| malformed("unterminated header value"))?
    };
    Ok(rest[..end].trim_end())
}

fn parse_shape(tuple: &str) -> Result<Shape5D> {
    let inner = tuple
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| malformed(format!("shape is not a tuple: {tuple}")))?;
    let mut dims: Vec<usize> = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue; // trailing comma of 1-tuples
        }
        dims.push(
            part.parse::<usize>()
                .map_err(|_| malformed(format!("bad shape entry {part:?}")))?,
        );
    }
    if dims.is_empty() || dims.len() > 5 {
        return Err(malformed(format!("need 1 to 5 dimensions, got {}", dims.len())));
    }
    while dims.len() < 5 {
        dims.insert(0, 1);
    }
    Shape5D::new(dims[0], dims[1], dims[2], dims[3], dims[4])
}

fn decode<E: Element>(shape: Shape5D, payload: &[u8], finite_only: bool) -> Result<Tensor5D<E>> {
    let count = shape.checked_len()?;
    let bw = E::WIDTH.byte_width();
    let need = count
        .checked_mul(bw)
        .ok_or_else(|| Error::Resource("payload size overflows usize".into()))?;
    if payload.len() != need {
        return Err(malformed(format!(
            "payload has {} bytes, shape {shape} needs {need}",
            payload.len()
        )));
    }
    let data: Vec<E> = payload.chunks_exact(bw).map(E::from_le_slice).collect();
    if finite_only {
        Tensor5D::from_vec(shape, data)
    } else {
        Tensor5D::from_vec_allow_non_finite(shape, data)
    }
}
