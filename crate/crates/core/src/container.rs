//! The RORT binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "RORT"
//! version  u16      currently 1
//! count    u32      number of tensor records
//! record:
//!   name_len   u16   + UTF-8 name bytes
//!   dtype      u8    0 = f32, 1 = bf16, 2 = i8
//!   quant      u8    1 when scale/zero-point metadata follows
//!   [if quant] scale_mode u8 (0 per-tensor, 1 per-row),
//!              scale_count u32, scales f32 each, zero_point i32
//!   ndim       u8    always 2 here
//!   dims       u64 each
//!   payload    raw row-major words (f32 LE / u16 LE / i8)
//! ```
//!
//! Stored words round-trip bit-exactly; Hamming accounting depends on it.
//! `scale_count` is explicit so per-row scales can be parsed before the dims
//! field that the record layout places after them.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::{Dtype, QuantizedTensor, ScaleMode, Words};
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"RORT";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_BF16: u8 = 1;
const DTYPE_I8: u8 = 2;

/// One named tensor record.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    /// Full-precision tensor, stored as f32 words.
    F32(Matrix),
    /// Quantized / bit-exact weight tensor.
    Quantized(QuantizedTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub payload: TensorPayload,
}

/// Ordered collection of uniquely named tensor records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RortContainer {
    pub records: Vec<TensorRecord>,
}

impl RortContainer {
    pub fn new() -> Self {
        RortContainer { records: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, payload: TensorPayload) -> Result<()> {
        let name = name.into();
        if self.records.iter().any(|r| r.name == name) {
            return Err(Error::Container {
                offset: 0,
                message: format!("duplicate tensor name {name:?}"),
            });
        }
        self.records.push(TensorRecord { name, payload });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize to bytes. Exact inverse of [`from_bytes`].
pub fn to_bytes(container: &RortContainer) -> Result<Vec<u8>> {
    let mut seen = std::collections::BTreeSet::new();
    for r in &container.records {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::Container {
                offset: 0,
                message: format!("duplicate tensor name {:?}", r.name),
            });
        }
    }
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.u16(VERSION);
    w.u32(container.records.len() as u32);
    for rec in &container.records {
        let name = rec.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Container {
                offset: w.buf.len() as u64,
                message: format!("tensor name too long ({} bytes)", name.len()),
            });
        }
        w.u16(name.len() as u16);
        w.buf.extend_from_slice(name);
        match &rec.payload {
            TensorPayload::F32(m) => {
                w.buf.push(DTYPE_F32);
                w.buf.push(0); // not quantized
                w.buf.push(2); // ndim
                w.u64(m.rows() as u64);
                w.u64(m.cols() as u64);
                for &x in m.data() {
                    w.f32(x as f32);
                }
            }
            TensorPayload::Quantized(q) => {
                match q.dtype() {
                    Dtype::Bf16 => {
                        w.buf.push(DTYPE_BF16);
                        w.buf.push(0); // bf16 carries no scale metadata
                    }
                    Dtype::Int8 => {
                        w.buf.push(DTYPE_I8);
                        w.buf.push(1);
                        w.buf.push(match q.scale_mode() {
                            ScaleMode::PerTensor => 0,
                            ScaleMode::PerRow => 1,
                        });
                        w.u32(q.scales().len() as u32);
                        for &s in q.scales() {
                            w.f32(s);
                        }
                        w.i32(q.zero_point());
                    }
                }
                w.buf.push(2);
                w.u64(q.rows() as u64);
                w.u64(q.cols() as u64);
                match q.words() {
                    Words::I8(v) => {
                        w.buf.extend(v.iter().map(|&b| b as u8));
                    }
                    Words::B16(v) => {
                        for &word in v {
                            w.u16(word);
                        }
                    }
                }
            }
        }
    }
    Ok(w.buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Name of the record currently being parsed, for error messages.
    current: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Container {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what} of {:?}: expected {n} bytes, {} available",
                    self.current,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parse a container from bytes, validating magic, names and payload sizes.
pub fn from_bytes(bytes: &[u8]) -> Result<RortContainer> {
    let mut r = Reader {
        bytes,
        pos: 0,
        current: String::from("header"),
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Container {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected \"RORT\""),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Container {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("record count")?;
    let mut container = RortContainer::new();
    for i in 0..count {
        r.current = format!("record {i}");
        let name_len = r.u16("name length")? as usize;
        let name_offset = r.pos as u64;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| {
            Error::Container {
                offset: name_offset,
                message: "tensor name is not valid UTF-8".into(),
            }
        })?;
        r.current = name.clone();
        let dtype = r.u8("dtype code")?;
        let quant = r.u8("quant flag")?;
        let mut scale_mode = ScaleMode::PerTensor;
        let mut scales = vec![1.0f32];
        let mut zero_point = 0i32;
        if quant == 1 {
            let mode_offset = r.pos as u64;
            scale_mode = match r.u8("scale mode")? {
                0 => ScaleMode::PerTensor,
                1 => ScaleMode::PerRow,
                m => {
                    return Err(Error::Container {
                        offset: mode_offset,
                        message: format!("unknown scale mode {m}"),
                    })
                }
            };
            let n_scales = r.u32("scale count")? as usize;
            scales = Vec::with_capacity(n_scales);
            for _ in 0..n_scales {
                scales.push(f32::from_le_bytes(r.take(4, "scales")?.try_into().unwrap()));
            }
            zero_point = r.i32("zero point")?;
        }
        let ndim_offset = r.pos as u64;
        let ndim = r.u8("ndim")?;
        if ndim != 2 {
            return Err(Error::Container {
                offset: ndim_offset,
                message: format!("unsupported ndim {ndim} for {name:?} (want 2)"),
            });
        }
        let rows = r.u64("dims")? as usize;
        let cols = r.u64("dims")? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Container {
            offset: ndim_offset,
            message: format!("dimension overflow in {name:?}"),
        })?;
        let payload = match (dtype, quant) {
            (DTYPE_F32, 0) => {
                let raw = r.take(4 * n, "payload")?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                TensorPayload::F32(Matrix::from_vec(rows, cols, data)?)
            }
            (DTYPE_BF16, 0) => {
                let raw = r.take(2 * n, "payload")?;
                let words = raw
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                TensorPayload::Quantized(QuantizedTensor::from_parts(
                    Dtype::Bf16,
                    rows,
                    cols,
                    Words::B16(words),
                    vec![1.0],
                    0,
                    ScaleMode::PerTensor,
                )?)
            }
            (DTYPE_I8, 1) => {
                let raw = r.take(n, "payload")?;
                let words = raw.iter().map(|&b| b as i8).collect();
                TensorPayload::Quantized(QuantizedTensor::from_parts(
                    Dtype::Int8,
                    rows,
                    cols,
                    Words::I8(words),
                    scales,
                    zero_point,
                    scale_mode,
                )?)
            }
            _ => {
                return Err(Error::Container {
                    offset: ndim_offset,
                    message: format!(
                        "unsupported dtype/quant combination ({dtype}, {quant}) in {name:?}"
                    ),
                })
            }
        };
        container.push(name, payload).map_err(|e| match e {
            Error::Container { message, .. } => Error::Container {
                offset: name_offset,
                message,
            },
            other => other,
        })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Container {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after last record", bytes.len() - r.pos),
        });
    }
    Ok(container)
}

pub fn write_container(path: impl AsRef<Path>, container: &RortContainer) -> Result<()> {
    let bytes = to_bytes(container)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<RortContainer> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{hamming_distance, quantize};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn empty_container_is_ten_bytes() {
        let c = RortContainer::new();
        let bytes = to_bytes(&c).unwrap();
        assert_eq!(bytes.len(), 10);
        assert_eq!(from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn int8_record_roundtrips_bit_exactly() {
        let w = random_matrix(2, 2, 1);
        let q = quantize(&w, ScaleMode::PerRow, Dtype::Int8);
        let mut c = RortContainer::new();
        c.push("w", TensorPayload::Quantized(q.clone())).unwrap();
        let back = from_bytes(&to_bytes(&c).unwrap()).unwrap();
        let TensorPayload::Quantized(q2) = &back.records[0].payload else {
            panic!("wrong payload kind");
        };
        assert_eq!(hamming_distance(&q, q2).unwrap(), 0);
        assert_eq!(q.scales(), q2.scales());
        assert_eq!(q.zero_point(), q2.zero_point());
    }

    #[test]
    fn truncated_payload_names_tensor_and_sizes() {
        let w = random_matrix(4, 4, 2);
        let q = quantize(&w, ScaleMode::PerTensor, Dtype::Int8);
        let mut c = RortContainer::new();
        c.push("layer0", TensorPayload::Quantized(q)).unwrap();
        let bytes = to_bytes(&c).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        let err = from_bytes(cut).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer0"), "{msg}");
        assert!(msg.contains("payload"), "{msg}");
        assert!(msg.contains("expected 16 bytes"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let err = from_bytes(b"NOPE\x01\x00\x00\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let w = random_matrix(2, 2, 3);
        let q = quantize(&w, ScaleMode::PerTensor, Dtype::Int8);
        let mut c = RortContainer::new();
        c.push("a", TensorPayload::Quantized(q.clone())).unwrap();
        assert!(c.push("a", TensorPayload::Quantized(q)).is_err());
    }

    #[test]
    fn bf16_and_f32_records_roundtrip() {
        let w = random_matrix(3, 5, 4);
        let q = quantize(&w, ScaleMode::PerTensor, Dtype::Bf16);
        let mut c = RortContainer::new();
        c.push("bf", TensorPayload::Quantized(q.clone())).unwrap();
        c.push("full", TensorPayload::F32(w.clone())).unwrap();
        let bytes = to_bytes(&c).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.records.len(), 2);
        let TensorPayload::Quantized(q2) = &back.get("bf").unwrap().payload else {
            panic!();
        };
        assert_eq!(hamming_distance(&q, q2).unwrap(), 0);
        let TensorPayload::F32(m) = &back.get("full").unwrap().payload else {
            panic!();
        };
        // f32 storage rounds the f64 values
        for (a, b) in w.data().iter().zip(m.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // byte-identical re-serialization
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            /// write -> read -> write is byte-identical for arbitrary
            /// containers of all three record kinds.
            #[test]
            fn roundtrip_is_byte_identical(seed in 0u64..10_000, n_records in 0usize..4) {
                let mut c = RortContainer::new();
                for i in 0..n_records {
                    let w = random_matrix(1 + i, 2 + i, seed + i as u64);
                    let payload = match (seed as usize + i) % 3 {
                        0 => TensorPayload::Quantized(quantize(&w, ScaleMode::PerRow, Dtype::Int8)),
                        1 => TensorPayload::Quantized(quantize(&w, ScaleMode::PerTensor, Dtype::Bf16)),
                        _ => TensorPayload::F32(w),
                    };
                    c.push(format!("t{i}"), payload).unwrap();
                }
                let bytes = to_bytes(&c).unwrap();
                let back = from_bytes(&bytes).unwrap();
                prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
            }
        }
    }
}
