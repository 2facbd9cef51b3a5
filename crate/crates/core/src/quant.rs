//! Uniform int8 quantization, bf16 storage, single-bit flips and Hamming
//! accounting.
//!
//! Stored representations are bit-exact: int8 words are two's-complement
//! bytes, bf16 words are the top 16 bits of the IEEE f32 pattern. Attacks
//! address these words directly, so everything here is careful about the
//! exact bits on disk/in memory.
//!
//! Int8 follows `w_q = clamp(round(w / s) + z, -128, 127)` with
//! round-half-to-even; the default is symmetric (`z = 0`) with per-row
//! scales `s = maxabs(row) / 127`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int8,
    Bf16,
}

impl Dtype {
    pub fn bit_width(self) -> u8 {
        match self {
            Dtype::Int8 => 8,
            Dtype::Bf16 => 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    PerTensor,
    PerRow,
}

/// Stored words of a quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Words {
    I8(Vec<i8>),
    B16(Vec<u16>),
}

/// A weight tensor in its stored (attackable) representation.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    dtype: Dtype,
    rows: usize,
    cols: usize,
    words: Words,
    /// One scale per tensor or per row; `[1.0]` for bf16.
    scales: Vec<f32>,
    zero_point: i32,
    scale_mode: ScaleMode,
    /// Set when a degenerate (all-zero) input forced a fallback scale of 1.0.
    pub degenerate: bool,
}

/// Address of a single stored bit. Bit 0 is the LSB of the stored word; for
/// int8, bit 7 is the sign bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipLocation {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub bit: u8,
}

/// Round-half-to-even int8 quantization of one value under a frozen scale.
pub fn quantize_value(w: f64, scale: f32, zero_point: i32) -> i8 {
    let q = (w / scale as f64).round_ties_even() + zero_point as f64;
    q.clamp(-128.0, 127.0) as i8
}

/// Encode one f64 as a bf16 word (via f32, round-to-nearest-even).
pub fn bf16_encode(x: f64) -> u16 {
    let bits = (x as f32).to_bits();
    if (x as f32).is_nan() {
        // quiet NaN, keep sign and top payload bit set
        return ((bits >> 16) as u16) | 0x0040;
    }
    let round_bit = (bits >> 16) & 1;
    ((bits.wrapping_add(0x7FFF + round_bit)) >> 16) as u16
}

/// Decode a bf16 word (exact).
pub fn bf16_decode(w: u16) -> f64 {
    f32::from_bits((w as u32) << 16) as f64
}

fn int8_scales(w: &Matrix, mode: ScaleMode) -> (Vec<f32>, bool) {
    let mut degenerate = false;
    let scales = match mode {
        ScaleMode::PerTensor => {
            let max = w.max_abs();
            if max == 0.0 {
                degenerate = true;
                vec![1.0f32]
            } else {
                vec![(max / 127.0) as f32]
            }
        }
        ScaleMode::PerRow => (0..w.rows())
            .map(|r| {
                let max = w.row(r).iter().fold(0.0f64, |m, x| m.max(x.abs()));
                if max == 0.0 {
                    degenerate = true;
                    1.0f32
                } else {
                    (max / 127.0) as f32
                }
            })
            .collect(),
    };
    (scales, degenerate)
}

/// Quantize a matrix into its stored representation. Int8 computes scales as
/// `maxabs / 127` (per tensor or per row); bf16 just re-encodes each element.
pub fn quantize(w: &Matrix, mode: ScaleMode, dtype: Dtype) -> QuantizedTensor {
    quantize_with_zero_point(w, mode, dtype, 0)
}

/// Int8 quantization with an explicit zero point (`z` ignored for bf16).
pub fn quantize_with_zero_point(
    w: &Matrix,
    mode: ScaleMode,
    dtype: Dtype,
    zero_point: i32,
) -> QuantizedTensor {
    match dtype {
        Dtype::Int8 => {
            let (scales, degenerate) = int8_scales(w, mode);
            let mut words = Vec::with_capacity(w.rows() * w.cols());
            for r in 0..w.rows() {
                let s = match mode {
                    ScaleMode::PerTensor => scales[0],
                    ScaleMode::PerRow => scales[r],
                };
                for &x in w.row(r) {
                    words.push(quantize_value(x, s, zero_point));
                }
            }
            QuantizedTensor {
                dtype,
                rows: w.rows(),
                cols: w.cols(),
                words: Words::I8(words),
                scales,
                zero_point,
                scale_mode: mode,
                degenerate,
            }
        }
        Dtype::Bf16 => {
            let words = w.data().iter().map(|&x| bf16_encode(x)).collect();
            QuantizedTensor {
                dtype,
                rows: w.rows(),
                cols: w.cols(),
                words: Words::B16(words),
                scales: vec![1.0],
                zero_point: 0,
                scale_mode: ScaleMode::PerTensor,
                degenerate: false,
            }
        }
    }
}

/// Reconstruct real weights: `w = s * (q - z)` for int8, bit-pattern
/// reinterpretation for bf16.
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let mut out = Matrix::zeros(q.rows, q.cols);
    for r in 0..q.rows {
        for c in 0..q.cols {
            out.set(r, c, q.dequant_at(r, c));
        }
    }
    out
}

impl QuantizedTensor {
    /// Assemble from raw parts (container reads, tests).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dtype: Dtype,
        rows: usize,
        cols: usize,
        words: Words,
        scales: Vec<f32>,
        zero_point: i32,
        scale_mode: ScaleMode,
    ) -> Result<Self> {
        let n = match &words {
            Words::I8(v) => v.len(),
            Words::B16(v) => v.len(),
        };
        if n != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "QuantizedTensor::from_parts",
                expected: format!("{} words", rows * cols),
                got: format!("{n}"),
            });
        }
        let want_scales = match scale_mode {
            ScaleMode::PerTensor => 1,
            ScaleMode::PerRow => rows,
        };
        if scales.len() != want_scales {
            return Err(Error::DimensionMismatch {
                op: "QuantizedTensor::from_parts",
                expected: format!("{want_scales} scales"),
                got: format!("{}", scales.len()),
            });
        }
        if scales.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument("scales must be positive".into()));
        }
        match (&words, dtype) {
            (Words::I8(_), Dtype::Int8) | (Words::B16(_), Dtype::Bf16) => {}
            _ => return Err(Error::InvalidArgument("words do not match dtype".into())),
        }
        Ok(QuantizedTensor {
            dtype,
            rows,
            cols,
            words,
            scales,
            zero_point,
            scale_mode,
            degenerate: false,
        })
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale_mode(&self) -> ScaleMode {
        self.scale_mode
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn words(&self) -> &Words {
        &self.words
    }

    pub fn bit_width(&self) -> u8 {
        self.dtype.bit_width()
    }

    /// Total stored bits, the BER attack's address space.
    pub fn total_bits(&self) -> u64 {
        (self.rows * self.cols) as u64 * self.bit_width() as u64
    }

    /// Scale applying to element row `r`.
    pub fn scale_for_row(&self, r: usize) -> f32 {
        match self.scale_mode {
            ScaleMode::PerTensor => self.scales[0],
            ScaleMode::PerRow => self.scales[r],
        }
    }

    /// Dequantized value at one element.
    pub fn dequant_at(&self, r: usize, c: usize) -> f64 {
        let idx = r * self.cols + c;
        match &self.words {
            Words::I8(v) => {
                self.scale_for_row(r) as f64 * (v[idx] as i32 - self.zero_point) as f64
            }
            Words::B16(v) => bf16_decode(v[idx]),
        }
    }

    /// Stored word widened to u16 (int8 words occupy the low byte).
    pub fn word_at(&self, r: usize, c: usize) -> u16 {
        let idx = r * self.cols + c;
        match &self.words {
            Words::I8(v) => v[idx] as u8 as u16,
            Words::B16(v) => v[idx],
        }
    }

    /// Overwrite one stored word (low byte for int8).
    pub fn set_word(&mut self, r: usize, c: usize, word: u16) {
        let idx = r * self.cols + c;
        match &mut self.words {
            Words::I8(v) => v[idx] = word as u8 as i8,
            Words::B16(v) => v[idx] = word,
        }
    }

    fn check_bounds(&self, loc: &FlipLocation) -> Result<()> {
        if loc.row >= self.rows {
            return Err(Error::OutOfBounds {
                what: "row",
                index: loc.row,
                bound: self.rows,
            });
        }
        if loc.col >= self.cols {
            return Err(Error::OutOfBounds {
                what: "col",
                index: loc.col,
                bound: self.cols,
            });
        }
        if loc.bit >= self.bit_width() {
            return Err(Error::OutOfBounds {
                what: "bit",
                index: loc.bit as usize,
                bound: self.bit_width() as usize,
            });
        }
        Ok(())
    }

    /// XOR one stored bit in place; returns the dequantized value change at
    /// that element. Flipping the same bit again restores the tensor exactly.
    pub fn flip_bit_in_place(&mut self, loc: &FlipLocation) -> Result<f64> {
        self.check_bounds(loc)?;
        let before = self.dequant_at(loc.row, loc.col);
        let word = self.word_at(loc.row, loc.col) ^ (1u16 << loc.bit);
        self.set_word(loc.row, loc.col, word);
        Ok(self.dequant_at(loc.row, loc.col) - before)
    }

    /// Flip addressed by a linear bit index over the row-major words,
    /// LSB-first within each word. Used by the random-BER fault model.
    pub fn flip_linear_bit(&mut self, bit_index: u64) -> FlipLocation {
        let bw = self.bit_width() as u64;
        let el = (bit_index / bw) as usize;
        let bit = (bit_index % bw) as u8;
        let loc = FlipLocation {
            layer: 0,
            row: el / self.cols,
            col: el % self.cols,
            bit,
        };
        self.flip_bit_in_place(&loc).expect("index in range");
        loc
    }
}

/// Copy-on-write single-bit flip: returns the modified tensor and the
/// dequantized delta at the flipped element.
pub fn flip_bit(q: &QuantizedTensor, loc: &FlipLocation) -> Result<(QuantizedTensor, f64)> {
    let mut out = q.clone();
    let delta = out.flip_bit_in_place(loc)?;
    Ok((out, delta))
}

/// Number of differing stored bits between two tensors of identical layout.
pub fn hamming_distance(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<u64> {
    if a.dtype != b.dtype || a.rows != b.rows || a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            op: "hamming_distance",
            expected: format!("{:?} {}x{}", a.dtype, a.rows, a.cols),
            got: format!("{:?} {}x{}", b.dtype, b.rows, b.cols),
        });
    }
    let total = match (&a.words, &b.words) {
        (Words::I8(x), Words::I8(y)) => x
            .iter()
            .zip(y)
            .map(|(p, q)| ((*p as u8) ^ (*q as u8)).count_ones() as u64)
            .sum(),
        (Words::B16(x), Words::B16(y)) => {
            x.iter().zip(y).map(|(p, q)| (p ^ q).count_ones() as u64).sum()
        }
        _ => unreachable!("dtype checked above"),
    };
    Ok(total)
}
