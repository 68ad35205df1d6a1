//! INT4 symmetric group quantization of frozen weights and the memory-mapped
//! store that serves them block by block.

mod store;

pub use store::{
    write_entries, write_quantized_store, write_store, BlockWeights, QuantizedWeightStore,
    StoreEntry, StoreTensor, FORMAT_VERSION, MAGIC,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest code magnitude. The range is symmetric so that negating a tensor
/// negates its codes and zero is exactly representable.
pub const QMAX: i8 = 7;

pub const DEFAULT_GROUP_SIZE: u32 = 32;

/// Packed 4-bit codes with one `f32` scale per group of `group_size` elements
/// along the last axis (the last group of a row may be short).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub group_size: u32,
    /// Two codes per byte, low nibble holds the even element index.
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
}

/// Scale groups for a tensor of `shape`: `(rows, groups_per_row, row_len)`.
pub(crate) fn group_layout(shape: &[usize], group_size: u32) -> (usize, usize, usize) {
    let row_len = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    let rows = n.checked_div(row_len).unwrap_or(0);
    let g = group_size.max(1) as usize;
    (rows, row_len.div_ceil(g), row_len)
}

pub(crate) fn scale_count(shape: &[usize], group_size: u32) -> usize {
    let (rows, groups, _) = group_layout(shape, group_size);
    rows * groups
}

pub(crate) fn packed_len(n: usize) -> usize {
    n.div_ceil(2)
}

fn encode_nibble(code: i8) -> u8 {
    (code as u8) & 0x0f
}

fn decode_nibble(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

/// Code at flat index `i` of a packed buffer.
pub(crate) fn code_at(codes: &[u8], i: usize) -> i8 {
    let byte = codes[i / 2];
    decode_nibble(if i.is_multiple_of(2) {
        byte & 0x0f
    } else {
        byte >> 4
    })
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code(&self, i: usize) -> i8 {
        code_at(&self.codes, i)
    }

    /// Decoded codes, mostly for inspection and tests.
    pub fn unpacked_codes(&self) -> Vec<i8> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }

    pub fn max_scale(&self) -> f32 {
        self.scales.iter().copied().fold(0.0, f32::max)
    }
}

/// Symmetric per-group INT4 quantization:
/// `scale = max|w| / 7`, `code = round_half_even(w / scale)` clamped to ±7.
pub fn quantize(name: &str, w: &Tensor<f32>, group_size: u32) -> Result<QuantizedTensor> {
    if group_size == 0 {
        return Err(Error::Config("group_size must be positive".into()));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite { op: "quantize" });
    }
    let (rows, groups, row_len) = group_layout(w.shape(), group_size);
    let g = group_size as usize;
    let n = w.len();
    let mut codes = vec![0u8; packed_len(n)];
    let mut scales = Vec::with_capacity(rows * groups);
    for r in 0..rows {
        let row = &w.data()[r * row_len..(r + 1) * row_len];
        for (gi, chunk) in row.chunks(g).enumerate() {
            let amax = chunk.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let scale = amax / QMAX as f32;
            scales.push(scale);
            if scale == 0.0 {
                continue;
            }
            for (k, &v) in chunk.iter().enumerate() {
                let q = (v / scale)
                    .round_ties_even()
                    .clamp(-(QMAX as f32), QMAX as f32) as i8;
                let idx = r * row_len + gi * g + k;
                let nib = encode_nibble(q);
                codes[idx / 2] |= if idx.is_multiple_of(2) { nib } else { nib << 4 };
            }
        }
    }
    Ok(QuantizedTensor {
        name: name.to_owned(),
        shape: w.shape().to_vec(),
        group_size,
        codes,
        scales,
    })
}

/// Decode packed `codes`/`scales` for a tensor of `shape` into `out`.
pub(crate) fn dequantize_into(
    name: &str,
    shape: &[usize],
    group_size: u32,
    codes: &[u8],
    scales: &[u8],
    out: &mut [f32],
) -> Result<()> {
    let n: usize = shape.iter().product();
    let (rows, groups, row_len) = group_layout(shape, group_size);
    if codes.len() != packed_len(n) || scales.len() != 4 * rows * groups || out.len() != n {
        return Err(Error::CorruptPacking {
            tensor: name.to_owned(),
            detail: format!(
                "{} code bytes / {} scale bytes for {n} elements",
                codes.len(),
                scales.len()
            ),
        });
    }
    let g = group_size as usize;
    for r in 0..rows {
        for gi in 0..groups {
            let s_off = 4 * (r * groups + gi);
            let scale = f32::from_le_bytes(scales[s_off..s_off + 4].try_into().unwrap());
            let start = r * row_len + gi * g;
            let end = (start + g).min((r + 1) * row_len);
            for (idx, o) in (start..end).zip(&mut out[start..end]) {
                let c = code_at(codes, idx);
                if c < -QMAX {
                    return Err(Error::CorruptPacking {
                        tensor: name.to_owned(),
                        detail: format!("code {c} at element {idx}"),
                    });
                }
                *o = c as f32 * scale;
            }
        }
    }
    Ok(())
}

/// `out = code · scale_of_its_group`.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor<f32>> {
    let scale_bytes: Vec<u8> = q.scales.iter().flat_map(|s| s.to_le_bytes()).collect();
    let mut out = vec![0.0f32; q.len()];
    dequantize_into(
        &q.name,
        &q.shape,
        q.group_size,
        &q.codes,
        &scale_bytes,
        &mut out,
    )?;
    Tensor::from_vec(&q.shape, out)
}
