//! Binary code plumbing: fixed-width bit vectors (MSB first) and the
//! composition of per-slice indices into a single discrete code.

use crate::error::{Error, Result};

/// Fixed-width binary representation, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitCode {
    bits: Vec<u8>,
}

impl BitCode {
    pub fn of(value: u64, width: u32) -> Self {
        let bits = (0..width)
            .map(|i| ((value >> (width - 1 - i)) & 1) as u8)
            .collect();
        BitCode { bits }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        BitCode { bits: bits.to_vec() }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn value(&self) -> u64 {
        self.bits.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64)
    }

    pub fn width(&self) -> u32 {
        self.bits.len() as u32
    }
}

pub fn log2_exact(x: usize) -> u32 {
    assert!(x.is_power_of_two(), "{x} is not a power of two");
    x.trailing_zeros()
}

/// Concatenate the binary representations of per-slice indices (each of width
/// log2 K', slice 0 most significant) into one code in [0, K'^n_d).
pub fn compose_code(slice_indices: &[u32], k_prime: usize) -> Result<u64> {
    let bits = log2_exact(k_prime);
    let mut code: u64 = 0;
    for &idx in slice_indices {
        if idx as usize >= k_prime {
            return Err(Error::SliceIndexOutOfRange {
                index: idx as u64,
                max: k_prime as u64,
            });
        }
        code = (code << bits) | idx as u64;
    }
    Ok(code)
}

/// Exact inverse of [`compose_code`].
pub fn decompose_code(code: u64, n_d: usize, k_prime: usize) -> Result<Vec<u32>> {
    let bits = log2_exact(k_prime);
    let k_total = 1u64 << (bits as usize * n_d);
    if code >= k_total {
        return Err(Error::CodeOutOfRange { code, max: k_total });
    }
    let mask = (k_prime - 1) as u64;
    let mut out = vec![0u32; n_d];
    let mut rest = code;
    for i in (0..n_d).rev() {
        out[i] = (rest & mask) as u32;
        rest >>= bits;
    }
    Ok(out)
}
