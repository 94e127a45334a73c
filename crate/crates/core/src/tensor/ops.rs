//! Composite operations built from graph primitives: multi-head dot-product
//! attention and 1-D convolution over the sequence axis.

use super::graph::{Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Multi-head scaled dot-product attention.
///
/// `q: [b,n_q,d]`, `k,v: [b,n_k,d]`; returns `[b,n_q,d]` (the concatenation of
/// per-head outputs, already depth d). `causal` masks future key positions of
/// self-attention; `key_mask` (per batch row, true = attendable) silences
/// padded source positions.
pub fn attention(
    g: &mut Graph,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: usize,
    causal: bool,
    key_mask: Option<&[bool]>,
) -> Result<Tensor> {
    let (b, n_q, d) = dims3(g, "attention", q)?;
    let (bk, n_k, dk) = dims3(g, "attention", k)?;
    let (bv, n_v, dv) = dims3(g, "attention", v)?;
    if n_k == 0 {
        return Err(Error::EmptySource);
    }
    if bk != b || bv != b || dk != d || dv != d || n_v != n_k {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: vec![b, n_q, d],
            rhs: vec![bk, n_k, dk],
        });
    }
    if d % heads != 0 {
        return Err(Error::NotDivisible { op: "attention", dim: d, by: heads });
    }
    let dh = d / heads;

    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let kt = g.transpose_last(kh)?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());

    let scores = if causal || key_mask.is_some() {
        let mut mask = vec![0.0; b * heads * n_q * n_k];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..n_q {
                    for j in 0..n_k {
                        let blocked = (causal && j > i)
                            || key_mask.map_or(false, |m| !m[bi * n_k + j]);
                        if blocked {
                            mask[((bi * heads + h) * n_q + i) * n_k + j] = f64::NEG_INFINITY;
                        }
                    }
                }
            }
        }
        let mask_t = g.constant(&[b * heads, n_q, n_k], mask);
        g.add(scores, mask_t)?
    } else {
        scores
    };

    let attn = g.softmax(scores);
    let out = g.bmm(attn, vh)?;
    g.merge_heads(out, heads)
}

/// 1-D convolution (cross-correlation) along the sequence axis.
///
/// `x: [b,len,d_in]`, `kernel: [k*d_in, d_out]` (tap-major rows). Supported
/// configurations are stride 1 with Same padding and stride 2 with Valid
/// padding, which is all the architecture uses.
pub fn conv1d(
    g: &mut Graph,
    x: Tensor,
    kernel: Tensor,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (b, len, d_in) = dims3(g, "conv1d", x)?;
    let kshape = g.shape(kernel).to_vec();
    if kshape.len() != 2 || kshape[0] != k * d_in {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            lhs: vec![b, len, d_in],
            rhs: kshape,
        });
    }
    let d_out = kshape[1];

    match (stride, padding) {
        (1, Padding::Same) => {
            let pad = (k - 1) / 2;
            let mut acc: Option<Tensor> = None;
            for tap in 0..k {
                let w = g.slice_rows(kernel, tap * d_in, d_in)?;
                let shifted = g.shift_rows(x, tap as i64 - pad as i64)?;
                let flat = g.reshape(shifted, &[b * len, d_in])?;
                let part = g.matmul(flat, w)?;
                let part = g.reshape(part, &[b, len, d_out])?;
                acc = Some(match acc {
                    None => part,
                    Some(a) => g.add(a, part)?,
                });
            }
            Ok(acc.expect("k >= 1"))
        }
        (2, Padding::Valid) => {
            if len < k {
                return Err(Error::LengthTooShort { op: "conv1d", len, kernel: k });
            }
            if k != 2 || len % 2 != 0 {
                return Err(Error::NotDivisible { op: "conv1d", dim: len, by: 2 });
            }
            let out_len = len / 2;
            let mut acc: Option<Tensor> = None;
            for tap in 0..k {
                let w = g.slice_rows(kernel, tap * d_in, d_in)?;
                let down = g.downsample_rows(x, 2, tap)?;
                let flat = g.reshape(down, &[b * out_len, d_in])?;
                let part = g.matmul(flat, w)?;
                let part = g.reshape(part, &[b, out_len, d_out])?;
                acc = Some(match acc {
                    None => part,
                    Some(a) => g.add(a, part)?,
                });
            }
            Ok(acc.expect("k >= 1"))
        }
        _ => Err(Error::Config(format!(
            "conv1d: unsupported stride={stride} padding={padding:?}"
        ))),
    }
}

fn dims3(g: &Graph, op: &'static str, t: Tensor) -> Result<(usize, usize, usize)> {
    let s = g.shape(t);
    if s.len() != 3 {
        return Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![] });
    }
    Ok((s[0], s[1], s[2]))
}
