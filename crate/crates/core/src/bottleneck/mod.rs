//! Discretization bottlenecks: map continuous encoder states to discrete
//! codes plus a decoder input, behind one interface.
//!
//! Four kinds are provided: Gumbel-Softmax over a learned projection,
//! improved semantic hashing (noise + saturating sigmoid + rounding with a
//! straight-through branch), and decomposed vector quantization in sliced and
//! projected variants (n_d = 1 sliced is plain VQ-VAE, trained by EMA).
//! An identity kind passes the encoder state through untouched; it exists for
//! plumbing tests and has no codes.

mod code;
mod codebook;
mod usage;

pub use code::{compose_code, decompose_code, log2_exact, BitCode};
pub use codebook::{Codebook, DvqVariant};
pub use usage::{usage_fraction, UsageBin, UsageTracker};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Graph, Init, ParamId, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BottleneckKind {
    GumbelSoftmax,
    SemHash,
    DvqSliced,
    DvqProjected,
    Identity,
}

impl std::str::FromStr for BottleneckKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel" | "gumbel-softmax" => Ok(BottleneckKind::GumbelSoftmax),
            "semhash" => Ok(BottleneckKind::SemHash),
            "dvq" | "dvq-sliced" | "vq" => Ok(BottleneckKind::DvqSliced),
            "dvq-projected" => Ok(BottleneckKind::DvqProjected),
            "identity" => Ok(BottleneckKind::Identity),
            other => Err(Error::Config(format!("unknown bottleneck kind '{other}'"))),
        }
    }
}

impl BottleneckKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BottleneckKind::GumbelSoftmax => "gumbel",
            BottleneckKind::SemHash => "semhash",
            BottleneckKind::DvqSliced => "dvq",
            BottleneckKind::DvqProjected => "dvq-projected",
            BottleneckKind::Identity => "identity",
        }
    }
}

/// What the bottleneck hands back for one batch of latent positions.
pub struct BottleneckIo {
    /// Decoder input, same shape as the encoder states that went in.
    pub z_q: Tensor,
    /// One discrete code in [0, K) per latent position.
    pub z_d: Vec<u64>,
    /// Per-position slice indices, row-major rows x n_d, each in [0, K').
    pub slice_indices: Vec<u32>,
    /// Commitment term (DVQ only).
    pub aux_loss: Option<Tensor>,
}

struct GumbelParams {
    /// D x K logits projection.
    w: ParamId,
    /// K x D decoder-side embedding.
    e: ParamId,
}

struct SemHashParams {
    /// D x bits projection into code space.
    proj: ParamId,
    /// bits x D embeddings for the set bits.
    e1: ParamId,
    /// bits x D embeddings for the cleared bits.
    e2: ParamId,
}

pub struct Bottleneck {
    pub kind: BottleneckKind,
    pub d: usize,
    pub log2_k: u32,
    pub beta: f64,
    pub commitment_squared: bool,
    gumbel: Option<GumbelParams>,
    semhash: Option<SemHashParams>,
    pub codebook: Option<Codebook>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: BottleneckKind,
        d: usize,
        log2_k: u32,
        n_d: usize,
        decay: f64,
        beta: f64,
        commitment_squared: bool,
        name_prefix: &str,
        params: &mut ParamSet,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let mut b = Bottleneck {
            kind,
            d,
            log2_k,
            beta,
            commitment_squared,
            gumbel: None,
            semhash: None,
            codebook: None,
        };
        match kind {
            BottleneckKind::GumbelSoftmax => {
                let k = 1usize << log2_k;
                b.gumbel = Some(GumbelParams {
                    w: params.add(&format!("{name_prefix}.gumbel.w"), &[d, k], Init::Glorot, rng),
                    e: params.add(
                        &format!("{name_prefix}.gumbel.e"),
                        &[k, d],
                        Init::Normal(1.0 / (d as f64).sqrt()),
                        rng,
                    ),
                });
            }
            BottleneckKind::SemHash => {
                let bits = log2_k as usize;
                b.semhash = Some(SemHashParams {
                    proj: params.add(
                        &format!("{name_prefix}.semhash.proj"),
                        &[d, bits],
                        Init::Glorot,
                        rng,
                    ),
                    e1: params.add(
                        &format!("{name_prefix}.semhash.e1"),
                        &[bits, d],
                        Init::Normal(1.0 / (d as f64).sqrt()),
                        rng,
                    ),
                    e2: params.add(
                        &format!("{name_prefix}.semhash.e2"),
                        &[bits, d],
                        Init::Normal(1.0 / (d as f64).sqrt()),
                        rng,
                    ),
                });
            }
            BottleneckKind::DvqSliced => {
                b.codebook = Some(Codebook::new(d, log2_k, n_d, decay, DvqVariant::Sliced, rng)?);
            }
            BottleneckKind::DvqProjected => {
                b.codebook = Some(Codebook::new(
                    d,
                    log2_k,
                    n_d,
                    decay,
                    DvqVariant::Projected,
                    rng,
                )?);
            }
            BottleneckKind::Identity => {}
        }
        Ok(b)
    }

    pub fn n_d(&self) -> usize {
        match self.kind {
            BottleneckKind::GumbelSoftmax => 1,
            BottleneckKind::SemHash => self.log2_k as usize,
            BottleneckKind::DvqSliced | BottleneckKind::DvqProjected => {
                self.codebook.as_ref().unwrap().n_d
            }
            BottleneckKind::Identity => 1,
        }
    }

    pub fn k_prime(&self) -> usize {
        match self.kind {
            BottleneckKind::GumbelSoftmax => 1usize << self.log2_k,
            BottleneckKind::SemHash => 2,
            BottleneckKind::DvqSliced | BottleneckKind::DvqProjected => {
                self.codebook.as_ref().unwrap().k_prime
            }
            BottleneckKind::Identity => 1,
        }
    }

    pub fn k(&self) -> u64 {
        1u64 << self.log2_k
    }

    /// Run the bottleneck on encoder states `enc: [b, m, D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        enc: Tensor,
        mode: Mode,
        temperature: f64,
        mut noise: Option<&mut CounterRng>,
    ) -> Result<BottleneckIo> {
        let shape = g.shape(enc).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::ShapeMismatch {
                op: "bottleneck",
                lhs: shape,
                rhs: vec![self.d],
            });
        }
        let (b, m) = (shape[0], shape[1]);
        let rows = b * m;
        let flat = g.reshape(enc, &[rows, self.d])?;

        match self.kind {
            BottleneckKind::Identity => Ok(BottleneckIo {
                z_q: enc,
                z_d: vec![0; rows],
                slice_indices: vec![0; rows],
                aux_loss: None,
            }),
            BottleneckKind::GumbelSoftmax => {
                let gp = self.gumbel.as_ref().unwrap();
                let w = g.param(params, gp.w);
                let e = g.param(params, gp.e);
                let logits = g.matmul(flat, w)?;
                let k = 1usize << self.log2_k;
                let z_d: Vec<u64> = g
                    .values(logits)
                    .chunks_exact(k)
                    .map(|row| argmax(row) as u64)
                    .collect();
                let slice_indices: Vec<u32> = z_d.iter().map(|&c| c as u32).collect();
                let z_q = match mode {
                    Mode::Train => {
                        if temperature <= 0.0 {
                            return Err(Error::Config(
                                "gumbel-softmax: temperature must be > 0 in train mode".into(),
                            ));
                        }
                        let rng = noise.as_deref_mut().ok_or_else(|| {
                            Error::Config("gumbel-softmax: train mode needs a noise source".into())
                        })?;
                        let gn = rng.fill_gumbel(rows * k);
                        let gn = g.constant(&[rows, k], gn);
                        let noisy = g.add(logits, gn)?;
                        let scaled = g.scale(noisy, 1.0 / temperature);
                        let soft = g.softmax(scaled);
                        g.matmul(soft, e)?
                    }
                    Mode::Eval => g.gather(e, &slice_indices)?,
                };
                let z_q = g.reshape(z_q, &[b, m, self.d])?;
                Ok(BottleneckIo { z_q, z_d, slice_indices, aux_loss: None })
            }
            BottleneckKind::SemHash => {
                let sp = self.semhash.as_ref().unwrap();
                let proj = g.param(params, sp.proj);
                let bits_n = self.log2_k as usize;
                let v = g.matmul(flat, proj)?;
                match mode {
                    Mode::Train => {
                        let rng = noise.as_deref_mut().ok_or_else(|| {
                            Error::Config("semhash: train mode needs a noise source".into())
                        })?;
                        let eta = rng.fill_gaussian(rows * bits_n);
                        let eta = g.constant(&[rows, bits_n], eta);
                        let noisy = g.add(v, eta)?;
                        let f = g.sat_sigmoid(noisy);
                        let hard = hard_bits(g.values(f));
                        let hard_t = g.constant(&[rows, bits_n], bit_floats(&hard));
                        // straight-through: value of the hard bits, gradient of f
                        let jump = g.sub(hard_t, f)?;
                        let jump = g.stop_gradient(jump);
                        let g_st = g.add(f, jump)?;
                        // per-position coin flip between the continuous and
                        // rounded branches
                        let mut mask = vec![0.0; rows * bits_n];
                        for r in 0..rows {
                            if rng.uniform() < 0.5 {
                                mask[r * bits_n..(r + 1) * bits_n].fill(1.0);
                            }
                        }
                        let mf = g.constant(&[rows, bits_n], mask);
                        let cont = g.mul(mf, f)?;
                        let mg = g.affine(mf, -1.0, 1.0);
                        let disc = g.mul(mg, g_st)?;
                        let h = g.add(cont, disc)?;
                        let z_q = self.semhash_mix(g, params, h)?;
                        let z_q = g.reshape(z_q, &[b, m, self.d])?;
                        let (z_d, slice_indices) = codes_from_bits(&hard, bits_n);
                        Ok(BottleneckIo { z_q, z_d, slice_indices, aux_loss: None })
                    }
                    Mode::Eval => {
                        let f = g.sat_sigmoid(v);
                        let hard = hard_bits(g.values(f));
                        let z_q = self.semhash_zq_from_bits(g, params, &hard, rows)?;
                        let z_q = g.reshape(z_q, &[b, m, self.d])?;
                        let (z_d, slice_indices) = codes_from_bits(&hard, bits_n);
                        Ok(BottleneckIo { z_q, z_d, slice_indices, aux_loss: None })
                    }
                }
            }
            BottleneckKind::DvqSliced | BottleneckKind::DvqProjected => {
                let book = self.codebook.as_ref().unwrap();
                let enc_vals = g.values(flat).to_vec();
                let slice_indices = book.assign(&enc_vals, rows);
                let z_d: Vec<u64> = slice_indices
                    .chunks_exact(book.n_d)
                    .map(|row| compose_code(row, book.k_prime).expect("indices from assign"))
                    .collect();
                let zq_rows = assemble_rows(book, &slice_indices, rows);
                let zq_const = g.constant(&[rows, self.d], zq_rows);
                match mode {
                    Mode::Eval => {
                        let z_q = g.reshape(zq_const, &[b, m, self.d])?;
                        Ok(BottleneckIo { z_q, z_d, slice_indices, aux_loss: None })
                    }
                    Mode::Train => {
                        // decoder sees the quantized value, encoder gets the
                        // gradient as if z_q were enc
                        let jump = g.sub(zq_const, flat)?;
                        let jump = g.stop_gradient(jump);
                        let z_q = g.add(flat, jump)?;
                        let z_q = g.reshape(z_q, &[b, m, self.d])?;
                        let aux = self.commitment_loss(g, book, flat, zq_const, rows)?;
                        Ok(BottleneckIo {
                            z_q,
                            z_d,
                            slice_indices,
                            aux_loss: Some(aux),
                        })
                    }
                }
            }
        }
    }

    /// beta * mean over positions of the (squared) distance between encoder
    /// slices and their frozen nearest codebook rows.
    fn commitment_loss(
        &self,
        g: &mut Graph,
        book: &Codebook,
        enc_flat: Tensor,
        zq_const: Tensor,
        rows: usize,
    ) -> Result<Tensor> {
        let scale = self.beta / rows as f64;
        match book.variant {
            DvqVariant::Sliced => {
                let diff = g.sub(enc_flat, zq_const)?;
                let sq = g.mul(diff, diff)?;
                if self.commitment_squared {
                    let total = g.sum(sq);
                    Ok(g.scale(total, scale))
                } else {
                    let per_slice = g.reshape(sq, &[rows * book.n_d, book.slice_dim])?;
                    let sums = g.sum_last(per_slice);
                    let norms = g.sqrt(sums);
                    let total = g.sum(norms);
                    Ok(g.scale(total, scale))
                }
            }
            DvqVariant::Projected => {
                let ds = book.slice_dim;
                let zq_vals = g.values(zq_const).to_vec();
                let mut total: Option<Tensor> = None;
                for i in 0..book.n_d {
                    let pi = g.constant(&[self.d, ds], book.projection(i).unwrap().to_vec());
                    let proj = g.matmul(enc_flat, pi)?;
                    let mut zq_i = Vec::with_capacity(rows * ds);
                    for r in 0..rows {
                        zq_i.extend_from_slice(&zq_vals[r * self.d + i * ds..r * self.d + (i + 1) * ds]);
                    }
                    let zq_i = g.constant(&[rows, ds], zq_i);
                    let diff = g.sub(proj, zq_i)?;
                    let sq = g.mul(diff, diff)?;
                    let part = if self.commitment_squared {
                        g.sum(sq)
                    } else {
                        let sums = g.sum_last(sq);
                        let norms = g.sqrt(sums);
                        g.sum(norms)
                    };
                    total = Some(match total {
                        None => part,
                        Some(t) => g.add(t, part)?,
                    });
                }
                Ok(g.scale(total.unwrap(), scale))
            }
        }
    }

    fn semhash_mix(&self, g: &mut Graph, params: &ParamSet, h: Tensor) -> Result<Tensor> {
        let sp = self.semhash.as_ref().unwrap();
        let e1 = g.param(params, sp.e1);
        let e2 = g.param(params, sp.e2);
        let on = g.matmul(h, e1)?;
        let hm = g.affine(h, -1.0, 1.0);
        let off = g.matmul(hm, e2)?;
        g.add(on, off)
    }

    fn semhash_zq_from_bits(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        bits: &[u8],
        rows: usize,
    ) -> Result<Tensor> {
        let bits_n = self.log2_k as usize;
        let hc = g.constant(&[rows, bits_n], bit_floats(bits));
        self.semhash_mix(g, params, hc)
    }

    /// Decoder input for externally supplied codes (the decode path: the
    /// latent predictor emits codes, the decoder needs z_q).
    pub fn embed_code(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        codes: &[u64],
        b: usize,
        m: usize,
    ) -> Result<Tensor> {
        debug_assert_eq!(codes.len(), b * m);
        let k = self.k();
        for &c in codes {
            if c >= k {
                return Err(Error::CodeOutOfRange { code: c, max: k });
            }
        }
        let rows = b * m;
        let flat = match self.kind {
            BottleneckKind::Identity => {
                return Err(Error::Config(
                    "identity bottleneck has no codes to embed".into(),
                ))
            }
            BottleneckKind::GumbelSoftmax => {
                let gp = self.gumbel.as_ref().unwrap();
                let e = g.param(params, gp.e);
                let ids: Vec<u32> = codes.iter().map(|&c| c as u32).collect();
                g.gather(e, &ids)?
            }
            BottleneckKind::SemHash => {
                let bits_n = self.log2_k as usize;
                let mut bits = Vec::with_capacity(rows * bits_n);
                for &c in codes {
                    for part in decompose_code(c, bits_n, 2)? {
                        bits.push(part as u8);
                    }
                }
                self.semhash_zq_from_bits(g, params, &bits, rows)?
            }
            BottleneckKind::DvqSliced | BottleneckKind::DvqProjected => {
                let book = self.codebook.as_ref().unwrap();
                let mut indices = Vec::with_capacity(rows * book.n_d);
                for &c in codes {
                    indices.extend(decompose_code(c, book.n_d, book.k_prime)?);
                }
                let zq = assemble_rows(book, &indices, rows);
                g.constant(&[rows, self.d], zq)
            }
        };
        g.reshape(flat, &[b, m, self.d])
    }
}

/// Concatenate the selected codebook rows into full-width decoder rows.
pub fn assemble_rows(book: &Codebook, slice_indices: &[u32], rows: usize) -> Vec<f64> {
    let ds = book.slice_dim;
    let mut out = Vec::with_capacity(rows * book.n_d * ds);
    for r in 0..rows {
        for i in 0..book.n_d {
            out.extend_from_slice(book.row(i, slice_indices[r * book.n_d + i]));
        }
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Strict threshold: a component exactly at 0.5 rounds to 0.
fn hard_bits(f: &[f64]) -> Vec<u8> {
    f.iter().map(|&v| u8::from(v > 0.5)).collect()
}

fn bit_floats(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| b as f64).collect()
}

fn codes_from_bits(bits: &[u8], bits_n: usize) -> (Vec<u64>, Vec<u32>) {
    let z_d = bits
        .chunks_exact(bits_n)
        .map(|row| BitCode::from_bits(row).value())
        .collect();
    let slice_indices = bits.iter().map(|&b| b as u32).collect();
    (z_d, slice_indices)
}
