//! Parameterized building blocks. Each layer owns ids into a [`ParamSet`]
//! and builds its forward computation on a per-step [`Graph`].

use crate::error::Result;
use crate::rng::CounterRng;
use crate::tensor::{attention, conv1d, Graph, Init, Padding, ParamId, ParamSet, Tensor};

const LN_EPS: f64 = 1e-6;

pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        ps: &mut ParamSet,
        rng: &mut CounterRng,
    ) -> Self {
        Linear {
            w: ps.add(&format!("{prefix}.w"), &[d_in, d_out], Init::Glorot, rng),
            b: bias.then(|| ps.add(&format!("{prefix}.b"), &[d_out], Init::Zeros, rng)),
            d_in,
            d_out,
        }
    }

    /// Position-wise application; accepts [.., d_in] of rank 2 or 3.
    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let shape = g.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.d_in])?;
        let w = g.param(ps, self.w);
        let mut out = g.matmul(flat, w)?;
        if let Some(b) = self.b {
            let bt = g.param(ps, b);
            out = g.add_broadcast(out, bt)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        g.reshape(out, &out_shape)
    }
}

pub struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(prefix: &str, d: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        Norm {
            gain: ps.add(&format!("{prefix}.gain"), &[d], Init::Ones, rng),
            bias: ps.add(&format!("{prefix}.bias"), &[d], Init::Zeros, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

pub struct Embedding {
    table: ParamId,
    d: usize,
}

impl Embedding {
    pub fn new(prefix: &str, vocab: usize, d: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        Embedding {
            table: ps.add(
                &format!("{prefix}.table"),
                &[vocab, d],
                Init::Normal(1.0 / (d as f64).sqrt()),
                rng,
            ),
            d,
        }
    }

    pub fn lookup(&self, g: &mut Graph, ps: &ParamSet, ids: &[u32], b: usize, n: usize) -> Result<Tensor> {
        let table = g.param(ps, self.table);
        let rows = g.gather(table, ids)?;
        g.reshape(rows, &[b, n, self.d])
    }

    pub fn table_id(&self) -> ParamId {
        self.table
    }
}

/// Learned positional embeddings, added to the first n positions.
pub struct PosEmbedding {
    table: ParamId,
}

impl PosEmbedding {
    pub fn new(prefix: &str, max_len: usize, d: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        PosEmbedding {
            table: ps.add(&format!("{prefix}.pos"), &[max_len, d], Init::Normal(0.02), rng),
        }
    }

    pub fn add_to(&self, g: &mut Graph, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let n = g.shape(x)[1];
        let table = g.param(ps, self.table);
        let rows = g.slice_rows(table, 0, n)?;
        g.add_broadcast(x, rows)
    }
}

/// Multi-head attention with learned q/k/v/output projections.
pub struct Mha {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl Mha {
    pub fn new(prefix: &str, d: usize, heads: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        Mha {
            wq: Linear::new(&format!("{prefix}.q"), d, d, false, ps, rng),
            wk: Linear::new(&format!("{prefix}.k"), d, d, false, ps, rng),
            wv: Linear::new(&format!("{prefix}.v"), d, d, false, ps, rng),
            wo: Linear::new(&format!("{prefix}.o"), d, d, false, ps, rng),
            heads,
        }
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        q_in: Tensor,
        kv_in: Tensor,
        causal: bool,
        key_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let q = self.wq.apply(g, ps, q_in)?;
        let k = self.wk.apply(g, ps, kv_in)?;
        let v = self.wv.apply(g, ps, kv_in)?;
        let out = attention(g, q, k, v, self.heads, causal, key_mask)?;
        self.wo.apply(g, ps, out)
    }
}

pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, d: usize, hidden: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        FeedForward {
            lin1: Linear::new(&format!("{prefix}.in"), d, hidden, true, ps, rng),
            lin2: Linear::new(&format!("{prefix}.out"), hidden, d, true, ps, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let h = self.lin1.apply(g, ps, x)?;
        let h = g.relu(h);
        self.lin2.apply(g, ps, h)
    }
}

/// Pre-norm self-attention encoder block.
pub struct EncBlock {
    n1: Norm,
    attn: Mha,
    n2: Norm,
    ffn: FeedForward,
}

impl EncBlock {
    pub fn new(prefix: &str, d: usize, heads: usize, ff: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        EncBlock {
            n1: Norm::new(&format!("{prefix}.n1"), d, ps, rng),
            attn: Mha::new(&format!("{prefix}.attn"), d, heads, ps, rng),
            n2: Norm::new(&format!("{prefix}.n2"), d, ps, rng),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, ff, ps, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let h = self.n1.apply(g, ps, x)?;
        let a = self.attn.apply(g, ps, h, h, false, mask)?;
        let x = g.add(x, a)?;
        let h = self.n2.apply(g, ps, x)?;
        let f = self.ffn.apply(g, ps, h)?;
        g.add(x, f)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention, ffn.
pub struct DecBlock {
    n1: Norm,
    self_attn: Mha,
    n2: Norm,
    cross: Mha,
    n3: Norm,
    ffn: FeedForward,
}

impl DecBlock {
    pub fn new(prefix: &str, d: usize, heads: usize, ff: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        DecBlock {
            n1: Norm::new(&format!("{prefix}.n1"), d, ps, rng),
            self_attn: Mha::new(&format!("{prefix}.self"), d, heads, ps, rng),
            n2: Norm::new(&format!("{prefix}.n2"), d, ps, rng),
            cross: Mha::new(&format!("{prefix}.cross"), d, heads, ps, rng),
            n3: Norm::new(&format!("{prefix}.n3"), d, ps, rng),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, ff, ps, rng),
        }
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Tensor,
        enc_out: Tensor,
        enc_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let h = self.n1.apply(g, ps, x)?;
        let a = self.self_attn.apply(g, ps, h, h, true, None)?;
        let x = g.add(x, a)?;
        let h = self.n2.apply(g, ps, x)?;
        let c = self.cross.apply(g, ps, h, enc_out, false, enc_mask)?;
        let x = g.add(x, c)?;
        let h = self.n3.apply(g, ps, x)?;
        let f = self.ffn.apply(g, ps, h)?;
        g.add(x, f)
    }
}

/// Token embedding + positions + self-attention stack over the source.
pub struct SourceEncoder {
    emb: Embedding,
    pos: PosEmbedding,
    blocks: Vec<EncBlock>,
    norm: Norm,
}

impl SourceEncoder {
    pub fn new(
        prefix: &str,
        vocab: usize,
        d: usize,
        heads: usize,
        ff: usize,
        layers: usize,
        max_len: usize,
        ps: &mut ParamSet,
        rng: &mut CounterRng,
    ) -> Self {
        SourceEncoder {
            emb: Embedding::new(&format!("{prefix}.emb"), vocab, d, ps, rng),
            pos: PosEmbedding::new(prefix, max_len, d, ps, rng),
            blocks: (0..layers)
                .map(|i| EncBlock::new(&format!("{prefix}.block{i}"), d, heads, ff, ps, rng))
                .collect(),
            norm: Norm::new(&format!("{prefix}.norm"), d, ps, rng),
        }
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        ids: &[u32],
        b: usize,
        n: usize,
        mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let mut x = self.emb.lookup(g, ps, ids, b, n)?;
        x = self.pos.add_to(g, ps, x)?;
        for block in &self.blocks {
            x = block.apply(g, ps, x, mask)?;
        }
        self.norm.apply(g, ps, x)
    }
}

/// Three (relu, conv k=3 s=1 same, layer-norm) layers plus the input.
pub struct ResidualConvBlock {
    convs: Vec<ParamId>,
    norms: Vec<Norm>,
}

impl ResidualConvBlock {
    pub fn new(prefix: &str, d: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        ResidualConvBlock {
            convs: (0..3)
                .map(|i| ps.add(&format!("{prefix}.conv{i}.w"), &[3 * d, d], Init::Glorot, rng))
                .collect(),
            norms: (0..3)
                .map(|i| Norm::new(&format!("{prefix}.ln{i}"), d, ps, rng))
                .collect(),
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let mut h = x;
        for (w, norm) in self.convs.iter().zip(&self.norms) {
            h = g.relu(h);
            let kernel = g.param(ps, *w);
            h = conv1d(g, h, kernel, 3, 1, Padding::Same)?;
            h = norm.apply(g, ps, h)?;
        }
        g.add(x, h)
    }
}

/// Strided halving convolution (k=2, s=2).
pub struct CompressConv {
    w: ParamId,
}

impl CompressConv {
    pub fn new(prefix: &str, d: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        CompressConv {
            w: ps.add(&format!("{prefix}.w"), &[2 * d, d], Init::Glorot, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let kernel = g.param(ps, self.w);
        conv1d(g, x, kernel, 2, 2, Padding::Valid)
    }
}

/// Position-wise D -> 2D projection reshaped to double the length.
pub struct UpConv {
    lin: Linear,
    d: usize,
}

impl UpConv {
    pub fn new(prefix: &str, d: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        UpConv {
            lin: Linear::new(prefix, d, 2 * d, true, ps, rng),
            d,
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let shape = g.shape(x).to_vec();
        let (b, n) = (shape[0], shape[1]);
        let wide = self.lin.apply(g, ps, x)?;
        // row-major [b, n, 2D] is byte-identical to [b, 2n, D]
        g.reshape(wide, &[b, 2 * n, self.d])
    }
}

/// Shift a sequence right by one position and place a learned start vector
/// in the first slot.
pub struct StartShift {
    start: ParamId,
    d: usize,
}

impl StartShift {
    pub fn new(prefix: &str, d: usize, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        StartShift {
            start: ps.add(&format!("{prefix}.start"), &[1, d], Init::Normal(0.02), rng),
            d,
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Tensor) -> Result<Tensor> {
        let shape = g.shape(x).to_vec();
        let n = shape[1];
        debug_assert_eq!(shape[2], self.d);
        let shifted = g.shift_rows(x, -1)?;
        let mut onehot = vec![0.0; n];
        onehot[0] = 1.0;
        let sel = g.constant(&[n, 1], onehot);
        let start = g.param(ps, self.start);
        let start_rows = g.matmul(sel, start)?; // [n, d], zero except row 0
        g.add_broadcast(shifted, start_rows)
    }
}
