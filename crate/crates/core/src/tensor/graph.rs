use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamSet};
use crate::error::{Error, Result};

/// Handle into a [`Graph`]; cheap to copy, valid only for its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

#[derive(Debug)]
#[allow(dead_code)] // some recorded fields exist for the tape's own record, not backward
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// mul * x + add, elementwise.
    Affine { x: usize, mul: f64, add: f64 },
    /// a + b where b's shape is a suffix of a's shape (b is tiled over the
    /// leading axes; its gradient is summed over them).
    AddBroadcast { a: usize, b: usize },
    /// [r,k] x [k,c].
    MatMul { a: usize, b: usize },
    /// [g,n,k] x [g,k,m], batched over the leading axis.
    Bmm { a: usize, b: usize },
    /// Swap the last two axes (rank 2 or 3).
    TransposeLast(usize),
    /// [b,n,h*dh] -> [b*h,n,dh].
    SplitHeads { x: usize, heads: usize },
    /// [b*h,n,dh] -> [b,n,h*dh].
    MergeHeads { x: usize, heads: usize },
    /// out[b,t,:] = x[b,t+delta,:], zero outside; rank 3.
    ShiftRows { x: usize, delta: i64 },
    /// out[b,t,:] = x[b,t*stride+phase,:]; rank 3.
    DownsampleRows { x: usize, stride: usize, phase: usize },
    /// Contiguous row slice of a rank-2 tensor.
    SliceRows { x: usize, start: usize, rows: usize },
    Relu(usize),
    /// max(0, min(1, 1.2*sigmoid(x) - 0.1)); zero gradient where clipped.
    SatSigmoid(usize),
    /// Softmax over the last axis.
    SoftmaxLast(usize),
    /// Normalize the last axis to zero mean / unit variance, then gain*x+bias.
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    /// Sum of all elements -> scalar.
    Sum(usize),
    /// Mean negative log-softmax of targets over non-pad rows -> scalar.
    CrossEntropy { logits: usize, targets: Vec<u32>, pad_id: u32 },
    /// Row lookup: table[K,d] gathered by ids -> [len(ids), d].
    Gather { table: usize, ids: Vec<u32> },
    /// Elementwise square root (gradient guarded near zero).
    Sqrt(usize),
    /// Sum over the last axis: [.., d] -> [..].
    SumLast(usize),
    /// Identity forward, blocks gradient.
    StopGrad(usize),
    /// Same data, new shape.
    Reshape { x: usize },
    /// out[g,d] = sum_t w[g,t] * x[g,t,d]; w is a fixed coefficient table.
    WeightedSumRows { x: usize, weights: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    op: Op,
}

/// Append-only operation tape. Insertion order is forward execution order and
/// the reverse pass visits each node exactly once.
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(usize, ParamId)>,
    param_nodes: HashMap<usize, usize>,
}

/// Gradients from one backward pass, indexed by node.
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
    bound: Vec<(usize, ParamId)>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `t`, if `t` influenced the loss.
    pub fn wrt(&self, t: Tensor) -> Option<&[f64]> {
        self.by_node[t.id].as_deref()
    }

    /// Gradients for bound parameters, in binding order. Parameters that did
    /// not influence the loss are omitted.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bound
            .iter()
            .filter_map(move |&(node, pid)| self.by_node[node].as_deref().map(|g| (pid, g)))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data: Rc::new(data),
            op,
        });
        Tensor { id }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.id].data.len()
    }

    // ---- leaves ----

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "constant: shape/value length mismatch"
        );
        self.push(shape.to_vec(), values, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; n], Op::Leaf)
    }

    /// Bind a parameter as a leaf. Repeated binds of the same parameter
    /// return the same node so its gradient accumulates in one place.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Tensor {
        if let Some(&node) = self.param_nodes.get(&id.0) {
            return Tensor { id: node };
        }
        let node = self.nodes.len();
        self.nodes.push(Node {
            shape: set.shape(id).to_vec(),
            data: set.shared(id),
            op: Op::Leaf,
        });
        self.bound.push((node, id));
        self.param_nodes.insert(id.0, node);
        Tensor { id: node }
    }

    // ---- elementwise ----

    fn check_same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.id].shape.clone(),
                rhs: self.nodes[b.id].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.id].shape.clone(), data, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.id].shape.clone(), data, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.id].shape.clone(), data, Op::Mul(a.id, b.id)))
    }

    pub fn affine(&mut self, x: Tensor, mul: f64, add: f64) -> Tensor {
        let data = self.nodes[x.id].data.iter().map(|v| mul * v + add).collect();
        self.push(
            self.nodes[x.id].shape.clone(),
            data,
            Op::Affine { x: x.id, mul, add },
        )
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        self.affine(x, c, 0.0)
    }

    pub fn add_broadcast(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ashape, bshape) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if bshape.len() > ashape.len() || ashape[ashape.len() - bshape.len()..] != bshape[..] {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            });
        }
        let chunk = self.nodes[b.id].data.len();
        let bdata = &self.nodes[b.id].data;
        let data = self.nodes[a.id]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bdata[i % chunk])
            .collect();
        Ok(self.push(
            self.nodes[a.id].shape.clone(),
            data,
            Op::AddBroadcast { a: a.id, b: b.id },
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ashape, bshape) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            });
        }
        let (r, k, c) = (ashape[0], ashape[1], bshape[1]);
        let mut out = vec![0.0; r * c];
        matmul_nn(&self.nodes[a.id].data, &self.nodes[b.id].data, r, k, c, &mut out);
        Ok(self.push(vec![r, c], out, Op::MatMul { a: a.id, b: b.id }))
    }

    pub fn bmm(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ashape, bshape) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if ashape.len() != 3 || bshape.len() != 3 || ashape[0] != bshape[0] || ashape[2] != bshape[1]
        {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            });
        }
        let (g, n, k, m) = (ashape[0], ashape[1], ashape[2], bshape[2]);
        let mut out = vec![0.0; g * n * m];
        for s in 0..g {
            matmul_nn(
                &self.nodes[a.id].data[s * n * k..(s + 1) * n * k],
                &self.nodes[b.id].data[s * k * m..(s + 1) * k * m],
                n,
                k,
                m,
                &mut out[s * n * m..(s + 1) * n * m],
            );
        }
        Ok(self.push(vec![g, n, m], out, Op::Bmm { a: a.id, b: b.id }))
    }

    pub fn transpose_last(&mut self, x: Tensor) -> Result<Tensor> {
        let shape = self.nodes[x.id].shape.clone();
        let (g, n, m) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "transpose_last",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let src = &self.nodes[x.id].data;
        let mut out = vec![0.0; src.len()];
        transpose_slices(src, &mut out, g, n, m);
        let mut new_shape = shape.clone();
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        Ok(self.push(new_shape, out, Op::TransposeLast(x.id)))
    }

    pub fn split_heads(&mut self, x: Tensor, heads: usize) -> Result<Tensor> {
        let shape = self.nodes[x.id].shape.clone();
        if shape.len() != 3 || shape[2] % heads != 0 {
            return Err(Error::NotDivisible {
                op: "split_heads",
                dim: *shape.last().unwrap_or(&0),
                by: heads,
            });
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let src = &self.nodes[x.id].data;
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let dst = ((bi * heads + h) * n + t) * dh;
                    let s = (bi * n + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        Ok(self.push(vec![b * heads, n, dh], out, Op::SplitHeads { x: x.id, heads }))
    }

    pub fn merge_heads(&mut self, x: Tensor, heads: usize) -> Result<Tensor> {
        let shape = self.nodes[x.id].shape.clone();
        if shape.len() != 3 || shape[0] % heads != 0 {
            return Err(Error::NotDivisible {
                op: "merge_heads",
                dim: shape.first().copied().unwrap_or(0),
                by: heads,
            });
        }
        let (bh, n, dh) = (shape[0], shape[1], shape[2]);
        let b = bh / heads;
        let src = &self.nodes[x.id].data;
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let s = ((bi * heads + h) * n + t) * dh;
                    let dst = (bi * n + t) * (dh * heads) + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        Ok(self.push(
            vec![b, n, dh * heads],
            out,
            Op::MergeHeads { x: x.id, heads },
        ))
    }

    // ---- sequence axis ----

    fn rank3(&self, op: &'static str, x: Tensor) -> Result<(usize, usize, usize)> {
        let s = &self.nodes[x.id].shape;
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// out[b,t,:] = x[b,t+delta,:] where defined, zero elsewhere.
    /// delta = -1 shifts content one position later (shift right).
    pub fn shift_rows(&mut self, x: Tensor, delta: i64) -> Result<Tensor> {
        let (b, n, d) = self.rank3("shift_rows", x)?;
        let src = &self.nodes[x.id].data;
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for t in 0..n {
                let s = t as i64 + delta;
                if s >= 0 && (s as usize) < n {
                    let dst = (bi * n + t) * d;
                    let sp = (bi * n + s as usize) * d;
                    out[dst..dst + d].copy_from_slice(&src[sp..sp + d]);
                }
            }
        }
        Ok(self.push(vec![b, n, d], out, Op::ShiftRows { x: x.id, delta }))
    }

    pub fn downsample_rows(&mut self, x: Tensor, stride: usize, phase: usize) -> Result<Tensor> {
        let (b, n, d) = self.rank3("downsample_rows", x)?;
        if n % stride != 0 {
            return Err(Error::NotDivisible {
                op: "downsample_rows",
                dim: n,
                by: stride,
            });
        }
        let no = n / stride;
        let src = &self.nodes[x.id].data;
        let mut out = vec![0.0; b * no * d];
        for bi in 0..b {
            for t in 0..no {
                let sp = (bi * n + t * stride + phase) * d;
                let dst = (bi * no + t) * d;
                out[dst..dst + d].copy_from_slice(&src[sp..sp + d]);
            }
        }
        Ok(self.push(
            vec![b, no, d],
            out,
            Op::DownsampleRows { x: x.id, stride, phase },
        ))
    }

    pub fn slice_rows(&mut self, x: Tensor, start: usize, rows: usize) -> Result<Tensor> {
        let s = &self.nodes[x.id].shape;
        if s.len() != 2 || start + rows > s[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: s.clone(),
                rhs: vec![start, rows],
            });
        }
        let c = s[1];
        let data = self.nodes[x.id].data[start * c..(start + rows) * c].to_vec();
        Ok(self.push(vec![rows, c], data, Op::SliceRows { x: x.id, start, rows }))
    }

    pub fn weighted_sum_rows(&mut self, x: Tensor, weights: &[f64]) -> Result<Tensor> {
        let (g, n, d) = self.rank3("weighted_sum_rows", x)?;
        if weights.len() != g * n {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum_rows",
                lhs: vec![g, n, d],
                rhs: vec![weights.len()],
            });
        }
        let src = &self.nodes[x.id].data;
        let mut out = vec![0.0; g * d];
        for gi in 0..g {
            for t in 0..n {
                let w = weights[gi * n + t];
                let row = &src[(gi * n + t) * d..(gi * n + t + 1) * d];
                let acc = &mut out[gi * d..(gi + 1) * d];
                for (o, v) in acc.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(
            vec![g, d],
            out,
            Op::WeightedSumRows { x: x.id, weights: weights.to_vec() },
        ))
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let data = self.nodes[x.id].data.iter().map(|v| v.max(0.0)).collect();
        self.push(self.nodes[x.id].shape.clone(), data, Op::Relu(x.id))
    }

    pub fn sat_sigmoid(&mut self, x: Tensor) -> Tensor {
        let data = self.nodes[x.id]
            .data
            .iter()
            .map(|&v| sat_sigmoid_fwd(v))
            .collect();
        self.push(self.nodes[x.id].shape.clone(), data, Op::SatSigmoid(x.id))
    }

    pub fn softmax(&mut self, x: Tensor) -> Tensor {
        let shape = self.nodes[x.id].shape.clone();
        let d = *shape.last().expect("softmax of rank-0 tensor");
        let src = &self.nodes[x.id].data;
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            softmax_row(row_in, row_out);
        }
        self.push(shape, out, Op::SoftmaxLast(x.id))
    }

    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.nodes[x.id].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        for t in [gain, bias] {
            if self.nodes[t.id].shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[t.id].shape.clone(),
                });
            }
        }
        let src = &self.nodes[x.id].data;
        let g = &self.nodes[gain.id].data;
        let b = &self.nodes[bias.id].data;
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id, eps },
        ))
    }

    // ---- reductions & losses ----

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s = self.nodes[x.id].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x.id))
    }

    /// Mean negative log-softmax probability of `targets` over rows whose
    /// target is not `pad_id`. The value is the per-token log-perplexity
    /// (base e) over non-pad positions.
    pub fn cross_entropy(&mut self, logits: Tensor, targets: &[u32], pad_id: u32) -> Result<Tensor> {
        let shape = &self.nodes[logits.id].shape;
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        let src = &self.nodes[logits.id].data;
        let mut total = 0.0;
        let mut n_valid = 0usize;
        for (row, &t) in src.chunks_exact(v).zip(targets) {
            if t == pad_id {
                continue;
            }
            debug_assert!((t as usize) < v, "target {t} out of vocab {v}");
            total += log_sum_exp(row) - row[t as usize];
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(Error::AllPositionsPadded);
        }
        let loss = total / n_valid as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                pad_id,
            },
        ))
    }

    pub fn gather(&mut self, table: Tensor, ids: &[u32]) -> Result<Tensor> {
        let shape = &self.nodes[table.id].shape;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (k, d) = (shape[0], shape[1]);
        let src = &self.nodes[table.id].data;
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < k, "gather: id {id} out of table size {k}");
            out[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather { table: table.id, ids: ids.to_vec() },
        ))
    }

    pub fn sqrt(&mut self, x: Tensor) -> Tensor {
        let data = self.nodes[x.id].data.iter().map(|v| v.sqrt()).collect();
        self.push(self.nodes[x.id].shape.clone(), data, Op::Sqrt(x.id))
    }

    /// Sum over the last axis; a rank-1 input reduces to a scalar.
    pub fn sum_last(&mut self, x: Tensor) -> Tensor {
        let shape = self.nodes[x.id].shape.clone();
        let d = *shape.last().expect("sum_last of rank-0 tensor");
        let out: Vec<f64> = self.nodes[x.id]
            .data
            .chunks_exact(d)
            .map(|row| row.iter().sum())
            .collect();
        let new_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        self.push(new_shape, out, Op::SumLast(x.id))
    }

    pub fn stop_gradient(&mut self, x: Tensor) -> Tensor {
        let data = self.nodes[x.id].data.to_vec();
        self.push(self.nodes[x.id].shape.clone(), data, Op::StopGrad(x.id))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.nodes[x.id].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.id].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = Rc::clone(&self.nodes[x.id].data);
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data,
            op: Op::Reshape { x: x.id },
        });
        Ok(Tensor { id })
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns gradients for every node that
    /// influenced the loss; deterministic given the graph.
    pub fn backward(&self, loss: Tensor) -> Result<Grads> {
        if self.nodes[loss.id].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.id].shape.clone()));
        }
        let mut by_node: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        by_node[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(grad) = by_node[id].take() else {
                continue;
            };
            self.backprop_node(id, &grad, &mut by_node);
            by_node[id] = Some(grad);
        }
        Ok(Grads {
            by_node,
            bound: self.bound.clone(),
        })
    }

    fn backprop_node(&self, id: usize, grad: &[f64], acc: &mut [Option<Vec<f64>>]) {
        let add_to = |acc: &mut [Option<Vec<f64>>], target: usize, f: &mut dyn FnMut(&mut [f64])| {
            let slot = acc[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].data.len()]);
            f(slot);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(acc, *a, &mut |g| axpy(1.0, grad, g));
                add_to(acc, *b, &mut |g| axpy(1.0, grad, g));
            }
            Op::Sub(a, b) => {
                add_to(acc, *a, &mut |g| axpy(1.0, grad, g));
                add_to(acc, *b, &mut |g| axpy(-1.0, grad, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                add_to(acc, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * bv[i];
                    }
                });
                add_to(acc, *b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * av[i];
                    }
                });
            }
            Op::Affine { x, mul, .. } => {
                add_to(acc, *x, &mut |g| axpy(*mul, grad, g));
            }
            Op::AddBroadcast { a, b } => {
                add_to(acc, *a, &mut |g| axpy(1.0, grad, g));
                let chunk = self.nodes[*b].data.len();
                add_to(acc, *b, &mut |g| {
                    for (i, v) in grad.iter().enumerate() {
                        g[i % chunk] += v;
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (r, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let c = self.nodes[*b].shape[1];
                let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                add_to(acc, *a, &mut |g| matmul_nt(grad, bv, r, c, k, g));
                add_to(acc, *b, &mut |g| matmul_tn(av, grad, r, k, c, g));
            }
            Op::Bmm { a, b } => {
                let (g_, n, k) = (
                    self.nodes[*a].shape[0],
                    self.nodes[*a].shape[1],
                    self.nodes[*a].shape[2],
                );
                let m = self.nodes[*b].shape[2];
                let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                add_to(acc, *a, &mut |ga| {
                    for s in 0..g_ {
                        matmul_nt(
                            &grad[s * n * m..(s + 1) * n * m],
                            &bv[s * k * m..(s + 1) * k * m],
                            n,
                            m,
                            k,
                            &mut ga[s * n * k..(s + 1) * n * k],
                        );
                    }
                });
                add_to(acc, *b, &mut |gb| {
                    for s in 0..g_ {
                        matmul_tn(
                            &av[s * n * k..(s + 1) * n * k],
                            &grad[s * n * m..(s + 1) * n * m],
                            n,
                            k,
                            m,
                            &mut gb[s * k * m..(s + 1) * k * m],
                        );
                    }
                });
            }
            Op::TransposeLast(x) => {
                let s = &self.nodes[id].shape;
                let (g_, n, m) = match s.len() {
                    2 => (1, s[0], s[1]),
                    _ => (s[0], s[1], s[2]),
                };
                add_to(acc, *x, &mut |g| {
                    let mut tmp = vec![0.0; grad.len()];
                    transpose_slices(grad, &mut tmp, g_, n, m);
                    axpy(1.0, &tmp, g);
                });
            }
            Op::SplitHeads { x, heads } => {
                let (b, n, d) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                let dh = d / heads;
                add_to(acc, *x, &mut |g| {
                    for bi in 0..b {
                        for t in 0..n {
                            for h in 0..*heads {
                                let sp = ((bi * heads + h) * n + t) * dh;
                                let dst = (bi * n + t) * d + h * dh;
                                for j in 0..dh {
                                    g[dst + j] += grad[sp + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let (bh, n, dh) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                let b = bh / heads;
                add_to(acc, *x, &mut |g| {
                    for bi in 0..b {
                        for t in 0..n {
                            for h in 0..*heads {
                                let dst = ((bi * heads + h) * n + t) * dh;
                                let sp = (bi * n + t) * (dh * heads) + h * dh;
                                for j in 0..dh {
                                    g[dst + j] += grad[sp + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::ShiftRows { x, delta } => {
                let (b, n, d) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                add_to(acc, *x, &mut |g| {
                    for bi in 0..b {
                        for t in 0..n {
                            let s = t as i64 + delta;
                            if s >= 0 && (s as usize) < n {
                                let dst = (bi * n + t) * d;
                                let sp = (bi * n + s as usize) * d;
                                for j in 0..d {
                                    g[sp + j] += grad[dst + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::DownsampleRows { x, stride, phase } => {
                let (b, n, d) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                let no = n / stride;
                add_to(acc, *x, &mut |g| {
                    for bi in 0..b {
                        for t in 0..no {
                            let sp = (bi * n + t * stride + phase) * d;
                            let dst = (bi * no + t) * d;
                            for j in 0..d {
                                g[sp + j] += grad[dst + j];
                            }
                        }
                    }
                });
            }
            Op::SliceRows { x, start, rows } => {
                let c = self.nodes[*x].shape[1];
                add_to(acc, *x, &mut |g| {
                    for i in 0..rows * c {
                        g[start * c + i] += grad[i];
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].data;
                add_to(acc, *x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += grad[i];
                        }
                    }
                });
            }
            Op::SatSigmoid(x) => {
                let xv = &self.nodes[*x].data;
                add_to(acc, *x, &mut |g| {
                    for i in 0..g.len() {
                        let s = 1.0 / (1.0 + (-xv[i]).exp());
                        let pre = 1.2 * s - 0.1;
                        if pre > 0.0 && pre < 1.0 {
                            g[i] += grad[i] * 1.2 * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let d = *self.nodes[id].shape.last().unwrap();
                let yv = &self.nodes[id].data;
                add_to(acc, *x, &mut |g| {
                    for r in 0..yv.len() / d {
                        let y = &yv[r * d..(r + 1) * d];
                        let go = &grad[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            g[r * d + j] += y[j] * (go[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.nodes[id].shape.last().unwrap();
                let xv = &self.nodes[*x].data;
                let gv = &self.nodes[*gain].data;
                let rows = xv.len() / d;
                add_to(acc, *x, &mut |g| {
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let go = &grad[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // dxh_j = go_j * gain_j; dx via standard layer-norm backward
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let xh = (xr[j] - mean) * inv;
                            let dxh = go[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        for j in 0..d {
                            let xh = (xr[j] - mean) * inv;
                            let dxh = go[j] * gv[j];
                            g[r * d + j] +=
                                inv * (dxh - sum_dxh / d as f64 - xh * sum_dxh_xh / d as f64);
                        }
                    }
                });
                add_to(acc, *gain, &mut |g| {
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let go = &grad[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..d {
                            g[j] += go[j] * (xr[j] - mean) * inv;
                        }
                    }
                });
                add_to(acc, *bias, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += grad[r * d + j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                add_to(acc, *x, &mut |g| {
                    for v in g.iter_mut() {
                        *v += grad[0];
                    }
                });
            }
            Op::CrossEntropy { logits, targets, pad_id } => {
                let v = self.nodes[*logits].shape[1];
                let lv = &self.nodes[*logits].data;
                let n_valid = targets.iter().filter(|&&t| t != *pad_id).count() as f64;
                add_to(acc, *logits, &mut |g| {
                    let mut probs = vec![0.0; v];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        softmax_row(&lv[r * v..(r + 1) * v], &mut probs);
                        let go = grad[0] / n_valid;
                        for j in 0..v {
                            g[r * v + j] += go * probs[j];
                        }
                        g[r * v + t as usize] -= go;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[*table].shape[1];
                add_to(acc, *table, &mut |g| {
                    for (i, &id_) in ids.iter().enumerate() {
                        let dst = id_ as usize * d;
                        for j in 0..d {
                            g[dst + j] += grad[i * d + j];
                        }
                    }
                });
            }
            Op::Sqrt(x) => {
                let yv = &self.nodes[id].data;
                add_to(acc, *x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] / (2.0 * yv[i].max(1e-12));
                    }
                });
            }
            Op::SumLast(x) => {
                let d = *self.nodes[*x].shape.last().unwrap();
                add_to(acc, *x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i / d];
                    }
                });
            }
            Op::StopGrad(_) => {}
            Op::Reshape { x } => {
                add_to(acc, *x, &mut |g| axpy(1.0, grad, g));
            }
            Op::WeightedSumRows { x, weights } => {
                let (g_, n, d) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                add_to(acc, *x, &mut |g| {
                    for gi in 0..g_ {
                        for t in 0..n {
                            let w = weights[gi * n + t];
                            for j in 0..d {
                                g[(gi * n + t) * d + j] += w * grad[gi * d + j];
                            }
                        }
                    }
                });
            }
        }
    }

}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// out += a[r,k] * b[k,c]
fn matmul_nn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a[r,c] * b[k,c]^T  (row-by-row dot products)
fn matmul_nt(a: &[f64], b: &[f64], r: usize, c: usize, k: usize, out: &mut [f64]) {
    for i in 0..r {
        let arow = &a[i * c..(i + 1) * c];
        for p in 0..k {
            let brow = &b[p * c..(p + 1) * c];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// out += a[r,k]^T * b[r,c]
fn matmul_tn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_slices(src: &[f64], out: &mut [f64], g: usize, n: usize, m: usize) {
    for s in 0..g {
        let base = s * n * m;
        for i in 0..n {
            for j in 0..m {
                out[base + j * n + i] = src[base + i * m + j];
            }
        }
    }
}

#[inline]
fn sat_sigmoid_fwd(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    (1.2 * s - 0.1).clamp(0.0, 1.0)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "{actual:?} vs {expected:?}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = g.constant(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]);
        let out = g.matmul(i, m).unwrap();
        assert_close(g.values(out), &[2.0, 3.0, 4.0, 5.0], 0.0);

        let a = g.constant(&[1, 2], vec![1.0, 2.0]);
        let b = g.constant(&[2, 1], vec![3.0, 4.0]);
        let out = g.matmul(a, b).unwrap();
        assert_close(g.values(out), &[11.0], 0.0);
    }

    #[test]
    fn matmul_gradient_of_sum() {
        // d(sum(a*b))/da at a=[[1,2]], b=[[3],[4]] is [[3,4]]
        let mut g = Graph::new();
        let a = g.constant(&[1, 2], vec![1.0, 2.0]);
        let b = g.constant(&[2, 1], vec![3.0, 4.0]);
        let prod = g.matmul(a, b).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_close(grads.wrt(a).unwrap(), &[3.0, 4.0], 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[1, 3], vec![0.0; 3]);
        let b = g.constant(&[2, 1], vec![0.0; 2]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(&[3], vec![1.0, 1.0, 1.0]);
        let bias = g.constant(&[3], vec![0.0, 0.0, 0.0]);

        // constant row collapses to the bias
        let x = g.constant(&[1, 3], vec![1.0, 1.0, 1.0]);
        let out = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert_close(g.values(out), &[0.0, 0.0, 0.0], 1e-12);

        // [1,-1]: mean 0, var 1, eps-stabilized
        let gain2 = g.constant(&[2], vec![1.0, 1.0]);
        let bias2 = g.constant(&[2], vec![0.0, 0.0]);
        let x2 = g.constant(&[1, 2], vec![1.0, -1.0]);
        let out2 = g.layer_norm(x2, gain2, bias2, 1e-6).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert_close(g.values(out2), &[expect, -expect], 1e-12);

        // zero gain gives all-bias output
        let gain3 = g.constant(&[2], vec![0.0, 0.0]);
        let bias3 = g.constant(&[2], vec![0.7, -0.3]);
        let out3 = g.layer_norm(x2, gain3, bias3, 1e-6).unwrap();
        assert_close(g.values(out3), &[0.7, -0.3], 1e-12);
    }

    #[test]
    fn stop_gradient_value_identity_and_zero_grad() {
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![1.0, 2.0, 3.0]);
        let s = g.stop_gradient(x);
        assert_close(g.values(s), &[1.0, 2.0, 3.0], 0.0);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none(), "no gradient should reach x");
    }

    #[test]
    fn stop_gradient_severs_one_product_branch() {
        // loss = sum(x * sg(x)): gradient w.r.t. x is the values of x
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![1.0, -2.0, 3.0]);
        let sg = g.stop_gradient(x);
        let prod = g.mul(x, sg).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_close(grads.wrt(x).unwrap(), &[1.0, -2.0, 3.0], 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones_and_square_rule() {
        let mut g = Graph::new();
        let x = g.constant(&[4], vec![0.3, -1.0, 2.0, 5.0]);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_close(grads.wrt(x).unwrap(), &[1.0; 4], 0.0);

        let mut g = Graph::new();
        let x = g.constant(&[2], vec![1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_close(grads.wrt(x).unwrap(), &[2.0, 4.0], 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.constant(&[2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        // uniform logits over V=4 -> ln 4
        let mut g = Graph::new();
        let logits = g.constant(&[1, 4], vec![0.5; 4]);
        let loss = g.cross_entropy(logits, &[2], u32::MAX).unwrap();
        assert!((g.values(loss)[0] - 4.0f64.ln()).abs() < 1e-12);

        // one-hot-correct huge logit -> ~0
        let logits = g.constant(&[1, 4], vec![0.0, 50.0, 0.0, 0.0]);
        let loss = g.cross_entropy(logits, &[1], u32::MAX).unwrap();
        assert!(g.values(loss)[0] < 1e-12);

        // logits [0,1], target 1 -> ln(1 + e^{-1})
        let logits = g.constant(&[1, 2], vec![0.0, 1.0]);
        let loss = g.cross_entropy(logits, &[1], u32::MAX).unwrap();
        assert!((g.values(loss)[0] - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_padded_is_error() {
        let mut g = Graph::new();
        let logits = g.constant(&[2, 3], vec![0.0; 6]);
        assert!(matches!(
            g.cross_entropy(logits, &[0, 0], 0),
            Err(Error::AllPositionsPadded)
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(&[3, 5], (0..15).map(|i| (i as f64) * 0.37 - 2.0).collect());
        let s = g.softmax(x);
        for row in g.values(s).chunks_exact(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn sat_sigmoid_shape_and_clipping() {
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![0.0, 10.0, -10.0]);
        let y = g.sat_sigmoid(x);
        let v = g.values(y);
        assert_eq!(v[0], 0.5);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 0.0);

        // gradient is zero exactly where clipped
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(x).unwrap();
        assert!(gx[0] > 0.0);
        assert_eq!(gx[1], 0.0);
        assert_eq!(gx[2], 0.0);
    }

    #[test]
    fn params_accumulate_single_gradient_per_parameter() {
        let mut rng = crate::rng::CounterRng::new(0, 0);
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[2], crate::tensor::Init::Ones, &mut rng);
        let mut g = Graph::new();
        let t1 = g.param(&ps, w);
        let t2 = g.param(&ps, w);
        assert_eq!(t1, t2, "same parameter binds to one node");
        let s = g.add(t1, t2).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        let collected: Vec<_> = grads.params().collect();
        assert_eq!(collected.len(), 1);
        assert_close(collected[0].1, &[2.0, 2.0], 0.0);
    }

    #[test]
    fn reshape_shares_data_and_routes_gradient() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = g.reshape(x, &[3, 2]).unwrap();
        assert_eq!(g.values(r), g.values(x));
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_close(grads.wrt(x).unwrap(), &[1.0; 6], 0.0);
    }
}
