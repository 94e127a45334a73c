//! Per-slice embedding tables with EMA training for decomposed vector
//! quantization. With one slice this is the plain VQ-VAE codebook.

use crate::error::{Error, Result};
use crate::rng::CounterRng;

use super::code::log2_exact;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvqVariant {
    /// Split the encoder output into n_d contiguous slices.
    Sliced,
    /// Project the full encoder output with fixed random matrices.
    Projected,
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub n_d: usize,
    pub k_prime: usize,
    pub slice_dim: usize,
    pub d: usize,
    pub decay: f64,
    pub variant: DvqVariant,
    /// Per slice: k_prime x slice_dim, row-major.
    tables: Vec<Vec<f64>>,
    /// Per slice: k_prime EMA assignment counts, strictly positive.
    counts: Vec<Vec<f64>>,
    /// Projected variant only: per slice d x slice_dim, fixed at init.
    projections: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(
        d: usize,
        log2_k: u32,
        n_d: usize,
        decay: f64,
        variant: DvqVariant,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        if log2_k as usize % n_d != 0 {
            return Err(Error::NotDivisible { op: "codebook", dim: log2_k as usize, by: n_d });
        }
        // Both variants concatenate n_d slices of D/n_d dims back to D.
        if d % n_d != 0 {
            return Err(Error::NotDivisible { op: "codebook", dim: d, by: n_d });
        }
        let k_prime = 1usize << (log2_k as usize / n_d);
        let slice_dim = d / n_d;
        let row_scale = 1.0 / (slice_dim as f64).sqrt();
        let tables = (0..n_d)
            .map(|_| {
                (0..k_prime * slice_dim)
                    .map(|_| rng.gaussian() * row_scale)
                    .collect()
            })
            .collect();
        let counts = vec![vec![1.0; k_prime]; n_d];
        let projections = match variant {
            DvqVariant::Sliced => Vec::new(),
            DvqVariant::Projected => {
                let s = (6.0 / (d + slice_dim) as f64).sqrt();
                (0..n_d)
                    .map(|_| {
                        (0..d * slice_dim)
                            .map(|_| rng.uniform_range(-s, s))
                            .collect()
                    })
                    .collect()
            }
        };
        Ok(Codebook {
            n_d,
            k_prime,
            slice_dim,
            d,
            decay,
            variant,
            tables,
            counts,
            projections,
        })
    }

    pub fn log2_k(&self) -> u32 {
        log2_exact(self.k_prime) * self.n_d as u32
    }

    pub fn table(&self, slice: usize) -> &[f64] {
        &self.tables[slice]
    }

    pub fn counts(&self, slice: usize) -> &[f64] {
        &self.counts[slice]
    }

    pub fn projection(&self, slice: usize) -> Option<&[f64]> {
        self.projections.get(slice).map(|p| p.as_slice())
    }

    pub fn row(&self, slice: usize, index: u32) -> &[f64] {
        let ds = self.slice_dim;
        &self.tables[slice][index as usize * ds..(index as usize + 1) * ds]
    }

    /// Raw state access for checkpointing.
    pub fn state_mut(&mut self) -> (&mut Vec<Vec<f64>>, &mut Vec<Vec<f64>>, &mut Vec<Vec<f64>>) {
        (&mut self.tables, &mut self.counts, &mut self.projections)
    }

    pub fn state(&self) -> (&Vec<Vec<f64>>, &Vec<Vec<f64>>, &Vec<Vec<f64>>) {
        (&self.tables, &self.counts, &self.projections)
    }

    /// Per-slice inputs for assignment and EMA: contiguous column slices for
    /// the sliced variant, fixed projections of the full rows otherwise.
    /// `enc` is row-major rows x d. Returns n_d buffers of rows x slice_dim.
    pub fn slice_inputs(&self, enc: &[f64], rows: usize) -> Vec<Vec<f64>> {
        debug_assert_eq!(enc.len(), rows * self.d);
        let ds = self.slice_dim;
        match self.variant {
            DvqVariant::Sliced => (0..self.n_d)
                .map(|i| {
                    let mut out = Vec::with_capacity(rows * ds);
                    for r in 0..rows {
                        out.extend_from_slice(&enc[r * self.d + i * ds..r * self.d + (i + 1) * ds]);
                    }
                    out
                })
                .collect(),
            DvqVariant::Projected => (0..self.n_d)
                .map(|i| {
                    let p = &self.projections[i];
                    let mut out = vec![0.0; rows * ds];
                    for r in 0..rows {
                        let row = &enc[r * self.d..(r + 1) * self.d];
                        let orow = &mut out[r * ds..(r + 1) * ds];
                        for (q, &x) in row.iter().enumerate() {
                            let prow = &p[q * ds..(q + 1) * ds];
                            for (o, &pv) in orow.iter_mut().zip(prow) {
                                *o += x * pv;
                            }
                        }
                    }
                    out
                })
                .collect(),
        }
    }

    /// Nearest table row by l2 distance; ties break toward the lowest index.
    pub fn nearest(&self, slice: usize, x: &[f64]) -> u32 {
        let ds = self.slice_dim;
        let table = &self.tables[slice];
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for j in 0..self.k_prime {
            let row = &table[j * ds..(j + 1) * ds];
            let mut dist = 0.0;
            for (a, b) in x.iter().zip(row) {
                let diff = a - b;
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = j as u32;
            }
        }
        best
    }

    /// Assign every row of `enc` to its nearest codebook rows.
    /// Returns indices in row-major rows x n_d layout.
    pub fn assign(&self, enc: &[f64], rows: usize) -> Vec<u32> {
        let ds = self.slice_dim;
        let sliced = self.slice_inputs(enc, rows);
        let mut out = vec![0u32; rows * self.n_d];
        for (i, buf) in sliced.iter().enumerate() {
            for r in 0..rows {
                out[r * self.n_d + i] = self.nearest(i, &buf[r * ds..(r + 1) * ds]);
            }
        }
        out
    }

    /// EMA update of counts then embeddings from one training batch.
    /// Counts first, then embeddings divide by the updated count; rows with
    /// no assignments only decay their count. Not part of the gradient graph.
    pub fn ema_update(&mut self, enc: &[f64], rows: usize, slice_indices: &[u32]) {
        debug_assert_eq!(slice_indices.len(), rows * self.n_d);
        let ds = self.slice_dim;
        let lambda = self.decay;
        let sliced = self.slice_inputs(enc, rows);
        for i in 0..self.n_d {
            let mut assigned = vec![0.0f64; self.k_prime];
            let mut sums = vec![0.0f64; self.k_prime * ds];
            for r in 0..rows {
                let j = slice_indices[r * self.n_d + i] as usize;
                assigned[j] += 1.0;
                let src = &sliced[i][r * ds..(r + 1) * ds];
                let dst = &mut sums[j * ds..(j + 1) * ds];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += x;
                }
            }
            for j in 0..self.k_prime {
                self.counts[i][j] = lambda * self.counts[i][j] + (1.0 - lambda) * assigned[j];
                let c = self.counts[i][j];
                let row = &mut self.tables[i][j * ds..(j + 1) * ds];
                let sum = &sums[j * ds..(j + 1) * ds];
                for (e, &s) in row.iter_mut().zip(sum) {
                    *e = lambda * *e + (1.0 - lambda) * s / c;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_book(rows: Vec<Vec<f64>>) -> Codebook {
        let k_prime = rows.len();
        let ds = rows[0].len();
        let mut rng = CounterRng::new(0, 0);
        let mut book = Codebook::new(
            ds,
            log2_exact(k_prime),
            1,
            0.9,
            DvqVariant::Sliced,
            &mut rng,
        )
        .unwrap();
        book.tables[0] = rows.into_iter().flatten().collect();
        book
    }

    #[test]
    fn nearest_neighbor_basic() {
        let book = tiny_book(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(book.nearest(0, &[0.2, 0.1]), 0);
        assert_eq!(book.nearest(0, &[0.9, 0.8]), 1);
    }

    #[test]
    fn nearest_tie_breaks_low_index() {
        let book = tiny_book(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(book.nearest(0, &[0.5, 0.5]), 0);
    }

    #[test]
    fn ema_counts_and_rows_by_hand() {
        // lambda=0.9, c=1, three vectors assigned: c' = 0.9*1 + 0.1*3 = 1.2;
        // e=(1,0), assigned sum=(3,3): e' = 0.9*(1,0) + 0.1*(3,3)/1.2 = (1.15, 0.25)
        let mut book = tiny_book(vec![vec![1.0, 0.0], vec![100.0, 100.0]]);
        let enc = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let idx = vec![0u32, 0, 0];
        book.ema_update(&enc, 3, &idx);
        assert!((book.counts(0)[0] - 1.2).abs() < 1e-12);
        let row = book.row(0, 0);
        assert!((row[0] - 1.15).abs() < 1e-12);
        assert!((row[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ema_unassigned_row_decays_count_only_numerator() {
        let mut book = tiny_book(vec![vec![1.0, 0.0], vec![2.0, 2.0]]);
        let enc = vec![1.0, 0.0];
        let idx = vec![0u32];
        book.ema_update(&enc, 1, &idx);
        // row 1 got nothing: c' = 0.9, e' = 0.9 * e
        assert!((book.counts(0)[1] - 0.9).abs() < 1e-12);
        assert!((book.row(0, 1)[0] - 1.8).abs() < 1e-12);
        assert!((book.row(0, 1)[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn k_prime_from_bits_and_slices() {
        let mut rng = CounterRng::new(1, 0);
        let book = Codebook::new(64, 16, 2, 0.999, DvqVariant::Sliced, &mut rng).unwrap();
        assert_eq!(book.k_prime, 256);
        assert_eq!(book.slice_dim, 32);
    }

    #[test]
    fn indivisible_dimensions_rejected() {
        let mut rng = CounterRng::new(1, 0);
        assert!(Codebook::new(64, 15, 2, 0.999, DvqVariant::Sliced, &mut rng).is_err());
        assert!(Codebook::new(63, 16, 2, 0.999, DvqVariant::Sliced, &mut rng).is_err());
        assert!(Codebook::new(64, 16, 2, 0.999, DvqVariant::Projected, &mut rng).is_ok());
    }
}
