//! Codeword usage accounting: per-slice histograms, windowed over training
//! steps, and the fraction of distinct codewords ever used. Low fractions on
//! large codebooks are the index-collapse signature.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct UsageBin {
    pub step_start: u64,
    /// Per slice: k_prime counts.
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone)]
pub struct UsageTracker {
    pub n_d: usize,
    pub k_prime: usize,
    pub bin_width: u64,
    bins: Vec<UsageBin>,
    totals: Vec<Vec<u64>>,
    positions: u64,
}

impl UsageTracker {
    pub fn new(n_d: usize, k_prime: usize, bin_width: u64) -> Self {
        UsageTracker {
            n_d,
            k_prime,
            bin_width: bin_width.max(1),
            bins: Vec::new(),
            totals: vec![vec![0; k_prime]; n_d],
            positions: 0,
        }
    }

    /// Record one batch of per-position slice indices (row-major rows x n_d).
    pub fn record(&mut self, step: u64, slice_indices: &[u32]) {
        debug_assert_eq!(slice_indices.len() % self.n_d, 0);
        let bin_start = (step / self.bin_width) * self.bin_width;
        if self.bins.last().map_or(true, |b| b.step_start != bin_start) {
            self.bins.push(UsageBin {
                step_start: bin_start,
                counts: vec![vec![0; self.k_prime]; self.n_d],
            });
        }
        let bin = self.bins.last_mut().unwrap();
        for row in slice_indices.chunks_exact(self.n_d) {
            for (i, &idx) in row.iter().enumerate() {
                bin.counts[i][idx as usize] += 1;
                self.totals[i][idx as usize] += 1;
            }
            self.positions += 1;
        }
    }

    pub fn positions_seen(&self) -> u64 {
        self.positions
    }

    pub fn bins(&self) -> &[UsageBin] {
        &self.bins
    }

    pub fn totals(&self) -> &[Vec<u64>] {
        &self.totals
    }

    /// distinct codewords used / (n_d * K').
    pub fn usage_fraction(&self) -> Result<f64> {
        if self.positions == 0 {
            return Err(Error::EmptyHistory);
        }
        Ok(usage_fraction(&self.totals))
    }

    /// Histogram rows for CSV export: (step_bin, slice, code, count), zero
    /// counts omitted.
    pub fn csv_rows(&self) -> impl Iterator<Item = (u64, usize, usize, u64)> + '_ {
        self.bins.iter().flat_map(|bin| {
            bin.counts.iter().enumerate().flat_map(move |(slice, cs)| {
                cs.iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(move |(code, &c)| (bin.step_start, slice, code, c))
            })
        })
    }
}

/// distinct codewords with nonzero count / total table rows across slices.
pub fn usage_fraction(histograms: &[Vec<u64>]) -> f64 {
    let used: usize = histograms
        .iter()
        .map(|h| h.iter().filter(|&&c| c > 0).count())
        .sum();
    let total: usize = histograms.iter().map(|h| h.len()).sum();
    used as f64 / total as f64
}
