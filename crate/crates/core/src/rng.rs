//! Counter-based deterministic random source.
//!
//! Every stochastic element of a run (weight init, data generation, bottleneck
//! noise, sampling) draws from a `CounterRng` keyed by an explicit stream id,
//! so two runs with the same seed are bit-identical and the full generator
//! state is two u64s that fit in a checkpoint.

/// splitmix64 finalizer; the whole generator is `mix(seed, stream, counter)`.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            seed,
            stream,
            counter: 0,
        }
    }

    /// Restore a generator mid-stream (checkpoint resume).
    pub fn with_counter(seed: u64, stream: u64, counter: u64) -> Self {
        CounterRng {
            seed,
            stream,
            counter,
        }
    }

    /// Derive an independent stream; does not advance this generator.
    pub fn derive(&self, substream: u64) -> CounterRng {
        CounterRng::new(mix(self.seed ^ mix(self.stream)), substream)
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.seed ^ mix(self.stream.wrapping_add(mix(self.counter))));
        self.counter += 1;
        v
    }

    /// Uniform in the open interval (0, 1); never returns 0 or 1, so
    /// log(u) and log(-log(u)) are always finite.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel: g = -log(-log(u)).
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform().ln()).ln()
    }

    pub fn fill_gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    pub fn fill_gumbel(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gumbel()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
