//! Counter-based random substreams.
//!
//! Every path of an ensemble owns one `RngStream` keyed by
//! `(master_seed, stream_id)`. The generator is ChaCha8 with the stream id in
//! the nonce, so a path's numbers do not depend on which thread ran it or in
//! what order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// One standard normal variate.
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One uniform variate in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `n` i.i.d. Wiener increments with variance `dt`.
pub fn gaussian_increments(stream: &mut RngStream, n: usize, dt: f64) -> Vec<f64> {
    assert!(dt > 0.0, "dt must be positive");
    let scale = dt.sqrt();
    (0..n).map(|_| scale * stream.standard_normal()).collect()
}

/// Sums consecutive pairs of increments: the same Brownian path seen on a
/// grid twice as coarse. Requires an even length.
pub fn coarsen_increments(fine: &[f64]) -> Vec<f64> {
    assert!(fine.len() % 2 == 0, "fine increment count must be even");
    fine.chunks_exact(2).map(|p| p[0] + p[1]).collect()
}
