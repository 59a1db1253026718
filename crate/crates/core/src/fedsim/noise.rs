use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Identifies the gradient-noise stream of one task in one round.
///
/// Every step draws from a fresh generator keyed by `(seed, task, round, step)`,
/// so a trajectory does not depend on the order in which tasks or rounds run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub task: u64,
    pub round: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, task: usize, round: usize) -> Self {
        Self {
            seed,
            task: task as u64,
            round: round as u64,
        }
    }

    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let words = [
            splitmix64(self.seed ^ 0x6a09_e667_f3bc_c908),
            splitmix64(self.task ^ 0xbb67_ae85_84ca_a73b),
            splitmix64(self.round ^ 0x3c6e_f372_fe94_f82b),
            splitmix64(step as u64 ^ 0xa54f_f53a_5f1d_36f1),
        ];
        let mut state = 0u64;
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            state = splitmix64(state ^ w);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// Adds isotropic noise with total variance `sigma^2` (per-coordinate std `sigma / sqrt(d)`).
    pub fn perturb(&self, step: usize, sigma: f64, grad: &mut [f64]) {
        if sigma == 0.0 || grad.is_empty() {
            return;
        }
        let std = sigma / (grad.len() as f64).sqrt();
        let mut rng = self.step_rng(step);
        for g in grad.iter_mut() {
            *g += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
