//! Fixtures shared by the criterion benches.

use tenet_core::model::policy_manifest;
use tenet_core::seed::rng_for;
use tenet_core::ParamVec;

/// Policy widths swept by the forward-pass bench.
pub const WIDTHS: [usize; 3] = [64, 128, 256];

/// A randomly initialized two-hidden-layer policy of the given width.
pub fn random_policy(state_dim: usize, width: usize, action_dim: usize, seed: u64) -> ParamVec {
    let manifest = policy_manifest(state_dim, &[width, width], action_dim).expect("valid widths");
    ParamVec::init_glorot(manifest, 1.0, &mut rng_for(seed, &[width as u64]))
}

/// A fixed, nonzero state of length `n`.
pub fn probe_state(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 - 0.1 * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_sizes() {
        assert_eq!(random_policy(4, 64, 2, 0).len(), 4610);
        assert_eq!(probe_state(4).len(), 4);
    }
}
