//! Shared fixtures for the solver benchmarks: deterministic scenes at paper
//! noise and a contaminated variant for the consensus benchmark.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uscal_core::sim::{generate_scene, Scene, SimConfig};

pub fn paper_noise_scene(seed: u64, n_lines: usize) -> Scene {
    let cfg = SimConfig {
        n_lines,
        rng_seed: seed,
        ..SimConfig::default()
    };
    generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Scene with 30% of the tracked lines swapped against an unrelated scene,
/// producing gross correspondence outliers.
pub fn contaminated_scene(seed: u64, n_lines: usize) -> Scene {
    let mut scene = paper_noise_scene(seed, n_lines);
    let junk = paper_noise_scene(seed ^ 0xDEAD_BEEF, n_lines);
    for (a, b) in scene
        .pool3d
        .iter_mut()
        .skip(1)
        .step_by(3)
        .zip(junk.pool3d)
    {
        a.tracked_line = b.tracked_line;
    }
    scene
}
