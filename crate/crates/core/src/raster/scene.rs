use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{quat_f32, quat_f64, quat_norm};
use crate::splat::{Camera, Gaussian, SH_COEFFS};

/// Seeded random test scene: `n` splats with centers in `[-1, 1]^3`, seen from a camera
/// on the +z axis looking at the origin.
pub fn random_scene(seed: u64, n: usize, width: usize, height: usize) -> (Vec<Gaussian>, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let mu = [0; 3].map(|_| rng.random_range(-1.0f32..1.0));
            let q = quat_f64([0; 4].map(|_| rng.random_range(-1.0f32..1.0)));
            let rot = quat_f32(q.map(|v| v / quat_norm(q)));
            let sigma = [0; 3].map(|_| rng.random_range(0.05f32..0.3));
            let delta = rng.random_range(0.1f32..1.0);
            let mut sh = [0.0f32; SH_COEFFS];
            for v in sh.iter_mut() {
                *v = rng.random_range(-0.5f32..0.5);
            }
            Gaussian::new(mu, rot, sigma, delta, sh)
        })
        .collect();
    let focal = 0.5 * width.min(height) as f64 * 2.5;
    let cam = Camera::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], focal, width, height).expect("fixed camera is valid");
    (gaussians, cam)
}
