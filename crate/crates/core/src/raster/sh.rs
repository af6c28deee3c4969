use nalgebra::Vector3;

use crate::splat::SH_COEFFS;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2_0: f64 = 1.092_548_430_592_079_2;
const C2_1: f64 = 0.315_391_565_252_520_05;
const C2_2: f64 = 0.546_274_215_296_039_6;

/// Real SH basis up to degree 2, ordered `Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22`.
pub fn sh_basis(dir: &Vector3<f64>) -> [f64; 9] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2_0 * x * y,
        C2_0 * y * z,
        C2_1 * (3.0 * z * z - 1.0),
        C2_0 * x * z,
        C2_2 * (x * x - y * y),
    ]
}

/// View-dependent RGB from 27 SH coefficients (`sh[k * 3 + channel]`), offset by 0.5 and
/// clamped to `[0, 1]`. Non-unit directions are normalized.
pub fn eval_sh(sh: &[f32; SH_COEFFS], view_dir: &Vector3<f64>) -> [f64; 3] {
    let n = view_dir.norm();
    let dir = if (n - 1.0).abs() > 1e-6 {
        log::warn!("eval_sh: view direction has norm {n}, normalizing");
        if n > 0.0 {
            view_dir / n
        } else {
            Vector3::z()
        }
    } else {
        *view_dir
    };
    let basis = sh_basis(&dir);
    let mut rgb = [0.5f64; 3];
    for (k, b) in basis.iter().enumerate() {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v += b * sh[k * 3 + c] as f64;
        }
    }
    rgb.map(|v| v.clamp(0.0, 1.0))
}

/// Degree-0 coefficient that makes `eval_sh` return `color` in every direction.
pub fn dc_from_color(color: f64) -> f32 {
    ((color - 0.5) / C0) as f32
}
