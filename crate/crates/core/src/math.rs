//! Small geometry helpers shared by the skinning and raster code.
//!
//! Quaternions are stored as `[w, x, y, z]` everywhere in this crate.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

pub fn quat_to_na(q: [f64; 4]) -> Quaternion<f64> {
    Quaternion::new(q[0], q[1], q[2], q[3])
}

pub fn quat_from_na(q: &Quaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn quat_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_f64(q: [f32; 4]) -> [f64; 4] {
    [q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64]
}

pub fn quat_f32(q: [f64; 4]) -> [f32; 4] {
    [q[0] as f32, q[1] as f32, q[2] as f32, q[3] as f32]
}

/// Rotation matrix of a (not necessarily normalized) quaternion; the quaternion is normalized first.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion (w >= 0) of a proper rotation matrix.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let uq = UnitQuaternion::from_matrix(m);
    let mut q = quat_from_na(uq.quaternion());
    if q[0] < 0.0 {
        q = [-q[0], -q[1], -q[2], -q[3]];
    }
    q
}

pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    quat_from_na(&(quat_to_na(a) * quat_to_na(b)))
}

/// Quaternion for a rotation of `angle` radians about `axis` (normalized internally).
pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let a = Vector3::from(axis).normalize();
    let (s, c) = (angle * 0.5).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// Rotation from intrinsic x-y-z Euler angles (radians).
pub fn quat_from_euler_xyz(rx: f64, ry: f64, rz: f64) -> [f64; 4] {
    let qx = quat_from_axis_angle([1.0, 0.0, 0.0], rx);
    let qy = quat_from_axis_angle([0.0, 1.0, 0.0], ry);
    let qz = quat_from_axis_angle([0.0, 0.0, 1.0], rz);
    quat_mul(quat_mul(qx, qy), qz)
}

pub fn vec3_f64(v: [f32; 3]) -> Vector3<f64> {
    Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

pub fn vec3_f32(v: &Vector3<f64>) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

/// Covariance `R diag(s^2) R^T` from a rotation quaternion and per-axis standard deviations.
pub fn covariance(rot: [f64; 4], sigma: [f64; 3]) -> Matrix3<f64> {
    let r = quat_to_matrix(rot);
    let s = Matrix3::from_diagonal(&Vector3::new(sigma[0] * sigma[0], sigma[1] * sigma[1], sigma[2] * sigma[2]));
    r * s * r.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_quat_roundtrip() {
        let q = quat_from_euler_xyz(0.3, -0.7, 1.1);
        let m = quat_to_matrix(q);
        let q2 = matrix_to_quat(&m);
        for i in 0..4 {
            assert!((q[i] - q2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_angle_quarter_turn() {
        let m = quat_to_matrix(quat_from_axis_angle([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2));
        let v = m * Vector3::new(0.0, 1.0, 0.0);
        assert!((v - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }
}
