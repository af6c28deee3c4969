//! Deterministic tube-limbed humanoid avatars laid out on a UV grid.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Avatar;
use crate::decoder::{TeacherConfig, TeacherDecoder};
use crate::error::{Error, Result};
use crate::math;
use crate::raster::dc_from_color;
use crate::sharing;
use crate::splat::{Camera, Gaussian, RigidTransform, Skeleton, SkinWeights, SplatSet, MAX_INFLUENCES, SH_COEFFS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_joints: usize,
    /// The UV grid is `grid x grid`.
    pub grid: usize,
    pub seed: u64,
    /// Corrective sharing factor; the teacher then emits a grid this many times smaller.
    pub share: Option<usize>,
    pub linear_teacher: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_joints: 24,
            grid: 256,
            seed: 0,
            share: None,
            linear_teacher: false,
        }
    }
}

pub struct SynthAvatar {
    pub avatar: Avatar,
    pub teacher: TeacherDecoder,
}

/// Fraction of UV cells left empty.
const DROPOUT: f64 = 0.08;

// (parent, rest position, capsule radius of the bone ending at this joint's children)
const TEMPLATE: [(i32, [f64; 3], f64); 24] = [
    (-1, [0.0, 0.95, 0.0], 0.15),
    (0, [0.09, 0.88, 0.0], 0.085),
    (0, [-0.09, 0.88, 0.0], 0.085),
    (0, [0.0, 1.05, 0.0], 0.15),
    (1, [0.10, 0.50, 0.0], 0.06),
    (2, [-0.10, 0.50, 0.0], 0.06),
    (3, [0.0, 1.18, 0.0], 0.16),
    (4, [0.10, 0.10, 0.0], 0.045),
    (5, [-0.10, 0.10, 0.0], 0.045),
    (6, [0.0, 1.30, 0.0], 0.16),
    (7, [0.10, 0.03, 0.12], 0.04),
    (8, [-0.10, 0.03, 0.12], 0.04),
    (9, [0.0, 1.48, 0.0], 0.06),
    (9, [0.07, 1.42, 0.0], 0.07),
    (9, [-0.07, 1.42, 0.0], 0.07),
    (12, [0.0, 1.58, 0.0], 0.10),
    (13, [0.18, 1.42, 0.0], 0.055),
    (14, [-0.18, 1.42, 0.0], 0.055),
    (16, [0.45, 1.42, 0.0], 0.045),
    (17, [-0.45, 1.42, 0.0], 0.045),
    (18, [0.70, 1.42, 0.0], 0.035),
    (19, [-0.70, 1.42, 0.0], 0.035),
    (20, [0.78, 1.42, 0.0], 0.03),
    (21, [-0.78, 1.42, 0.0], 0.03),
];

/// Rig with `n` joints: the template truncated, or extended with short chains off the
/// hands, feet and head.
fn rig(n: usize) -> Vec<(i32, Vector3<f64>, f64)> {
    let mut joints: Vec<(i32, Vector3<f64>, f64)> = TEMPLATE.iter().take(n).map(|(p, x, r)| (*p, Vector3::from(*x), *r)).collect();
    let tips = [22usize, 23, 10, 11, 15];
    let mut last = tips;
    let mut k = 0;
    while joints.len() < n {
        let slot = k % tips.len();
        let parent = last[slot];
        let (pp, px, _) = joints[parent];
        let dir = if pp >= 0 {
            (px - joints[pp as usize].1).normalize()
        } else {
            Vector3::y()
        };
        joints.push((parent as i32, px + dir * 0.04, 0.02));
        last[slot] = joints.len() - 1;
        k += 1;
    }
    joints
}

struct Capsule {
    a: Vector3<f64>,
    b: Vector3<f64>,
    radius: f64,
    joint: usize,
    color: [f64; 3],
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared().max(1e-12)).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn part_color(joint: usize) -> [f64; 3] {
    match joint {
        15 | 12 | 20..=23 => [0.85, 0.66, 0.52],
        0..=2 | 4 | 5 => [0.22, 0.27, 0.45],
        7 | 8 | 10 | 11 => [0.25, 0.2, 0.18],
        3 | 6 | 9 | 13 | 14 | 16..=19 => [0.7, 0.2, 0.18],
        _ => [0.8, 0.8, 0.75],
    }
}

fn capsules(joints: &[(i32, Vector3<f64>, f64)]) -> Vec<Capsule> {
    let n = joints.len();
    let mut out = Vec::new();
    for (j, (p, x, _)) in joints.iter().enumerate() {
        if *p >= 0 {
            let p = *p as usize;
            let (_, px, r) = joints[p];
            if (x - px).norm() > 1e-6 {
                out.push(Capsule {
                    a: px,
                    b: *x,
                    radius: r,
                    joint: p,
                    color: part_color(p),
                });
            }
        }
        let has_child = joints.iter().any(|(q, _, _)| *q == j as i32);
        if !has_child {
            let dir = if *p >= 0 {
                (x - joints[*p as usize].1).normalize()
            } else {
                Vector3::y()
            };
            let len = if j == 15 { 0.2 } else { 0.06 };
            out.push(Capsule {
                a: *x,
                b: x + dir * len,
                radius: joints[j].2,
                joint: j,
                color: part_color(j),
            });
        }
    }
    debug_assert!(out.iter().all(|c| c.joint < n));
    out
}

/// Orthonormal frame whose first column is `axis`.
fn frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (u, v)
}

fn skin_weights(p: &Vector3<f64>, caps: &[Capsule], n_joints: usize, own: usize) -> SkinWeights {
    let mut best = vec![f64::INFINITY; n_joints];
    for c in caps {
        let d = (segment_distance(p, &c.a, &c.b) - c.radius).max(0.0);
        best[c.joint] = best[c.joint].min(d);
    }
    best[own] = 0.0;
    let mut order: Vec<usize> = (0..n_joints).filter(|j| best[*j].is_finite()).collect();
    order.sort_by(|a, b| best[*a].total_cmp(&best[*b]).then(a.cmp(b)));
    order.truncate(MAX_INFLUENCES);
    let raw: Vec<f64> = order.iter().map(|j| 1.0 / (best[*j] + 0.02).powi(4)).collect();
    let total: f64 = raw.iter().sum();
    let mut sw = SkinWeights {
        joints: [0; MAX_INFLUENCES],
        weights: [0.0; MAX_INFLUENCES],
    };
    for (k, (j, w)) in order.iter().zip(&raw).enumerate() {
        sw.joints[k] = *j as u32;
        sw.weights[k] = (w / total) as f32;
    }
    // make the f32 weights sum to one by adjusting the largest
    let rest: f64 = sw.weights[1..].iter().map(|w| *w as f64).sum();
    sw.weights[0] = (1.0 - rest) as f32;
    sw
}

/// Builds the avatar, its skeleton and the teacher decoder that drives it.
pub fn synth_avatar(cfg: &SynthConfig) -> Result<SynthAvatar> {
    if cfg.n_joints == 0 || cfg.grid < 8 {
        return Err(Error::validation("synth_avatar needs at least one joint and an 8x8 grid"));
    }
    let g = cfg.grid;
    let share = cfg.share.unwrap_or(1);
    if share == 0 || !g.is_multiple_of(share) {
        return Err(Error::validation(format!("grid {g} is not divisible by share factor {share}")));
    }
    let joints = rig(cfg.n_joints);
    let caps = capsules(&joints);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // rows of the UV grid shared among capsules by surface area
    let area: Vec<f64> = caps.iter().map(|c| c.radius * ((c.b - c.a).norm() + c.radius)).collect();
    let total: f64 = area.iter().sum();
    let mut rows: Vec<usize> = area.iter().map(|a| ((a / total) * g as f64).floor().max(1.0) as usize).collect();
    while rows.iter().sum::<usize>() > g {
        let i = (0..rows.len()).max_by_key(|i| rows[*i]).expect("capsules");
        rows[i] -= 1;
    }
    let mut k = 0;
    while rows.iter().sum::<usize>() < g {
        let i = k % rows.len();
        rows[i] += 1;
        k += 1;
    }

    let mut mask = vec![false; g * g];
    let mut gaussians = Vec::new();
    let mut weights = Vec::new();
    let mut row0 = 0;
    for (c, &nrows) in caps.iter().zip(&rows) {
        let axis_vec = c.b - c.a;
        let len = axis_vec.norm();
        let axis = axis_vec / len;
        let (u, v) = frame(&axis);
        let tint: f64 = rng.random_range(-0.04..0.04);
        for rr in 0..nrows {
            let t = (rr as f64 + 0.5) / nrows as f64;
            for col in 0..g {
                let keep = rng.random::<f64>() >= DROPOUT;
                if !keep {
                    continue;
                }
                let phi = (col as f64 + 0.5) / g as f64 * std::f64::consts::TAU;
                let normal = u * phi.cos() + v * phi.sin();
                let tangent = normal.cross(&axis);
                let pos = c.a + axis_vec * t + normal * c.radius;
                let along = len / nrows as f64;
                let around = std::f64::consts::TAU * c.radius / g as f64;
                let rot = math::matrix_to_quat(&Matrix3::from_columns(&[axis, tangent, normal]));
                let sigma = [
                    (0.6 * along).max(1e-3),
                    (0.6 * around).max(1e-3),
                    (0.3 * along.min(around)).max(5e-4),
                ];
                let mut sh = [0.0f32; SH_COEFFS];
                for ch in 0..3 {
                    let noise: f64 = rng.random_range(-0.03..0.03);
                    sh[ch] = dc_from_color((c.color[ch] + tint + noise).clamp(0.02, 0.98));
                }
                let delta = rng.random_range(0.75..0.95) as f32;
                mask[(row0 + rr) * g + col] = true;
                gaussians.push(Gaussian::new(
                    math::vec3_f32(&pos),
                    math::quat_f32(rot),
                    [sigma[0] as f32, sigma[1] as f32, sigma[2] as f32],
                    delta,
                    sh,
                ));
                weights.push(skin_weights(&pos, &caps, joints.len(), c.joint));
            }
        }
        row0 += nrows;
    }

    let parent: Vec<i32> = joints.iter().map(|j| j.0).collect();
    let rest: Vec<RigidTransform> = joints
        .iter()
        .map(|(p, x, _)| {
            let t = if *p >= 0 { x - joints[*p as usize].1 } else { *x };
            RigidTransform::translation(math::vec3_f32(&t))
        })
        .collect();
    let skeleton = Skeleton::new(parent, rest, weights)?;
    let splats = SplatSet::from_mask(g, g, mask, gaussians)?;
    let lut = match cfg.share {
        Some(f) => Some(sharing::build_lut(&splats.mask, g, g, f)?),
        None => None,
    };
    let tcfg = TeacherConfig::new(cfg.n_joints, g / share, g / share, cfg.linear_teacher, cfg.seed ^ 0x7eac_4e5d);
    let teacher = TeacherDecoder::new(tcfg)?;
    Ok(SynthAvatar {
        avatar: Avatar {
            splats,
            skeleton,
            lut,
            teacher: Some(tcfg),
        },
        teacher,
    })
}

/// Front view framing the rest-pose avatar.
pub fn default_camera(width: usize, height: usize) -> Result<Camera> {
    // half the shorter image side spans 1 m at the avatar
    let focal = 0.5 * width.min(height) as f64 * 3.2;
    Camera::look_at([0.0, 0.85, 3.2], [0.0, 0.85, 0.0], [0.0, 1.0, 0.0], focal, width, height)
}
