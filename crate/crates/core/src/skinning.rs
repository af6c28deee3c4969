//! Linear blend skinning of canonical-space Gaussians.
//!
//! Skinning matrices are built so that a joint with the identity rotation contributes an
//! exact identity: each joint's rotation is conjugated into its rest frame as a quaternion
//! (which leaves `(1, 0, 0, 0)` untouched) and blending is done as `I + sum w (X - I)`.
//! An identity pose therefore maps every Gaussian to itself bit for bit.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math;
use crate::splat::{apply_corrective, Corrective, Gaussian, Pose, Skeleton, SkinWeights, SplatSet, MAX_INFLUENCES};

/// Affine map `x -> linear * x + translation` (a 3x4 matrix).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkinTransform {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SkinTransform {
    pub fn identity() -> Self {
        SkinTransform {
            linear: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.linear * x + self.translation
    }

    /// `self ∘ other`.
    pub fn then_after(&self, other: &SkinTransform) -> SkinTransform {
        SkinTransform {
            linear: self.linear * other.linear,
            translation: self.linear * other.translation + self.translation,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.linear == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

/// Rest-pose world frames of every joint: (rotation quaternion, origin).
pub fn rest_world_frames(skel: &Skeleton) -> Vec<([f64; 4], Vector3<f64>)> {
    let n = skel.n_joints();
    let mut frames = vec![([1.0, 0.0, 0.0, 0.0], Vector3::zeros()); n];
    for &j in skel.order() {
        let local = &skel.rest_local[j];
        let lq = math::quat_f64(local.rot);
        let lt = math::vec3_f64(local.trans);
        frames[j] = match skel.parent[j] {
            p if p < 0 => (lq, lt),
            p => {
                let (pq, pt) = frames[p as usize];
                (math::quat_mul(pq, lq), math::quat_to_matrix(pq) * lt + pt)
            }
        };
    }
    frames
}

/// Per-joint skinning matrices: posed world transform times inverse rest transform.
pub fn lbs_transforms(skel: &Skeleton, pose: &Pose) -> Result<Vec<SkinTransform>> {
    if pose.joints.len() != skel.n_joints() {
        return Err(Error::dim("pose joints", skel.n_joints(), pose.joints.len()));
    }
    let rest = rest_world_frames(skel);
    let root_t = math::vec3_f64(pose.root_t);
    let mut out = vec![SkinTransform::identity(); skel.n_joints()];
    for &j in skel.order() {
        let q = math::quat_f64(pose.joints[j]);
        let n = math::quat_norm(q);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::validation(format!("joint {j} rotation is degenerate")));
        }
        let (rest_q, center) = rest[j];
        // joint rotation expressed in world axes, about the joint's rest position
        let rw = math::quat_to_matrix(rest_q);
        let v = rw * Vector3::new(q[1], q[2], q[3]);
        let m = math::quat_to_matrix([q[0], v.x, v.y, v.z]);
        let local = SkinTransform {
            linear: m,
            translation: center - m * center,
        };
        out[j] = match skel.parent[j] {
            p if p < 0 => SkinTransform {
                linear: local.linear,
                translation: local.translation + root_t,
            },
            p => out[p as usize].then_after(&local),
        };
    }
    Ok(out)
}

/// Weighted blend `I + sum_k w_k (X_k - I)` of the influencing skinning matrices.
pub fn blend_transform(weights: &SkinWeights, xforms: &[SkinTransform]) -> SkinTransform {
    let mut linear = Matrix3::identity();
    let mut translation = Vector3::zeros();
    for k in 0..MAX_INFLUENCES {
        let w = weights.weights[k] as f64;
        if w == 0.0 {
            continue;
        }
        let x = &xforms[weights.joints[k] as usize];
        linear += (x.linear - Matrix3::identity()) * w;
        translation += x.translation * w;
    }
    SkinTransform { linear, translation }
}

/// Polar decomposition `A = R P` with `R` a proper rotation and `P` symmetric.
pub fn polar_decompose(a: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    if *a == Matrix3::identity() {
        return (Matrix3::identity(), Matrix3::identity());
    }
    let svd = a.svd(true, true);
    let mut u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut s = svd.singular_values;
    if (u * v_t).determinant() < 0.0 {
        // smallest singular value is last; flip it to stay a rotation
        let mut col = u.column_mut(2);
        col *= -1.0;
        s[2] = -s[2];
    }
    let r = u * v_t;
    let p = v_t.transpose() * Matrix3::from_diagonal(&s) * v_t;
    (r, p)
}

fn skin_with(g: &Gaussian, x: &SkinTransform) -> Gaussian {
    let mut out = *g;
    let mu = math::vec3_f64(g.mu);
    out.mu = math::vec3_f32(&x.apply(&mu));
    if x.linear == Matrix3::identity() {
        return out;
    }
    let (r, p) = polar_decompose(&x.linear);
    let q = math::quat_f64(g.rot);
    let axes = math::quat_to_matrix(q);
    for i in 0..3 {
        let stretch = (p * axes.column(i)).norm();
        if stretch != 1.0 {
            out.log_scale[i] = (g.log_scale[i] as f64 + stretch.ln()) as f32;
        }
    }
    let rq = math::quat_mul(math::matrix_to_quat(&r), q);
    let n = math::quat_norm(rq);
    out.rot = math::quat_f32([rq[0] / n, rq[1] / n, rq[2] / n, rq[3] / n]);
    out
}

/// Poses one Gaussian: position by the blended affine map, covariance by its polar
/// rotation plus the stretch of the symmetric factor along each Gaussian axis (shear is
/// dropped). Opacity and SH are unchanged.
pub fn skin_gaussian(g: &Gaussian, weights: &SkinWeights, xforms: &[SkinTransform]) -> Gaussian {
    skin_with(g, &blend_transform(weights, xforms))
}

/// Relative Frobenius error between the exact transformed covariance `A Σ Aᵀ` and the
/// covariance represented by the skinned Gaussian; nonzero only when blending introduces shear.
pub fn shear_residual(g: &Gaussian, weights: &SkinWeights, xforms: &[SkinTransform]) -> f64 {
    let x = blend_transform(weights, xforms);
    let exact = x.linear * g.covariance() * x.linear.transpose();
    let skinned = skin_with(g, &x).covariance();
    (exact - skinned).norm() / exact.norm()
}

/// Applies per-Gaussian correctives in canonical space, then skins with the pose.
pub fn animate(s: &SplatSet, corr: &[Corrective], skel: &Skeleton, pose: &Pose) -> Result<SplatSet> {
    if corr.len() != s.gaussians.len() {
        return Err(Error::dim("animate correctives", s.gaussians.len(), corr.len()));
    }
    if skel.skin_weights.len() != s.gaussians.len() {
        return Err(Error::dim("animate skin weights", s.gaussians.len(), skel.skin_weights.len()));
    }
    let xforms = lbs_transforms(skel, pose)?;
    let gaussians = s
        .gaussians
        .par_iter()
        .zip(corr.par_iter())
        .zip(skel.skin_weights.par_iter())
        .map(|((g, c), w)| Ok(skin_gaussian(&apply_corrective(g, c)?, w, &xforms)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplatSet { gaussians, ..s.clone() })
}

/// Skinning without correctives.
pub fn animate_uncorrected(s: &SplatSet, skel: &Skeleton, pose: &Pose) -> Result<SplatSet> {
    if skel.skin_weights.len() != s.gaussians.len() {
        return Err(Error::dim("animate skin weights", s.gaussians.len(), skel.skin_weights.len()));
    }
    let xforms = lbs_transforms(skel, pose)?;
    let gaussians = s
        .gaussians
        .par_iter()
        .zip(skel.skin_weights.par_iter())
        .map(|(g, w)| skin_gaussian(g, w, &xforms))
        .collect();
    Ok(SplatSet { gaussians, ..s.clone() })
}
