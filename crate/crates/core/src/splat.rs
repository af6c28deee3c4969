//! Domain types shared across the pipeline: Gaussians laid out over a UV grid,
//! poses, skeletons, corrective grids and cameras.

use std::fmt;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::math;

/// Spherical-harmonics coefficients per Gaussian: 9 basis functions x 3 color channels.
///
/// Layout is coefficient-major: `sh[k * 3 + channel]`.
pub const SH_COEFFS: usize = 27;
/// Values per corrective: 27 SH deltas + 10 geometry deltas.
pub const CORR_CHANNELS: usize = 37;
/// Width of the auxiliary embedding carried by every pose.
pub const AUX_DIM: usize = 32;
pub const MAX_INFLUENCES: usize = 4;

/// Channel ranges inside a corrective.
pub mod channel {
    use std::ops::Range;
    pub const SH: Range<usize> = 0..27;
    pub const ROTATION: Range<usize> = 27..31;
    pub const TRANSLATION: Range<usize> = 31..34;
    pub const LOG_SCALE: Range<usize> = 34..37;
}

pub type Corrective = [f32; CORR_CHANNELS];

/// One anisotropic 3D Gaussian.
///
/// Scale is stored as log standard deviation; [`Gaussian::sigma`] exposes it as positive sigma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: [f32; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub rot: [f32; 4],
    pub log_scale: [f32; 3],
    /// Opacity density at the center, in `[0, 1]`.
    pub delta: f32,
    pub sh: [f32; SH_COEFFS],
}

impl Gaussian {
    pub fn new(mu: [f32; 3], rot: [f32; 4], sigma: [f32; 3], delta: f32, sh: [f32; SH_COEFFS]) -> Self {
        Gaussian {
            mu,
            rot,
            log_scale: sigma.map(f32::ln),
            delta,
            sh,
        }
    }

    pub fn sigma(&self) -> [f32; 3] {
        self.log_scale.map(f32::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let s = self.sigma();
        math::covariance(math::quat_f64(self.rot), [s[0] as f64, s[1] as f64, s[2] as f64])
    }

    /// Invariant violations of this Gaussian, as human-readable strings.
    pub fn check(&self) -> Vec<GaussianIssue> {
        let mut out = Vec::new();
        let n = math::quat_norm(math::quat_f64(self.rot));
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            out.push(GaussianIssue::QuaternionNorm(n));
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            out.push(GaussianIssue::NonFinitePosition);
        }
        if self.sigma().iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            out.push(GaussianIssue::NonPositiveScale);
        }
        if !(0.0..=1.0).contains(&self.delta) {
            out.push(GaussianIssue::OpacityOutOfRange(self.delta));
        }
        if self.sh.iter().any(|v| !v.is_finite()) {
            out.push(GaussianIssue::NonFiniteSh);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GaussianIssue {
    QuaternionNorm(f64),
    NonFinitePosition,
    NonPositiveScale,
    OpacityOutOfRange(f32),
    NonFiniteSh,
}

impl fmt::Display for GaussianIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GaussianIssue::QuaternionNorm(n) => write!(f, "quaternion norm {n} is not 1"),
            GaussianIssue::NonFinitePosition => write!(f, "position is not finite"),
            GaussianIssue::NonPositiveScale => write!(f, "scale is not a finite positive value"),
            GaussianIssue::OpacityOutOfRange(d) => write!(f, "opacity {d} outside [0, 1]"),
            GaussianIssue::NonFiniteSh => write!(f, "SH coefficients not finite"),
        }
    }
}

/// Adds a 37-value corrective to a canonical-space Gaussian.
///
/// Translation and log-scale deltas are additive, the rotation delta is added to the
/// quaternion which is then renormalized, SH deltas are added to all 27 coefficients.
/// Opacity is never corrected.
pub fn apply_corrective(base: &Gaussian, corr: &Corrective) -> Result<Gaussian> {
    if let Some(i) = corr.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!("corrective channel {i} is not finite")));
    }
    let mut g = *base;
    for i in 0..3 {
        g.mu[i] += corr[channel::TRANSLATION.start + i];
        g.log_scale[i] += corr[channel::LOG_SCALE.start + i];
    }
    for (s, c) in g.sh.iter_mut().zip(&corr[channel::SH]) {
        *s += c;
    }
    let dq = &corr[channel::ROTATION];
    if dq.iter().any(|v| *v != 0.0) {
        let q = [
            base.rot[0] as f64 + dq[0] as f64,
            base.rot[1] as f64 + dq[1] as f64,
            base.rot[2] as f64 + dq[2] as f64,
            base.rot[3] as f64 + dq[3] as f64,
        ];
        let n = math::quat_norm(q);
        // A delta that cancels the quaternion leaves no direction to normalize; keep the base rotation.
        if n > 1e-12 {
            g.rot = math::quat_f32([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
        }
    }
    Ok(g)
}

/// Gaussians occupying the true cells of a UV-grid mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatSet {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major `grid_h * grid_w` validity mask.
    pub mask: Vec<bool>,
    pub gaussians: Vec<Gaussian>,
    /// `(row, col)` of each Gaussian, row-major ascending.
    pub uv_index: Vec<(u32, u32)>,
}

impl SplatSet {
    /// Builds a set whose `uv_index` is derived from the mask.
    pub fn from_mask(grid_h: usize, grid_w: usize, mask: Vec<bool>, gaussians: Vec<Gaussian>) -> Result<Self> {
        if mask.len() != grid_h * grid_w {
            return Err(Error::dim("SplatSet mask", grid_h * grid_w, mask.len()));
        }
        let uv_index = uv_index_of(grid_w, &mask);
        if uv_index.len() != gaussians.len() {
            return Err(Error::dim("SplatSet gaussians vs mask popcount", uv_index.len(), gaussians.len()));
        }
        Ok(SplatSet {
            grid_h,
            grid_w,
            mask,
            gaussians,
            uv_index,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub(crate) fn uv_index_of(grid_w: usize, mask: &[bool]) -> Vec<(u32, u32)> {
    mask.iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| ((i / grid_w) as u32, (i % grid_w) as u32))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    MaskSize { expected: usize, actual: usize },
    CountMismatch { popcount: usize, gaussians: usize },
    UvIndexLength { expected: usize, actual: usize },
    UvIndexOutOfGrid { index: usize },
    UvIndexNotMasked { index: usize, row: u32, col: u32 },
    UvIndexOrder { index: usize },
    Gaussian { index: usize, issue: GaussianIssue },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MaskSize { expected, actual } => {
                write!(f, "mask has {actual} cells, grid needs {expected}")
            }
            Violation::CountMismatch { popcount, gaussians } => {
                write!(f, "mask popcount {popcount} != gaussian count {gaussians}")
            }
            Violation::UvIndexLength { expected, actual } => {
                write!(f, "uv_index has {actual} entries, expected {expected}")
            }
            Violation::UvIndexOutOfGrid { index } => write!(f, "uv_index[{index}] outside the grid"),
            Violation::UvIndexNotMasked { index, row, col } => {
                write!(f, "uv_index[{index}] = ({row}, {col}) is not a masked cell")
            }
            Violation::UvIndexOrder { index } => {
                write!(f, "uv_index[{index}] is not strictly after its predecessor (row-major)")
            }
            Violation::Gaussian { index, issue } => write!(f, "gaussian {index}: {issue}"),
        }
    }
}

/// Lists every invariant violation of a splat set. An empty report means the set is valid.
pub fn validate_splatset(s: &SplatSet) -> Vec<Violation> {
    let mut report = Vec::new();
    let cells = s.grid_h * s.grid_w;
    if s.mask.len() != cells {
        report.push(Violation::MaskSize {
            expected: cells,
            actual: s.mask.len(),
        });
    }
    let popcount = s.popcount();
    if popcount != s.gaussians.len() {
        report.push(Violation::CountMismatch {
            popcount,
            gaussians: s.gaussians.len(),
        });
    }
    if s.uv_index.len() != s.gaussians.len() {
        report.push(Violation::UvIndexLength {
            expected: s.gaussians.len(),
            actual: s.uv_index.len(),
        });
    }
    let mut prev: Option<usize> = None;
    for (index, &(row, col)) in s.uv_index.iter().enumerate() {
        if row as usize >= s.grid_h || col as usize >= s.grid_w {
            report.push(Violation::UvIndexOutOfGrid { index });
            continue;
        }
        let flat = row as usize * s.grid_w + col as usize;
        if !s.mask.get(flat).copied().unwrap_or(false) {
            report.push(Violation::UvIndexNotMasked { index, row, col });
        }
        if let Some(p) = prev {
            if flat <= p {
                report.push(Violation::UvIndexOrder { index });
            }
        }
        prev = Some(flat);
    }
    for (index, g) in s.gaussians.iter().enumerate() {
        for issue in g.check() {
            report.push(Violation::Gaussian { index, issue });
        }
    }
    report
}

/// Skeleton pose plus auxiliary embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    /// Per-joint local rotation `[w, x, y, z]`.
    pub joints: Vec<[f32; 4]>,
    pub root_t: [f32; 3],
    pub aux: [f32; AUX_DIM],
}

impl Pose {
    pub fn identity(n_joints: usize) -> Self {
        Pose {
            joints: vec![[1.0, 0.0, 0.0, 0.0]; n_joints],
            root_t: [0.0; 3],
            aux: [0.0; AUX_DIM],
        }
    }

    /// Length of the flattened pose vector for a rig with `n_joints` joints.
    pub fn dim_for(n_joints: usize) -> usize {
        4 * n_joints + 3 + AUX_DIM
    }

    pub fn dim(&self) -> usize {
        Self::dim_for(self.joints.len())
    }

    pub fn n_joints_for_dim(dim: usize) -> Option<usize> {
        let rest = dim.checked_sub(3 + AUX_DIM)?;
        (rest % 4 == 0).then_some(rest / 4)
    }

    /// Flattened `[joint quaternions..., root_t, aux]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for q in &self.joints {
            v.extend(q.iter().map(|x| *x as f64));
        }
        v.extend(self.root_t.iter().map(|x| *x as f64));
        v.extend(self.aux.iter().map(|x| *x as f64));
        v
    }

    pub fn to_vector_f32(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.dim());
        for q in &self.joints {
            v.extend_from_slice(q);
        }
        v.extend_from_slice(&self.root_t);
        v.extend_from_slice(&self.aux);
        v
    }

    pub fn from_vector_f32(v: &[f32]) -> Result<Self> {
        let n_joints =
            Self::n_joints_for_dim(v.len()).ok_or_else(|| Error::validation(format!("pose vector length {} is not 4J + 35", v.len())))?;
        let joints = (0..n_joints)
            .map(|j| [v[4 * j], v[4 * j + 1], v[4 * j + 2], v[4 * j + 3]])
            .collect();
        let o = 4 * n_joints;
        let mut aux = [0.0; AUX_DIM];
        aux.copy_from_slice(&v[o + 3..o + 3 + AUX_DIM]);
        Ok(Pose {
            joints,
            root_t: [v[o], v[o + 1], v[o + 2]],
            aux,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (j, q) in self.joints.iter().enumerate() {
            let n = math::quat_norm(math::quat_f64(*q));
            if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!("joint {j} quaternion norm {n}")));
            }
        }
        if self.root_t.iter().chain(self.aux.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("pose translation/aux not finite"));
        }
        Ok(())
    }
}

/// Rigid transform `x -> R x + t`, stored in single precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rot: [f32; 4],
    pub trans: [f32; 3],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rot: [1.0, 0.0, 0.0, 0.0],
        trans: [0.0; 3],
    };

    pub fn translation(t: [f32; 3]) -> Self {
        RigidTransform {
            rot: [1.0, 0.0, 0.0, 0.0],
            trans: t,
        }
    }
}

/// Up to four `(joint, weight)` influences for one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkinWeights {
    pub joints: [u32; MAX_INFLUENCES],
    pub weights: [f32; MAX_INFLUENCES],
}

impl SkinWeights {
    pub fn single(joint: u32) -> Self {
        SkinWeights {
            joints: [joint, 0, 0, 0],
            weights: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    /// Parent joint index, -1 for a root.
    pub parent: Vec<i32>,
    /// Joint frame relative to its parent frame (world frame for roots) in the rest pose.
    pub rest_local: Vec<RigidTransform>,
    pub skin_weights: Vec<SkinWeights>,
    order: Vec<usize>,
}

impl Skeleton {
    /// Validates the tree and the skin weights.
    pub fn new(parent: Vec<i32>, rest_local: Vec<RigidTransform>, skin_weights: Vec<SkinWeights>) -> Result<Self> {
        let n = parent.len();
        if rest_local.len() != n {
            return Err(Error::dim("Skeleton rest transforms", n, rest_local.len()));
        }
        let order = topo_order(&parent)?;
        for (i, sw) in skin_weights.iter().enumerate() {
            let mut sum = 0.0f64;
            for k in 0..MAX_INFLUENCES {
                let w = sw.weights[k];
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::validation(format!(
                        "gaussian {i}: skin weight {w} is negative or not finite"
                    )));
                }
                if w > 0.0 && sw.joints[k] as usize >= n {
                    return Err(Error::validation(format!("gaussian {i}: skin joint {} out of range", sw.joints[k])));
                }
                sum += w as f64;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!("gaussian {i}: skin weights sum to {sum}")));
            }
        }
        for (j, t) in rest_local.iter().enumerate() {
            let qn = math::quat_norm(math::quat_f64(t.rot));
            if (qn - 1.0).abs() > 1e-6 || t.trans.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("joint {j}: invalid rest transform")));
            }
        }
        Ok(Skeleton {
            parent,
            rest_local,
            skin_weights,
            order,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.parent.len()
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

fn topo_order(parent: &[i32]) -> Result<Vec<usize>> {
    let n = parent.len();
    for (j, &p) in parent.iter().enumerate() {
        if p < -1 || p >= n as i32 || p == j as i32 {
            return Err(Error::validation(format!("joint {j}: invalid parent {p}")));
        }
    }
    // depth by walking up; a walk longer than n steps means a cycle
    let mut depth = vec![0usize; n];
    for j in 0..n {
        let mut cur = parent[j];
        let mut d = 0;
        while cur >= 0 {
            d += 1;
            if d > n {
                return Err(Error::validation(format!("parent array has a cycle through joint {j}")));
            }
            cur = parent[cur as usize];
        }
        depth[j] = d;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (depth[j], j));
    Ok(order)
}

/// `h x w` grid of 37-channel correctives, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectiveGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Corrective>,
}

impl CorrectiveGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        CorrectiveGrid {
            h,
            w,
            data: vec![[0.0; CORR_CHANNELS]; h * w],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> &Corrective {
        &self.data[row * self.w + col]
    }

    pub fn channels(&self) -> usize {
        CORR_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.h * self.w {
            return Err(Error::dim("CorrectiveGrid cells", self.h * self.w, self.data.len()));
        }
        if self.data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("corrective grid has non-finite values"));
        }
        Ok(())
    }
}

/// Pinhole camera: `p_cam = R_c x + t_c`, pixel `= (fx x/z + cx, fy y/z + cy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rot: Matrix3<f64>, trans: Vector3<f64>, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::validation(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        let orth = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if !(orth <= 1e-6) || rot.determinant() < 0.0 {
            return Err(Error::validation("camera rotation is not a proper orthonormal matrix"));
        }
        if ![cx, cy].iter().chain(trans.iter()).all(|v| v.is_finite()) {
            return Err(Error::validation("camera parameters not finite"));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            rot,
            trans,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`; image y grows opposite to `up`.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Result<Self> {
        let eye = Vector3::from(eye);
        let fwd = (Vector3::from(target) - eye).normalize();
        let right = fwd.cross(&Vector3::from(up)).normalize();
        let down = fwd.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let trans = -(rot * eye);
        Camera::new(focal, focal, width as f64 * 0.5, height as f64 * 0.5, rot, trans, width, height)
    }

    /// Camera centered at `eye`, turned by `yaw` about world +y and then `pitch` up;
    /// zero angles look down world -z with +y up. Angles in radians.
    #[allow(clippy::too_many_arguments)]
    pub fn from_yaw_pitch(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        yaw: f64,
        pitch: f64,
        eye: [f64; 3],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let fwd = Vector3::new(-yaw.sin() * pitch.cos(), pitch.sin(), -yaw.cos() * pitch.cos());
        let right = Vector3::new(yaw.cos(), 0.0, -yaw.sin());
        let down = fwd.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let trans = -(rot * Vector3::from(eye));
        Camera::new(fx, fy, cx, cy, rot, trans, width, height)
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rot * x + self.trans
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rot.transpose() * self.trans)
    }

    /// The camera that sees `x` exactly as this camera sees `r x + t`.
    pub fn compose_rigid(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Camera {
        Camera {
            rot: self.rot * r,
            trans: self.rot * t + self.trans,
            ..self.clone()
        }
    }
}
