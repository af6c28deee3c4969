//! Linear distillation of a corrective decoder.
//!
//! Poses are compressed by PCA into a bias-augmented code, per-corrective SH vectors are
//! compressed by one shared PCA, and the map from code to raw corrective values is fit by
//! least squares over a stream of decoded frames.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoder::{self, LinearDecoder, TeacherDecoder, GEOMETRY_CHANNELS};
use crate::error::{Error, Result};
use crate::math;
use crate::sharing;
use crate::splat::{channel, Corrective, Pose, CORR_CHANNELS, SH_COEFFS};

/// Mean, leading principal directions and the full descending eigenvalue spectrum.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `n x d`, orthonormal columns.
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Cumulative explained-variance ratio for 1..=d components.
    pub fn explained(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut acc = 0.0;
        (0..self.basis.ncols())
            .map(|k| {
                acc += self.eigenvalues[k].max(0.0);
                if total > 0.0 {
                    acc / total
                } else {
                    1.0
                }
            })
            .collect()
    }
}

/// PCA of a covariance (or scatter) matrix: eigenvectors by descending eigenvalue, each
/// column's largest-magnitude entry made positive.
pub fn pca_from_covariance(mean: DVector<f64>, cov: &DMatrix<f64>, d: usize) -> Result<Pca> {
    let n = cov.nrows();
    if d > n {
        return Err(Error::validation(format!("cannot keep {d} components of {n}-dimensional data")));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("covariance is not finite".into()));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(n, d);
    for (k, &i) in order.iter().take(d).enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let mut big = 0;
        for r in 1..n {
            if col[r].abs() > col[big].abs() {
                big = r;
            }
        }
        if col[big] < 0.0 {
            col = -col;
        }
        basis.set_column(k, &col);
    }
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let scale = eigenvalues.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    if d > 0 && eigenvalues[d - 1] <= 1e-12 * scale {
        log::warn!("pca: component {d} has (near) zero variance; its direction is arbitrary");
    }
    Ok(Pca { mean, basis, eigenvalues })
}

/// PCA of the rows of `x` (`F x n`), keeping `d` components.
pub fn pca_fit(x: &DMatrix<f64>, d: usize) -> Result<Pca> {
    let (f, n) = x.shape();
    if f == 0 {
        return Err(Error::validation("pca_fit needs at least one row"));
    }
    if d > 0 && d > (f - 1).min(n) {
        return Err(Error::validation(format!(
            "pca_fit: d = {d} exceeds min(F - 1, n) = {}",
            (f - 1).min(n)
        )));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / ((f.max(2) - 1) as f64);
    pca_from_covariance(mean, &cov, d)
}

/// Factorized least-squares problem `min ||C B - Y||` for a fixed design matrix `C`.
///
/// `B = R^-1 Q^T Y` with `C = Q R`. When `C` is rank-deficient the system is augmented with
/// `sqrt(lambda) I` rows (ridge), which only changes `Q` and `R`.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    /// First `F` rows of `Q`, `F x (d+1)`.
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    pub ridge: Option<f64>,
    pub condition: f64,
}

/// Condition numbers above this are treated as rank deficiency.
pub const RANK_TOLERANCE: f64 = 1e10;

impl LeastSquares {
    pub fn new(c: &DMatrix<f64>) -> Result<Self> {
        let (f, n) = c.shape();
        if n == 0 || f == 0 {
            return Err(Error::validation("least squares needs a non-empty design matrix"));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("design matrix is not finite".into()));
        }
        let sv = c.singular_values();
        let smax = sv.max();
        let smin = if f >= n { sv.min() } else { 0.0 };
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if condition <= RANK_TOLERANCE {
            let qr = c.clone().qr();
            return Ok(LeastSquares {
                q: qr.q(),
                r: qr.r(),
                ridge: None,
                condition,
            });
        }
        let gram_trace: f64 = c.iter().map(|v| v * v).sum();
        let lambda = 1e-8 * gram_trace / n as f64;
        if lambda <= 0.0 {
            return Err(Error::Numeric("design matrix is zero".into()));
        }
        log::warn!("least squares: condition {condition:e}, using ridge lambda {lambda:e}");
        let mut aug = DMatrix::zeros(f + n, n);
        aug.rows_mut(0, f).copy_from(c);
        for k in 0..n {
            aug[(f + k, k)] = lambda.sqrt();
        }
        let qr = aug.qr();
        Ok(LeastSquares {
            q: qr.q().rows(0, f).into_owned(),
            r: qr.r(),
            ridge: Some(lambda),
            condition,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_coef(&self) -> usize {
        self.r.ncols()
    }

    /// Row `f` of `Q`; `Q^T Y` is the sum over rows of `q_row(f)^T y_f`.
    pub fn q_row(&self, f: usize) -> Vec<f64> {
        self.q.row(f).iter().copied().collect()
    }

    /// Solves `R x = q` in place for one column of `Q^T Y`.
    pub fn back_substitute(&self, col: &mut [f64]) {
        let n = self.n_coef();
        for i in (0..n).rev() {
            let mut v = col[i];
            for k in i + 1..n {
                v -= self.r[(i, k)] * col[k];
            }
            col[i] = v / self.r[(i, i)];
        }
    }

    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.n_rows() {
            return Err(Error::dim("least squares targets", self.n_rows(), y.nrows()));
        }
        let mut qty = self.q.transpose() * y;
        for mut col in qty.column_iter_mut() {
            self.back_substitute(col.as_mut_slice());
        }
        Ok(qty)
    }
}

/// Least-squares basis `B_c` with `C B_c ≈ Y`, plus ridge/condition diagnostics.
pub fn solve_basis(c: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, LeastSquares)> {
    let ls = LeastSquares::new(c)?;
    let b = ls.solve(y)?;
    Ok((b, ls))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    /// Pose PCA components (the code has `d + 1` entries).
    pub d: usize,
    /// SH PCA components.
    pub sh_d: usize,
    /// Fraction of frames held out for evaluation.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            d: 32,
            sh_d: 6,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResidualStats {
    pub frames: usize,
    /// RMS error per corrective channel.
    pub channel_rms: Vec<f64>,
    /// RMS over the 10 geometry channels.
    pub geometry_rms: f64,
    /// RMS over the 27 SH channels.
    pub sh_rms: f64,
    /// RMS of projecting SH onto the retained SH components, over the 27 channels.
    pub sh_truncation_rms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    pub d: usize,
    pub sh_d: usize,
    pub n_corr: usize,
    pub shared: bool,
    pub condition: f64,
    pub ridge: Option<f64>,
    pub pose_explained: Vec<f64>,
    pub sh_explained: Vec<f64>,
    pub train: ResidualStats,
    pub heldout: ResidualStats,
    pub parameter_count: u64,
    pub flops: u64,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(",")
}

impl fmt::Display for DistillReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d={}", self.d)?;
        writeln!(f, "sh_d={}", self.sh_d)?;
        writeln!(f, "n_corr={}", self.n_corr)?;
        writeln!(f, "shared={}", self.shared)?;
        writeln!(f, "train_frames={}", self.train.frames)?;
        writeln!(f, "heldout_frames={}", self.heldout.frames)?;
        writeln!(f, "condition={:.6e}", self.condition)?;
        writeln!(f, "ridge={}", self.ridge.map_or("none".to_string(), |l| format!("{l:.6e}")))?;
        writeln!(f, "parameters={}", self.parameter_count)?;
        writeln!(f, "flops={}", self.flops)?;
        for (name, s) in [("train", &self.train), ("heldout", &self.heldout)] {
            writeln!(f, "{name}_geometry_rms={:.6e}", s.geometry_rms)?;
            writeln!(f, "{name}_sh_rms={:.6e}", s.sh_rms)?;
            writeln!(f, "{name}_sh_truncation_rms={:.6e}", s.sh_truncation_rms)?;
            writeln!(f, "{name}_channel_rms={}", join(&s.channel_rms))?;
        }
        writeln!(f, "pose_explained={}", join(&self.pose_explained))?;
        write!(f, "sh_explained={}", join(&self.sh_explained))
    }
}

/// Seeded random poses: per-joint Euler angles uniform within ±45°, root translation
/// within ±0.1 and auxiliary entries within ±1.
pub fn sample_poses(n_joints: usize, count: usize, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quarter = std::f64::consts::FRAC_PI_4;
    (0..count)
        .map(|_| {
            let joints = (0..n_joints)
                .map(|_| {
                    let [rx, ry, rz] = [0; 3].map(|_| rng.random_range(-quarter..=quarter));
                    math::quat_f32(math::quat_from_euler_xyz(rx, ry, rz))
                })
                .collect();
            let root_t = [0; 3].map(|_| rng.random_range(-0.1f32..=0.1));
            let aux = [0; crate::splat::AUX_DIM].map(|_| rng.random_range(-1.0f32..=1.0));
            Pose { joints, root_t, aux }
        })
        .collect()
}

/// Seeded 80/20-style split of frame indices into (train, held-out), each sorted.
pub fn split_frames(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_held = ((n as f64) * holdout.clamp(0.0, 1.0)).round() as usize;
    let n_held = n_held.min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = idx[..n_held].to_vec();
    let mut train = idx[n_held..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

const FRAME_CHUNK: usize = 16;

/// Decodes frames in parallel chunks and hands them to `visit` in index order.
fn stream_frames<F, V>(frames: &[usize], n_corr: usize, rows: &F, mut visit: V) -> Result<()>
where
    F: Fn(usize) -> Result<Vec<Corrective>> + Sync,
    V: FnMut(&[Corrective]) -> Result<()>,
{
    for chunk in frames.chunks(FRAME_CHUNK) {
        let decoded: Vec<Vec<Corrective>> = chunk.par_iter().map(|&i| rows(i)).collect::<Result<_>>()?;
        for (&i, r) in chunk.iter().zip(&decoded) {
            if r.len() != n_corr {
                return Err(Error::dim("distill frame correctives", n_corr, r.len()));
            }
            visit(r).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("frame {i}: {m}")),
                other => other,
            })?;
        }
    }
    Ok(())
}

fn sh_of(c: &Corrective) -> &[f32] {
    &c[channel::SH]
}

/// Distills per-corrective rows produced by `rows(frame)` for the given poses.
///
/// `rows` must be deterministic; frames are decoded several times rather than cached.
pub fn distill_rows<F>(poses: &[Pose], n_corr: usize, rows: F, cfg: &DistillConfig) -> Result<(LinearDecoder, DistillReport)>
where
    F: Fn(usize) -> Result<Vec<Corrective>> + Sync,
{
    if poses.is_empty() {
        return Err(Error::validation("distill needs at least one pose"));
    }
    if cfg.sh_d == 0 || cfg.sh_d > SH_COEFFS {
        return Err(Error::validation(format!("sh_d must be in 1..=27, got {}", cfg.sh_d)));
    }
    let pose_dim = poses[0].dim();
    if let Some(p) = poses.iter().find(|p| p.dim() != pose_dim) {
        return Err(Error::dim("distill pose", pose_dim, p.dim()));
    }
    let (train, held) = split_frames(poses.len(), cfg.holdout, cfg.seed);

    // SH statistics over training rows, shifted by the first frame's mean
    let mut shift = [0.0f64; SH_COEFFS];
    let mut sum = DVector::<f64>::zeros(SH_COEFFS);
    let mut scatter = DMatrix::<f64>::zeros(SH_COEFFS, SH_COEFFS);
    let mut count = 0usize;
    stream_frames(&train[..1], n_corr, &rows, |r| {
        for c in r {
            for (s, v) in shift.iter_mut().zip(sh_of(c)) {
                *s += *v as f64 / r.len().max(1) as f64;
            }
        }
        Ok(())
    })?;
    stream_frames(&train, n_corr, &rows, |r| {
        let block: Vec<f64> = r
            .iter()
            .flat_map(|c| sh_of(c).iter().zip(&shift).map(|(v, s)| *v as f64 - s).collect::<Vec<_>>())
            .collect();
        let m = DMatrix::from_row_slice(r.len(), SH_COEFFS, &block);
        sum += m.row_sum().transpose();
        scatter += m.transpose() * &m;
        count += r.len();
        Ok(())
    })?;
    if count == 0 {
        return Err(Error::validation("distill: no correctives to fit"));
    }
    let centered_mean = &sum / count as f64;
    let cov = (&scatter / count as f64) - &centered_mean * centered_mean.transpose();
    let sh_pca = pca_from_covariance(centered_mean + DVector::from_row_slice(&shift), &cov, cfg.sh_d)?;

    // pose PCA over training poses
    let x = DMatrix::from_fn(train.len(), pose_dim, |i, k| poses[train[i]].to_vector()[k]);
    let pose_pca = pca_fit(&x, cfg.d)?;
    let mut ld = LinearDecoder::zeros(pose_dim, cfg.d, n_corr, cfg.sh_d)?;
    ld.p_mean = pose_pca.mean.iter().map(|v| *v as f32).collect();
    ld.b_p = (0..pose_dim * cfg.d)
        .map(|i| pose_pca.basis[(i / cfg.d, i % cfg.d)] as f32)
        .collect();
    ld.sh_expand = (0..cfg.sh_d * SH_COEFFS)
        .map(|i| sh_pca.basis[(i % SH_COEFFS, i / SH_COEFFS)] as f32)
        .collect();
    for (m, v) in ld.sh_mean.iter_mut().zip(sh_pca.mean.iter()) {
        *m = *v as f32;
    }

    let codes: Vec<Vec<f64>> = poses.iter().map(|p| decoder::pose_code(&ld, p)).collect::<Result<_>>()?;
    let c = DMatrix::from_fn(train.len(), cfg.d + 1, |i, k| codes[train[i]][k]);
    let ls = LeastSquares::new(&c)?;

    // Q^T Y, stored per output column like B_c
    let width = ld.raw_width();
    let n_coef = cfg.d + 1;
    let mut acc = vec![0.0f64; n_corr * width * n_coef];
    let q_rows: Vec<Vec<f64>> = (0..train.len()).map(|f| ls.q_row(f)).collect();
    let mut frame_pos = 0usize;
    stream_frames(&train, n_corr, &rows, |r| {
        let y = raw_targets(&ld, r);
        let q = &q_rows[frame_pos];
        acc.par_chunks_mut(n_coef * 256).enumerate().for_each(|(blk, a)| {
            for (jj, col) in a.chunks_exact_mut(n_coef).enumerate() {
                let yv = y[blk * 256 + jj];
                if yv != 0.0 {
                    for (ak, qk) in col.iter_mut().zip(q) {
                        *ak += qk * yv;
                    }
                }
            }
        });
        frame_pos += 1;
        Ok(())
    })?;
    acc.par_chunks_mut(n_coef).for_each(|col| ls.back_substitute(col));
    ld.b_c = acc.iter().map(|v| *v as f32).collect();

    let train_stats = evaluate(&ld, &codes, &train, n_corr, &rows)?;
    let held_stats = evaluate(&ld, &codes, &held, n_corr, &rows)?;

    let report = DistillReport {
        d: cfg.d,
        sh_d: cfg.sh_d,
        n_corr,
        shared: false,
        condition: ls.condition,
        ridge: ls.ridge,
        pose_explained: pose_pca.explained(),
        sh_explained: sh_pca.explained(),
        train: train_stats,
        heldout: held_stats,
        parameter_count: ld.parameter_count(),
        flops: ld.flop_count(),
    };
    Ok((ld, report))
}

/// Raw fitting targets of one frame: geometry channels then SH codes, per corrective.
fn raw_targets(ld: &LinearDecoder, r: &[Corrective]) -> Vec<f64> {
    let width = ld.raw_width();
    let mut y = vec![0.0f64; r.len() * width];
    for (c, out) in r.iter().zip(y.chunks_exact_mut(width)) {
        for (o, v) in out[..GEOMETRY_CHANNELS].iter_mut().zip(&c[channel::ROTATION.start..]) {
            *o = *v as f64;
        }
        for k in 0..ld.sh_d {
            out[GEOMETRY_CHANNELS + k] = (0..SH_COEFFS)
                .map(|s| (c[s] as f64 - ld.sh_mean[s] as f64) * ld.sh_expand[k * SH_COEFFS + s] as f64)
                .sum();
        }
    }
    y
}

/// Squared norm of the part of a corrective's SH lost by the SH projection.
fn sh_truncation_sq(ld: &LinearDecoder, c: &Corrective) -> f64 {
    let centered: Vec<f64> = (0..SH_COEFFS).map(|s| c[s] as f64 - ld.sh_mean[s] as f64).collect();
    let mut rec = vec![0.0f64; SH_COEFFS];
    for k in 0..ld.sh_d {
        let row = &ld.sh_expand[k * SH_COEFFS..(k + 1) * SH_COEFFS];
        let z: f64 = centered.iter().zip(row).map(|(a, b)| a * *b as f64).sum();
        for (r, b) in rec.iter_mut().zip(row) {
            *r += z * *b as f64;
        }
    }
    centered.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn residual_stats(frames: usize, sq: &[f64; CORR_CHANNELS], trunc: f64, n: usize) -> ResidualStats {
    if n == 0 {
        return ResidualStats {
            frames,
            channel_rms: vec![f64::NAN; CORR_CHANNELS],
            geometry_rms: f64::NAN,
            sh_rms: f64::NAN,
            sh_truncation_rms: f64::NAN,
        };
    }
    let n = n as f64;
    ResidualStats {
        frames,
        channel_rms: sq.iter().map(|s| (s / n).sqrt()).collect(),
        geometry_rms: (sq[channel::ROTATION.start..].iter().sum::<f64>() / (n * GEOMETRY_CHANNELS as f64)).sqrt(),
        sh_rms: (sq[channel::SH].iter().sum::<f64>() / (n * SH_COEFFS as f64)).sqrt(),
        sh_truncation_rms: (trunc / (n * SH_COEFFS as f64)).sqrt(),
    }
}

fn evaluate<F>(ld: &LinearDecoder, codes: &[Vec<f64>], frames: &[usize], n_corr: usize, rows: &F) -> Result<ResidualStats>
where
    F: Fn(usize) -> Result<Vec<Corrective>> + Sync,
{
    let mut sq = [0.0f64; CORR_CHANNELS];
    let mut trunc = 0.0f64;
    let mut n = 0usize;
    let mut next = 0usize;
    stream_frames(frames, n_corr, rows, |r| {
        let out = decoder::expand_raw(ld, &decoder::decode_raw(ld, &codes[frames[next]])?);
        next += 1;
        for (t, o) in r.iter().zip(&out) {
            for k in 0..CORR_CHANNELS {
                let e = o[k] as f64 - t[k] as f64;
                sq[k] += e * e;
            }
            trunc += sh_truncation_sq(ld, t);
        }
        n += r.len();
        Ok(())
    })?;
    Ok(residual_stats(frames.len(), &sq, trunc, n))
}

/// Distills a teacher for an avatar mask.
///
/// A teacher whose grid matches the mask is distilled per masked cell; a teacher grid
/// `f` times smaller is distilled per coarse cell and the decoder gets a LUT for the mask.
pub fn distill(
    t: &TeacherDecoder,
    mask: &[bool],
    mask_h: usize,
    mask_w: usize,
    poses: &[Pose],
    cfg: &DistillConfig,
) -> Result<(LinearDecoder, DistillReport)> {
    if mask.len() != mask_h * mask_w {
        return Err(Error::dim("distill mask", mask_h * mask_w, mask.len()));
    }
    let (gh, gw) = (t.cfg.out_h, t.cfg.out_w);
    let shared = (gh, gw) != (mask_h, mask_w);
    let n_corr = if shared { gh * gw } else { mask.iter().filter(|m| **m).count() };
    let rows = |i: usize| decoder::teacher_rows(&t.decode(&poses[i])?, mask, mask_h, mask_w);
    let (mut ld, mut report) = distill_rows(poses, n_corr, rows, cfg)?;
    if shared {
        if !mask_h.is_multiple_of(gh) || mask_h / gh != mask_w / gw {
            return Err(Error::validation("teacher grid does not evenly divide the mask"));
        }
        ld.lut = Some(sharing::build_lut(mask, mask_h, mask_w, mask_h / gh)?);
        report.shared = true;
    }
    Ok((ld, report))
}
