//! Corrective decoders.
//!
//! [`TeacherDecoder`] is a seeded affine/hardswish network mapping a pose vector to a
//! corrective grid. [`LinearDecoder`] is its distilled replacement: one affine map from a
//! bias-augmented PCA pose code to `10 + sh_d` raw values per corrective, followed by a
//! shared expansion of the `sh_d` SH codes back to 27 coefficients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sharing;
use crate::splat::{channel, Corrective, CorrectiveGrid, Pose, CORR_CHANNELS, SH_COEFFS};

/// Geometry values per corrective: rotation delta (4), translation (3), log-scale (3).
pub const GEOMETRY_CHANNELS: usize = 10;
/// Output bound of the teacher on geometry channels.
pub const GEOMETRY_BOUND: f64 = 0.1;
/// Output bound of the teacher on SH channels.
pub const SH_BOUND: f64 = 0.5;

fn channel_bound(ch: usize) -> f64 {
    if channel::SH.contains(&ch) {
        SH_BOUND
    } else {
        GEOMETRY_BOUND
    }
}

fn hardswish(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TeacherConfig {
    pub n_joints: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub hidden: usize,
    /// Resolution of the last affine layer before bilinear upsampling.
    pub coarse_h: usize,
    pub coarse_w: usize,
    /// Bypass hardswish and tanh so the whole decoder is affine in the pose.
    pub linear: bool,
    pub seed: u64,
}

impl TeacherConfig {
    pub fn new(n_joints: usize, out_h: usize, out_w: usize, linear: bool, seed: u64) -> Self {
        TeacherConfig {
            n_joints,
            out_h,
            out_w,
            hidden: 256,
            coarse_h: out_h.div_ceil(8).max(1),
            coarse_w: out_w.div_ceil(8).max(1),
            linear,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        Pose::dim_for(self.n_joints)
    }

    fn validate(&self) -> Result<()> {
        if self.n_joints == 0 || self.hidden == 0 || self.out_h == 0 || self.out_w == 0 {
            return Err(Error::validation("teacher dimensions must be positive"));
        }
        if self.coarse_h == 0 || self.coarse_w == 0 || self.coarse_h > self.out_h || self.coarse_w > self.out_w {
            return Err(Error::validation("teacher coarse grid must be within 1..=output size"));
        }
        Ok(())
    }
}

/// Stand-in for a trained convolutional corrective decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherDecoder {
    pub cfg: TeacherConfig,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
    w3: Vec<f32>,
    b3: Vec<f32>,
    // bilinear taps per output row / column: (i0, i1, weight of i1)
    taps_r: Vec<(usize, usize, f64)>,
    taps_c: Vec<(usize, usize, f64)>,
}

fn bilinear_taps(coarse: usize, fine: usize) -> Vec<(usize, usize, f64)> {
    (0..fine)
        .map(|i| {
            let x = ((i as f64 + 0.5) * coarse as f64 / fine as f64 - 0.5).clamp(0.0, (coarse - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(coarse - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

fn affine(w: &[f32], b: &[f32], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    w.par_chunks(n)
        .zip(b.par_iter())
        .map(|(row, bias)| row.iter().zip(x).fold(*bias as f64, |acc, (a, v)| acc + *a as f64 * v))
        .collect()
}

impl TeacherDecoder {
    pub fn new(cfg: TeacherConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_in = cfg.input_dim();
        let n_out = cfg.coarse_h * cfg.coarse_w * CORR_CHANNELS;
        let mut layer = |fan_in: usize, fan_out: usize, gain: f64| {
            let nw = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
            let nb = Normal::new(0.0, 0.1).expect("positive std");
            let w: Vec<f32> = (0..fan_in * fan_out).map(|_| nw.sample(&mut rng) as f32).collect();
            let b: Vec<f32> = (0..fan_out).map(|_| nb.sample(&mut rng) as f32).collect();
            (w, b)
        };
        let (w1, b1) = layer(n_in, cfg.hidden, 2.0);
        let (w2, b2) = layer(cfg.hidden, cfg.hidden, 2.0);
        let (mut w3, mut b3) = layer(cfg.hidden, n_out, 1.5);
        if cfg.linear {
            // interval bound over poses whose entries lie in [-1, 1]
            let abs_affine = |w: &[f32], b: &[f32], x: &[f64]| -> Vec<f64> {
                w.chunks(x.len())
                    .zip(b)
                    .map(|(row, bias)| row.iter().zip(x).fold((*bias as f64).abs(), |a, (w, v)| a + (*w as f64).abs() * v))
                    .collect()
            };
            let v1 = abs_affine(&w1, &b1, &vec![1.0; n_in]);
            let v2 = abs_affine(&w2, &b2, &v1);
            let ub = abs_affine(&w3, &b3, &v2);
            for (o, u) in ub.iter().enumerate() {
                let s = channel_bound(o % CORR_CHANNELS) / u;
                for w in &mut w3[o * cfg.hidden..(o + 1) * cfg.hidden] {
                    *w = (*w as f64 * s) as f32;
                }
                b3[o] = (b3[o] as f64 * s) as f32;
            }
        }
        Ok(TeacherDecoder {
            taps_r: bilinear_taps(cfg.coarse_h, cfg.out_h),
            taps_c: bilinear_taps(cfg.coarse_w, cfg.out_w),
            cfg,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    /// Coarse-grid output before upsampling, `coarse_h * coarse_w * 37` values.
    fn coarse(&self, pose: &Pose) -> Result<Vec<f64>> {
        if pose.dim() != self.cfg.input_dim() {
            return Err(Error::dim("teacher pose", self.cfg.input_dim(), pose.dim()));
        }
        let x = pose.to_vector();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("teacher pose is not finite"));
        }
        let mut h1 = affine(&self.w1, &self.b1, &x);
        if !self.cfg.linear {
            h1.iter_mut().for_each(|v| *v = hardswish(*v));
        }
        let mut h2 = affine(&self.w2, &self.b2, &h1);
        if !self.cfg.linear {
            h2.iter_mut().for_each(|v| *v = hardswish(*v));
        }
        let mut out = affine(&self.w3, &self.b3, &h2);
        if !self.cfg.linear {
            for (o, v) in out.iter_mut().enumerate() {
                *v = channel_bound(o % CORR_CHANNELS) * v.tanh();
            }
        }
        Ok(out)
    }

    /// Full-resolution `out_h x out_w x 37` corrective grid for a pose.
    pub fn decode(&self, pose: &Pose) -> Result<CorrectiveGrid> {
        let coarse = self.coarse(pose)?;
        let cw = self.cfg.coarse_w;
        let data = (0..self.cfg.out_h * self.cfg.out_w)
            .into_par_iter()
            .map(|i| {
                let (r0, r1, fr) = self.taps_r[i / self.cfg.out_w];
                let (c0, c1, fc) = self.taps_c[i % self.cfg.out_w];
                let cell = |r: usize, c: usize| &coarse[(r * cw + c) * CORR_CHANNELS..(r * cw + c + 1) * CORR_CHANNELS];
                let (a, b, c, d) = (cell(r0, c0), cell(r0, c1), cell(r1, c0), cell(r1, c1));
                let mut out = [0.0f32; CORR_CHANNELS];
                for k in 0..CORR_CHANNELS {
                    let top = a[k] + (b[k] - a[k]) * fc;
                    let bottom = c[k] + (d[k] - c[k]) * fc;
                    out[k] = (top + (bottom - top) * fr) as f32;
                }
                out
            })
            .collect();
        Ok(CorrectiveGrid {
            h: self.cfg.out_h,
            w: self.cfg.out_w,
            data,
        })
    }
}

pub fn teacher_decode(t: &TeacherDecoder, pose: &Pose) -> Result<CorrectiveGrid> {
    t.decode(pose)
}

/// Per-corrective rows of a teacher grid for a mask of size `mask_h x mask_w`.
///
/// A full-resolution grid is masked directly; a grid `factor` times smaller in each
/// dimension is returned whole, one row per coarse cell (to be gathered through a LUT).
pub fn teacher_rows(grid: &CorrectiveGrid, mask: &[bool], mask_h: usize, mask_w: usize) -> Result<Vec<Corrective>> {
    if grid.h == mask_h && grid.w == mask_w {
        return sharing::apply_mask(&grid.data, mask);
    }
    share_factor(grid, mask_h, mask_w)?;
    Ok(grid.data.clone())
}

fn share_factor(grid: &CorrectiveGrid, mask_h: usize, mask_w: usize) -> Result<usize> {
    let ok =
        grid.h > 0 && grid.w > 0 && mask_h.is_multiple_of(grid.h) && mask_w.is_multiple_of(grid.w) && mask_h / grid.h == mask_w / grid.w;
    if ok {
        Ok(mask_h / grid.h)
    } else {
        Err(Error::validation(format!(
            "teacher grid {}x{} does not match mask {mask_h}x{mask_w}",
            grid.h, grid.w
        )))
    }
}

/// Per-Gaussian correctives from a teacher grid, upsampling shared grids with nearest.
pub fn teacher_gaussian_correctives(grid: &CorrectiveGrid, mask: &[bool], mask_h: usize, mask_w: usize) -> Result<Vec<Corrective>> {
    if grid.h == mask_h && grid.w == mask_w {
        return sharing::apply_mask(&grid.data, mask);
    }
    let f = share_factor(grid, mask_h, mask_w)?;
    let up = sharing::upsample_nearest(&grid.data, grid.h, grid.w, f)?;
    sharing::apply_mask(&up, mask)
}

/// `out[x] = corr[lut[x]]`.
pub fn gather_correctives(corr: &[Corrective], lut: &[u32]) -> Result<Vec<Corrective>> {
    let mut out = Vec::new();
    gather_into(corr, lut, &mut out)?;
    Ok(out)
}

pub(crate) fn gather_into<T: Copy>(corr: &[T], lut: &[u32], out: &mut Vec<T>) -> Result<()> {
    if let Some(x) = lut.iter().position(|&i| i as usize >= corr.len()) {
        return Err(Error::validation(format!(
            "lut entry {x} = {} out of range for {} correctives",
            lut[x],
            corr.len()
        )));
    }
    out.clear();
    out.extend(lut.iter().map(|&i| corr[i as usize]));
    Ok(())
}

/// Distilled affine corrective decoder.
///
/// `b_c` is stored per output column: raw value `j` of corrective `i` is
/// `sum_k code[k] * b_c[(i * raw_width + j) * (d + 1) + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoder {
    pub pose_dim: usize,
    pub d: usize,
    pub n_corr: usize,
    pub sh_d: usize,
    pub p_mean: Vec<f32>,
    /// `pose_dim x d`, row-major.
    pub b_p: Vec<f32>,
    pub b_c: Vec<f32>,
    /// `sh_d x 27`, row-major.
    pub sh_expand: Vec<f32>,
    pub sh_mean: [f32; SH_COEFFS],
    pub lut: Option<Vec<u32>>,
}

impl LinearDecoder {
    /// Raw values per corrective: 10 geometry then `sh_d` SH codes.
    pub fn raw_width(&self) -> usize {
        GEOMETRY_CHANNELS + self.sh_d
    }

    pub fn code_len(&self) -> usize {
        self.d + 1
    }

    /// All-zero decoder of the given shape with an identity-like pose basis.
    pub fn zeros(pose_dim: usize, d: usize, n_corr: usize, sh_d: usize) -> Result<Self> {
        if d > pose_dim || sh_d == 0 || sh_d > SH_COEFFS {
            return Err(Error::validation(format!(
                "invalid decoder shape d={d} pose_dim={pose_dim} sh_d={sh_d}"
            )));
        }
        let mut b_p = vec![0.0; pose_dim * d];
        for k in 0..d {
            b_p[k * d + k] = 1.0;
        }
        let mut sh_expand = vec![0.0; sh_d * SH_COEFFS];
        for k in 0..sh_d {
            sh_expand[k * SH_COEFFS + k] = 1.0;
        }
        Ok(LinearDecoder {
            pose_dim,
            d,
            n_corr,
            sh_d,
            p_mean: vec![0.0; pose_dim],
            b_p,
            b_c: vec![0.0; n_corr * (GEOMETRY_CHANNELS + sh_d) * (d + 1)],
            sh_expand,
            sh_mean: [0.0; SH_COEFFS],
            lut: None,
        })
    }

    /// Seeded decoder with orthonormal random bases and normal `B_c` entries of the given std.
    pub fn random(pose_dim: usize, d: usize, n_corr: usize, sh_d: usize, b_std: f64, seed: u64) -> Result<Self> {
        let mut ld = LinearDecoder::zeros(pose_dim, d, n_corr, sh_d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut orthonormal = |rows: usize, cols: usize| {
            let m = nalgebra::DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
            m.qr().q()
        };
        let q = orthonormal(pose_dim, d);
        ld.b_p = (0..pose_dim * d).map(|i| q[(i / d, i % d)] as f32).collect();
        let e = orthonormal(SH_COEFFS, sh_d);
        ld.sh_expand = (0..sh_d * SH_COEFFS).map(|i| e[(i % SH_COEFFS, i / SH_COEFFS)] as f32).collect();
        let nb = Normal::new(0.0, b_std).map_err(|e| Error::validation(e.to_string()))?;
        for v in ld.p_mean.iter_mut().chain(ld.sh_mean.iter_mut()) {
            *v = (0.1 * normal.sample(&mut rng)) as f32;
        }
        for v in &mut ld.b_c {
            *v = nb.sample(&mut rng) as f32;
        }
        Ok(ld)
    }

    /// Checks shapes, finiteness, orthonormality of the two bases and LUT range.
    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::dim(name, expected, actual))
            }
        };
        check("decoder p_mean", self.pose_dim, self.p_mean.len())?;
        check("decoder B_p", self.pose_dim * self.d, self.b_p.len())?;
        check("decoder B_c", self.n_corr * self.raw_width() * self.code_len(), self.b_c.len())?;
        check("decoder sh_expand", self.sh_d * SH_COEFFS, self.sh_expand.len())?;
        if self.sh_d == 0 || self.sh_d > SH_COEFFS || self.d > self.pose_dim {
            return Err(Error::validation(format!("invalid decoder shape d={} sh_d={}", self.d, self.sh_d)));
        }
        let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.p_mean) && finite(&self.b_p) && finite(&self.b_c) && finite(&self.sh_expand) && finite(&self.sh_mean)) {
            return Err(Error::validation("decoder contains non-finite values"));
        }
        let gram_err = |m: &[f32], rows: usize, cols: usize, by_col: bool| -> f64 {
            let get = |i: usize, k: usize| if by_col { m[k * cols + i] } else { m[i * cols + k] } as f64;
            let (n, len) = if by_col { (cols, rows) } else { (rows, cols) };
            let mut worst = 0.0f64;
            for a in 0..n {
                for b in a..n {
                    let dot: f64 = (0..len).map(|k| get(a, k) * get(b, k)).sum();
                    worst = worst.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
                }
            }
            worst
        };
        let ep = gram_err(&self.b_p, self.pose_dim, self.d, true);
        if ep > 1e-5 {
            return Err(Error::validation(format!("pose basis columns not orthonormal (error {ep:e})")));
        }
        let es = gram_err(&self.sh_expand, self.sh_d, SH_COEFFS, false);
        if es > 1e-5 {
            return Err(Error::validation(format!("sh_expand rows not orthonormal (error {es:e})")));
        }
        if let Some(lut) = &self.lut {
            if let Some(i) = lut.iter().position(|&v| v as usize >= self.n_corr) {
                return Err(Error::validation(format!("lut entry {i} = {} out of range", lut[i])));
            }
        }
        Ok(())
    }

    /// Number of decoder parameters: `(d+1) * n_corr * (10 + sh_d) + sh_d * 27`.
    pub fn parameter_count(&self) -> u64 {
        parameter_count(self.d, self.n_corr, self.sh_d)
    }

    pub fn flop_count(&self) -> u64 {
        decode_flops(self.d, self.n_corr, self.sh_d)
    }
}

pub fn parameter_count(d: usize, n_corr: usize, sh_d: usize) -> u64 {
    ((d + 1) * n_corr * (GEOMETRY_CHANNELS + sh_d) + sh_d * SH_COEFFS) as u64
}

/// Multiply-add count (2 per MAC) of both decode stages, excluding the pose projection
/// which does not depend on the number of correctives.
pub fn decode_flops(d: usize, n_corr: usize, sh_d: usize) -> u64 {
    (2 * (d + 1) * n_corr * (GEOMETRY_CHANNELS + sh_d) + 2 * n_corr * sh_d * SH_COEFFS) as u64
}

/// `[1, (p - p_mean) B_p]` computed in f64.
pub fn pose_code(ld: &LinearDecoder, pose: &Pose) -> Result<Vec<f64>> {
    pose_code_vec(ld, &pose.to_vector())
}

pub fn pose_code_vec(ld: &LinearDecoder, p: &[f64]) -> Result<Vec<f64>> {
    if p.len() != ld.pose_dim {
        return Err(Error::dim("pose code input", ld.pose_dim, p.len()));
    }
    let mut code = vec![0.0; ld.d + 1];
    code[0] = 1.0;
    for (i, (v, m)) in p.iter().zip(&ld.p_mean).enumerate() {
        let c = v - *m as f64;
        if c == 0.0 {
            continue;
        }
        for (k, b) in ld.b_p[i * ld.d..(i + 1) * ld.d].iter().enumerate() {
            code[k + 1] += c * *b as f64;
        }
    }
    Ok(code)
}

/// Stage 1 only: `n_corr * raw_width` raw values for a pose code.
pub fn decode_raw(ld: &LinearDecoder, code: &[f64]) -> Result<Vec<f64>> {
    let mut raw = Vec::new();
    decode_raw_into(ld, code, &mut raw)?;
    Ok(raw)
}

fn decode_raw_into(ld: &LinearDecoder, code: &[f64], raw: &mut Vec<f64>) -> Result<()> {
    if code.len() != ld.code_len() {
        return Err(Error::dim("decode code", ld.code_len(), code.len()));
    }
    raw.clear();
    raw.extend(
        ld.b_c
            .chunks_exact(code.len())
            .map(|col| col.iter().zip(code).map(|(b, c)| *b as f64 * c).sum::<f64>()),
    );
    Ok(())
}

/// Stage 2: geometry passes through, SH codes expand to `sh_mean + codes * sh_expand`.
pub fn expand_raw(ld: &LinearDecoder, raw: &[f64]) -> Vec<Corrective> {
    let mut out = Vec::new();
    expand_raw_into(ld, raw, &mut out);
    out
}

fn expand_raw_into(ld: &LinearDecoder, raw: &[f64], out: &mut Vec<Corrective>) {
    out.clear();
    out.extend(raw.chunks_exact(ld.raw_width()).map(|r| {
        let mut c = [0.0f32; CORR_CHANNELS];
        for (o, v) in c[channel::ROTATION.start..].iter_mut().zip(&r[..GEOMETRY_CHANNELS]) {
            *o = *v as f32;
        }
        let mut sh = ld.sh_mean.map(|m| m as f64);
        for (code, row) in r[GEOMETRY_CHANNELS..].iter().zip(ld.sh_expand.chunks_exact(SH_COEFFS)) {
            for (v, e) in sh.iter_mut().zip(row) {
                *v += code * *e as f64;
            }
        }
        for (o, v) in c[channel::SH].iter_mut().zip(&sh) {
            *o = *v as f32;
        }
        c
    }));
}

/// `n_corr` correctives for a pose.
pub fn linear_decode(ld: &LinearDecoder, pose: &Pose) -> Result<Vec<Corrective>> {
    let code = pose_code(ld, pose)?;
    Ok(expand_raw(ld, &decode_raw(ld, &code)?))
}

/// Per-Gaussian correctives, gathered through the LUT when the decoder has one.
pub fn decode_for_gaussians(ld: &LinearDecoder, pose: &Pose) -> Result<Vec<Corrective>> {
    let mut ws = DecodeWorkspace::default();
    decode_for_gaussians_with(ld, pose, &mut ws)?;
    Ok(ws.into_output(ld.lut.is_some()))
}

/// Buffers reused across frames by [`decode_for_gaussians_with`].
#[derive(Clone, Debug, Default)]
pub struct DecodeWorkspace {
    raw: Vec<f64>,
    corr: Vec<Corrective>,
    gathered: Vec<Corrective>,
}

impl DecodeWorkspace {
    fn into_output(self, gathered: bool) -> Vec<Corrective> {
        if gathered {
            self.gathered
        } else {
            self.corr
        }
    }
}

/// Same result as [`decode_for_gaussians`], written into reusable buffers.
pub fn decode_for_gaussians_with<'a>(ld: &LinearDecoder, pose: &Pose, ws: &'a mut DecodeWorkspace) -> Result<&'a [Corrective]> {
    let code = pose_code(ld, pose)?;
    decode_raw_into(ld, &code, &mut ws.raw)?;
    expand_raw_into(ld, &ws.raw, &mut ws.corr);
    match &ld.lut {
        Some(lut) => {
            gather_into(&ws.corr, lut, &mut ws.gathered)?;
            Ok(&ws.gathered)
        }
        None => Ok(&ws.corr),
    }
}
