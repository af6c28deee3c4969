//! Wall-clock timing and analytical cost figures for the decode and render paths.

use std::fmt;
use std::time::Instant;

use crate::decoder::{self, decode_flops, LinearDecoder, TeacherConfig, TeacherDecoder};
use crate::distill::sample_poses;
use crate::error::Result;
use crate::io::{default_camera, Avatar};
use crate::quant::{self, quantize};
use crate::raster::{render, RenderOptions};
use crate::sharing;
use crate::skinning::animate_uncorrected;
use crate::splat::Pose;

/// Corrective count of the full-resolution decoder.
pub const FULL_CORRECTIVES: usize = 60381;
/// Corrective count with 4x4 sharing on a 256x256 UV grid.
pub const SHARED_CORRECTIVES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub reps: usize,
    pub min_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub mean_s: f64,
}

impl Timing {
    pub fn from_samples(mut s: Vec<f64>) -> Timing {
        assert!(!s.is_empty(), "no timing samples");
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Timing {
            reps: n,
            min_s: s[0],
            median_s: median,
            p95_s: p95,
            mean_s: s.iter().sum::<f64>() / n as f64,
        }
    }
}

/// Runs `f` `warmups` times untimed, then `reps` times timed.
pub fn time_fn<T>(warmups: usize, reps: usize, mut f: impl FnMut() -> T) -> Timing {
    for _ in 0..warmups {
        std::hint::black_box(f());
    }
    let samples = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .collect();
    Timing::from_samples(samples)
}

/// FLOP ratio of the full-resolution linear decode over the shared one.
pub fn sharing_flop_ratio(d: usize, sh_d: usize) -> f64 {
    decode_flops(d, FULL_CORRECTIVES, sh_d) as f64 / decode_flops(d, SHARED_CORRECTIVES, sh_d) as f64
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub warmups: usize,
    pub reps: usize,
    pub d: usize,
    pub sh_d: usize,
    pub render_size: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmups: 10,
            reps: 100,
            d: 32,
            sh_d: 6,
            render_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchEntry {
    pub name: &'static str,
    pub timing: Timing,
    pub flops: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    pub flop_ratio: f64,
    pub wall_ratio: f64,
}

impl BenchReport {
    pub fn get(&self, name: &str) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{}_median_ms={:.4}", e.name, e.timing.median_s * 1e3)?;
            writeln!(f, "{}_p95_ms={:.4}", e.name, e.timing.p95_s * 1e3)?;
            if let Some(fl) = e.flops {
                writeln!(f, "{}_flops={fl}", e.name)?;
            }
        }
        writeln!(f, "sharing_flop_ratio={:.2}x", self.flop_ratio)?;
        write!(f, "sharing_wall_ratio={:.2}x", self.wall_ratio)
    }
}

/// Times the teacher, float and quantized linear decoders with and without sharing,
/// and a full render of the avatar. Decoders are random with the benchmark shapes,
/// so the numbers do not depend on a distillation run.
pub fn run_bench(avatar: &Avatar, cfg: &BenchConfig) -> Result<BenchReport> {
    let n_joints = avatar.skeleton.n_joints();
    let pose_dim = Pose::dim_for(n_joints);
    let d = cfg.d.min(pose_dim);
    let pose = sample_poses(n_joints, 1, cfg.seed ^ 0xbe7c).remove(0);
    let calib = sample_poses(n_joints, 16, cfg.seed ^ 0xca1b);
    let mut entries = Vec::new();
    let mut push = |name, timing, flops| entries.push(BenchEntry { name, timing, flops });

    let tcfg = avatar
        .teacher
        .unwrap_or_else(|| TeacherConfig::new(n_joints, avatar.splats.grid_h, avatar.splats.grid_w, false, cfg.seed));
    let teacher = TeacherDecoder::new(tcfg)?;
    push("teacher_decode", time_fn(cfg.warmups, cfg.reps, || teacher.decode(&pose)), None);

    let full = LinearDecoder::random(pose_dim, d, FULL_CORRECTIVES, cfg.sh_d, 0.01, cfg.seed)?;
    let mut shared = LinearDecoder::random(pose_dim, d, SHARED_CORRECTIVES, cfg.sh_d, 0.01, cfg.seed + 1)?;
    shared.lut = Some(shared_lut(FULL_CORRECTIVES));
    let t_full = time_fn(cfg.warmups, cfg.reps, || decoder::decode_for_gaussians(&full, &pose));
    let t_shared = time_fn(cfg.warmups, cfg.reps, || decoder::decode_for_gaussians(&shared, &pose));
    push("linear_decode_full", t_full, Some(full.flop_count()));
    push("linear_decode_shared", t_shared, Some(shared.flop_count()));

    let qfull = quantize(&full, &calib)?;
    let qshared = quantize(&shared, &calib)?;
    push(
        "quantized_decode_full",
        time_fn(cfg.warmups, cfg.reps, || quant::quantized_decode_for_gaussians(&qfull, &pose)),
        Some(full.flop_count()),
    );
    push(
        "quantized_decode_shared",
        time_fn(cfg.warmups, cfg.reps, || quant::quantized_decode_for_gaussians(&qshared, &pose)),
        Some(shared.flop_count()),
    );

    let cam = default_camera(cfg.render_size, cfg.render_size)?;
    let posed = animate_uncorrected(&avatar.splats, &avatar.skeleton, &pose)?;
    let opts = RenderOptions::default();
    push(
        "render",
        time_fn(cfg.warmups.min(3), cfg.reps, || render(&posed, &cam, &opts)),
        None,
    );

    Ok(BenchReport {
        entries,
        flop_ratio: sharing_flop_ratio(d, cfg.sh_d),
        wall_ratio: t_full.median_s / t_shared.median_s,
    })
}

/// LUT from `n` Gaussians onto the 64x64 shared grid: the first `n` cells of a
/// 256x256 mask, in UV order.
fn shared_lut(n: usize) -> Vec<u32> {
    let mask: Vec<bool> = (0..256 * 256).map(|i| i < n).collect();
    sharing::build_lut(&mask, 256, 256, 4).expect("256 is divisible by 4")
}
