//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uvsplat::bench::{sharing_flop_ratio, time_fn, FULL_CORRECTIVES, SHARED_CORRECTIVES};
use uvsplat::decoder::{self, gather_correctives, teacher_gaussian_correctives, LinearDecoder, TeacherDecoder};
use uvsplat::distill::{distill, sample_poses, solve_basis, split_frames, DistillConfig};
use uvsplat::eval::{compare_frames, mean_metrics, render_posed};
use uvsplat::io::{self, default_camera, synth_avatar, SynthAvatar, SynthConfig};
use uvsplat::metrics::{l1, ssim, Image};
use uvsplat::quant::{quantize, quantized_decode_for_gaussians};
use uvsplat::raster::{accumulated_weights, project_all, random_scene, render, render_gaussians, render_oracle_gaussians, RenderOptions};
use uvsplat::sharing::{apply_mask, build_lut, upsample_nearest};
use uvsplat::skinning::{animate, lbs_transforms};
use uvsplat::splat::{Corrective, Pose, CORR_CHANNELS};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn c1_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut identical = true;
    for seed in 0..100 {
        let (g, cam) = random_scene(seed, 32, 64, 64);
        let base = render_gaussians(&g, &cam, &RenderOptions::default().with_workers(1));
        worst = worst.max(max_abs_diff(&base.rgb, &render_oracle_gaussians(&g, &cam).rgb));
        for w in [2, 8] {
            identical &= render_gaussians(&g, &cam, &RenderOptions::default().with_workers(w)) == base;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && identical && secs < 30.0,
        format!("max_diff={worst:.3e} workers_identical={identical} time={secs:.2}s"),
    )
}

fn c2_conservation() -> Outcome {
    let mut worst = 0.0f64;
    let opts = RenderOptions::default();
    for seed in 0..100 {
        let (g, cam) = random_scene(seed, 32, 64, 64);
        let w = accumulated_weights(&project_all(&g, &cam, &opts), cam.width, cam.height, &opts).map_err(|e| e.to_string())?;
        worst = w.into_iter().fold(worst, f64::max);
    }
    // a dense, heavily overlapping scene
    let (g, cam) = random_scene(1000, 2000, 64, 64);
    let w = accumulated_weights(&project_all(&g, &cam, &opts), cam.width, cam.height, &opts).map_err(|e| e.to_string())?;
    worst = w.into_iter().fold(worst, f64::max);
    check(worst <= 1.0 + 1e-9, format!("max_weight={worst:.12}"))
}

fn c3_lut() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for k in 0..50 {
        let (ch, cw) = (rng.random_range(1..=16usize), rng.random_range(1..=16usize));
        let (h, w) = (ch * 4, cw * 4);
        let mask: Vec<bool> = match k {
            0 => vec![true; h * w],
            1 => (0..h * w).map(|i| (i / w) % 2 == 0).collect(),
            2 => (0..h * w).map(|i| (i / w + i % w) % 2 == 0).collect(),
            3 => vec![false; h * w],
            _ => {
                let p = rng.random_range(0.0..1.0);
                (0..h * w).map(|_| rng.random_bool(p)).collect()
            }
        };
        let corr: Vec<Corrective> = (0..ch * cw)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0f32..1.0)))
            .collect();
        let lut = build_lut(&mask, h, w, 4).map_err(|e| e.to_string())?;
        let via_lut = gather_correctives(&corr, &lut).map_err(|e| e.to_string())?;
        let direct = apply_mask(&upsample_nearest(&corr, ch, cw, 4).map_err(|e| e.to_string())?, &mask).map_err(|e| e.to_string())?;
        let same = via_lut.len() == direct.len()
            && via_lut
                .iter()
                .flatten()
                .zip(direct.iter().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("mismatch on case {k} ({h}x{w})"));
        }
        cases += 1;
    }
    Ok(format!("cases={cases} exact"))
}

fn numerical_rank(poses: &[Pose]) -> usize {
    let dim = poses[0].dim();
    let x = DMatrix::from_fn(poses.len(), dim, |i, j| poses[i].to_vector_f32()[j] as f64);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(x.nrows(), dim, |i, j| x[(i, j)] - mean[j]);
    let sv = centered.singular_values();
    // f32 rounding of the entries perturbs every singular value by at most eps/2 * |X|_F
    let tol = f32::EPSILON as f64 * centered.norm();
    sv.iter().filter(|s| **s > tol).count()
}

fn c4_linear_recovery() -> Outcome {
    let s = synth_avatar(&SynthConfig {
        n_joints: 24,
        grid: 32,
        seed: 4,
        share: None,
        linear_teacher: true,
    })
    .map_err(|e| e.to_string())?;
    let sp = &s.avatar.splats;
    let poses = sample_poses(24, 200, 4);
    let rank = numerical_rank(&poses);
    let cfg = DistillConfig {
        d: rank,
        sh_d: 27,
        ..Default::default()
    };
    let (_, full) = distill(&s.teacher, &sp.mask, sp.grid_h, sp.grid_w, &poses, &cfg).map_err(|e| e.to_string())?;
    let worst_all = full.heldout.channel_rms.iter().copied().fold(0.0, f64::max);
    let (_, trunc) = distill(
        &s.teacher,
        &sp.mask,
        sp.grid_h,
        sp.grid_w,
        &poses,
        &DistillConfig { sh_d: 6, ..cfg },
    )
    .map_err(|e| e.to_string())?;
    let geo = trunc.heldout.geometry_rms;
    let sh_gap = (trunc.heldout.sh_rms - trunc.heldout.sh_truncation_rms).abs();
    check(
        worst_all <= 1e-5 && geo <= 1e-5 && sh_gap <= 1e-6,
        format!(
            "d={rank} sh27_max_channel_rms={worst_all:.3e} sh6_geometry_rms={geo:.3e} sh6_sh_rms={:.6e} truncation_rms={:.6e}",
            trunc.heldout.sh_rms, trunc.heldout.sh_truncation_rms
        ),
    )
}

/// `(C^T C)^{-1} C^T Y` by Gauss-Jordan elimination with partial pivoting.
fn normal_equations(c: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let (f, n, m) = (c.nrows(), c.ncols(), y.ncols());
    let mut a = vec![vec![0.0; n + m]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = (0..f).map(|r| c[(r, i)] * c[(r, j)]).sum();
        }
        for j in 0..m {
            a[i][n + j] = (0..f).map(|r| c[(r, i)] * y[(r, j)]).sum();
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        let pivot_row = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != col {
                let k = row[col];
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= k * p;
                }
            }
        }
    }
    a.into_iter().map(|row| row[n..].to_vec()).collect()
}

fn c5_normal_equations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut worst_cond = 0.0f64;
    for _ in 0..30 {
        let f = rng.random_range(20..120);
        let n = rng.random_range(2..=f.min(24));
        let m = rng.random_range(1..6);
        let u = DMatrix::from_fn(f, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let v = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(0.0..3.5))));
        let c = u * s * v.transpose();
        let y = DMatrix::from_fn(f, m, |_, _| rng.random_range(-1.0..1.0));
        let sv = c.singular_values();
        worst_cond = worst_cond.max(sv.max() / sv.min());
        let (b, _) = solve_basis(&c, &y).map_err(|e| e.to_string())?;
        let reference = normal_equations(&c, &y);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..m {
                num += (b[(i, j)] - reference[i][j]).powi(2);
                den += reference[i][j].powi(2);
            }
        }
        worst = worst.max((num / den).sqrt());
    }
    check(
        worst <= 1e-6 && worst_cond < 1e4,
        format!("max_rel_frobenius={worst:.3e} max_condition={worst_cond:.1}"),
    )
}

/// Synthetic avatar with 4x4 corrective sharing and a nonlinear teacher, distilled on
/// 200 poses; returns the decoder and the held-out poses.
struct Distilled {
    synth: SynthAvatar,
    ld: LinearDecoder,
    train: Vec<Pose>,
    heldout: Vec<Pose>,
}

fn distilled() -> Result<Distilled, String> {
    let synth = synth_avatar(&SynthConfig {
        seed: 6,
        share: Some(4),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let poses = sample_poses(24, 200, 6);
    let cfg = DistillConfig::default();
    let sp = &synth.avatar.splats;
    let (ld, _) = distill(&synth.teacher, &sp.mask, sp.grid_h, sp.grid_w, &poses, &cfg).map_err(|e| e.to_string())?;
    let (train, held) = split_frames(poses.len(), cfg.holdout, cfg.seed);
    Ok(Distilled {
        train: train.iter().map(|&i| poses[i].clone()).collect(),
        heldout: held.iter().take(20).map(|&i| poses[i].clone()).collect(),
        synth,
        ld,
    })
}

fn teacher_corr(t: &TeacherDecoder, s: &SynthAvatar, pose: &Pose) -> Result<Vec<Corrective>, String> {
    let sp = &s.avatar.splats;
    teacher_gaussian_correctives(&t.decode(pose).map_err(|e| e.to_string())?, &sp.mask, sp.grid_h, sp.grid_w).map_err(|e| e.to_string())
}

const EVAL_SIZE: usize = 128;

fn c6_quant_parity(d: &Distilled) -> Outcome {
    let q = quantize(&d.ld, &d.train).map_err(|e| e.to_string())?;
    let cam = default_camera(EVAL_SIZE, EVAL_SIZE).map_err(|e| e.to_string())?;
    let opts = RenderOptions::default();
    let a = &d.synth.avatar;
    let (mut mf, mut mq) = (Vec::new(), Vec::new());
    let mut saturated = 0;
    for pose in &d.heldout {
        let reference =
            render_posed(a, Some(&teacher_corr(&d.synth.teacher, &d.synth, pose)?), pose, &cam, &opts).map_err(|e| e.to_string())?;
        let cf = decoder::decode_for_gaussians(&d.ld, pose).map_err(|e| e.to_string())?;
        let qo = quantized_decode_for_gaussians(&q, pose).map_err(|e| e.to_string())?;
        saturated += qo.saturated;
        let ff = render_posed(a, Some(&cf), pose, &cam, &opts).map_err(|e| e.to_string())?;
        let fq = render_posed(a, Some(&qo.correctives), pose, &cam, &opts).map_err(|e| e.to_string())?;
        mf.push(compare_frames(&ff, &reference).map_err(|e| e.to_string())?);
        mq.push(compare_frames(&fq, &reference).map_err(|e| e.to_string())?);
    }
    let (f, qm) = (mean_metrics(&mf), mean_metrics(&mq));
    let (dl1, dssim, dpsnr) = ((qm.l1 - f.l1).abs(), (qm.ssim - f.ssim).abs(), (qm.psnr - f.psnr).abs());
    check(
        dl1 <= 0.002 && dssim <= 0.002 && dpsnr <= 0.1,
        format!(
            "float(l1={:.5} psnr={:.3} ssim={:.5}) quantized(l1={:.5} psnr={:.3} ssim={:.5}) dL1={dl1:.2e} dSSIM={dssim:.2e} dPSNR={dpsnr:.2e} saturated={saturated}",
            f.l1, f.psnr, f.ssim, qm.l1, qm.psnr, qm.ssim
        ),
    )
}

fn c7_sharing_speedup() -> Outcome {
    let ratio = sharing_flop_ratio(32, 6);
    let printed = format!("{ratio:.2}");
    let pose_dim = Pose::dim_for(24);
    let full = LinearDecoder::random(pose_dim, 32, FULL_CORRECTIVES, 6, 0.01, 7).map_err(|e| e.to_string())?;
    let mut shared = LinearDecoder::random(pose_dim, 32, SHARED_CORRECTIVES, 6, 0.01, 8).map_err(|e| e.to_string())?;
    let mask: Vec<bool> = (0..256 * 256).map(|i| i < FULL_CORRECTIVES).collect();
    shared.lut = Some(build_lut(&mask, 256, 256, 4).map_err(|e| e.to_string())?);
    let pose = sample_poses(24, 1, 7).remove(0);
    let tf = time_fn(10, 100, || decoder::decode_for_gaussians(&full, &pose));
    let ts = time_fn(10, 100, || decoder::decode_for_gaussians(&shared, &pose));
    let wall = tf.median_s / ts.median_s;
    check(
        printed == "14.74" && (ratio - 60381.0 / 4096.0).abs() < 1e-12 && wall >= 5.0,
        format!(
            "flop_ratio={printed}x wall_ratio={wall:.2}x full_median={:.3}ms shared_median={:.3}ms",
            tf.median_s * 1e3,
            ts.median_s * 1e3
        ),
    )
}

fn c8_quality_order(d: &Distilled) -> Outcome {
    let cam = default_camera(EVAL_SIZE, EVAL_SIZE).map_err(|e| e.to_string())?;
    let opts = RenderOptions::default();
    let a = &d.synth.avatar;
    let mut wins = 0;
    let (mut sum_lin, mut sum_none) = (0.0, 0.0);
    for pose in &d.heldout {
        let reference =
            render_posed(a, Some(&teacher_corr(&d.synth.teacher, &d.synth, pose)?), pose, &cam, &opts).map_err(|e| e.to_string())?;
        let lin = render_posed(
            a,
            Some(&decoder::decode_for_gaussians(&d.ld, pose).map_err(|e| e.to_string())?),
            pose,
            &cam,
            &opts,
        )
        .map_err(|e| e.to_string())?;
        let none = render_posed(a, None, pose, &cam, &opts).map_err(|e| e.to_string())?;
        let l_lin = compare_frames(&lin, &reference).map_err(|e| e.to_string())?.l1;
        let l_none = compare_frames(&none, &reference).map_err(|e| e.to_string())?.l1;
        sum_lin += l_lin;
        sum_none += l_none;
        if l_lin <= l_none {
            wins += 1;
        }
    }
    let n = d.heldout.len() as f64;
    check(
        wins >= 15 && d.heldout.len() == 20,
        format!(
            "linear_wins={wins}/20 mean_l1_linear={:.5} mean_l1_none={:.5}",
            sum_lin / n,
            sum_none / n
        ),
    )
}

fn c9_skinning() -> Outcome {
    let s = synth_avatar(&SynthConfig {
        grid: 64,
        seed: 9,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let a = &s.avatar;
    let zeros = vec![[0.0f32; CORR_CHANNELS]; a.splats.len()];
    let rest = animate(&a.splats, &zeros, &a.skeleton, &Pose::identity(24)).map_err(|e| e.to_string())?;
    let identity_exact = rest == a.splats;

    let cam = default_camera(96, 96).map_err(|e| e.to_string())?;
    let opts = RenderOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut pose = Pose::identity(24);
        let axis: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        pose.joints[0] = uvsplat::math::quat_f32(uvsplat::math::quat_from_axis_angle(axis, angle));
        pose.root_t = std::array::from_fn(|_| rng.random_range(-0.3f32..0.3));
        let posed = animate(&a.splats, &zeros, &a.skeleton, &pose).map_err(|e| e.to_string())?;
        let root = lbs_transforms(&a.skeleton, &pose).map_err(|e| e.to_string())?[0];
        let moved = render(&posed, &cam, &opts);
        let camera_moved = render(&a.splats, &cam.compose_rigid(&root.linear, &root.translation), &opts);
        worst = worst.max(max_abs_diff(&moved.rgb, &camera_moved.rgb));
    }
    check(
        identity_exact && worst <= 1e-5,
        format!("identity_exact={identity_exact} rigid_max_diff={worst:.3e}"),
    )
}

fn c10_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ok = true;
    for _ in 0..20 {
        let (w, h) = (rng.random_range(11..48), rng.random_range(11..48));
        let data: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = Image::from_fn(w, h, 3, |x, y, c| data[(y * w + x) * 3 + c]);
        ok &= ssim(&img, &img).map_err(|e| e.to_string())? == 1.0;
        ok &= l1(&img, &img).map_err(|e| e.to_string())? == 0.0;
    }
    let (ma, mb) = (0.3, 0.4);
    let c1 = (0.01f64).powi(2);
    let closed = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    let got = ssim(&Image::filled(24, 24, 3, ma), &Image::filled(24, 24, 3, mb)).map_err(|e| e.to_string())?;
    let err = (got - closed).abs();
    check(ok && err <= 1e-10, format!("self_checks={ok} constant_case_error={err:.2e}"))
}

fn c11_io() -> Outcome {
    let s = synth_avatar(&SynthConfig {
        grid: 32,
        seed: 11,
        share: Some(4),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let avatar_bytes = io::save_avatar(&s.avatar);
    let poses = sample_poses(24, 40, 11);
    let sp = &s.avatar.splats;
    let (ld, _) = distill(
        &s.teacher,
        &sp.mask,
        sp.grid_h,
        sp.grid_w,
        &poses,
        &DistillConfig {
            d: 16,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let q = quantize(&ld, &poses).map_err(|e| e.to_string())?;
    let dec_bytes = io::save_decoder(&ld);
    let q_bytes = io::save_quantized(&q);

    let roundtrip = io::load_avatar(&avatar_bytes)
        .map(|a| io::save_avatar(&a) == avatar_bytes && a == s.avatar)
        .unwrap_or(false)
        && io::load_decoder(&dec_bytes)
            .map(|d| io::save_decoder(&d) == dec_bytes && d == ld)
            .unwrap_or(false)
        && io::load_quantized(&q_bytes)
            .map(|d| io::save_quantized(&d) == q_bytes && d == q)
            .unwrap_or(false);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rejected = 0;
    let mut crashed = 0;
    for it in 0..100 {
        for bytes in [&avatar_bytes, &dec_bytes, &q_bytes] {
            let len = rng.random_range(0..bytes.len());
            let mut b = bytes[..len].to_vec();
            if it % 2 == 1 && !b.is_empty() {
                let i = rng.random_range(0..b.len());
                b[i] = rng.random();
            }
            let r = catch_unwind(|| (io::load_avatar(&b).is_err(), io::load_any_decoder(&b).is_err()));
            match r {
                Ok((ea, ed)) => rejected += (ea && ed) as usize,
                Err(_) => crashed += 1,
            }
        }
    }
    check(
        roundtrip && crashed == 0 && rejected == 300,
        format!("roundtrip_bit_exact={roundtrip} truncations=300 rejected={rejected} crashes={crashed}"),
    )
}

fn main() {
    // keep panics from individual criteria on one line each
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match out {
            Ok(d) => println!("PASS criterion {n:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {d}");
            }
        }
    };
    report(1, "rasterizer matches oracle", &mut c1_oracle);
    report(2, "compositing conservation", &mut c2_conservation);
    report(3, "lut equivalence", &mut c3_lut);
    report(4, "linear teacher recovery", &mut c4_linear_recovery);
    report(5, "least squares vs normal equations", &mut c5_normal_equations);
    let d = distilled();
    report(6, "quantization parity", &mut || {
        c6_quant_parity(d.as_ref().map_err(|e| e.clone())?)
    });
    report(7, "corrective sharing speedup", &mut c7_sharing_speedup);
    report(8, "linear decoder beats no correctives", &mut || {
        c8_quality_order(d.as_ref().map_err(|e| e.clone())?)
    });
    report(9, "skinning identities", &mut c9_skinning);
    report(10, "metric self-checks", &mut c10_metrics);
    report(11, "file io", &mut c11_io);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
