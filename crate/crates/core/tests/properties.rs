use proptest::prelude::*;

use uvsplat::decoder::{decode_raw, gather_correctives, pose_code_vec, LinearDecoder};
use uvsplat::io::{load_avatar, poses_from_str, poses_to_string, save_avatar};
use uvsplat::math::{quat_f32, quat_f64, quat_from_axis_angle, quat_norm};
use uvsplat::metrics::{crop_pair, l1, psnr, ssim, BinaryMask, Image};
use uvsplat::raster::{accumulated_weights, project_all, random_scene, render_gaussians, RenderOptions};
use uvsplat::sharing::{apply_mask, build_lut, upsample_nearest};
use uvsplat::skinning::{polar_decompose, skin_gaussian, SkinTransform};
use uvsplat::splat::{apply_corrective, Corrective, Gaussian, Pose, SkinWeights, CORR_CHANNELS, SH_COEFFS};

fn gaussian() -> impl Strategy<Value = Gaussian> {
    (
        prop::array::uniform3(-2.0f32..2.0),
        prop::array::uniform4(-1.0f32..1.0),
        prop::array::uniform3(0.01f32..0.5),
        0.0f32..1.0,
        prop::array::uniform3(-1.0f32..1.0),
    )
        .prop_filter("rotation away from zero", |(_, q, ..)| q.iter().map(|v| v * v).sum::<f32>() > 1e-2)
        .prop_map(|(mu, q, sigma, delta, dc)| {
            let mut sh = [0.0; SH_COEFFS];
            sh[..3].copy_from_slice(&dc);
            let n = quat_norm(quat_f64(q));
            Gaussian::new(mu, quat_f32(quat_f64(q).map(|v| v / n)), sigma, delta, sh)
        })
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, w * h * 3).prop_map(move |d| Image::from_fn(w, h, 3, |x, y, c| d[(y * w + x) * 3 + c]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corrective_keeps_rotation_unit(g in gaussian(), c in prop::array::uniform32(-0.1f32..0.1), rest in prop::array::uniform5(-0.1f32..0.1)) {
        let mut corr: Corrective = [0.0; CORR_CHANNELS];
        corr[..32].copy_from_slice(&c);
        corr[32..].copy_from_slice(&rest);
        let out = apply_corrective(&g, &corr).unwrap();
        prop_assert!((quat_norm(quat_f64(out.rot)) - 1.0).abs() < 1e-5);
        prop_assert!(out.delta >= 0.0 && out.delta <= 1.0);
    }

    #[test]
    fn compositing_weights_never_exceed_one(seed in 0u64..10_000, n in 1usize..200) {
        let (g, cam) = random_scene(seed, n, 32, 32);
        let opts = RenderOptions::default();
        let w = accumulated_weights(&project_all(&g, &cam, &opts), 32, 32, &opts).unwrap();
        prop_assert!(w.iter().all(|v| *v >= 0.0 && *v <= 1.0 + 1e-9));
    }

    #[test]
    fn render_ignores_input_order(seed in 0u64..10_000, perm_seed in any::<u64>()) {
        let (g, cam) = random_scene(seed, 24, 32, 32);
        let mut order: Vec<usize> = (0..g.len()).collect();
        let mut state = perm_seed | 1;
        for i in (1..order.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            order.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let shuffled: Vec<Gaussian> = order.iter().map(|&i| g[i]).collect();
        let opts = RenderOptions::default();
        prop_assert_eq!(render_gaussians(&g, &cam, &opts), render_gaussians(&shuffled, &cam, &opts));
    }

    #[test]
    fn metrics_are_symmetric(a in image(12, 13), b in image(12, 13)) {
        prop_assert!((l1(&a, &b).unwrap() - l1(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() <= 1e-12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
        let v = l1(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn cropping_commutes_with_metrics(a in image(16, 14), b in image(16, 14), x0 in 0usize..4, y0 in 0usize..3) {
        let mask = BinaryMask::from_fn(16, 14, |x, y| x >= x0 && x < x0 + 12 && y >= y0 && y < y0 + 11);
        let (ca, cb) = crop_pair(&a, &b, &mask).unwrap();
        let r = mask.bbox().unwrap();
        let (pa, pb) = (a.crop(&r), b.crop(&r));
        prop_assert_eq!(l1(&ca, &cb).unwrap().to_bits(), l1(&pa, &pb).unwrap().to_bits());
        prop_assert_eq!(ssim(&ca, &cb).unwrap().to_bits(), ssim(&pa, &pb).unwrap().to_bits());
    }

    #[test]
    fn lut_gather_equals_upsample_then_mask(ch in 1usize..8, cw in 1usize..8, f in 1usize..5, bits in prop::collection::vec(any::<bool>(), 1024)) {
        let (h, w) = (ch * f, cw * f);
        let mask: Vec<bool> = bits[..h * w].to_vec();
        let grid: Vec<Corrective> = (0..ch * cw).map(|i| [i as f32; CORR_CHANNELS]).collect();
        let lut = build_lut(&mask, h, w, f).unwrap();
        prop_assert_eq!(gather_correctives(&grid, &lut).unwrap(), apply_mask(&upsample_nearest(&grid, ch, cw, f).unwrap(), &mask).unwrap());
    }

    #[test]
    fn rigid_skinning_preserves_scales(g in gaussian(), axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.0f64..3.0, t in prop::array::uniform3(-1.0f64..1.0)) {
        prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let x = SkinTransform {
            linear: uvsplat::math::quat_to_matrix(quat_from_axis_angle(axis, angle)),
            translation: t.into(),
        };
        let out = skin_gaussian(&g, &SkinWeights::single(0), &[x]);
        for (a, b) in out.sigma().iter().zip(g.sigma()) {
            prop_assert!((a - b).abs() <= 1e-5 * b.max(1e-3));
        }
        let rel = (out.covariance() - x.linear * g.covariance() * x.linear.transpose()).norm() / g.covariance().norm();
        prop_assert!(rel < 1e-5);
    }

    #[test]
    fn polar_factor_is_rotation(m in prop::array::uniform9(-1.0f64..1.0)) {
        let a = nalgebra::Matrix3::from_row_slice(&m) + nalgebra::Matrix3::identity() * 2.0;
        prop_assume!(a.determinant() > 1e-3);
        let (r, p) = polar_decompose(&a);
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        prop_assert!((r * p - a).norm() < 1e-9);
    }

    #[test]
    fn decode_is_affine_in_pose(seed in any::<u64>(), t in -2.0f64..2.0) {
        let ld = LinearDecoder::random(Pose::dim_for(2), 5, 3, 4, 0.3, seed).unwrap();
        let p0: Vec<f64> = (0..ld.pose_dim).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.5).collect();
        let p1: Vec<f64> = (0..ld.pose_dim).map(|i| ((i * 5 + 1) % 13) as f64 / 13.0 - 0.5).collect();
        let mix: Vec<f64> = p0.iter().zip(&p1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let r = |p: &[f64]| decode_raw(&ld, &pose_code_vec(&ld, p).unwrap()).unwrap();
        let (r0, r1, rm) = (r(&p0), r(&p1), r(&mix));
        for k in 0..rm.len() {
            prop_assert!((rm[k] - ((1.0 - t) * r0[k] + t * r1[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_text_roundtrip(j in 1usize..6, n in 1usize..5, seed in any::<u64>()) {
        let poses = uvsplat::distill::sample_poses(j, n, seed);
        prop_assert_eq!(poses_from_str(&poses_to_string(&poses)).unwrap(), poses);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn avatar_bytes_roundtrip(seed in 0u64..1000, j in 1usize..30) {
        let s = uvsplat::io::synth_avatar(&uvsplat::io::SynthConfig { n_joints: j, grid: 16, seed, ..Default::default() }).unwrap();
        let bytes = save_avatar(&s.avatar);
        let back = load_avatar(&bytes).unwrap();
        prop_assert_eq!(save_avatar(&back), bytes);
    }
}
