use super::*;
use crate::distill::sample_poses;
use crate::quant::quantize;
use crate::raster::{render, RenderOptions};
use crate::{decoder, quant};

fn small(share: Option<usize>) -> SynthAvatar {
    synth_avatar(&SynthConfig {
        n_joints: 24,
        grid: 32,
        seed: 3,
        share,
        linear_teacher: false,
    })
    .unwrap()
}

fn bits(a: &Avatar) -> Vec<u32> {
    a.splats
        .gaussians
        .iter()
        .flat_map(|g| {
            g.mu.iter()
                .chain(&g.rot)
                .chain(&g.log_scale)
                .chain([&g.delta])
                .chain(&g.sh)
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn avatar_roundtrip_is_bit_exact() {
    for share in [None, Some(4)] {
        let a = small(share).avatar;
        let bytes = save_avatar(&a);
        let b = load_avatar(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(save_avatar(&b), bytes);
    }
}

#[test]
fn truncated_avatar_names_section() {
    let bytes = save_avatar(&small(Some(2)).avatar);
    for len in (0..64).chain((64..bytes.len()).step_by(997)) {
        let err = load_avatar(&bytes[..len]).unwrap_err();
        assert!(err.is_io(), "{len}: {err}");
    }
    let err = load_avatar(&bytes[..400]).unwrap_err();
    match err {
        Error::Truncated { section, expected, actual } => {
            assert_eq!(section, "GAUS");
            assert!(expected > actual);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn header_errors() {
    let mut bytes = save_avatar(&small(None).avatar);
    assert!(matches!(load_decoder(&bytes), Err(Error::WrongKind { .. })));
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(load_avatar(&bytes), Err(Error::UnsupportedVersion { found: 2, .. })));
    bytes[0] = b'X';
    assert!(matches!(load_avatar(&bytes), Err(Error::BadMagic { .. })));
}

#[test]
fn corrupt_bytes_never_panic() {
    use rand::{Rng, SeedableRng};
    let bytes = save_avatar(&small(Some(4)).avatar);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mut b = bytes.clone();
        for _ in 0..3 {
            let i = rng.random_range(0..b.len());
            b[i] = rng.random();
        }
        let _ = load_avatar(&b);
    }
}

#[test]
fn decoder_roundtrips() {
    let mut ld = decoder::LinearDecoder::random(crate::splat::Pose::dim_for(3), 5, 12, 6, 0.2, 1).unwrap();
    ld.lut = Some((0..40).map(|i| i % 12).collect());
    let bytes = save_decoder(&ld);
    let back = load_decoder(&bytes).unwrap();
    assert_eq!(back, ld);
    let poses = sample_poses(3, 4, 0);
    assert_eq!(
        decoder::linear_decode(&back, &poses[1]).unwrap(),
        decoder::linear_decode(&ld, &poses[1]).unwrap()
    );

    let q = quantize(&ld, &poses).unwrap();
    let qbytes = save_quantized(&q);
    let qb = load_quantized(&qbytes).unwrap();
    assert_eq!(qb, q);
    assert_eq!(
        qb.weight_scales.iter().map(|s| s.to_bits()).collect::<Vec<_>>(),
        q.weight_scales.iter().map(|s| s.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        quant::quantized_decode(&qb, &poses[2]).unwrap(),
        quant::quantized_decode(&q, &poses[2]).unwrap()
    );
    assert!(matches!(load_any_decoder(&qbytes).unwrap(), DecoderFile::Quantized(_)));
    assert!(matches!(load_any_decoder(&bytes).unwrap(), DecoderFile::Float(_)));
    for len in 0..qbytes.len() {
        assert!(load_quantized(&qbytes[..len]).is_err());
    }
}

#[test]
fn pose_text_roundtrip() {
    let poses = sample_poses(4, 6, 2);
    let text = poses_to_string(&poses);
    assert!(text.starts_with(&format!("6 {}\n", crate::splat::Pose::dim_for(4))));
    assert_eq!(poses_from_str(&text).unwrap(), poses);
    assert!(poses_from_str("").is_err());
    assert!(poses_from_str("2 51\n").is_err());
    let bad = text.replacen("6 ", "7 ", 1);
    assert!(poses_from_str(&bad).is_err());
}

#[test]
fn synth_is_deterministic() {
    let a = small(None);
    let b = small(None);
    assert_eq!(a.avatar, b.avatar);
    assert_eq!(a.teacher, b.teacher);
    let c = synth_avatar(&SynthConfig {
        seed: 4,
        grid: 32,
        ..Default::default()
    })
    .unwrap();
    assert_ne!(a.avatar.splats, c.avatar.splats);
    assert_eq!(a.teacher.cfg.out_h, 32);
    assert_eq!(small(Some(4)).teacher.cfg.out_h, 8);
}

#[test]
fn full_grid_occupancy_and_coverage() {
    let s = synth_avatar(&SynthConfig::default()).unwrap();
    let pop = s.avatar.splats.popcount() as f64 / 65536.0;
    assert!((0.85..=0.95).contains(&pop), "{pop}");
    let fb = render(&s.avatar.splats, &default_camera(96, 96).unwrap(), &RenderOptions::default());
    let covered = fb.alpha.iter().filter(|a| **a > 0.5).count() as f64 / fb.alpha.len() as f64;
    assert!(covered > 0.10, "{covered}");
}

#[test]
fn other_joint_counts() {
    for j in [1, 5, 30, 70] {
        let s = synth_avatar(&SynthConfig {
            n_joints: j,
            grid: 16,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.avatar.skeleton.n_joints(), j);
        assert!(crate::splat::validate_splatset(&s.avatar.splats).is_empty());
    }
}
