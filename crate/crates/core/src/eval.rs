//! Rendering a posed avatar and scoring frames against a reference.

use crate::error::Result;
use crate::io::Avatar;
use crate::metrics::{crop_pair, gradient_background, BinaryMask, Image, Metrics};
use crate::raster::{render, FrameBuffer, RenderOptions};
use crate::skinning::{animate, animate_uncorrected};
use crate::splat::{Camera, Corrective, Pose};

/// Reference pixels with accumulated opacity above this belong to the avatar.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Poses the avatar, optionally applying per-Gaussian correctives first, and renders it.
pub fn render_posed(a: &Avatar, corr: Option<&[Corrective]>, pose: &Pose, cam: &Camera, opts: &RenderOptions) -> Result<FrameBuffer> {
    let posed = match corr {
        Some(c) => animate(&a.splats, c, &a.skeleton, pose)?,
        None => animate_uncorrected(&a.splats, &a.skeleton, pose)?,
    };
    Ok(render(&posed, cam, opts))
}

/// The frame as it is scored: composited over the evaluation backdrop.
pub fn backdrop(fb: &FrameBuffer) -> Result<Image> {
    fb.over_background(&gradient_background(fb.width, fb.height))
}

/// Metrics of `pred` against `reference`, both over the backdrop and cropped to the
/// bounding box of the reference's opaque pixels.
pub fn compare_frames(pred: &FrameBuffer, reference: &FrameBuffer) -> Result<Metrics> {
    let mask = BinaryMask::from_image(&reference.alpha_image(), MASK_THRESHOLD);
    let (p, r) = crop_pair(&backdrop(pred)?, &backdrop(reference)?, &mask)?;
    Metrics::compute(&p, &r)
}

/// Per-metric mean over a set of frames.
pub fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    Metrics {
        l1: ms.iter().map(|m| m.l1).sum::<f64>() / n,
        psnr: ms.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: ms.iter().map(|m| m.ssim).sum::<f64>() / n,
    }
}
