//! Corrective sharing: nearest upsampling, mask gathering and the lookup table that maps
//! each Gaussian to one cell of a coarse corrective grid.

use crate::error::{Error, Result};

/// `out[r][c] = grid[r / f][c / f]` for a row-major `h x w` grid.
pub fn upsample_nearest<T: Copy>(grid: &[T], h: usize, w: usize, factor: usize) -> Result<Vec<T>> {
    if factor == 0 {
        return Err(Error::validation("upsample factor must be at least 1"));
    }
    if grid.len() != h * w {
        return Err(Error::dim("upsample grid", h * w, grid.len()));
    }
    let ow = w * factor;
    let mut out = Vec::with_capacity(h * factor * ow);
    for r in 0..h * factor {
        let row = &grid[(r / factor) * w..(r / factor + 1) * w];
        out.extend((0..ow).map(|c| row[c / factor]));
    }
    Ok(out)
}

/// Row-major gather of the cells where `mask` is true.
pub fn apply_mask<T: Copy>(grid: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if grid.len() != mask.len() {
        return Err(Error::dim("apply_mask grid", mask.len(), grid.len()));
    }
    Ok(grid.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect())
}

/// Keeps the top-left cell of every `factor x factor` block.
pub fn downsample_pick<T: Copy>(grid: &[T], h: usize, w: usize, factor: usize) -> Result<Vec<T>> {
    if factor == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(Error::validation(format!("grid {h}x{w} is not divisible by {factor}")));
    }
    if grid.len() != h * w {
        return Err(Error::dim("downsample grid", h * w, grid.len()));
    }
    let (ch, cw) = (h / factor, w / factor);
    Ok((0..ch * cw).map(|i| grid[(i / cw) * factor * w + (i % cw) * factor]).collect())
}

/// Index of the coarse cell that each masked cell of an `h x w` mask falls into, with
/// coarse cells of a `(h / factor) x (w / factor)` grid numbered row-major.
pub fn build_lut(mask: &[bool], h: usize, w: usize, factor: usize) -> Result<Vec<u32>> {
    if factor == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(Error::validation(format!("mask {h}x{w} is not divisible by share factor {factor}")));
    }
    if mask.len() != h * w {
        return Err(Error::dim("build_lut mask", h * w, mask.len()));
    }
    let cw = w / factor;
    Ok(mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| ((i / w / factor) * cw + (i % w) / factor) as u32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_cases() {
        let g = [1, 2, 3, 4, 5, 6];
        assert_eq!(upsample_nearest(&g, 2, 3, 1).unwrap(), g);
        assert_eq!(upsample_nearest(&[7], 1, 1, 4).unwrap(), vec![7; 16]);
        let (a, b, c, d) = ('a', 'b', 'c', 'd');
        assert_eq!(
            upsample_nearest(&[a, b, c, d], 2, 2, 2).unwrap(),
            vec![a, a, b, b, a, a, b, b, c, c, d, d, c, c, d, d]
        );
        assert!(upsample_nearest(&g, 2, 3, 0).is_err());
        assert!(upsample_nearest(&g, 3, 3, 2).is_err());
    }

    #[test]
    fn mask_cases() {
        let g: Vec<usize> = (0..16).collect();
        assert_eq!(apply_mask(&g, &[true; 16]).unwrap(), g);
        assert!(apply_mask(&g, &[false; 16]).unwrap().is_empty());
        let checker: Vec<bool> = (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect();
        assert_eq!(apply_mask(&g, &checker).unwrap(), vec![0, 2, 5, 7, 8, 10, 13, 15]);
        assert!(apply_mask(&g, &[true; 15]).is_err());
    }

    #[test]
    fn lut_cases() {
        let lut = build_lut(&[true; 64], 8, 8, 2).unwrap();
        assert_eq!(&lut[..16], &[0, 0, 1, 1, 2, 2, 3, 3, 0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(&lut[16..24], &[4, 4, 5, 5, 6, 6, 7, 7]);
        assert_eq!(build_lut(&[true; 12], 3, 4, 1).unwrap(), (0..12).collect::<Vec<u32>>());
        let full = build_lut(&vec![true; 256 * 256], 256, 256, 4).unwrap();
        assert_eq!(full.len(), 65536);
        assert_eq!(full.iter().max(), Some(&4095));
        assert!(build_lut(&[true; 9], 3, 3, 2).is_err());
    }

    #[test]
    fn pick_then_upsample_is_identity_on_block_constant() {
        let coarse: Vec<i32> = (0..12).map(|i| i * 3 - 5).collect();
        let fine = upsample_nearest(&coarse, 3, 4, 4).unwrap();
        assert_eq!(downsample_pick(&fine, 12, 16, 4).unwrap(), coarse);
        assert_eq!(
            upsample_nearest(&downsample_pick(&fine, 12, 16, 4).unwrap(), 3, 4, 4).unwrap(),
            fine
        );
    }
}
