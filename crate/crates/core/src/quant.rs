//! Integer simulation of the linear decoder: int8 weights with one symmetric scale per
//! output column, int16 pose-code activations with one symmetric scale, i32 accumulation
//! and a single dequantization per output. The SH expansion stays in floating point.

use crate::decoder::{self, LinearDecoder};
use crate::error::{Error, Result};
use crate::splat::{Corrective, Pose};

pub const WEIGHT_MAX: i32 = 127;
pub const ACTIVATION_MAX: i32 = 32767;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinearDecoder {
    /// Decoder metadata and both PCA stages; `meta.b_c` is empty.
    pub meta: LinearDecoder,
    /// Same layout as `LinearDecoder::b_c`.
    pub weights: Vec<i8>,
    /// One scale per raw output column.
    pub weight_scales: Vec<f32>,
    pub activation_scale: f32,
    /// Columns that were entirely zero and got scale 1.
    pub zero_columns: usize,
}

/// Result of one integer decode.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedOutput {
    pub correctives: Vec<Corrective>,
    /// Code entries clamped to the int16 range.
    pub saturated: usize,
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Quantizes `B_c`; the activation scale comes from the largest code entry over `calib`.
pub fn quantize(ld: &LinearDecoder, calib: &[Pose]) -> Result<QuantizedLinearDecoder> {
    ld.validate()?;
    if calib.is_empty() {
        return Err(Error::validation("quantize needs at least one calibration pose"));
    }
    let n = ld.code_len();
    if n as i64 * WEIGHT_MAX as i64 * ACTIVATION_MAX as i64 > i32::MAX as i64 {
        return Err(Error::validation(format!("code length {n} can overflow the i32 accumulator")));
    }
    let mut amax = 0.0f64;
    for p in calib {
        amax = amax.max(max_abs(decoder::pose_code(ld, p)?));
    }
    let activation_scale = (amax / ACTIVATION_MAX as f64) as f32;
    let mut weights = Vec::with_capacity(ld.b_c.len());
    let mut weight_scales = Vec::with_capacity(ld.b_c.len() / n);
    let mut zero_columns = 0;
    for col in ld.b_c.chunks_exact(n) {
        let m = max_abs(col.iter().map(|v| *v as f64));
        let scale = if m > 0.0 {
            (m / WEIGHT_MAX as f64) as f32
        } else {
            zero_columns += 1;
            1.0
        };
        weight_scales.push(scale);
        for v in col {
            let q = (*v as f64 / scale as f64).round().clamp(-WEIGHT_MAX as f64, WEIGHT_MAX as f64);
            weights.push(q as i8);
        }
    }
    if zero_columns > 0 {
        log::info!("quantize: {zero_columns} all-zero weight columns use scale 1");
    }
    Ok(QuantizedLinearDecoder {
        meta: LinearDecoder {
            b_c: Vec::new(),
            ..ld.clone()
        },
        weights,
        weight_scales,
        activation_scale,
        zero_columns,
    })
}

impl QuantizedLinearDecoder {
    pub fn validate(&self) -> Result<()> {
        let n = self.meta.code_len();
        let cols = self.meta.n_corr * self.meta.raw_width();
        if self.weights.len() != cols * n {
            return Err(Error::dim("quantized weights", cols * n, self.weights.len()));
        }
        if self.weight_scales.len() != cols {
            return Err(Error::dim("quantized weight scales", cols, self.weight_scales.len()));
        }
        if !self
            .weight_scales
            .iter()
            .chain([&self.activation_scale])
            .all(|s| s.is_finite() && *s > 0.0)
        {
            return Err(Error::validation("quantization scales must be finite and positive"));
        }
        if self.weights.contains(&i8::MIN) {
            return Err(Error::validation("quantized weight -128 is outside the symmetric range"));
        }
        LinearDecoder {
            b_c: vec![0.0; cols * n],
            ..self.meta.clone()
        }
        .validate()
    }

    /// Integer codes for a pose, clamped to the int16 range, and the number clamped.
    pub fn quantize_code(&self, code: &[f64]) -> (Vec<i32>, usize) {
        let mut saturated = 0;
        let a = self.activation_scale as f64;
        let q = code
            .iter()
            .map(|c| {
                let v = (c / a).round();
                if v.abs() > ACTIVATION_MAX as f64 {
                    saturated += 1;
                }
                v.clamp(-ACTIVATION_MAX as f64, ACTIVATION_MAX as f64) as i32
            })
            .collect();
        (q, saturated)
    }

    /// Stage 1 in integers: dequantized raw outputs and the saturation count.
    pub fn decode_raw(&self, code: &[f64]) -> Result<(Vec<f64>, usize)> {
        let n = self.meta.code_len();
        if code.len() != n {
            return Err(Error::dim("quantized code", n, code.len()));
        }
        let (qa, saturated) = self.quantize_code(code);
        let a = self.activation_scale as f64;
        let raw = self
            .weights
            .chunks_exact(n)
            .zip(&self.weight_scales)
            .map(|(col, s)| {
                let acc: i32 = col.iter().zip(&qa).map(|(w, x)| *w as i32 * x).sum();
                acc as f64 * (*s as f64 * a)
            })
            .collect();
        Ok((raw, saturated))
    }

    pub fn parameter_count(&self) -> u64 {
        self.meta.parameter_count()
    }
}

/// Corrective decode through the integer path.
pub fn quantized_decode(q: &QuantizedLinearDecoder, pose: &Pose) -> Result<QuantizedOutput> {
    let code = decoder::pose_code(&q.meta, pose)?;
    let (raw, saturated) = q.decode_raw(&code)?;
    if saturated > 0 {
        log::warn!("quantized decode: {saturated} code entries saturated");
    }
    Ok(QuantizedOutput {
        correctives: decoder::expand_raw(&q.meta, &raw),
        saturated,
    })
}

/// Per-Gaussian correctives through the integer path, gathered through the LUT if present.
pub fn quantized_decode_for_gaussians(q: &QuantizedLinearDecoder, pose: &Pose) -> Result<QuantizedOutput> {
    let mut out = quantized_decode(q, pose)?;
    if let Some(lut) = &q.meta.lut {
        out.correctives = decoder::gather_correctives(&out.correctives, lut)?;
    }
    Ok(out)
}

/// Floating-point decoder with `B_c = weight * scale`.
pub fn dequantize(q: &QuantizedLinearDecoder) -> LinearDecoder {
    let n = q.meta.code_len();
    let b_c = q
        .weights
        .chunks_exact(n)
        .zip(&q.weight_scales)
        .flat_map(|(col, s)| col.iter().map(move |w| *w as f32 * s))
        .collect();
    LinearDecoder { b_c, ..q.meta.clone() }
}

/// Worst-case `|quantized - float|` of each raw output for a code without saturation:
/// `w_s/2 * ||code||_1 + a_s/2 * ||w_hat||_1`, with `w_hat` the dequantized column.
pub fn raw_error_bound(q: &QuantizedLinearDecoder, code: &[f64]) -> Vec<f64> {
    let l1: f64 = code.iter().map(|c| c.abs()).sum();
    let a = q.activation_scale as f64;
    q.weights
        .chunks_exact(code.len())
        .zip(&q.weight_scales)
        .map(|(col, s)| {
            let s = *s as f64;
            let w_l1: f64 = col.iter().map(|w| (*w as f64).abs() * s).sum();
            0.5 * s * l1 + 0.5 * a * w_l1
        })
        .collect()
}
