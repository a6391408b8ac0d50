//! Per-tensor affine post-training quantization.
//!
//! A tensor `W` is mapped onto `2^b` evenly spaced levels between a lower
//! bound (the offset) and an upper bound, `Δ = (hi − lo) / (2^b − 1)`,
//! `code = round((clamp(W) − lo) / Δ)`. Without calibration the bounds are
//! `min(W)` and `max(W)`; calibration narrows them by a clip ratio.

use log::debug;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, MlpDenoiser, ParamVector, TensorSpec};
use crate::diffusion::{sample_until, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Candidate clip ratios, searched in this order; ties keep the earlier one.
pub const CLIP_RATIOS: [f64; 6] = [1.0, 0.999, 0.99, 0.97, 0.95, 0.90];

/// Bytes of per-tensor metadata on the wire: Δ and offset as f64 plus one
/// u32 per shape dimension.
pub fn tensor_header_bytes(ndim: usize) -> usize {
    16 + 4 * ndim
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    HalfAwayFromZero,
    /// Truncation. Only used to check that the verification suite catches it.
    TowardZero,
}

impl Rounding {
    fn apply(self, v: f64) -> f64 {
        match self {
            Rounding::HalfAwayFromZero => v.round(),
            Rounding::TowardZero => v.trunc(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub codes: Vec<u32>,
    pub bitwidth: u8,
    pub delta: f64,
    pub offset: f64,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn max_code(&self) -> u32 {
        max_code(self.bitwidth)
    }

    /// Bytes taken by the bit-packed codes.
    pub fn code_bytes(&self) -> usize {
        (self.codes.len() * self.bitwidth as usize).div_ceil(8)
    }
}

fn max_code(bits: u8) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=32).contains(&bits) {
        return Err(Error::Argument(format!("bitwidth {bits} outside 1..=32")));
    }
    Ok(())
}

fn check_values(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Argument("cannot quantize an empty tensor".into()));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("tensor entry {i} is not finite")));
    }
    Ok(())
}

fn min_max(w: &[f64]) -> (f64, f64) {
    w.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Codes for `w` on the grid `offset + k·delta`, `k ∈ [0, 2^b − 1]`.
pub fn quantize_on_grid(w: &[f64], bits: u8, delta: f64, offset: f64, rounding: Rounding) -> Vec<u32> {
    let top = max_code(bits);
    if delta == 0.0 {
        return vec![0; w.len()];
    }
    let hi = offset + top as f64 * delta;
    w.iter()
        .map(|&v| {
            let q = rounding.apply((v.clamp(offset, hi) - offset) / delta);
            q.clamp(0.0, top as f64) as u32
        })
        .collect()
}

pub(crate) fn quantize_with_rounding(
    w: &[f64],
    shape: &[usize],
    bits: u8,
    clip: Option<ClipRange>,
    rounding: Rounding,
) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    check_values(w)?;
    let (lo, hi) = match clip {
        Some(c) => {
            if !(c.lo <= c.hi) || !c.lo.is_finite() || !c.hi.is_finite() {
                return Err(Error::Argument(format!("invalid clip range [{}, {}]", c.lo, c.hi)));
            }
            (c.lo, c.hi)
        }
        None => min_max(w),
    };
    // Constant range: every entry reconstructs to the offset.
    let delta = if hi > lo { (hi - lo) / max_code(bits) as f64 } else { 0.0 };
    Ok(QuantizedTensor {
        codes: quantize_on_grid(w, bits, delta, lo, rounding),
        bitwidth: bits,
        delta,
        offset: lo,
        shape: shape.to_vec(),
    })
}

/// Quantizes one tensor, optionally clamping into a calibrated range first.
pub fn quantize(w: &[f64], shape: &[usize], bits: u8, clip: Option<ClipRange>) -> Result<QuantizedTensor> {
    quantize_with_rounding(w, shape, bits, clip, Rounding::HalfAwayFromZero)
}

pub fn dequantize(q: &QuantizedTensor) -> Vec<f64> {
    q.codes.iter().map(|&c| c as f64 * q.delta + q.offset).collect()
}

/// `‖W − D(Q(W))‖²`.
pub fn quant_error(w: &[f64], bits: u8, clip: Option<ClipRange>) -> Result<f64> {
    let q = quantize(w, &[w.len()], bits, clip)?;
    Ok(w.iter()
        .zip(dequantize(&q))
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Range `[c − ρh, c + ρh]` about the centre `c` of `[min, max]` with half-width `h`.
pub fn clip_for_ratio(w: &[f64], ratio: f64) -> ClipRange {
    let (min, max) = min_max(w);
    if ratio >= 1.0 {
        return ClipRange { lo: min, hi: max };
    }
    let c = 0.5 * (min + max);
    let h = 0.5 * (max - min);
    ClipRange {
        lo: (c - ratio * h).max(min),
        hi: (c + ratio * h).min(max),
    }
}

/// Per-tensor calibrated ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CalibrationParams {
    pub ranges: Vec<ClipRange>,
    pub ratios: Vec<f64>,
    /// Intermediate reverse-chain states drawn during calibration, kept for
    /// activation-range diagnostics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<Vec<f64>>,
}

/// Picks the clip ratio per tensor that minimises the quantization error.
pub fn calibrate_weights(theta: &ParamVector, bits: u8) -> Result<CalibrationParams> {
    check_bits(bits)?;
    let mut out = CalibrationParams::default();
    for i in 0..theta.layout().len() {
        let w = theta.tensor(i);
        let mut best: Option<(f64, f64, ClipRange)> = None;
        for &ratio in &CLIP_RATIOS {
            let clip = clip_for_ratio(w, ratio);
            let err = quant_error(w, bits, Some(clip))?;
            if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                best = Some((err, ratio, clip));
            }
        }
        let (_, ratio, clip) = best.expect("ratio grid is non-empty");
        out.ranges.push(clip);
        out.ratios.push(ratio);
    }
    Ok(out)
}

/// Draws `n` reverse-chain states at timesteps uniform over `[1, T]`, records
/// them, then calibrates the weight ranges.
pub fn calibrate(
    theta: &ParamVector,
    arch: &MlpDenoiser,
    sched: &NoiseSchedule,
    n: usize,
    bits: u8,
    seed: u64,
) -> Result<CalibrationParams> {
    if n == 0 {
        return Err(Error::Argument("calibration needs at least one sample".into()));
    }
    let model = Denoiser { arch, params: theta };
    let mut rng = rng_from(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(1..=sched.steps());
        samples.push(sample_until(&model, sched, arch.data_dim, t, derive_seed(seed, &[i as u64]))?);
    }
    let (lo, hi) = samples
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    debug!("calibration samples: n={n} activation range [{lo:.4}, {hi:.4}]");
    let mut params = calibrate_weights(theta, bits)?;
    params.samples = samples;
    Ok(params)
}

/// A whole parameter vector quantized tensor by tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub layout: Vec<TensorSpec>,
    pub tensors: Vec<QuantizedTensor>,
    pub bitwidth: u8,
    pub payload_bytes: usize,
}

pub fn quantize_model(theta: &ParamVector, bits: u8, calib: Option<&CalibrationParams>) -> Result<QuantizedModel> {
    check_bits(bits)?;
    if let Some(c) = calib {
        if c.ranges.len() != theta.layout().len() {
            return Err(Error::Shape(format!(
                "calibration covers {} tensors, model has {}",
                c.ranges.len(),
                theta.layout().len()
            )));
        }
    }
    let tensors = theta
        .layout()
        .iter()
        .enumerate()
        .map(|(i, spec)| quantize(theta.tensor(i), &spec.shape, bits, calib.map(|c| c.ranges[i])))
        .collect::<Result<Vec<_>>>()?;
    let mut model = QuantizedModel {
        layout: theta.layout().to_vec(),
        tensors,
        bitwidth: bits,
        payload_bytes: 0,
    };
    model.payload_bytes = payload_size(&model);
    Ok(model)
}

pub fn dequantize_model(q: &QuantizedModel) -> Result<ParamVector> {
    let values = q.tensors.iter().flat_map(dequantize).collect();
    ParamVector::new(values, q.layout.clone())
}

/// Bit-packed codes plus per-tensor headers.
pub fn payload_size(q: &QuantizedModel) -> usize {
    code_payload_size(q) + q.tensors.iter().map(|t| tensor_header_bytes(t.shape.len())).sum::<usize>()
}

/// Bit-packed codes only.
pub fn code_payload_size(q: &QuantizedModel) -> usize {
    q.tensors.iter().map(QuantizedTensor::code_bytes).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn two_level_case() {
        let q = quantize(&[0.0, 1.0], &[2], 1, None).unwrap();
        assert_eq!(q.delta, 1.0);
        assert_eq!(q.codes, vec![0, 1]);
    }

    #[test]
    fn constant_tensor() {
        let q = quantize(&[2.5, 2.5, 2.5], &[3], 8, None).unwrap();
        assert_eq!(q.delta, 0.0);
        assert_eq!(q.codes, vec![0, 0, 0]);
        assert_eq!(q.offset, 2.5);
        assert_eq!(dequantize(&q), vec![2.5; 3]);
    }

    #[test]
    fn hand_example_two_bits() {
        let w = [0.0, 0.4, 1.0];
        let q = quantize(&w, &[3], 2, None).unwrap();
        assert_abs_diff_eq!(q.delta, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(q.codes, vec![0, 1, 3]);
        let d = dequantize(&q);
        assert_abs_diff_eq!(d[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(d[2], 1.0);
        assert_abs_diff_eq!(quant_error(&w, 2, None).unwrap(), (0.4f64 - 1.0 / 3.0).powi(2), epsilon = 1e-15);
        assert_abs_diff_eq!(quant_error(&w, 2, None).unwrap(), 0.004444, epsilon = 1e-6);
    }

    #[test]
    fn dequantize_from_codes() {
        let q = QuantizedTensor {
            codes: vec![0, 1, 3],
            bitwidth: 2,
            delta: 1.0 / 3.0,
            offset: 0.0,
            shape: vec![3],
        };
        assert_eq!(dequantize(&q), vec![0.0, 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(quantize(&[1.0, f64::NAN], &[2], 8, None), Err(Error::Data(_))));
        assert!(matches!(quantize(&[1.0, f64::INFINITY], &[2], 8, None), Err(Error::Data(_))));
        assert!(quantize(&[], &[0], 8, None).is_err());
        assert!(quantize(&[1.0], &[1], 0, None).is_err());
        assert!(quantize(&[1.0], &[1], 33, None).is_err());
    }

    #[test]
    fn representable_grid_has_zero_error() {
        let w: Vec<f64> = (0..16).map(|k| k as f64 * 0.25 - 1.0).collect();
        assert_eq!(quant_error(&w, 4, None).unwrap(), 0.0);
    }

    #[test]
    fn clipping_respects_bounds_and_clamps() {
        let w = [-1.0, 0.0, 0.5, 3.0];
        let clip = ClipRange { lo: -0.5, hi: 1.0 };
        let q = quantize(&w, &[4], 8, Some(clip)).unwrap();
        let d = dequantize(&q);
        assert_eq!(d[0], -0.5);
        assert_abs_diff_eq!(d[3], 1.0, epsilon = 1e-12);
        assert!(d.iter().all(|&v| (-0.5..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn bit_refinement_counterexample_for_non_nested_grids() {
        // 1/3 sits on the 2-bit grid but not on the 3-bit grid.
        let w = [0.0, 1.0 / 3.0, 1.0];
        let e2 = quant_error(&w, 2, None).unwrap();
        let e3 = quant_error(&w, 3, None).unwrap();
        assert!(e2 < 1e-30);
        assert!(e3 > e2);
    }

    #[test]
    fn error_decreases_with_bits_on_dense_tensor() {
        let mut rng = rng_from(21);
        let w = normal_vec(&mut rng, 4096);
        let errs: Vec<f64> = (1..=16).map(|b| quant_error(&w, b, None).unwrap()).collect();
        assert!(errs.windows(2).all(|e| e[1] <= e[0]), "{errs:?}");
    }

    #[test]
    fn calibration_clips_outlier() {
        let mut rng = rng_from(5);
        let mut w = normal_vec(&mut rng, 1000);
        w.push(50.0);
        // grid evaluation, independent of calibrate_weights
        let errs: Vec<f64> = CLIP_RATIOS
            .iter()
            .map(|&r| quant_error(&w, 8, Some(clip_for_ratio(&w, r))).unwrap())
            .collect();
        let best = errs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best < errs[0]);
        let theta = ParamVector::new(w.clone(), vec![TensorSpec { name: "w".into(), shape: vec![w.len()], offset: 0 }]).unwrap();
        let c = calibrate_weights(&theta, 8).unwrap();
        assert!(c.ratios[0] < 1.0);
        let chosen = quant_error(&w, 8, Some(c.ranges[0])).unwrap();
        assert_eq!(chosen, best);
    }

    #[test]
    fn calibration_keeps_raw_range_for_grid_aligned_tensor() {
        let w: Vec<f64> = (0..256).map(|k| k as f64 / 255.0 * 2.0 - 0.5).collect();
        let errs: Vec<f64> = CLIP_RATIOS
            .iter()
            .map(|&r| quant_error(&w, 8, Some(clip_for_ratio(&w, r))).unwrap())
            .collect();
        assert!(errs[1..].iter().all(|&e| e > errs[0]));
        let theta = ParamVector::new(w.clone(), vec![TensorSpec { name: "w".into(), shape: vec![256], offset: 0 }]).unwrap();
        let c = calibrate_weights(&theta, 8).unwrap();
        assert_eq!(c.ratios, vec![1.0]);
    }

    #[test]
    fn payload_accounting() {
        let layout = vec![TensorSpec { name: "w".into(), shape: vec![1000], offset: 0 }];
        let theta = ParamVector::new((0..1000).map(|i| i as f64).collect(), layout).unwrap();
        let q8 = quantize_model(&theta, 8, None).unwrap();
        let q32 = quantize_model(&theta, 32, None).unwrap();
        assert_eq!(code_payload_size(&q8), 1000);
        assert_eq!(code_payload_size(&q32), 4 * code_payload_size(&q8));
        assert_eq!(q8.payload_bytes, 1000 + tensor_header_bytes(1));
        let q3 = quantize_model(&theta, 3, None).unwrap();
        assert_eq!(code_payload_size(&q3), 375);

        let empty = QuantizedModel { layout: vec![], tensors: vec![], bitwidth: 8, payload_bytes: 0 };
        assert_eq!(payload_size(&empty), 0);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            w in prop::collection::vec(-100.0f64..100.0, 1..64),
            bits in prop::sample::select(vec![1u8, 2, 4, 8, 16, 32]),
        ) {
            let q = quantize(&w, &[w.len()], bits, None).unwrap();
            let d = dequantize(&q);
            for (a, b) in w.iter().zip(&d) {
                prop_assert!((a - b).abs() <= q.delta / 2.0 + 1e-12);
            }
            prop_assert!(q.codes.iter().all(|&c| c <= q.max_code()));
            // idempotence on the same grid
            let again = quantize_on_grid(&d, bits, q.delta, q.offset, Rounding::HalfAwayFromZero);
            prop_assert_eq!(again, q.codes);
        }

        #[test]
        fn clipped_round_trip(
            w in prop::collection::vec(-10.0f64..10.0, 2..64),
            ratio in prop::sample::select(CLIP_RATIOS.to_vec()),
        ) {
            let clip = clip_for_ratio(&w, ratio);
            let (min, max) = min_max(&w);
            prop_assert!(clip.lo >= min && clip.hi <= max && clip.lo <= clip.hi);
            let q = quantize(&w, &[w.len()], 8, Some(clip)).unwrap();
            for (a, b) in w.iter().zip(dequantize(&q)) {
                prop_assert!((a.clamp(clip.lo, clip.hi) - b).abs() <= q.delta / 2.0 + 1e-12);
            }
        }

        #[test]
        fn doubling_bits_never_hurts(
            w in prop::collection::vec(-5.0f64..5.0, 1..64),
            bits in 1u8..=8,
        ) {
            // the b-bit grid is a subset of the 2b-bit grid
            let coarse = quant_error(&w, bits, None).unwrap();
            let fine = quant_error(&w, 2 * bits, None).unwrap();
            prop_assert!(fine <= coarse + 1e-12);
        }
    }
}
