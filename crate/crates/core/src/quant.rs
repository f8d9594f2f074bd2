//! Affine quantization primitives and integer-only rescaling.
//!
//! Real values map to unsigned `b`-bit codes through
//! `q = clamp(round(x / S) + Z, 0, 2^b - 1)` and back through `r = S (q - Z)`.
//! Rounding is half-away-from-zero everywhere in the crate, and clipping is
//! applied to the integer code after rounding.
//!
//! Every change of scale on the inference path goes through a [`Rescale`]:
//! a 31-bit mantissa with a shift, applied with a single exact rounding to a
//! wide integer numerator. Sums of several rescaled terms share one rounding
//! (see [`rescale_sum2`]), so no intermediate precision is lost.

use serde::{Deserialize, Serialize};

use crate::error::{IrnnError, Result};
use crate::instrument::float_op;

/// Largest right shift a [`FixedPointMultiplier`] may carry. Keeps every
/// multi-term numerator inside `i128`.
pub const MAX_RIGHT_SHIFT: u32 = 31;

/// Largest pre-shift of a [`Rescale`], i.e. rescale factors stay below `2^30`.
pub const MAX_PRE_SHIFT: u32 = 30;

/// Integer storage width of a quantized tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitWidth {
    B8,
    B16,
}

impl BitWidth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitWidth::B8),
            16 => Ok(BitWidth::B16),
            other => Err(IrnnError::UnsupportedBitwidth(other)),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            BitWidth::B8 => 8,
            BitWidth::B16 => 16,
        }
    }

    /// Largest code, `2^b - 1`.
    #[inline]
    pub fn qmax(self) -> i32 {
        match self {
            BitWidth::B8 => 255,
            BitWidth::B16 => 65535,
        }
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = IrnnError;
    fn try_from(bits: u32) -> Result<Self> {
        BitWidth::from_bits(bits)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

/// Affine quantization descriptor for one tensor or pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantParamsRepr", into = "QuantParamsRepr")]
pub struct QuantParams {
    min: f64,
    max: f64,
    bits: BitWidth,
    scale: f64,
    zero_point: i32,
}

#[derive(Serialize, Deserialize)]
struct QuantParamsRepr {
    min: f64,
    max: f64,
    bits: BitWidth,
    scale: f64,
    zero_point: i32,
}

impl TryFrom<QuantParamsRepr> for QuantParams {
    type Error = IrnnError;
    fn try_from(r: QuantParamsRepr) -> Result<Self> {
        let qp = QuantParams::new(r.min, r.max, r.bits)?;
        if qp.scale != r.scale || qp.zero_point != r.zero_point {
            return Err(IrnnError::InvalidModel(format!(
                "stored qparams inconsistent with range [{}, {}]",
                r.min, r.max
            )));
        }
        Ok(qp)
    }
}

impl From<QuantParams> for QuantParamsRepr {
    fn from(q: QuantParams) -> Self {
        QuantParamsRepr {
            min: q.min,
            max: q.max,
            bits: q.bits,
            scale: q.scale,
            zero_point: q.zero_point,
        }
    }
}

impl QuantParams {
    /// Builds quantization parameters for `[min, max]`, first widening the
    /// range so that it contains zero.
    pub fn new(min: f64, max: f64, bits: BitWidth) -> Result<Self> {
        float_op();
        if !min.is_finite() || !max.is_finite() || min > max {
            return Err(IrnnError::InvalidRange { min, max });
        }
        let min = min.min(0.0);
        let max = max.max(0.0);
        if min == max {
            return Err(IrnnError::DegenerateRange { stage: None });
        }
        let qmax = f64::from(bits.qmax());
        let scale = (max - min) / qmax;
        // -min / scale, written so that exact halves stay exact.
        let zero_point = (-min * qmax / (max - min)).round().clamp(0.0, qmax) as i32;
        Ok(QuantParams {
            min,
            max,
            bits,
            scale,
            zero_point,
        })
    }

    /// Shorthand for [`QuantParams::new`] with a bit count.
    pub fn with_bits(min: f64, max: f64, bits: u32) -> Result<Self> {
        QuantParams::new(min, max, BitWidth::from_bits(bits)?)
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn qmax(&self) -> i32 {
        self.bits.qmax()
    }

    /// Same range at a different bitwidth.
    pub fn rebit(&self, bits: BitWidth) -> Result<Self> {
        QuantParams::new(self.min, self.max, bits)
    }

    pub fn quantize(&self, x: f64) -> i32 {
        float_op();
        let q = (x / self.scale).round() + f64::from(self.zero_point);
        q.clamp(0.0, f64::from(self.qmax())) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        float_op();
        self.scale * f64::from(q - self.zero_point)
    }

    pub fn quantize_slice(&self, xs: &[f64]) -> Vec<i32> {
        xs.iter().map(|&x| self.quantize(x)).collect()
    }

    pub fn dequantize_slice(&self, qs: &[i32]) -> Vec<f64> {
        qs.iter().map(|&q| self.dequantize(q)).collect()
    }

    /// `dequantize(quantize(x))`.
    pub fn fake_quantize(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }
}

/// A real constant in `[0, 1)` encoded as `mantissa * 2^(-31 - right_shift)`.
///
/// Non-zero mantissas are normalized into `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointMultiplier {
    mantissa: i32,
    right_shift: u32,
}

impl FixedPointMultiplier {
    pub const ZERO: FixedPointMultiplier = FixedPointMultiplier {
        mantissa: 0,
        right_shift: 0,
    };

    /// Encodes `r`. Zero encodes as a zero mantissa; negative values, values
    /// `>= 1` and values below `2^-32` are rejected.
    pub fn from_real(r: f64) -> Result<Self> {
        float_op();
        if !r.is_finite() || !(0.0..1.0).contains(&r) {
            return Err(IrnnError::MultiplierOutOfRange(r));
        }
        if r == 0.0 {
            return Ok(Self::ZERO);
        }
        let mut x = r;
        let mut shift = 0u32;
        while x < 0.5 {
            x *= 2.0;
            shift += 1;
            if shift > MAX_RIGHT_SHIFT {
                return Err(IrnnError::MultiplierOutOfRange(r));
            }
        }
        // x in [0.5, 1): the scaled value lies in [2^30, 2^31]; 2^31 itself
        // only appears through rounding and is pulled back by one ulp.
        let m = (x * 2f64.powi(31)).round() as i64;
        let mantissa = m.min(i64::from(i32::MAX)) as i32;
        Ok(FixedPointMultiplier {
            mantissa,
            right_shift: shift,
        })
    }

    pub fn from_parts(mantissa: i32, right_shift: u32) -> Result<Self> {
        let ok = (mantissa == 0 && right_shift == 0)
            || ((1 << 30..=i32::MAX).contains(&mantissa) && right_shift <= MAX_RIGHT_SHIFT);
        if !ok {
            return Err(IrnnError::InvalidModel(format!(
                "bad fixed-point multiplier ({mantissa}, {right_shift})"
            )));
        }
        Ok(FixedPointMultiplier {
            mantissa,
            right_shift,
        })
    }

    pub fn mantissa(&self) -> i32 {
        self.mantissa
    }

    pub fn right_shift(&self) -> u32 {
        self.right_shift
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa == 0
    }

    /// The encoded value as a float (diagnostics only).
    pub fn represented(&self) -> f64 {
        float_op();
        f64::from(self.mantissa) * 2f64.powi(-31 - self.right_shift as i32)
    }
}

/// A non-negative rescale factor: a [`FixedPointMultiplier`] preceded by a
/// left shift that absorbs the integer part of factors `>= 1`.
///
/// Represents `mantissa * 2^(pre_shift - 31 - right_shift)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rescale {
    multiplier: FixedPointMultiplier,
    pre_shift: u32,
}

impl Rescale {
    pub const ZERO: Rescale = Rescale {
        multiplier: FixedPointMultiplier::ZERO,
        pre_shift: 0,
    };

    pub fn from_real(r: f64) -> Result<Self> {
        float_op();
        if !r.is_finite() || r < 0.0 {
            return Err(IrnnError::MultiplierOutOfRange(r));
        }
        let mut pre_shift = 0u32;
        let mut x = r;
        while x >= 1.0 {
            x *= 0.5;
            pre_shift += 1;
            if pre_shift > MAX_PRE_SHIFT {
                return Err(IrnnError::MultiplierOutOfRange(r));
            }
        }
        Ok(Rescale {
            multiplier: FixedPointMultiplier::from_real(x)?,
            pre_shift,
        })
    }

    /// Like [`Rescale::from_real`] but factors too small to encode become
    /// zero. Their contribution is below `2^-16` of one output step for any
    /// 16-bit operand.
    pub fn from_real_or_zero(r: f64) -> Result<Self> {
        match Rescale::from_real(r) {
            Err(IrnnError::MultiplierOutOfRange(_)) if (0.0..1.0).contains(&r) => Ok(Rescale::ZERO),
            other => other,
        }
    }

    pub fn from_parts(multiplier: FixedPointMultiplier, pre_shift: u32) -> Result<Self> {
        if pre_shift > MAX_PRE_SHIFT || (multiplier.is_zero() && pre_shift != 0) {
            return Err(IrnnError::InvalidModel(format!("bad rescale pre-shift {pre_shift}")));
        }
        Ok(Rescale {
            multiplier,
            pre_shift,
        })
    }

    pub fn multiplier(&self) -> FixedPointMultiplier {
        self.multiplier
    }

    pub fn pre_shift(&self) -> u32 {
        self.pre_shift
    }

    #[inline]
    pub fn mantissa(&self) -> i64 {
        i64::from(self.multiplier.mantissa)
    }

    /// Net right shift applied to `value * mantissa`, always in `[1, 62]`.
    #[inline]
    pub fn total_shift(&self) -> u32 {
        31 + self.multiplier.right_shift - self.pre_shift
    }

    pub fn represented(&self) -> f64 {
        self.multiplier.represented() * 2f64.powi(self.pre_shift as i32)
    }

    /// `round(value * self)`.
    #[inline]
    pub fn apply(&self, value: i64) -> i64 {
        round_shift(i128::from(value) * i128::from(self.mantissa()), self.total_shift()) as i64
    }

    /// `clamp(round(value * self) + zero_point, 0, 2^b - 1)`.
    #[inline]
    pub fn requantize(&self, value: i64, zero_point: i32, bits: BitWidth) -> i32 {
        saturate(self.apply(value) + i64::from(zero_point), bits)
    }

    /// `round(value * self / divisor)` for `divisor > 0`.
    #[inline]
    pub fn apply_div(&self, value: i64, divisor: i64) -> i64 {
        debug_assert!(divisor > 0);
        let num = i128::from(value) * i128::from(self.mantissa());
        let den = i128::from(divisor) << self.total_shift();
        div_round(num, den) as i64
    }
}

/// Arithmetic right shift by `k >= 1` rounding half away from zero.
#[inline]
pub fn round_shift(x: i128, k: u32) -> i128 {
    debug_assert!((1..127).contains(&k));
    let half = 1i128 << (k - 1);
    if x >= 0 {
        (x + half) >> k
    } else {
        -((half - x) >> k)
    }
}

/// `num / den` rounded half away from zero, `den > 0`.
#[inline]
pub fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.abs() / den;
    let r = num.abs() % den;
    let q = if 2 * r >= den { q + 1 } else { q };
    if num < 0 {
        -q
    } else {
        q
    }
}

#[inline]
pub fn saturate(v: i64, bits: BitWidth) -> i32 {
    v.clamp(0, i64::from(bits.qmax())) as i32
}

#[inline]
fn aligned(value: i64, r: &Rescale, common: u32) -> i128 {
    (i128::from(value) * i128::from(r.mantissa())) << (common - r.total_shift())
}

/// `round(a * ra + b * rb)` with a single rounding.
#[inline]
pub fn rescale_sum2(a: i64, ra: &Rescale, b: i64, rb: &Rescale) -> i64 {
    let k = ra.total_shift().max(rb.total_shift());
    round_shift(aligned(a, ra, k) + aligned(b, rb, k), k) as i64
}

/// `round(a * ra + b * rb + c * rc)` with a single rounding.
#[inline]
pub fn rescale_sum3(a: i64, ra: &Rescale, b: i64, rb: &Rescale, c: i64, rc: &Rescale) -> i64 {
    let k = ra.total_shift().max(rb.total_shift()).max(rc.total_shift());
    round_shift(aligned(a, ra, k) + aligned(b, rb, k) + aligned(c, rc, k), k) as i64
}

/// Rescales a 32-bit accumulator into a `out_bits` code:
/// `clamp(round(acc * m) + out_zero_point, 0, 2^b - 1)`, integer arithmetic only.
pub fn requantize(acc: i32, m: &FixedPointMultiplier, out_zero_point: i32, out_bits: BitWidth) -> i32 {
    let prod = i128::from(acc) * i128::from(m.mantissa());
    let rounded = if m.is_zero() {
        0
    } else {
        round_shift(prod, 31 + m.right_shift()) as i64
    };
    saturate(rounded + i64::from(out_zero_point), out_bits)
}

/// Shape, codes and quantization parameters of a quantized tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    data: Vec<u16>,
    qparams: QuantParams,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u16>, qparams: QuantParams) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(IrnnError::Dimension(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        let qmax = qparams.qmax();
        if let Some(bad) = data.iter().find(|&&v| i32::from(v) > qmax) {
            return Err(IrnnError::InvalidModel(format!(
                "code {bad} exceeds {}-bit range",
                qparams.bits().bits()
            )));
        }
        Ok(QuantTensor {
            shape,
            data,
            qparams,
        })
    }

    /// Quantizes real data with `qparams`.
    pub fn quantize(shape: Vec<usize>, values: &[f64], qparams: QuantParams) -> Result<Self> {
        let data = values.iter().map(|&x| qparams.quantize(x) as u16).collect();
        QuantTensor::new(shape, data, qparams)
    }

    /// Quantizes real data with a range fitted to the data itself.
    pub fn quantize_fitted(shape: Vec<usize>, values: &[f64], bits: BitWidth) -> Result<Self> {
        let (lo, hi) = min_max(values);
        let qp = match QuantParams::new(lo, hi, bits) {
            Err(IrnnError::DegenerateRange { .. }) => QuantParams::new(-1.0, 1.0, bits)?,
            other => other?,
        };
        QuantTensor::quantize(shape, values, qp)
    }

    pub fn from_codes(shape: Vec<usize>, codes: &[i32], qparams: QuantParams) -> Result<Self> {
        let qmax = qparams.qmax();
        let data = codes
            .iter()
            .map(|&c| {
                if (0..=qmax).contains(&c) {
                    Ok(c as u16)
                } else {
                    Err(IrnnError::InvalidModel(format!("code {c} out of range")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        QuantTensor::new(shape, data, qparams)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn qparams(&self) -> &QuantParams {
        &self.qparams
    }

    pub fn codes(&self) -> Vec<i32> {
        self.data.iter().map(|&v| i32::from(v)).collect()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&v| self.qparams.dequantize(i32::from(v))).collect()
    }
}

/// Minimum and maximum of a slice, `(0, 0)` when empty.
pub fn min_max(values: &[f64]) -> (f64, f64) {
    float_op();
    if values.is_empty() {
        return (0.0, 0.0);
    }
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use num_traits::Signed;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp(min: f64, max: f64) -> QuantParams {
        QuantParams::new(min, max, BitWidth::B8).unwrap()
    }

    // Exact rational value of a multiplier.
    fn exact(m: &FixedPointMultiplier) -> Ratio<i128> {
        Ratio::new(i128::from(m.mantissa()), 1i128 << (31 + m.right_shift()))
    }

    fn oracle_requantize(acc: i32, m: &FixedPointMultiplier, z: i32, bits: BitWidth) -> i32 {
        let v = (Ratio::from_integer(i128::from(acc)) * exact(m)).round().to_integer();
        (v + i128::from(z)).clamp(0, i128::from(bits.qmax())) as i32
    }

    #[test]
    fn unit_scale_range() {
        let p = qp(0.0, 255.0);
        assert_eq!(p.scale(), 1.0);
        assert_eq!(p.zero_point(), 0);
    }

    #[test]
    fn symmetric_range_rounds_half_away() {
        let p = qp(-1.0, 1.0);
        assert_eq!(p.scale(), 2.0 / 255.0);
        // -min / S = 127.5 exactly; half away from zero gives 128.
        assert_eq!(p.zero_point(), 128);
    }

    #[test]
    fn range_widened_to_include_zero() {
        let p = qp(0.5, 2.0);
        assert_eq!(p.min(), 0.0);
        assert_eq!(p.scale(), 2.0 / 255.0);
        assert_eq!(p.zero_point(), 0);
        let p = qp(-3.0, -1.0);
        assert_eq!(p.max(), 0.0);
        assert_eq!(p.zero_point(), 255);
    }

    #[test]
    fn degenerate_and_invalid_ranges() {
        assert!(matches!(
            QuantParams::new(0.0, 0.0, BitWidth::B8),
            Err(IrnnError::DegenerateRange { .. })
        ));
        assert!(QuantParams::new(1.0, -1.0, BitWidth::B8).is_err());
        assert!(QuantParams::new(f64::NAN, 1.0, BitWidth::B8).is_err());
        assert!(QuantParams::with_bits(-1.0, 1.0, 12).is_err());
    }

    #[test]
    fn quantize_examples() {
        let p = qp(-1.0, 1.0);
        assert_eq!(p.quantize(0.0), p.zero_point());
        // round(0.5 * 127.5) + 128 = round(63.75) + 128
        assert_eq!(p.quantize(0.5), 192);
        assert_eq!(p.quantize(10.0), 255);
        assert_eq!(p.quantize(-10.0), 0);
    }

    #[test]
    fn dequantize_examples() {
        let p = qp(-1.0, 1.0);
        assert_eq!(p.dequantize(p.zero_point()), 0.0);
        assert!((p.dequantize(255) - 127.0 * 2.0 / 255.0).abs() < 1e-15);
        assert!((p.dequantize(255) - 0.996_078_431_372_549).abs() < 1e-12);
    }

    #[test]
    fn round_trip_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for bits in [BitWidth::B8, BitWidth::B16] {
            let p = QuantParams::new(-2.3, 5.1, bits).unwrap();
            for _ in 0..1000 {
                let x: f64 = rng.random_range(p.min()..p.max());
                let err = (p.fake_quantize(x) - x).abs();
                assert!(err <= p.scale() / 2.0 + 1e-12, "x={x} err={err}");
            }
        }
    }

    #[test]
    fn multiplier_half() {
        let m = FixedPointMultiplier::from_real(0.5).unwrap();
        assert_eq!(m.mantissa(), 1 << 30);
        assert_eq!(m.right_shift(), 0);
    }

    #[test]
    fn multiplier_one_over_255() {
        let m = FixedPointMultiplier::from_real(1.0 / 255.0).unwrap();
        // |m - 1/255| * 255 as an exact rational
        let err = (exact(&m) - Ratio::new(1, 255)).abs() * Ratio::from_integer(255);
        assert!(err <= Ratio::new(1, 1i128 << 30));
        assert!(m.mantissa() >= 1 << 30);
    }

    #[test]
    fn multiplier_zero_and_errors() {
        assert_eq!(FixedPointMultiplier::from_real(0.0).unwrap().mantissa(), 0);
        assert!(FixedPointMultiplier::from_real(-0.1).is_err());
        assert!(FixedPointMultiplier::from_real(1.0).is_err());
        assert!(FixedPointMultiplier::from_real(1e-12).is_err());
    }

    #[test]
    fn multiplier_near_one_stays_in_range() {
        let m = FixedPointMultiplier::from_real(1.0 - 1e-12).unwrap();
        assert_eq!(m.mantissa(), i32::MAX);
        assert_eq!(m.right_shift(), 0);
    }

    #[test]
    fn rescale_handles_factors_above_one() {
        let r = Rescale::from_real(3.0).unwrap();
        assert_eq!(r.pre_shift(), 2);
        assert_eq!(r.apply(5), 15);
        let r = Rescale::from_real(255.0).unwrap();
        assert_eq!(r.apply(1), 255);
        assert!(Rescale::from_real(2f64.powi(31)).is_err());
        assert_eq!(Rescale::from_real_or_zero(1e-13).unwrap(), Rescale::ZERO);
    }

    #[test]
    fn requantize_examples() {
        let z = FixedPointMultiplier::from_real(0.25).unwrap();
        assert_eq!(requantize(0, &z, 77, BitWidth::B8), 77);
        let half = FixedPointMultiplier::from_real(0.5).unwrap();
        assert_eq!(requantize(1000, &half, 0, BitWidth::B8), 255);
        let m = FixedPointMultiplier::from_real(2.0 / 255.0).unwrap();
        // round(100 * 2 / 255) + 128 = round(0.784) + 128
        assert_eq!(requantize(100, &m, 128, BitWidth::B8), 129);
    }

    #[test]
    fn requantize_ties_round_away_from_zero() {
        let half = FixedPointMultiplier::from_real(0.5).unwrap();
        assert_eq!(requantize(5, &half, 100, BitWidth::B8), 103);
        assert_eq!(requantize(-5, &half, 100, BitWidth::B8), 97);
        assert_eq!(requantize(-1, &half, 100, BitWidth::B8), 99);
    }

    #[test]
    fn requantize_matches_exact_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for i in 0..1_000_000u32 {
            let acc: i32 = rng.random();
            let r = 2f64.powf(rng.random_range(-31.0..0.0));
            let m = FixedPointMultiplier::from_real(r).unwrap();
            let z = rng.random_range(0..=65535);
            let bits = if i % 2 == 0 { BitWidth::B8 } else { BitWidth::B16 };
            assert_eq!(requantize(acc, &m, z, bits), oracle_requantize(acc, &m, z, bits));
        }
    }

    #[test]
    fn rescale_sums_match_exact_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ex = |r: &Rescale| {
            Ratio::new(r.mantissa() as i128, 1i128 << r.total_shift())
        };
        for _ in 0..100_000 {
            let ra = Rescale::from_real(2f64.powf(rng.random_range(-31.0..20.0))).unwrap();
            let rb = Rescale::from_real(2f64.powf(rng.random_range(-31.0..20.0))).unwrap();
            let rc = Rescale::from_real(2f64.powf(rng.random_range(-31.0..20.0))).unwrap();
            let a = rng.random_range(-(1i64 << 31)..(1i64 << 31));
            let b = rng.random_range(-(1i64 << 31)..(1i64 << 31));
            let c = rng.random_range(-65535i64..65535);
            let want2 = (Ratio::from_integer(a as i128) * ex(&ra) + Ratio::from_integer(b as i128) * ex(&rb))
                .round()
                .to_integer();
            assert_eq!(rescale_sum2(a, &ra, b, &rb) as i128, want2);
            let want3 = want2_plus(a, &ra, b, &rb, c, &rc, &ex);
            assert_eq!(rescale_sum3(a, &ra, b, &rb, c, &rc) as i128, want3);
            let d = rng.random_range(1i64..100_000);
            let want_div = (Ratio::from_integer(c as i128) * ex(&ra) / Ratio::from_integer(d as i128))
                .round()
                .to_integer();
            assert_eq!(ra.apply_div(c, d) as i128, want_div);
        }
    }

    fn want2_plus(
        a: i64,
        ra: &Rescale,
        b: i64,
        rb: &Rescale,
        c: i64,
        rc: &Rescale,
        ex: &dyn Fn(&Rescale) -> Ratio<i128>,
    ) -> i128 {
        (Ratio::from_integer(a as i128) * ex(ra)
            + Ratio::from_integer(b as i128) * ex(rb)
            + Ratio::from_integer(c as i128) * ex(rc))
        .round()
        .to_integer()
    }

    proptest! {
        #[test]
        fn grid_round_trip_is_exact(lo in -100.0f64..0.0, width in 0.01f64..200.0, sixteen in any::<bool>()) {
            let bits = if sixteen { BitWidth::B16 } else { BitWidth::B8 };
            let p = QuantParams::new(lo, lo + width, bits).unwrap();
            prop_assert_eq!(p.dequantize(p.zero_point()), 0.0);
            let step = if sixteen { 97 } else { 1 };
            for q in (0..=p.qmax()).step_by(step) {
                prop_assert_eq!(p.quantize(p.dequantize(q)), q);
            }
        }

        #[test]
        fn multiplier_relative_error_bound(r in 2.4e-10f64..0.999_999) {
            let m = FixedPointMultiplier::from_real(r).unwrap();
            prop_assert!((1 << 30..=i32::MAX).contains(&m.mantissa()));
            let rel = ((m.represented() - r) / r).abs();
            prop_assert!(rel <= 2f64.powi(-30), "rel error {}", rel);
        }

        #[test]
        fn requantize_is_monotone(a in -(1i32 << 30)..(1i32 << 30), d in 0i32..1000, r in 1e-6f64..0.999) {
            let m = FixedPointMultiplier::from_real(r).unwrap();
            let lo = requantize(a, &m, 32768, BitWidth::B16);
            let hi = requantize(a + d, &m, 32768, BitWidth::B16);
            prop_assert!(lo <= hi);
        }
    }

    #[test]
    fn qparams_serde_round_trip() {
        let p = QuantParams::new(-0.731, 3.2, BitWidth::B16).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: QuantParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn quant_tensor_validates() {
        let p = qp(-1.0, 1.0);
        assert!(QuantTensor::new(vec![2, 2], vec![0, 1, 2], p).is_err());
        assert!(QuantTensor::new(vec![1], vec![256], p).is_err());
        let t = QuantTensor::quantize(vec![3], &[-1.0, 0.0, 1.0], p).unwrap();
        assert_eq!(t.codes(), vec![0, 128, 255]);
    }
}
