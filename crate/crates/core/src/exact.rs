//! Exact rational arithmetic for the fake-quantized reference paths.
//!
//! The reference paths re-evaluate every stage of the integer engine as a real
//! expression, with each scale ratio taken at the value its fixed-point
//! encoding actually represents, and round once per stage with the global
//! half-away-from-zero rule. Working in `Ratio<i128>` makes that evaluation
//! exact, so agreement with the integer kernels can be demanded bit for bit.

use num_rational::Ratio;

use crate::quant::{BitWidth, QuantParams, Rescale};

pub type Exact = Ratio<i128>;

/// The exact value encoded by a rescale constant.
pub fn of_rescale(r: &Rescale) -> Exact {
    let num = i128::from(r.multiplier().mantissa()) << r.pre_shift();
    Exact::new(num, 1i128 << (31 + r.multiplier().right_shift()))
}

pub fn int(v: i64) -> Exact {
    Exact::from_integer(i128::from(v))
}

/// `clamp(round(v) + zero_point, 0, 2^b - 1)`.
pub fn to_code(v: &Exact, zero_point: i32, bits: BitWidth) -> i32 {
    let r = v.round().to_integer() + i128::from(zero_point);
    r.clamp(0, i128::from(bits.qmax())) as i32
}

/// `clamp(round(v) + qp.zero_point, ...)` for a stage's parameters.
pub fn to_stage(v: &Exact, qp: &QuantParams) -> i32 {
    to_code(v, qp.zero_point(), qp.bits())
}

/// Grid offset `q - Z` as an exact value.
pub fn offset(q: i32, qp: &QuantParams) -> Exact {
    int(i64::from(q - qp.zero_point()))
}
