//! 8-bit matrix-vector products with 32-bit accumulation.

use crate::error::{IrnnError, Result};
use crate::exact::{self, Exact};
use crate::quant::{min_max, BitWidth, QuantParams, QuantTensor, Rescale};

/// Largest input width whose worst-case 8-bit dot product fits in an `i32`.
pub const MAX_DIM: usize = 16384;

/// A quantized weight matrix `rows x cols` (row-major) with an optional
/// 32-bit bias at scale `S_w * S_in`.
///
/// Weights are kept centered (`q - Z_w`) so the inner loop is a plain
/// `i32` multiply-add.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantMatrix {
    rows: usize,
    cols: usize,
    weights: QuantTensor,
    centered: Vec<i32>,
    bias: Option<Vec<i32>>,
}

impl QuantMatrix {
    /// Quantizes real weights to 8 bits with a range fitted to the data.
    pub fn quantize(
        weights: &[f64],
        rows: usize,
        cols: usize,
        bias: Option<&[f64]>,
        in_qp: &QuantParams,
    ) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(IrnnError::Dimension(format!(
                "weight matrix {rows}x{cols} given {} values",
                weights.len()
            )));
        }
        let (lo, hi) = min_max(weights);
        let wqp = if lo == 0.0 && hi == 0.0 {
            QuantParams::new(-1.0, 1.0, BitWidth::B8)?
        } else {
            QuantParams::new(lo, hi, BitWidth::B8)?
        };
        let tensor = QuantTensor::quantize(vec![rows, cols], weights, wqp)?;
        let bias = match bias {
            None => None,
            Some(b) => {
                if b.len() != rows {
                    return Err(IrnnError::Dimension(format!("bias of {} for {rows} rows", b.len())));
                }
                let s = wqp.scale() * in_qp.scale();
                Some(
                    b.iter()
                        .map(|&v| (v / s).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                        .collect(),
                )
            }
        };
        QuantMatrix::from_parts(tensor, bias)
    }

    /// Assembles a matrix from stored codes and bias.
    pub fn from_parts(weights: QuantTensor, bias: Option<Vec<i32>>) -> Result<Self> {
        let &[rows, cols] = weights.shape() else {
            return Err(IrnnError::Dimension(format!(
                "weight tensor must be 2-D, got {:?}",
                weights.shape()
            )));
        };
        if weights.qparams().bits() != BitWidth::B8 {
            return Err(IrnnError::StageBitwidth {
                stage: "weights".into(),
                expected: 8,
                got: weights.qparams().bits().bits(),
            });
        }
        if cols > MAX_DIM || rows == 0 || cols == 0 {
            return Err(IrnnError::Dimension(format!("matrix {rows}x{cols} outside supported size")));
        }
        if let Some(b) = &bias {
            if b.len() != rows {
                return Err(IrnnError::Dimension(format!("bias of {} for {rows} rows", b.len())));
            }
        }
        let z = weights.qparams().zero_point();
        let centered = weights.data().iter().map(|&q| i32::from(q) - z).collect();
        Ok(QuantMatrix {
            rows,
            cols,
            weights,
            centered,
            bias,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &QuantTensor {
        &self.weights
    }

    pub fn weight_qp(&self) -> &QuantParams {
        self.weights.qparams()
    }

    pub fn bias(&self) -> Option<&[i32]> {
        self.bias.as_deref()
    }

    /// Centered weight `q - Z_w` at `(r, c)`.
    pub fn centered(&self, r: usize, c: usize) -> i32 {
        self.centered[r * self.cols + c]
    }

    /// Real weights recovered from the codes.
    pub fn dequantize(&self) -> Vec<f64> {
        self.weights.dequantize()
    }

    /// `acc[r] = sum_c (w[r,c] - Z_w) * (x[c] - in_zero_point) + bias[r]`.
    ///
    /// Inputs are 8-bit codes, so `|acc| <= cols * 255^2 + |bias|`.
    #[inline]
    pub fn accumulate(&self, x: &[i32], in_zero_point: i32, acc: &mut [i32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(acc.len(), self.rows);
        let xc: Vec<i32> = x.iter().map(|&v| v - in_zero_point).collect();
        for (r, out) in acc.iter_mut().enumerate() {
            let row = &self.centered[r * self.cols..(r + 1) * self.cols];
            let dot: i32 = row.iter().zip(&xc).map(|(&w, &v)| w * v).sum();
            *out = dot.wrapping_add(self.bias.as_ref().map_or(0, |b| b[r]));
        }
    }

    /// Accumulates then requantizes with `rescale = S_w * S_in / S_out`.
    pub fn forward(&self, x: &[i32], in_zero_point: i32, rescale: &Rescale, out: &QuantParams) -> Vec<i32> {
        let mut acc = vec![0i32; self.rows];
        self.accumulate(x, in_zero_point, &mut acc);
        acc.iter()
            .map(|&a| rescale.requantize(i64::from(a), out.zero_point(), out.bits()))
            .collect()
    }

    /// Exact reference for [`QuantMatrix::forward`].
    pub fn forward_fakequant(
        &self,
        x: &[i32],
        in_zero_point: i32,
        rescale: &Rescale,
        out: &QuantParams,
    ) -> Vec<i32> {
        let r = exact::of_rescale(rescale);
        (0..self.rows)
            .map(|row| {
                let mut acc = Exact::from_integer(0);
                for (c, &xv) in x.iter().enumerate() {
                    acc += exact::int(i64::from(self.centered(row, c)) * i64::from(xv - in_zero_point));
                }
                if let Some(b) = &self.bias {
                    acc += exact::int(i64::from(b[row]));
                }
                exact::to_stage(&(acc * r), out)
            })
            .collect()
    }
}

/// Rescale for a matmul result: `S_w * S_in / S_out`.
pub fn matmul_rescale(m: &QuantMatrix, in_qp: &QuantParams, out_qp: &QuantParams) -> Result<Rescale> {
    Rescale::from_real(m.weight_qp().scale() * in_qp.scale() / out_qp.scale())
}

/// Dense real matrix-vector product, `rows x cols` row-major.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    crate::instrument::float_op();
    debug_assert_eq!(w.len(), rows * cols);
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantized_matvec_tracks_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, cols) = (6, 9);
        let w: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.2..0.2)).collect();
        let in_qp = QuantParams::new(-1.0, 1.0, BitWidth::B8).unwrap();
        let out_qp = QuantParams::new(-3.0, 3.0, BitWidth::B8).unwrap();
        let m = QuantMatrix::quantize(&w, rows, cols, Some(&b), &in_qp).unwrap();
        let rs = matmul_rescale(&m, &in_qp, &out_qp).unwrap();
        let x: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qx = in_qp.quantize_slice(&x);
        let got = out_qp.dequantize_slice(&m.forward(&qx, in_qp.zero_point(), &rs, &out_qp));
        let mut want = matvec(&w, rows, cols, &x);
        for (y, bb) in want.iter_mut().zip(&b) {
            *y += bb;
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 0.1, "{g} vs {w}");
        }
        assert_eq!(m.forward_fakequant(&qx, in_qp.zero_point(), &rs, &out_qp), m.forward(&qx, in_qp.zero_point(), &rs, &out_qp));
    }

    #[test]
    fn zero_input_gives_bias_only() {
        let in_qp = QuantParams::new(-1.0, 1.0, BitWidth::B8).unwrap();
        let m = QuantMatrix::quantize(&[0.3, -0.2, 0.1, 0.4], 2, 2, Some(&[0.0, 0.0]), &in_qp).unwrap();
        let mut acc = vec![7; 2];
        m.accumulate(&[in_qp.zero_point(); 2], in_qp.zero_point(), &mut acc);
        assert_eq!(acc, vec![0, 0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let in_qp = QuantParams::new(-1.0, 1.0, BitWidth::B8).unwrap();
        assert!(QuantMatrix::quantize(&[0.0; 5], 2, 2, None, &in_qp).is_err());
        assert!(QuantMatrix::quantize(&[0.0; 4], 2, 2, Some(&[0.0]), &in_qp).is_err());
    }
}
