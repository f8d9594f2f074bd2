//! Quantization-aware piecewise-linear (PWL) activations.
//!
//! A table approximates a scalar function `f` by chords between knots that are
//! drawn from the quantized input grid, so the approximation is exact at every
//! knot. Building starts from every grid point (`2^b - 1` pieces) and greedily
//! deletes the interior knot whose two adjacent chords have the most similar
//! slopes until the requested number of pieces remains.
//!
//! Integer evaluation locates the piece by binary search over the knot codes
//! and evaluates `slope * (q - q_k) + f(k) / S_y` with a fixed-point slope
//! and a Q32.32 intercept, rounding once before adding the output zero-point.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{IrnnError, Result};
use crate::exact::{self, Exact};
use crate::instrument::float_op;
use crate::quant::{round_shift, saturate, QuantParams, Rescale};

/// Fractional bits of the per-piece intercept constants.
const INTERCEPT_FRAC_BITS: u32 = 32;
const INTERCEPT_LIMIT: f64 = (1u64 << 62) as f64;

/// Scalar nonlinearities the engine approximates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Exp,
    Identity,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        float_op();
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
            Activation::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Exp => "exp",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = IrnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "exp" => Ok(Activation::Exp),
            "identity" => Ok(Activation::Identity),
            other => Err(IrnnError::InvalidModel(format!("unknown activation {other}"))),
        }
    }
}

/// How integer kernels evaluate their nonlinearities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ActivationMode {
    /// Integer PWL tables only.
    #[default]
    Pwl,
    /// Dequantize, apply the exact function in floating point, requantize.
    Float,
}

/// Look-up table `table[q] = quantize(f(dequantize(q)))` over the whole input grid.
pub fn build_lut<F: Fn(f64) -> f64>(f: F, in_qp: &QuantParams, out_qp: &QuantParams) -> Vec<i32> {
    (0..=in_qp.qmax())
        .map(|q| out_qp.quantize(f(in_qp.dequantize(q))))
        .collect()
}

/// Knots, chord slopes and knot values surviving [`select_knots`].
#[derive(Clone, Debug, PartialEq)]
pub struct KnotSelection {
    pub knots: Vec<f64>,
    pub slopes: Vec<f64>,
    /// `f` at every surviving knot (one more entry than `slopes`).
    pub intercepts: Vec<f64>,
}

#[derive(PartialEq)]
struct Candidate {
    diff: f64,
    index: usize,
    stamp: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Reversed so the max-heap pops the smallest difference, lowest index first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .diff
            .total_cmp(&self.diff)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn validate_knots(knots: &[f64], intercepts: &[f64], n_pieces: usize) -> Result<()> {
    if knots.len() != intercepts.len() {
        return Err(IrnnError::Dimension(format!(
            "{} knots but {} intercepts",
            knots.len(),
            intercepts.len()
        )));
    }
    if n_pieces < 1 || knots.len() < n_pieces + 1 {
        return Err(IrnnError::InvalidPieces {
            got: n_pieces,
            max: knots.len().saturating_sub(1),
        });
    }
    if knots.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less)) {
        return Err(IrnnError::Dimension("knots must be strictly increasing".into()));
    }
    Ok(())
}

/// Indices of the knots kept when reducing to `n_pieces` chords.
///
/// Each round removes the interior knot `j` minimizing
/// `|slope(j-1, j) - slope(j, j+1)|`; ties go to the lowest index. Runs in
/// `O(n log n)` using a heap with lazily invalidated entries.
pub fn select_knot_indices(knots: &[f64], intercepts: &[f64], n_pieces: usize) -> Result<Vec<usize>> {
    validate_knots(knots, intercepts, n_pieces)?;
    float_op();
    let n = knots.len();
    let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
    let mut next: Vec<usize> = (1..=n).collect();
    let mut alive = vec![true; n];
    let mut stamp = vec![0u32; n];

    let slope = |a: usize, b: usize| (intercepts[b] - intercepts[a]) / (knots[b] - knots[a]);
    let diff_at = |j: usize, prev: &[usize], next: &[usize]| {
        let p = prev[j];
        let q = next[j];
        (slope(p, j) - slope(j, q)).abs()
    };

    let mut heap = BinaryHeap::with_capacity(n);
    for j in 1..n.saturating_sub(1) {
        heap.push(Candidate {
            diff: diff_at(j, &prev, &next),
            index: j,
            stamp: 0,
        });
    }

    let mut pieces = n - 1;
    while pieces > n_pieces {
        let Some(c) = heap.pop() else { break };
        if !alive[c.index] || c.stamp != stamp[c.index] {
            continue;
        }
        let j = c.index;
        let (p, q) = (prev[j], next[j]);
        alive[j] = false;
        next[p] = q;
        prev[q] = p;
        pieces -= 1;
        for k in [p, q] {
            if k != 0 && k != n - 1 {
                stamp[k] += 1;
                heap.push(Candidate {
                    diff: diff_at(k, &prev, &next),
                    index: k,
                    stamp: stamp[k],
                });
            }
        }
    }
    Ok((0..n).filter(|&i| alive[i]).collect())
}

/// Greedy knot selection: reduces the chord interpolant through
/// `(knots, intercepts)` to `n_pieces` pieces, keeping both endpoints.
pub fn select_knots(knots: &[f64], intercepts: &[f64], n_pieces: usize) -> Result<KnotSelection> {
    let keep = select_knot_indices(knots, intercepts, n_pieces)?;
    let knots: Vec<f64> = keep.iter().map(|&i| knots[i]).collect();
    let intercepts: Vec<f64> = keep.iter().map(|&i| intercepts[i]).collect();
    let slopes = knots
        .windows(2)
        .zip(intercepts.windows(2))
        .map(|(k, b)| (b[1] - b[0]) / (k[1] - k[0]))
        .collect();
    Ok(KnotSelection {
        knots,
        slopes,
        intercepts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct PieceConst {
    slope: Rescale,
    negative: bool,
    /// `round(f(k) / S_y * 2^32)`
    intercept: i64,
}

/// A PWL approximation of one nonlinearity under frozen input/output
/// quantization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PwlTable {
    in_qp: QuantParams,
    out_qp: QuantParams,
    knots_q: Vec<i32>,
    knots_r: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
    pieces: Vec<PieceConst>,
    last_intercept: i64,
}

fn intercept_fx(value: f64, out_qp: &QuantParams) -> i64 {
    let v = (value / out_qp.scale() * (1u64 << INTERCEPT_FRAC_BITS) as f64).round();
    v.clamp(-INTERCEPT_LIMIT, INTERCEPT_LIMIT) as i64
}

impl PwlTable {
    /// Builds a table with `n_pieces` chords, starting from every input code.
    pub fn build<F: Fn(f64) -> f64>(
        f: F,
        in_qp: QuantParams,
        out_qp: QuantParams,
        n_pieces: usize,
    ) -> Result<Self> {
        let qmax = in_qp.qmax();
        if n_pieces < 1 || n_pieces > qmax as usize {
            return Err(IrnnError::InvalidPieces {
                got: n_pieces,
                max: qmax as usize,
            });
        }
        let grid: Vec<f64> = (0..=qmax).map(|q| in_qp.dequantize(q)).collect();
        let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
        let keep = select_knot_indices(&grid, &values, n_pieces)?;
        let knots_q = keep.iter().map(|&i| i as i32).collect();
        let values = keep.iter().map(|&i| values[i]).collect();
        PwlTable::from_knots(knots_q, values, in_qp, out_qp)
    }

    /// Builds one of the named activations.
    pub fn for_activation(
        act: Activation,
        in_qp: QuantParams,
        out_qp: QuantParams,
        n_pieces: usize,
    ) -> Result<Self> {
        PwlTable::build(|x| act.eval(x), in_qp, out_qp, n_pieces)
    }

    /// Rebuilds a table from its knot codes and the function values there.
    pub fn from_knots(
        knots_q: Vec<i32>,
        values: Vec<f64>,
        in_qp: QuantParams,
        out_qp: QuantParams,
    ) -> Result<Self> {
        float_op();
        if knots_q.len() < 2 || knots_q.len() != values.len() {
            return Err(IrnnError::Dimension(format!(
                "PWL needs >= 2 knots with one value each, got {} knots and {} values",
                knots_q.len(),
                values.len()
            )));
        }
        if knots_q[0] != 0 || *knots_q.last().unwrap() != in_qp.qmax() {
            return Err(IrnnError::InvalidModel("PWL endpoints must span the input grid".into()));
        }
        if knots_q.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IrnnError::InvalidModel("PWL knots must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IrnnError::InvalidModel("non-finite PWL knot value".into()));
        }
        let knots_r: Vec<f64> = knots_q.iter().map(|&q| in_qp.dequantize(q)).collect();
        let slopes: Vec<f64> = knots_r
            .windows(2)
            .zip(values.windows(2))
            .map(|(k, b)| (b[1] - b[0]) / (k[1] - k[0]))
            .collect();
        let ratio = in_qp.scale() / out_qp.scale();
        let pieces = slopes
            .iter()
            .zip(&values)
            .map(|(&a, &b)| {
                let units = a * ratio;
                Ok(PieceConst {
                    slope: Rescale::from_real_or_zero(units.abs())?,
                    negative: units < 0.0,
                    intercept: intercept_fx(b, &out_qp),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let last_intercept = intercept_fx(*values.last().unwrap(), &out_qp);
        Ok(PwlTable {
            in_qp,
            out_qp,
            knots_q,
            knots_r,
            values,
            slopes,
            pieces,
            last_intercept,
        })
    }

    pub fn in_qp(&self) -> &QuantParams {
        &self.in_qp
    }

    pub fn out_qp(&self) -> &QuantParams {
        &self.out_qp
    }

    pub fn n_pieces(&self) -> usize {
        self.slopes.len()
    }

    pub fn knots_q(&self) -> &[i32] {
        &self.knots_q
    }

    pub fn knots_r(&self) -> &[f64] {
        &self.knots_r
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// `b_i = f(k_i)` for each piece.
    pub fn intercepts(&self) -> &[f64] {
        &self.values[..self.slopes.len()]
    }

    /// `f` at every knot, including the last.
    pub fn knot_values(&self) -> &[f64] {
        &self.values
    }

    fn piece_of_code(&self, q: i32) -> usize {
        let p = self.knots_q.partition_point(|&k| k <= q);
        p.saturating_sub(1).min(self.slopes.len() - 1)
    }

    /// Index of the piece used for input code `q`.
    pub fn piece_index(&self, q: i32) -> usize {
        self.piece_of_code(q)
    }

    /// Real-valued chord interpolant `g(x)`; boundary pieces extend linearly.
    pub fn eval_real(&self, x: f64) -> f64 {
        float_op();
        let n = self.slopes.len();
        if x >= self.knots_r[n] {
            return self.values[n] + self.slopes[n - 1] * (x - self.knots_r[n]);
        }
        let i = self
            .knots_r
            .partition_point(|&k| k <= x)
            .saturating_sub(1)
            .min(n - 1);
        self.slopes[i] * (x - self.knots_r[i]) + self.values[i]
    }

    /// Integer-only evaluation of an input code.
    #[inline]
    pub fn eval_int(&self, q: i32) -> i32 {
        let q = q.clamp(0, self.in_qp.qmax());
        let n = self.slopes.len();
        let rounded = if q >= self.knots_q[n] {
            round_shift(i128::from(self.last_intercept), INTERCEPT_FRAC_BITS)
        } else {
            let i = self.piece_of_code(q);
            let p = &self.pieces[i];
            let d = i128::from(q - self.knots_q[i]);
            let ks = p.slope.total_shift();
            let k = ks.max(INTERCEPT_FRAC_BITS);
            let mut slope_term = (d * i128::from(p.slope.mantissa())) << (k - ks);
            if p.negative {
                slope_term = -slope_term;
            }
            let num = slope_term + (i128::from(p.intercept) << (k - INTERCEPT_FRAC_BITS));
            round_shift(num, k)
        };
        saturate(rounded as i64 + i64::from(self.out_qp.zero_point()), self.out_qp.bits())
    }

    /// Evaluates `q` under `mode`; `act` is the function the table approximates.
    #[inline]
    pub fn eval_mode(&self, act: Activation, mode: ActivationMode, q: i32) -> i32 {
        match mode {
            ActivationMode::Pwl => self.eval_int(q),
            ActivationMode::Float => self.out_qp.quantize(act.eval(self.in_qp.dequantize(q))),
        }
    }

    /// Reference evaluation in exact arithmetic with the table's fixed-point
    /// constants; locates the piece by linear scan.
    pub fn eval_fakequant(&self, q: i32) -> i32 {
        let q = q.clamp(0, self.in_qp.qmax());
        let n = self.slopes.len();
        let frac = Exact::from_integer(1i128 << INTERCEPT_FRAC_BITS);
        let v = if q == self.knots_q[n] {
            Exact::from_integer(i128::from(self.last_intercept)) / frac
        } else {
            let mut i = 0;
            while i + 1 < n && self.knots_q[i + 1] <= q {
                i += 1;
            }
            let p = &self.pieces[i];
            let mut slope = exact::of_rescale(&p.slope);
            if p.negative {
                slope = -slope;
            }
            slope * exact::int(i64::from(q - self.knots_q[i]))
                + Exact::from_integer(i128::from(p.intercept)) / frac
        };
        exact::to_stage(&v, &self.out_qp)
    }

    /// Evaluates every input code with the integer kernel.
    pub fn to_lut(&self) -> Vec<i32> {
        (0..=self.in_qp.qmax()).map(|q| self.eval_int(q)).collect()
    }

    /// Largest `|g(x) - f(x)|` over the input grid.
    pub fn max_abs_error<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        (0..=self.in_qp.qmax())
            .map(|q| {
                let x = self.in_qp.dequantize(q);
                (self.eval_real(x) - f(x)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Mean `|g(x) - f(x)|` over the input grid.
    pub fn mean_abs_error<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let n = self.in_qp.qmax() + 1;
        let total: f64 = (0..n)
            .map(|q| {
                let x = self.in_qp.dequantize(q);
                (self.eval_real(x) - f(x)).abs()
            })
            .sum();
        total / f64::from(n)
    }

    /// Writes `q_x,real_in,real_out,int_out,piece_index` for every input code.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "q_x,real_in,real_out,int_out,piece_index")?;
        for q in 0..=self.in_qp.qmax() {
            let x = self.in_qp.dequantize(q);
            writeln!(
                w,
                "{q},{x},{},{},{}",
                self.eval_real(x),
                self.eval_int(q),
                self.piece_of_code(q)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::BitWidth;
    use proptest::prelude::*;

    fn qp(min: f64, max: f64) -> QuantParams {
        QuantParams::new(min, max, BitWidth::B8).unwrap()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    // Recompute-everything reference: O(n^2), mirrors the published algorithm
    // step by step with the shared knot (j + 1) removed.
    fn reference_select(knots: &[f64], values: &[f64], n_pieces: usize) -> Vec<f64> {
        let mut k = knots.to_vec();
        let mut b = values.to_vec();
        loop {
            let slopes: Vec<f64> = (0..k.len() - 1).map(|i| (b[i + 1] - b[i]) / (k[i + 1] - k[i])).collect();
            if slopes.len() == n_pieces {
                return k;
            }
            let diffs: Vec<f64> = slopes.windows(2).map(|s| (s[0] - s[1]).abs()).collect();
            let mut arg = 0;
            for (i, d) in diffs.iter().enumerate() {
                if *d < diffs[arg] {
                    arg = i;
                }
            }
            k.remove(arg + 1);
            b.remove(arg + 1);
        }
    }

    #[test]
    fn lut_identity() {
        let p = qp(-1.0, 1.0);
        let lut = build_lut(|x| x, &p, &p);
        assert_eq!(lut, (0..=255).collect::<Vec<_>>());
    }

    #[test]
    fn lut_tanh_zero_maps_to_zero_point() {
        let p = qp(-1.0, 1.0);
        let lut = build_lut(f64::tanh, &p, &p);
        assert_eq!(lut[p.zero_point() as usize], p.zero_point());
    }

    #[test]
    fn lut_sigmoid_is_monotone() {
        let lut = build_lut(sigmoid, &qp(-8.0, 8.0), &qp(0.0, 1.0));
        assert!(lut.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(lut[0], 0);
        assert_eq!(lut[255], 255);
    }

    #[test]
    fn select_base_case_returns_input() {
        let k = [0.0, 1.0, 2.0, 4.0];
        let b = [0.0, 1.0, 0.0, 3.0];
        let s = select_knots(&k, &b, 3).unwrap();
        assert_eq!(s.knots, k.to_vec());
        assert_eq!(s.intercepts, b.to_vec());
        assert_eq!(s.slopes, vec![1.0, -1.0, 1.5]);
    }

    #[test]
    fn select_collinear_is_deterministic() {
        let k: Vec<f64> = (0..10).map(f64::from).collect();
        let b: Vec<f64> = k.iter().map(|x| 2.0 * x).collect();
        let s = select_knots(&k, &b, 1).unwrap();
        assert_eq!(s.knots, vec![0.0, 9.0]);
        assert_eq!(s.slopes, vec![2.0]);
        // Ties remove the lowest index first.
        let s = select_knots(&k, &b, 3).unwrap();
        assert_eq!(s.knots, vec![0.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn select_removes_the_shared_knot() {
        // Slopes 1, 1, 5: the pair (1, 1) shares knot 1.
        let k = [0.0, 1.0, 2.0, 3.0];
        let b = [0.0, 1.0, 2.0, 7.0];
        let s = select_knots(&k, &b, 2).unwrap();
        assert_eq!(s.knots, vec![0.0, 2.0, 3.0]);
    }

    #[test]
    fn select_rejects_bad_requests() {
        let k = [0.0, 1.0, 2.0];
        let b = [0.0, 1.0, 0.0];
        assert!(matches!(select_knots(&k, &b, 0), Err(IrnnError::InvalidPieces { .. })));
        assert!(select_knots(&k, &b, 3).is_err());
        assert!(select_knots(&k, &b[..2], 1).is_err());
        assert!(select_knots(&[0.0, 0.0, 1.0], &b, 1).is_err());
    }

    #[test]
    fn tanh_knots_cluster_at_curvature() {
        let p = qp(-4.0, 4.0);
        let grid: Vec<f64> = (0..=255).map(|q| p.dequantize(q)).collect();
        let vals: Vec<f64> = grid.iter().map(|x| x.tanh()).collect();
        let s = select_knots(&grid, &vals, 4).unwrap();
        assert_eq!(s.knots, reference_select(&grid, &vals, 4));
        // tanh curvature peaks near |x| = 0.66; interior knots sit inside the
        // bending region, not in the flat tails.
        for k in &s.knots[1..4] {
            assert!(k.abs() < 2.5, "interior knot {k} in a flat tail");
        }
    }

    #[test]
    fn full_knot_table_equals_lut() {
        for (f, inp, out) in [
            (sigmoid as fn(f64) -> f64, qp(-8.0, 8.0), qp(0.0, 1.0)),
            (f64::tanh, qp(-4.0, 4.0), qp(-1.0, 1.0)),
            (f64::exp, qp(-10.0, 0.0), qp(0.0, 1.0)),
        ] {
            let t = PwlTable::build(f, inp, out, 255).unwrap();
            assert_eq!(t.to_lut(), build_lut(f, &inp, &out));
        }
    }

    #[test]
    fn single_piece_identity() {
        let p = qp(-1.0, 1.0);
        let t = PwlTable::build(|x| x, p, p, 1).unwrap();
        assert_eq!(t.n_pieces(), 1);
        assert!((t.slopes()[0] - 1.0).abs() < 1e-12);
        assert_eq!(t.intercepts()[0], p.dequantize(0));
        assert_eq!(t.to_lut(), (0..=255).collect::<Vec<_>>());
    }

    #[test]
    fn more_pieces_reduce_tanh_error() {
        let p = qp(-4.0, 4.0);
        let out = qp(-1.0, 1.0);
        let e4 = PwlTable::build(f64::tanh, p, out, 4).unwrap().max_abs_error(f64::tanh);
        let e16 = PwlTable::build(f64::tanh, p, out, 16).unwrap().max_abs_error(f64::tanh);
        assert!(e16 < e4, "e16={e16} e4={e4}");
    }

    #[test]
    fn real_eval_exact_at_knots_and_linear_between() {
        let p = qp(-4.0, 4.0);
        let t = PwlTable::build(f64::tanh, p, qp(-1.0, 1.0), 8).unwrap();
        for (k, v) in t.knots_r().iter().zip(t.knot_values()) {
            assert_eq!(t.eval_real(*k), *v);
            assert_eq!(*v, k.tanh());
        }
        let lin = PwlTable::build(|x| 2.0 * x + 0.5, p, qp(-9.0, 9.0), 5).unwrap();
        let (k0, k1) = (lin.knots_r()[1], lin.knots_r()[2]);
        let mid = 0.5 * (k0 + k1);
        assert!((lin.eval_real(mid) - (2.0 * mid + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn real_eval_extrapolates_first_piece() {
        let t = PwlTable::build(f64::tanh, qp(-4.0, 4.0), qp(-1.0, 1.0), 4).unwrap();
        let (a, k, b) = (t.slopes()[0], t.knots_r()[0], t.knot_values()[0]);
        let want = a * (-10.0 - k) + b;
        assert_eq!(t.eval_real(-10.0), want);
        assert!(want < b);
    }

    #[test]
    fn int_eval_at_knots_is_quantized_value() {
        let inp = qp(-4.0, 4.0);
        let out = qp(-1.0, 1.0);
        let t = PwlTable::build(f64::tanh, inp, out, 8).unwrap();
        for (&q, &v) in t.knots_q().iter().zip(t.knot_values()) {
            assert_eq!(t.eval_int(q), out.quantize(v));
        }
    }

    #[test]
    fn int_eval_tracks_real_eval_exhaustively() {
        let cases: Vec<(Activation, QuantParams, QuantParams)> = vec![
            (Activation::Tanh, qp(-4.0, 4.0), qp(-1.0, 1.0)),
            (Activation::Sigmoid, qp(-8.0, 8.0), qp(0.0, 1.0)),
            (Activation::Exp, qp(-12.0, 0.0), qp(0.0, 1.0)),
            (Activation::Tanh, qp(-1.3, 2.9), qp(-0.9, 1.0)),
            (Activation::Sigmoid, qp(-0.7, 5.3), qp(0.0, 0.99)),
        ];
        for (act, inp, out) in cases {
            for n in [1, 2, 4, 8, 16, 32, 64, 255] {
                let t = PwlTable::for_activation(act, inp, out, n).unwrap();
                let mut off_by_one = 0;
                for q in 0..=255 {
                    let want = out.quantize(t.eval_real(inp.dequantize(q)));
                    let got = t.eval_int(q);
                    // Fixed-point constants can only move results sitting on a
                    // rounding tie.
                    assert!((got - want).abs() <= 1, "{act} n={n} q={q}: {got} vs {want}");
                    off_by_one += usize::from(got != want);
                    assert_eq!(t.eval_fakequant(q), got);
                }
                assert!(off_by_one <= 2, "{act} n={n}: {off_by_one} codes differ");
            }
        }
    }

    #[test]
    fn tanh_table_is_monotone() {
        let t = PwlTable::build(f64::tanh, qp(-4.0, 4.0), qp(-1.0, 1.0), 8).unwrap();
        assert!(t.to_lut().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sixteen_bit_input_tables() {
        let inp = QuantParams::new(-6.0, 6.0, BitWidth::B16).unwrap();
        let out = qp(-1.0, 1.0);
        let t = PwlTable::for_activation(Activation::Tanh, inp, out, 96).unwrap();
        assert_eq!(t.n_pieces(), 96);
        for q in (0..=65535).step_by(37) {
            let want = out.quantize(t.eval_real(inp.dequantize(q)));
            assert!((t.eval_int(q) - want).abs() <= 1);
            assert_eq!(t.eval_fakequant(q), t.eval_int(q));
        }
    }

    #[test]
    fn csv_dump_has_one_row_per_code() {
        let t = PwlTable::build(f64::tanh, qp(-4.0, 4.0), qp(-1.0, 1.0), 4).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 257);
        assert!(text.starts_with("q_x,real_in,real_out,int_out,piece_index\n"));
    }

    #[test]
    fn rejects_bad_piece_counts() {
        let p = qp(-1.0, 1.0);
        assert!(PwlTable::build(|x| x, p, p, 0).is_err());
        assert!(PwlTable::build(|x| x, p, p, 256).is_err());
    }

    proptest! {
        #[test]
        fn select_matches_reference_and_keeps_endpoints(
            raw in proptest::collection::vec(-5.0f64..5.0, 3..40),
            steps in proptest::collection::vec(0.01f64..2.0, 40),
            frac in 0.0f64..1.0,
        ) {
            let n = raw.len();
            let mut knots = Vec::with_capacity(n);
            let mut acc = -3.0;
            for s in steps.iter().take(n) {
                acc += s;
                knots.push(acc);
            }
            let target = 1 + ((n - 2) as f64 * frac) as usize;
            let s = select_knots(&knots, &raw, target).unwrap();
            prop_assert_eq!(s.knots.len(), target + 1);
            prop_assert_eq!(s.knots[0], knots[0]);
            prop_assert_eq!(*s.knots.last().unwrap(), knots[n - 1]);
            prop_assert_eq!(s.knots, reference_select(&knots, &raw, target));
        }
    }
}
