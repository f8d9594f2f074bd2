//! Integer-only LSTM cell.
//!
//! Per step: two 8-bit matmuls requantized to their own 8-bit parameters
//! (optionally MadNorm-ed), summed per gate block into that block's
//! pre-activation parameters (8 or 16 bits), PWL activations to 8 bits, the
//! two cell products requantized to the cell bitwidth and summed into `c`,
//! and `h = sigmoid(o) * tanh(c)` requantized to 8 bits.

use crate::error::{IrnnError, Result};
use crate::exact::{self, Exact};
use crate::linear::{matmul_rescale, QuantMatrix};
use crate::madnorm::{MadNorm, MadNormAffine, MadNormQParams};
use crate::pwl::{ActivationMode, PwlTable};
use crate::quant::{rescale_sum2, rescale_sum3, saturate, BitWidth, QuantParams, QuantTensor, Rescale};

use super::{Direction, LstmWeights, NormWeights, GATE_ACTIVATIONS, GATE_NAMES, NORM_NAMES};

/// Output parameters of every sigmoid table: `[0, 1]`, 8 bits.
pub fn sigmoid_out_qp() -> QuantParams {
    QuantParams::new(0.0, 1.0, BitWidth::B8).expect("valid range")
}

/// Output parameters of every tanh table: `[-1, 1]`, 8 bits.
pub fn tanh_out_qp() -> QuantParams {
    QuantParams::new(-1.0, 1.0, BitWidth::B8).expect("valid range")
}

fn act_out_qp(k: usize) -> QuantParams {
    match GATE_ACTIVATIONS[k] {
        crate::pwl::Activation::Tanh => tanh_out_qp(),
        _ => sigmoid_out_qp(),
    }
}

/// Calibrated parameters of every stage of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStages {
    /// Layer input, 8-bit.
    pub x: QuantParams,
    /// Hidden state, 8-bit.
    pub h: QuantParams,
    /// `W_x x` (plus bias in the plain cell), 8-bit.
    pub wx: QuantParams,
    /// `W_h h`, 8-bit.
    pub wh: QuantParams,
    /// Attention context `s` and `W_s s`, both 8-bit, for decoder cells.
    pub context: Option<(QuantParams, QuantParams)>,
    /// Pre-activations per gate block `(i, f, j, o)`.
    pub gates: [QuantParams; 4],
    /// `sigmoid(f) * c_{t-1}`, at the cell bitwidth.
    pub fc: QuantParams,
    /// `sigmoid(i) * tanh(j)`, at the cell bitwidth.
    pub ij: QuantParams,
    pub c: QuantParams,
}

/// Calibrated stages of one MadNorm inside a cell.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStages {
    pub mu: QuantParams,
    pub xhat: QuantParams,
    pub d: QuantParams,
    pub y: QuantParams,
    pub out: QuantParams,
}

type Lookup<'a> = dyn Fn(&str, BitWidth) -> Result<QuantParams> + 'a;

impl LstmStages {
    /// Collects the stages named `{prefix}.wx`, `{prefix}.gate.i`, ... from `get`.
    pub fn lookup(
        prefix: &str,
        x: QuantParams,
        h: QuantParams,
        context: Option<QuantParams>,
        gate_bits: BitWidth,
        cell_bits: BitWidth,
        get: &Lookup<'_>,
    ) -> Result<Self> {
        let g = |name: &str, bits| get(&format!("{prefix}.{name}"), bits);
        let gates = [
            g("gate.i", gate_bits)?,
            g("gate.f", gate_bits)?,
            g("gate.j", gate_bits)?,
            g("gate.o", gate_bits)?,
        ];
        Ok(LstmStages {
            x,
            h,
            wx: g("wx", BitWidth::B8)?,
            wh: g("wh", BitWidth::B8)?,
            context: match context {
                None => None,
                Some(s) => Some((s, g("ws", BitWidth::B8)?)),
            },
            gates,
            fc: g("fc", cell_bits)?,
            ij: g("ij", cell_bits)?,
            c: g("c", cell_bits)?,
        })
    }

    /// Names of the stages [`LstmStages::lookup`] reads, for calibration.
    pub fn stage_names(prefix: &str, context: bool, normalized: bool) -> Vec<String> {
        let mut v: Vec<String> = ["wx", "wh"].iter().map(|s| format!("{prefix}.{s}")).collect();
        if context {
            v.push(format!("{prefix}.ws"));
        }
        v.extend(GATE_NAMES.iter().map(|g| format!("{prefix}.gate.{g}")));
        v.extend(["fc", "ij", "c"].iter().map(|s| format!("{prefix}.{s}")));
        if normalized {
            for n in NORM_NAMES {
                v.extend(NormStages::NAMES.iter().map(|s| format!("{prefix}.{n}.{s}")));
            }
        }
        v
    }
}

impl NormStages {
    pub const NAMES: [&'static str; 5] = ["mu", "xhat", "d", "y", "out"];

    pub fn lookup(prefix: &str, get: &Lookup<'_>) -> Result<Self> {
        let g = |name: &str| get(&format!("{prefix}.{name}"), BitWidth::B8);
        Ok(NormStages {
            mu: g("mu")?,
            xhat: g("xhat")?,
            d: g("d")?,
            y: g("y")?,
            out: g("out")?,
        })
    }

    /// All three norms of a cell, in `norm_x`, `norm_h`, `norm_c` order.
    pub fn lookup_cell(prefix: &str, get: &Lookup<'_>) -> Result<[NormStages; 3]> {
        Ok([
            NormStages::lookup(&format!("{prefix}.{}", NORM_NAMES[0]), get)?,
            NormStages::lookup(&format!("{prefix}.{}", NORM_NAMES[1]), get)?,
            NormStages::lookup(&format!("{prefix}.{}", NORM_NAMES[2]), get)?,
        ])
    }
}

/// Quantized hidden and cell state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QState {
    pub h: Vec<i32>,
    pub c: Vec<i32>,
}

/// The additive terms of the gate pre-activations, each under its own
/// 8-bit parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatePreactivations {
    pub x: Vec<i32>,
    pub h: Vec<i32>,
    pub s: Option<Vec<i32>>,
}

fn require_bits(stage: &str, qp: &QuantParams, bits: BitWidth) -> Result<()> {
    if qp.bits() != bits {
        return Err(IrnnError::StageBitwidth {
            stage: stage.into(),
            expected: bits.bits(),
            got: qp.bits().bits(),
        });
    }
    Ok(())
}

fn require_same(what: &str, a: &QuantParams, b: &QuantParams) -> Result<()> {
    if a != b {
        return Err(IrnnError::SharedQParams(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> Result<Rescale> {
    Rescale::from_real(num / den)
}

#[derive(Clone, Debug, PartialEq)]
struct CellRescales {
    wx: Rescale,
    wh: Rescale,
    ws: Rescale,
    gx: [Rescale; 4],
    gh: [Rescale; 4],
    gs: [Rescale; 4],
    fc: Rescale,
    ij: Rescale,
    c_fc: Rescale,
    c_ij: Rescale,
    h: Rescale,
}

/// Integer LSTM cell with all fixed-point constants precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct IntLstmCell {
    stages: LstmStages,
    w_x: QuantMatrix,
    w_h: QuantMatrix,
    w_s: Option<QuantMatrix>,
    norms: Option<Box<[MadNorm; 3]>>,
    acts: [PwlTable; 4],
    tanh_c: PwlTable,
    r: CellRescales,
    mode: ActivationMode,
}

impl IntLstmCell {
    /// Assembles a cell from quantized parts and validates every stage.
    pub fn new(
        stages: LstmStages,
        w_x: QuantMatrix,
        w_h: QuantMatrix,
        w_s: Option<QuantMatrix>,
        norms: Option<[MadNorm; 3]>,
        acts: [PwlTable; 4],
        tanh_c: PwlTable,
    ) -> Result<Self> {
        let m = w_h.cols();
        let g = 4 * m;
        if w_h.rows() != g || w_x.rows() != g {
            return Err(IrnnError::Dimension(format!(
                "gate rows: W_x {}, W_h {}, expected {g}",
                w_x.rows(),
                w_h.rows()
            )));
        }
        for (name, qp) in [("x", &stages.x), ("h", &stages.h), ("wx", &stages.wx), ("wh", &stages.wh)] {
            require_bits(name, qp, BitWidth::B8)?;
        }
        let cb = stages.c.bits();
        require_bits("fc", &stages.fc, cb)?;
        require_bits("ij", &stages.ij, cb)?;
        match (&w_s, &stages.context) {
            (None, None) => {}
            (Some(ws), Some((s, wsq))) => {
                require_bits("s", s, BitWidth::B8)?;
                require_bits("ws", wsq, BitWidth::B8)?;
                if ws.rows() != g {
                    return Err(IrnnError::Dimension(format!("W_s has {} rows, expected {g}", ws.rows())));
                }
            }
            _ => return Err(IrnnError::InvalidModel("context weights and stages must come together".into())),
        }
        let (tx, th) = match &norms {
            None => (stages.wx, stages.wh),
            Some(n) => {
                require_same("norm_x input", n[0].in_qp(), &stages.wx)?;
                require_same("norm_h input", n[1].in_qp(), &stages.wh)?;
                require_same("norm_c input", n[2].in_qp(), &stages.c)?;
                for (k, want) in [g, g, m].into_iter().enumerate() {
                    if n[k].width().is_some_and(|w| w != want) {
                        return Err(IrnnError::Dimension(format!("{} width mismatch", NORM_NAMES[k])));
                    }
                }
                (*n[0].out_qp(), *n[1].out_qp())
            }
        };
        for k in 0..4 {
            require_same(&format!("gate {} table input", GATE_NAMES[k]), acts[k].in_qp(), &stages.gates[k])?;
            require_same(&format!("gate {} table output", GATE_NAMES[k]), acts[k].out_qp(), &act_out_qp(k))?;
        }
        let c_out = norms.as_ref().map_or(stages.c, |n| *n[2].out_qp());
        require_same("output tanh input", tanh_c.in_qp(), &c_out)?;
        require_same("output tanh output", tanh_c.out_qp(), &tanh_out_qp())?;

        let (sig, tanh) = (sigmoid_out_qp().scale(), tanh_out_qp().scale());
        let ts = stages.context.map(|c| c.1);
        let per_gate = |term: Option<QuantParams>| -> Result<[Rescale; 4]> {
            let mut out = [Rescale::ZERO; 4];
            if let Some(t) = term {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = ratio(t.scale(), stages.gates[k].scale())?;
                }
            }
            Ok(out)
        };
        let r = CellRescales {
            wx: matmul_rescale(&w_x, &stages.x, &stages.wx)?,
            wh: matmul_rescale(&w_h, &stages.h, &stages.wh)?,
            ws: match (&w_s, &stages.context) {
                (Some(w), Some((s, wsq))) => matmul_rescale(w, s, wsq)?,
                _ => Rescale::ZERO,
            },
            gx: per_gate(Some(tx))?,
            gh: per_gate(Some(th))?,
            gs: per_gate(ts)?,
            fc: ratio(sig * stages.c.scale(), stages.fc.scale())?,
            ij: ratio(sig * tanh, stages.ij.scale())?,
            c_fc: ratio(stages.fc.scale(), stages.c.scale())?,
            c_ij: ratio(stages.ij.scale(), stages.c.scale())?,
            h: ratio(sig * tanh, stages.h.scale())?,
        };
        Ok(IntLstmCell {
            stages,
            w_x,
            w_h,
            w_s,
            norms: norms.map(Box::new),
            acts,
            tanh_c,
            r,
            mode: ActivationMode::Pwl,
        })
    }

    /// Quantizes real weights and builds every table with `pieces` pieces.
    ///
    /// In the normalized cell the bias moves into the input-side norm shift.
    pub fn build(
        w: &LstmWeights,
        norm: Option<(&NormWeights, &[NormStages; 3])>,
        w_s: Option<&[f64]>,
        stages: LstmStages,
        pieces: usize,
    ) -> Result<Self> {
        let m = w.hidden_size;
        let g = 4 * m;
        let bias = if norm.is_some() { None } else { Some(w.bias.as_slice()) };
        let w_x = QuantMatrix::quantize(&w.w_x, g, w.input_size, bias, &stages.x)?;
        let w_h = QuantMatrix::quantize(&w.w_h, g, m, None, &stages.h)?;
        let w_s = match (w_s, &stages.context) {
            (Some(ws), Some((s, _))) => Some(QuantMatrix::quantize(ws, g, ws.len() / g.max(1), None, s)?),
            (None, None) => None,
            _ => return Err(IrnnError::InvalidModel("context weights and stages must come together".into())),
        };
        let norms = match norm {
            None => None,
            Some((nw, ns)) => {
                nw.validate(m)?;
                let inputs = [stages.wx, stages.wh, stages.c];
                let mut built = Vec::with_capacity(3);
                for k in 0..3 {
                    let (gamma, beta) = nw.affine(k, &w.bias);
                    let s = &ns[k];
                    built.push(MadNorm::new(MadNormQParams {
                        qp_x: inputs[k],
                        qp_mu: s.mu,
                        qp_xhat: s.xhat,
                        qp_d: s.d,
                        qp_y: s.y,
                        affine: Some(MadNormAffine {
                            gamma: QuantTensor::quantize_fitted(vec![gamma.len()], &gamma, BitWidth::B8)?,
                            beta: QuantTensor::quantize_fitted(vec![beta.len()], &beta, BitWidth::B8)?,
                            qp_out: s.out,
                        }),
                    })?);
                }
                let arr: [MadNorm; 3] = built.try_into().expect("three norms");
                Some(arr)
            }
        };
        let mut acts = Vec::with_capacity(4);
        for k in 0..4 {
            acts.push(PwlTable::for_activation(GATE_ACTIVATIONS[k], stages.gates[k], act_out_qp(k), pieces)?);
        }
        let acts: [PwlTable; 4] = acts.try_into().expect("four tables");
        let c_out = norms.as_ref().map_or(stages.c, |n| *n[2].out_qp());
        let tanh_c = PwlTable::for_activation(crate::pwl::Activation::Tanh, c_out, tanh_out_qp(), pieces)?;
        IntLstmCell::new(stages, w_x, w_h, w_s, norms, acts, tanh_c)
    }

    pub fn hidden_size(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input_size(&self) -> usize {
        self.w_x.cols()
    }

    pub fn stages(&self) -> &LstmStages {
        &self.stages
    }

    pub fn w_x(&self) -> &QuantMatrix {
        &self.w_x
    }

    pub fn w_h(&self) -> &QuantMatrix {
        &self.w_h
    }

    pub fn w_s(&self) -> Option<&QuantMatrix> {
        self.w_s.as_ref()
    }

    pub fn norms(&self) -> Option<&[MadNorm; 3]> {
        self.norms.as_deref()
    }

    pub fn gate_tables(&self) -> &[PwlTable; 4] {
        &self.acts
    }

    pub fn output_table(&self) -> &PwlTable {
        &self.tanh_c
    }

    pub fn activation_mode(&self) -> ActivationMode {
        self.mode
    }

    pub fn set_activation_mode(&mut self, mode: ActivationMode) {
        self.mode = mode;
    }

    /// `h = Z_h`, `c = Z_c`: the quantized zero state.
    pub fn zero_state(&self) -> QState {
        let m = self.hidden_size();
        QState {
            h: vec![self.stages.h.zero_point(); m],
            c: vec![self.stages.c.zero_point(); m],
        }
    }

    /// The `W_x x` and `W_h h` terms (normalized in the MadNorm cell).
    pub fn gate_terms(&self, x: &[i32], h: &[i32]) -> GatePreactivations {
        let mut tx = self.w_x.forward(x, self.stages.x.zero_point(), &self.r.wx, &self.stages.wx);
        let mut th = self.w_h.forward(h, self.stages.h.zero_point(), &self.r.wh, &self.stages.wh);
        if let Some(n) = &self.norms {
            tx = n[0].forward(&tx);
            th = n[1].forward(&th);
        }
        GatePreactivations { x: tx, h: th, s: None }
    }

    /// Adds the `W_s s` term for an 8-bit context `s`.
    pub fn inject_context(&self, mut pre: GatePreactivations, s: &[i32]) -> GatePreactivations {
        if let (Some(w), Some((qs, qws))) = (&self.w_s, &self.stages.context) {
            pre.s = Some(w.forward(s, qs.zero_point(), &self.r.ws, qws));
        }
        pre
    }

    fn term_qps(&self) -> (QuantParams, QuantParams, Option<QuantParams>) {
        match &self.norms {
            None => (self.stages.wx, self.stages.wh, self.stages.context.map(|c| c.1)),
            Some(n) => (*n[0].out_qp(), *n[1].out_qp(), self.stages.context.map(|c| c.1)),
        }
    }

    /// Per-block single-rounding sum of the terms into the gate parameters.
    pub fn gate_sums(&self, pre: &GatePreactivations) -> Vec<i32> {
        let m = self.hidden_size();
        let (qx, qh, qs) = self.term_qps();
        let (zx, zh) = (i64::from(qx.zero_point()), i64::from(qh.zero_point()));
        let mut out = vec![0i32; 4 * m];
        for k in 0..4 {
            let gq = &self.stages.gates[k];
            for u in 0..m {
                let i = k * m + u;
                let a = i64::from(pre.x[i]) - zx;
                let b = i64::from(pre.h[i]) - zh;
                let v = match (&pre.s, &qs) {
                    (Some(s), Some(q)) => {
                        let c = i64::from(s[i] - q.zero_point());
                        rescale_sum3(a, &self.r.gx[k], b, &self.r.gh[k], c, &self.r.gs[k])
                    }
                    _ => rescale_sum2(a, &self.r.gx[k], b, &self.r.gh[k]),
                };
                out[i] = saturate(v + i64::from(gq.zero_point()), gq.bits());
            }
        }
        out
    }

    /// Activations, cell update and output from gate pre-activation codes.
    pub fn finish(&self, gates: &[i32], c_prev: &[i32]) -> QState {
        let m = self.hidden_size();
        let act = |k: usize, u: usize| {
            i64::from(self.acts[k].eval_mode(GATE_ACTIVATIONS[k], self.mode, gates[k * m + u]))
        };
        let zt = i64::from(self.tanh_c.out_qp().zero_point());
        let zs = i64::from(self.acts[0].out_qp().zero_point());
        let st = &self.stages;
        let (zc, zfc, zij) = (st.c.zero_point(), st.fc.zero_point(), st.ij.zero_point());
        let mut c = Vec::with_capacity(m);
        for u in 0..m {
            let fc = self.r.fc.requantize((act(1, u) - zs) * i64::from(c_prev[u] - zc), zfc, st.fc.bits());
            let ij = self.r.ij.requantize((act(0, u) - zs) * (act(2, u) - zt), zij, st.ij.bits());
            let v = rescale_sum2(
                i64::from(fc - zfc),
                &self.r.c_fc,
                i64::from(ij - zij),
                &self.r.c_ij,
            );
            c.push(saturate(v + i64::from(zc), st.c.bits()));
        }
        let c_in = match &self.norms {
            Some(n) => n[2].forward(&c),
            None => c.clone(),
        };
        let h = (0..m)
            .map(|u| {
                let tc = i64::from(self.tanh_c.eval_mode(crate::pwl::Activation::Tanh, self.mode, c_in[u]));
                self.r.h.requantize((act(3, u) - zs) * (tc - zt), st.h.zero_point(), st.h.bits())
            })
            .collect();
        QState { h, c }
    }

    /// One integer step; `context` is the 8-bit attention context of a
    /// decoder cell.
    pub fn step(&self, x: &[i32], state: &QState, context: Option<&[i32]>) -> QState {
        let mut pre = self.gate_terms(x, &state.h);
        if let Some(s) = context {
            pre = self.inject_context(pre, s);
        }
        let gates = self.gate_sums(&pre);
        self.finish(&gates, &state.c)
    }

    /// Runs from the zero state; outputs are in input time order.
    pub fn sequence(&self, xs: &[Vec<i32>], dir: Direction) -> Vec<Vec<i32>> {
        run_sequence(xs, dir, self.zero_state(), |x, s| self.step(x, s, None))
    }

    /// Exact-arithmetic reference for [`IntLstmCell::gate_sums`] on terms
    /// produced by the reference path.
    pub fn gate_sums_fakequant(&self, pre: &GatePreactivations) -> Vec<i32> {
        let m = self.hidden_size();
        let (qx, qh, qs) = self.term_qps();
        (0..4 * m)
            .map(|i| {
                let k = i / m;
                let mut v = exact::of_rescale(&self.r.gx[k]) * exact::offset(pre.x[i], &qx)
                    + exact::of_rescale(&self.r.gh[k]) * exact::offset(pre.h[i], &qh);
                if let (Some(s), Some(q)) = (&pre.s, &qs) {
                    v += exact::of_rescale(&self.r.gs[k]) * exact::offset(s[i], q);
                }
                exact::to_stage(&v, &self.stages.gates[k])
            })
            .collect()
    }

    /// Exact-arithmetic reference for [`IntLstmCell::gate_terms`] and
    /// [`IntLstmCell::inject_context`].
    pub fn gate_terms_fakequant(&self, x: &[i32], h: &[i32], context: Option<&[i32]>) -> GatePreactivations {
        let st = &self.stages;
        let mut tx = self.w_x.forward_fakequant(x, st.x.zero_point(), &self.r.wx, &st.wx);
        let mut th = self.w_h.forward_fakequant(h, st.h.zero_point(), &self.r.wh, &st.wh);
        if let Some(n) = &self.norms {
            tx = n[0].forward_fakequant(&tx);
            th = n[1].forward_fakequant(&th);
        }
        let s = match (context, &self.w_s, &st.context) {
            (Some(s), Some(w), Some((qs, qws))) => Some(w.forward_fakequant(s, qs.zero_point(), &self.r.ws, qws)),
            _ => None,
        };
        GatePreactivations { x: tx, h: th, s }
    }

    /// Exact-arithmetic reference step with the same fixed-point constants
    /// and tables as [`IntLstmCell::step`].
    pub fn step_fakequant(&self, x: &[i32], state: &QState, context: Option<&[i32]>) -> QState {
        let m = self.hidden_size();
        let st = &self.stages;
        let pre = self.gate_terms_fakequant(x, &state.h, context);
        let gates = self.gate_sums_fakequant(&pre);
        let (sq, tq) = (sigmoid_out_qp(), tanh_out_qp());
        let a: Vec<Exact> = (0..4 * m)
            .map(|i| {
                let k = i / m;
                let q = self.acts[k].eval_fakequant(gates[i]);
                exact::offset(q, if k == 2 { &tq } else { &sq })
            })
            .collect();
        let c: Vec<i32> = (0..m)
            .map(|u| {
                let fc = exact::to_stage(
                    &(exact::of_rescale(&self.r.fc) * a[m + u] * exact::offset(state.c[u], &st.c)),
                    &st.fc,
                );
                let ij = exact::to_stage(&(exact::of_rescale(&self.r.ij) * a[u] * a[2 * m + u]), &st.ij);
                let v = exact::of_rescale(&self.r.c_fc) * exact::offset(fc, &st.fc)
                    + exact::of_rescale(&self.r.c_ij) * exact::offset(ij, &st.ij);
                exact::to_stage(&v, &st.c)
            })
            .collect();
        let c_in = match &self.norms {
            Some(n) => n[2].forward_fakequant(&c),
            None => c.clone(),
        };
        let h = (0..m)
            .map(|u| {
                let tc = exact::offset(self.tanh_c.eval_fakequant(c_in[u]), &tq);
                exact::to_stage(&(exact::of_rescale(&self.r.h) * a[3 * m + u] * tc), &st.h)
            })
            .collect();
        QState { h, c }
    }

    pub fn sequence_fakequant(&self, xs: &[Vec<i32>], dir: Direction) -> Vec<Vec<i32>> {
        run_sequence(xs, dir, self.zero_state(), |x, s| self.step_fakequant(x, s, None))
    }

    /// Real parameters recovered from the quantized ones.
    ///
    /// Normalized cells report a zero bias; it lives in `beta_x`.
    pub fn dequantized(&self) -> (LstmWeights, Option<NormWeights>, Option<Vec<f64>>) {
        let m = self.hidden_size();
        let n = self.input_size();
        let bias = match self.w_x.bias() {
            None => vec![0.0; 4 * m],
            Some(b) => {
                let s = self.w_x.weight_qp().scale() * self.stages.x.scale();
                crate::instrument::float_op();
                b.iter().map(|&v| f64::from(v) * s).collect()
            }
        };
        let w = LstmWeights {
            input_size: n,
            hidden_size: m,
            w_x: self.w_x.dequantize(),
            w_h: self.w_h.dequantize(),
            bias,
        };
        let norm = self.norms.as_ref().map(|ns| {
            let parts: Vec<(Vec<f64>, Vec<f64>)> = ns
                .iter()
                .map(|n| {
                    let a = n.qparams().affine.as_ref().expect("cell norms carry affine parameters");
                    (a.gamma.dequantize(), a.beta.dequantize())
                })
                .collect();
            NormWeights {
                gamma_x: parts[0].0.clone(),
                beta_x: parts[0].1.clone(),
                gamma_h: parts[1].0.clone(),
                beta_h: parts[1].1.clone(),
                gamma_c: parts[2].0.clone(),
                beta_c: parts[2].1.clone(),
            }
        });
        (w, norm, self.w_s.as_ref().map(|w| w.dequantize()))
    }
}

fn run_sequence<F: Fn(&[i32], &QState) -> QState>(
    xs: &[Vec<i32>],
    dir: Direction,
    init: QState,
    step: F,
) -> Vec<Vec<i32>> {
    let mut state = init;
    let mut out = vec![Vec::new(); xs.len()];
    let mut visit = |t: usize| {
        state = step(&xs[t], &state);
        out[t] = state.h.clone();
    };
    match dir {
        Direction::Forward => (0..xs.len()).for_each(&mut visit),
        Direction::Backward => (0..xs.len()).rev().for_each(&mut visit),
    }
    out
}

/// Forward and backward cells whose hidden states share one set of
/// parameters, so their outputs concatenate into one 8-bit vector.
#[derive(Clone, Debug, PartialEq)]
pub struct IntBiLstm {
    fwd: IntLstmCell,
    bwd: IntLstmCell,
}

impl IntBiLstm {
    pub fn new(fwd: IntLstmCell, bwd: IntLstmCell) -> Result<Self> {
        require_same("bidirectional hidden state", &fwd.stages.h, &bwd.stages.h)?;
        require_same("bidirectional input", &fwd.stages.x, &bwd.stages.x)?;
        Ok(IntBiLstm { fwd, bwd })
    }

    pub fn fwd(&self) -> &IntLstmCell {
        &self.fwd
    }

    pub fn bwd(&self) -> &IntLstmCell {
        &self.bwd
    }

    pub fn set_activation_mode(&mut self, mode: ActivationMode) {
        self.fwd.set_activation_mode(mode);
        self.bwd.set_activation_mode(mode);
    }

    /// Shared output parameters.
    pub fn out_qp(&self) -> &QuantParams {
        &self.fwd.stages.h
    }

    fn concat(f: Vec<Vec<i32>>, b: Vec<Vec<i32>>) -> Vec<Vec<i32>> {
        f.into_iter()
            .zip(b)
            .map(|(mut a, b)| {
                a.extend(b);
                a
            })
            .collect()
    }

    pub fn sequence(&self, xs: &[Vec<i32>]) -> Vec<Vec<i32>> {
        IntBiLstm::concat(
            self.fwd.sequence(xs, Direction::Forward),
            self.bwd.sequence(xs, Direction::Backward),
        )
    }

    pub fn sequence_fakequant(&self, xs: &[Vec<i32>]) -> Vec<Vec<i32>> {
        IntBiLstm::concat(
            self.fwd.sequence_fakequant(xs, Direction::Forward),
            self.bwd.sequence_fakequant(xs, Direction::Backward),
        )
    }
}
