//! Additive (Bahdanau) attention.
//!
//! ```text
//! e_i   = v . tanh(W_q h_{t-1} + W_k h_enc_i)
//! alpha = softmax(e)
//! s_t   = sum_i alpha_i h_enc_i
//! ```
//!
//! Integer form: both matmuls are 8-bit with 8-bit outputs, their sum and the
//! alignments `e` are 16-bit, tanh and exp are PWL tables with 8-bit outputs,
//! the softmax denominator stays a 32-bit integer and the division produces
//! 8-bit weights directly.

use rand::Rng;

use crate::error::{IrnnError, Result};
use crate::exact::{self, Exact};
use crate::instrument::float_op;
use crate::linear::{matmul_rescale, matvec, QuantMatrix};
use crate::lstm::{sigmoid_out_qp, tanh_out_qp, GatePreactivations, IntLstmCell};
use crate::pwl::{Activation, ActivationMode, PwlTable};
use crate::quant::{rescale_sum2, saturate, BitWidth, QuantParams, QuantTensor, Rescale};
use crate::runtime::calibrate::{NullObserver, Observer};

/// Real attention parameters. `W_s` (`4 m_dec x m_enc`) injects the context
/// into the decoder gates.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub m_att: usize,
    pub m_dec: usize,
    pub m_enc: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub v: Vec<f64>,
    pub w_s: Vec<f64>,
}

impl AttentionWeights {
    pub fn new(
        m_att: usize,
        m_dec: usize,
        m_enc: usize,
        w_q: Vec<f64>,
        w_k: Vec<f64>,
        v: Vec<f64>,
        w_s: Vec<f64>,
    ) -> Result<Self> {
        let w = AttentionWeights {
            m_att,
            m_dec,
            m_enc,
            w_q,
            w_k,
            v,
            w_s,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_att == 0 || self.m_dec == 0 || self.m_enc == 0 {
            return Err(IrnnError::Dimension("attention sizes must be positive".into()));
        }
        if self.w_q.len() != self.m_att * self.m_dec
            || self.w_k.len() != self.m_att * self.m_enc
            || self.v.len() != self.m_att
            || self.w_s.len() != 4 * self.m_dec * self.m_enc
        {
            return Err(IrnnError::Dimension(format!(
                "attention m_att={} m_dec={} m_enc={}: W_q {}, W_k {}, v {}, W_s {}",
                self.m_att,
                self.m_dec,
                self.m_enc,
                self.w_q.len(),
                self.w_k.len(),
                self.v.len(),
                self.w_s.len()
            )));
        }
        Ok(())
    }

    /// Parameters drawn from `U(-scale, scale)`.
    pub fn random<R: Rng>(m_att: usize, m_dec: usize, m_enc: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-scale..=scale)).collect::<Vec<f64>>();
        AttentionWeights {
            m_att,
            m_dec,
            m_enc,
            w_q: draw(m_att * m_dec),
            w_k: draw(m_att * m_enc),
            v: draw(m_att),
            w_s: draw(4 * m_dec * m_enc),
        }
    }
}

/// Softmax with the maximum subtracted first.
pub fn softmax_real(e: &[f64]) -> Vec<f64> {
    float_op();
    let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = e.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter().map(|v| v / z).collect()
}

/// Real attention reporting intermediate stages to `obs` under `prefix`.
pub fn attention_real_observed(
    h_prev: &[f64],
    enc_h: &[Vec<f64>],
    w: &AttentionWeights,
    obs: &mut dyn Observer,
    prefix: &str,
) -> (Vec<f64>, Vec<f64>) {
    float_op();
    let q = matvec(&w.w_q, w.m_att, w.m_dec, h_prev);
    obs.observe(&format!("{prefix}.q"), &q);
    let e: Vec<f64> = enc_h
        .iter()
        .map(|h| {
            let k = matvec(&w.w_k, w.m_att, w.m_enc, h);
            let pre: Vec<f64> = q.iter().zip(&k).map(|(a, b)| a + b).collect();
            obs.observe(&format!("{prefix}.k"), &k);
            obs.observe(&format!("{prefix}.pre"), &pre);
            pre.iter().zip(&w.v).map(|(p, v)| v * p.tanh()).sum()
        })
        .collect();
    obs.observe(&format!("{prefix}.e"), &e);
    let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = e.iter().map(|v| v - mx).collect();
    obs.observe(&format!("{prefix}.exp_in"), &shifted);
    let alpha = softmax_real(&e);
    let mut s = vec![0.0; w.m_enc];
    for (a, h) in alpha.iter().zip(enc_h) {
        for (sj, hj) in s.iter_mut().zip(h) {
            *sj += a * hj;
        }
    }
    obs.observe(&format!("{prefix}.s"), &s);
    (s, alpha)
}

/// Context vector and attention weights.
pub fn attention_real(h_prev: &[f64], enc_h: &[Vec<f64>], w: &AttentionWeights) -> (Vec<f64>, Vec<f64>) {
    attention_real_observed(h_prev, enc_h, w, &mut NullObserver, "")
}

/// Calibrated parameters of every attention stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStages {
    /// Decoder hidden state (query), 8-bit.
    pub h_dec: QuantParams,
    /// Encoder hidden states (keys and values), 8-bit.
    pub h_enc: QuantParams,
    /// `W_q h`, 8-bit.
    pub q: QuantParams,
    /// `W_k h_enc`, 8-bit.
    pub k: QuantParams,
    /// `W_q h + W_k h_enc`, 16-bit.
    pub pre: QuantParams,
    /// Alignments, 16-bit.
    pub e: QuantParams,
    /// `e - max e`, 16-bit over `[min, 0]`.
    pub exp_in: QuantParams,
    /// Context, 8-bit.
    pub s: QuantParams,
}

impl AttentionStages {
    pub const NAMES: [&'static str; 6] = ["q", "k", "pre", "e", "exp_in", "s"];

    pub fn lookup(
        prefix: &str,
        h_dec: QuantParams,
        h_enc: QuantParams,
        get: &dyn Fn(&str, BitWidth) -> Result<QuantParams>,
    ) -> Result<Self> {
        let g = |name: &str, bits| get(&format!("{prefix}.{name}"), bits);
        Ok(AttentionStages {
            h_dec,
            h_enc,
            q: g("q", BitWidth::B8)?,
            k: g("k", BitWidth::B8)?,
            pre: g("pre", BitWidth::B16)?,
            e: g("e", BitWidth::B16)?,
            exp_in: g("exp_in", BitWidth::B16)?,
            s: g("s", BitWidth::B8)?,
        })
    }

    pub fn stage_names(prefix: &str) -> Vec<String> {
        Self::NAMES.iter().map(|n| format!("{prefix}.{n}")).collect()
    }

    /// Checks every stage against the mixed-precision layout.
    pub fn validate(&self) -> Result<()> {
        let want = [
            ("h_dec", &self.h_dec, BitWidth::B8),
            ("h_enc", &self.h_enc, BitWidth::B8),
            ("q", &self.q, BitWidth::B8),
            ("k", &self.k, BitWidth::B8),
            ("pre", &self.pre, BitWidth::B16),
            ("e", &self.e, BitWidth::B16),
            ("exp_in", &self.exp_in, BitWidth::B16),
            ("s", &self.s, BitWidth::B8),
        ];
        for (name, qp, bits) in want {
            if qp.bits() != bits {
                return Err(IrnnError::StageBitwidth {
                    stage: format!("attention.{name}"),
                    expected: bits.bits(),
                    got: qp.bits().bits(),
                });
            }
        }
        if self.exp_in.max() != 0.0 {
            return Err(IrnnError::InvalidModel("exp input range must end at 0".into()));
        }
        Ok(())
    }
}

/// Parameters of the attention weights `alpha`: `[0, 1]`, 8 bits.
pub fn alpha_qp() -> QuantParams {
    sigmoid_out_qp()
}

#[derive(Clone, Debug, PartialEq)]
struct AttentionRescales {
    q: Rescale,
    k: Rescale,
    pre_q: Rescale,
    pre_k: Rescale,
    e: Rescale,
    exp_in: Rescale,
    alpha: Rescale,
    s: Rescale,
}

/// Integer attention with precomputed constants.
#[derive(Clone, Debug, PartialEq)]
pub struct IntAttention {
    stages: AttentionStages,
    w_q: QuantMatrix,
    w_k: QuantMatrix,
    v: QuantTensor,
    v_centered: Vec<i32>,
    tanh: PwlTable,
    exp: PwlTable,
    r: AttentionRescales,
    mode: ActivationMode,
}

impl IntAttention {
    pub fn new(
        stages: AttentionStages,
        w_q: QuantMatrix,
        w_k: QuantMatrix,
        v: QuantTensor,
        tanh: PwlTable,
        exp: PwlTable,
    ) -> Result<Self> {
        stages.validate()?;
        let m_att = w_q.rows();
        if w_k.rows() != m_att || v.data().len() != m_att {
            return Err(IrnnError::Dimension(format!(
                "attention width: W_q {m_att}, W_k {}, v {}",
                w_k.rows(),
                v.data().len()
            )));
        }
        if v.qparams().bits() != BitWidth::B8 {
            return Err(IrnnError::StageBitwidth {
                stage: "attention.v".into(),
                expected: 8,
                got: v.qparams().bits().bits(),
            });
        }
        if tanh.in_qp() != &stages.pre || tanh.out_qp() != &tanh_out_qp() {
            return Err(IrnnError::SharedQParams("attention tanh table does not match its stages".into()));
        }
        if exp.in_qp() != &stages.exp_in || exp.out_qp() != &sigmoid_out_qp() {
            return Err(IrnnError::SharedQParams("attention exp table does not match its stages".into()));
        }
        let st = &stages;
        let r = AttentionRescales {
            q: matmul_rescale(&w_q, &st.h_dec, &st.q)?,
            k: matmul_rescale(&w_k, &st.h_enc, &st.k)?,
            pre_q: Rescale::from_real(st.q.scale() / st.pre.scale())?,
            pre_k: Rescale::from_real(st.k.scale() / st.pre.scale())?,
            e: Rescale::from_real(v.qparams().scale() * tanh_out_qp().scale() / st.e.scale())?,
            exp_in: Rescale::from_real(st.e.scale() / st.exp_in.scale())?,
            alpha: Rescale::from_real(1.0 / alpha_qp().scale())?,
            s: Rescale::from_real(alpha_qp().scale() * st.h_enc.scale() / st.s.scale())?,
        };
        let zv = v.qparams().zero_point();
        let v_centered = v.data().iter().map(|&q| i32::from(q) - zv).collect();
        Ok(IntAttention {
            stages,
            w_q,
            w_k,
            v,
            v_centered,
            tanh,
            exp,
            r,
            mode: ActivationMode::Pwl,
        })
    }

    /// Quantizes real weights; `pieces` for tanh, `exp_pieces` for exp.
    pub fn build(w: &AttentionWeights, stages: AttentionStages, pieces: usize, exp_pieces: usize) -> Result<Self> {
        w.validate()?;
        stages.validate()?;
        let w_q = QuantMatrix::quantize(&w.w_q, w.m_att, w.m_dec, None, &stages.h_dec)?;
        let w_k = QuantMatrix::quantize(&w.w_k, w.m_att, w.m_enc, None, &stages.h_enc)?;
        let v = QuantTensor::quantize_fitted(vec![w.m_att], &w.v, BitWidth::B8)?;
        let tanh = PwlTable::for_activation(Activation::Tanh, stages.pre, tanh_out_qp(), pieces)?;
        let exp = PwlTable::for_activation(Activation::Exp, stages.exp_in, sigmoid_out_qp(), exp_pieces)?;
        IntAttention::new(stages, w_q, w_k, v, tanh, exp)
    }

    pub fn stages(&self) -> &AttentionStages {
        &self.stages
    }

    pub fn w_q(&self) -> &QuantMatrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &QuantMatrix {
        &self.w_k
    }

    pub fn v(&self) -> &QuantTensor {
        &self.v
    }

    pub fn tanh_table(&self) -> &PwlTable {
        &self.tanh
    }

    pub fn exp_table(&self) -> &PwlTable {
        &self.exp
    }

    pub fn set_activation_mode(&mut self, mode: ActivationMode) {
        self.mode = mode;
    }

    /// `W_k h_enc_i` for every encoder step; reusable across decoder steps.
    pub fn keys(&self, enc_h: &[Vec<i32>]) -> Vec<Vec<i32>> {
        let st = &self.stages;
        enc_h
            .iter()
            .map(|h| self.w_k.forward(h, st.h_enc.zero_point(), &self.r.k, &st.k))
            .collect()
    }

    /// 16-bit alignments of the query against precomputed keys.
    pub fn scores(&self, h_prev: &[i32], keys: &[Vec<i32>]) -> Vec<i32> {
        let st = &self.stages;
        let q = self.w_q.forward(h_prev, st.h_dec.zero_point(), &self.r.q, &st.q);
        let zt = self.tanh.out_qp().zero_point();
        let (zq, zk, zp) = (st.q.zero_point(), st.k.zero_point(), st.pre.zero_point());
        keys.iter()
            .map(|k| {
                let mut acc = 0i32;
                for j in 0..q.len() {
                    let pre = rescale_sum2(
                        i64::from(q[j] - zq),
                        &self.r.pre_q,
                        i64::from(k[j] - zk),
                        &self.r.pre_k,
                    );
                    let pre = saturate(pre + i64::from(zp), st.pre.bits());
                    let t = self.tanh.eval_mode(Activation::Tanh, self.mode, pre);
                    acc += self.v_centered[j] * (t - zt);
                }
                self.r.e.requantize(i64::from(acc), st.e.zero_point(), st.e.bits())
            })
            .collect()
    }

    /// 8-bit attention weights from 16-bit alignments.
    pub fn softmax(&self, e: &[i32]) -> Vec<i32> {
        let st = &self.stages;
        let mx = *e.iter().max().expect("at least one alignment");
        let ze = i64::from(self.exp.out_qp().zero_point());
        let p: Vec<i64> = e
            .iter()
            .map(|&v| {
                let x = saturate(self.r.exp_in.apply(i64::from(v - mx)) + i64::from(st.exp_in.zero_point()), st.exp_in.bits());
                i64::from(self.exp.eval_mode(Activation::Exp, self.mode, x)) - ze
            })
            .collect();
        // At most T_enc * 255, an i32 for any realistic length.
        let den: i32 = p.iter().map(|&v| v as i32).sum();
        let aq = *self.exp.out_qp();
        p.iter()
            .map(|&v| saturate(self.r.alpha.apply_div(v, i64::from(den.max(1))) + i64::from(aq.zero_point()), aq.bits()))
            .collect()
    }

    /// `s_j = sum_i alpha_i h_enc_ij`, requantized to the context parameters.
    pub fn context(&self, alpha: &[i32], enc_h: &[Vec<i32>]) -> Vec<i32> {
        let st = &self.stages;
        let (za, zh) = (self.exp.out_qp().zero_point(), st.h_enc.zero_point());
        let m_enc = enc_h[0].len();
        (0..m_enc)
            .map(|j| {
                let acc: i32 = alpha.iter().zip(enc_h).map(|(&a, h)| (a - za) * (h[j] - zh)).sum();
                self.r.s.requantize(i64::from(acc), st.s.zero_point(), st.s.bits())
            })
            .collect()
    }

    /// Context and attention weights for one decoder step.
    pub fn attend(&self, h_prev: &[i32], keys: &[Vec<i32>], enc_h: &[Vec<i32>]) -> (Vec<i32>, Vec<i32>) {
        let alpha = self.softmax(&self.scores(h_prev, keys));
        (self.context(&alpha, enc_h), alpha)
    }

    /// Exact-arithmetic reference for [`IntAttention::attend`] (keys included).
    pub fn attend_fakequant(&self, h_prev: &[i32], enc_h: &[Vec<i32>]) -> (Vec<i32>, Vec<i32>) {
        let st = &self.stages;
        let tq = tanh_out_qp();
        let q = self.w_q.forward_fakequant(h_prev, st.h_dec.zero_point(), &self.r.q, &st.q);
        let e: Vec<i32> = enc_h
            .iter()
            .map(|h| {
                let k = self.w_k.forward_fakequant(h, st.h_enc.zero_point(), &self.r.k, &st.k);
                let mut acc = Exact::from_integer(0);
                for j in 0..q.len() {
                    let pre = exact::of_rescale(&self.r.pre_q) * exact::offset(q[j], &st.q)
                        + exact::of_rescale(&self.r.pre_k) * exact::offset(k[j], &st.k);
                    let t = self.tanh.eval_fakequant(exact::to_stage(&pre, &st.pre));
                    acc += exact::offset(i32::from(self.v.data()[j]), self.v.qparams()) * exact::offset(t, &tq);
                }
                exact::to_stage(&(exact::of_rescale(&self.r.e) * acc), &st.e)
            })
            .collect();
        let alpha = self.softmax_fakequant(&e);
        let aq = alpha_qp();
        let m_enc = enc_h[0].len();
        let s = (0..m_enc)
            .map(|j| {
                let acc: Exact = alpha
                    .iter()
                    .zip(enc_h)
                    .map(|(&a, h)| exact::offset(a, &aq) * exact::offset(h[j], &st.h_enc))
                    .sum();
                exact::to_stage(&(exact::of_rescale(&self.r.s) * acc), &st.s)
            })
            .collect();
        (s, alpha)
    }

    /// Exact-arithmetic reference for [`IntAttention::softmax`].
    pub fn softmax_fakequant(&self, e: &[i32]) -> Vec<i32> {
        let st = &self.stages;
        let mx = e.iter().copied().fold(i32::MIN, i32::max);
        let p: Vec<Exact> = e
            .iter()
            .map(|&v| {
                let x = exact::to_stage(&(exact::of_rescale(&self.r.exp_in) * exact::int(i64::from(v - mx))), &st.exp_in);
                exact::offset(self.exp.eval_fakequant(x), self.exp.out_qp())
            })
            .collect();
        let den: Exact = p.iter().sum();
        let den = if den < Exact::from_integer(1) { Exact::from_integer(1) } else { den };
        p.iter()
            .map(|v| exact::to_stage(&(exact::of_rescale(&self.r.alpha) * v / den), &alpha_qp()))
            .collect()
    }

    /// Real parameters recovered from the quantized ones; `W_s` lives in
    /// the decoder cell and is passed through.
    pub fn dequantized(&self, w_s: Vec<f64>) -> AttentionWeights {
        AttentionWeights {
            m_att: self.w_q.rows(),
            m_dec: self.w_q.cols(),
            m_enc: self.w_k.cols(),
            w_q: self.w_q.dequantize(),
            w_k: self.w_k.dequantize(),
            v: self.v.dequantize(),
            w_s,
        }
    }
}

/// 8-bit attention weights from 16-bit alignments.
pub fn softmax_int(e: &[i32], att: &IntAttention) -> Vec<i32> {
    att.softmax(e)
}

/// Context and attention weights for one decoder step.
pub fn attention_int(h_prev: &[i32], enc_h: &[Vec<i32>], att: &IntAttention) -> (Vec<i32>, Vec<i32>) {
    att.attend(h_prev, &att.keys(enc_h), enc_h)
}

/// Adds the `W_s s` term of a decoder cell to its gate pre-activations.
pub fn inject_context(cell: &IntLstmCell, pre: GatePreactivations, s: &[i32]) -> GatePreactivations {
    cell.inject_context(pre, s)
}
