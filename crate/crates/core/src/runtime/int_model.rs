//! Integer networks: conversion from float models and integer-only execution.

use crate::attention::{AttentionStages, IntAttention};
use crate::error::{IrnnError, Result};
use crate::exact;
use crate::linear::QuantMatrix;
use crate::lstm::{Direction, IntBiLstm, IntLstmCell, LstmStages, NormStages};
use crate::pwl::ActivationMode;
use crate::quant::{saturate, BitWidth, QuantParams, QuantTensor, Rescale};
use crate::runtime::calibrate::StageQParams;
use crate::runtime::model::{
    check_wiring, layer_prefix, out_stage, FloatLayer, FloatModel, LayerShape, ModelInput, INPUT_STAGE,
};

/// Conversion settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvertConfig {
    /// Pieces of every gate and output table.
    pub pieces: usize,
    /// Pieces of the attention `exp` table.
    pub exp_pieces: usize,
    /// Bitwidth of `fc`, `ij` and `c`.
    pub cell_bits: u32,
    /// Bitwidth of the gate pre-activations.
    pub gate_bits: u32,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        ConvertConfig {
            pieces: 32,
            exp_pieces: 32,
            cell_bits: 8,
            gate_bits: 8,
        }
    }
}

/// Input of an integer network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IntInput {
    Tokens { vocab: usize },
    /// 8-bit feature frames quantized with `qp`.
    Features { dim: usize, qp: QuantParams },
}

/// Input sequence for an integer network.
#[derive(Clone, Copy, Debug)]
pub enum IntSequence<'a> {
    Tokens(&'a [usize]),
    /// Feature codes already quantized with the model's input parameters.
    Features(&'a [Vec<i32>]),
}

/// `out = sat(round(r_a (a - Z_a)) + round(r_b (b - Z_b)) + Z_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntResidual {
    from: usize,
    in_a: QuantParams,
    in_b: QuantParams,
    out: QuantParams,
    r_a: Rescale,
    r_b: Rescale,
}

impl IntResidual {
    pub fn new(from: usize, in_a: QuantParams, in_b: QuantParams, out: QuantParams) -> Result<Self> {
        Ok(IntResidual {
            from,
            r_a: Rescale::from_real(in_a.scale() / out.scale())?,
            r_b: Rescale::from_real(in_b.scale() / out.scale())?,
            in_a,
            in_b,
            out,
        })
    }

    pub fn from(&self) -> usize {
        self.from
    }

    /// Parameters of the previous layer, of layer `from`, and of the sum.
    pub fn qparams(&self) -> (&QuantParams, &QuantParams, &QuantParams) {
        (&self.in_a, &self.in_b, &self.out)
    }

    pub fn add(&self, a: &[i32], b: &[i32]) -> Vec<i32> {
        let (za, zb) = (i64::from(self.in_a.zero_point()), i64::from(self.in_b.zero_point()));
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let v = self.r_a.apply(i64::from(x) - za) + self.r_b.apply(i64::from(y) - zb);
                saturate(v + i64::from(self.out.zero_point()), self.out.bits())
            })
            .collect()
    }

    pub fn add_fakequant(&self, a: &[i32], b: &[i32]) -> Vec<i32> {
        let (ra, rb) = (exact::of_rescale(&self.r_a), exact::of_rescale(&self.r_b));
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let v = (ra * exact::offset(x, &self.in_a)).round() + (rb * exact::offset(y, &self.in_b)).round();
                exact::to_code(&v, self.out.zero_point(), self.out.bits())
            })
            .collect()
    }
}

/// Final projection with 32-bit outputs at scale `S_w * S_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntProjection {
    w: QuantMatrix,
    in_qp: QuantParams,
}

impl IntProjection {
    pub fn new(w: QuantMatrix, in_qp: QuantParams) -> Result<Self> {
        if w.bias().is_none() {
            return Err(IrnnError::InvalidModel("final projection needs a bias".into()));
        }
        Ok(IntProjection { w, in_qp })
    }

    pub fn matrix(&self) -> &QuantMatrix {
        &self.w
    }

    pub fn in_qp(&self) -> &QuantParams {
        &self.in_qp
    }

    /// Real value of one output unit.
    pub fn scale(&self) -> f64 {
        self.w.weight_qp().scale() * self.in_qp.scale()
    }

    pub fn logits(&self, h: &[i32]) -> Vec<i32> {
        let mut acc = vec![0; self.w.rows()];
        self.w.accumulate(h, self.in_qp.zero_point(), &mut acc);
        acc
    }

    pub fn logits_fakequant(&self, h: &[i32]) -> Vec<i32> {
        let bias = self.w.bias().expect("checked at construction");
        (0..self.w.rows())
            .map(|r| {
                let mut acc = exact::int(i64::from(bias[r]));
                for (c, &x) in h.iter().enumerate() {
                    acc += exact::int(i64::from(self.w.centered(r, c))) * exact::offset(x, &self.in_qp);
                }
                i32::try_from(acc.to_integer()).expect("logit fits in i32")
            })
            .collect()
    }
}

/// One layer of an integer network.
#[derive(Clone, Debug, PartialEq)]
pub enum IntLayer {
    /// `vocab x dim` 8-bit table.
    Embedding(QuantTensor),
    Lstm(IntLstmCell),
    BiLstm(IntBiLstm),
    MadNormLstm(IntLstmCell),
    AttentionDecoder {
        memory: usize,
        cell: IntLstmCell,
        attention: IntAttention,
    },
    ResidualAdd(IntResidual),
    FinalProjection(IntProjection),
}

impl IntLayer {
    /// Parameters of the 8-bit codes this layer emits; `None` for the
    /// 32-bit projection.
    pub fn out_qp(&self) -> Option<QuantParams> {
        match self {
            IntLayer::Embedding(t) => Some(*t.qparams()),
            IntLayer::Lstm(c) | IntLayer::MadNormLstm(c) => Some(c.stages().h),
            IntLayer::BiLstm(b) => Some(*b.out_qp()),
            IntLayer::AttentionDecoder { cell, .. } => Some(cell.stages().h),
            IntLayer::ResidualAdd(r) => Some(r.out),
            IntLayer::FinalProjection(_) => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            IntLayer::Embedding(_) => "embedding",
            IntLayer::Lstm(_) => "lstm",
            IntLayer::BiLstm(_) => "bilstm",
            IntLayer::MadNormLstm(_) => "madnorm_lstm",
            IntLayer::AttentionDecoder { .. } => "attention_decoder",
            IntLayer::ResidualAdd(_) => "residual_add",
            IntLayer::FinalProjection(_) => "final_projection",
        }
    }

    fn shape(&self) -> LayerShape {
        match self {
            IntLayer::Embedding(t) => LayerShape::Embedding {
                vocab: t.shape()[0],
                dim: t.shape()[1],
            },
            IntLayer::Lstm(c) | IntLayer::MadNormLstm(c) => LayerShape::Cell {
                n: c.input_size(),
                m: c.hidden_size(),
                bi: false,
            },
            IntLayer::BiLstm(b) => LayerShape::Cell {
                n: b.fwd().input_size(),
                m: b.fwd().hidden_size(),
                bi: true,
            },
            IntLayer::AttentionDecoder { memory, cell, attention } => LayerShape::Decoder {
                memory: *memory,
                n: cell.input_size(),
                m: cell.hidden_size(),
                m_enc: attention.w_k().cols(),
            },
            IntLayer::ResidualAdd(r) => LayerShape::Residual { from: r.from },
            IntLayer::FinalProjection(p) => LayerShape::Projection {
                rows: p.w.rows(),
                cols: p.w.cols(),
            },
        }
    }

    /// Parameters of the 8-bit codes this layer consumes from its
    /// predecessor.
    fn in_qp(&self) -> Option<QuantParams> {
        match self {
            IntLayer::Embedding(_) => None,
            IntLayer::Lstm(c) | IntLayer::MadNormLstm(c) => Some(c.stages().x),
            IntLayer::BiLstm(b) => Some(b.fwd().stages().x),
            IntLayer::AttentionDecoder { cell, .. } => Some(cell.stages().x),
            IntLayer::ResidualAdd(r) => Some(r.in_a),
            IntLayer::FinalProjection(p) => Some(p.in_qp),
        }
    }
}

/// An integer network with validated wiring and shared parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IntModel {
    input: IntInput,
    layers: Vec<IntLayer>,
    config: ConvertConfig,
}

fn shared(what: String, a: &QuantParams, b: &QuantParams) -> Result<()> {
    if a != b {
        return Err(IrnnError::SharedQParams(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn bits(b: u32) -> Result<BitWidth> {
    BitWidth::from_bits(b)
}

impl IntModel {
    /// Checks that every layer consumes the parameters its producer emits.
    pub fn new(input: IntInput, layers: Vec<IntLayer>, config: ConvertConfig) -> Result<Self> {
        let model_input = match input {
            IntInput::Tokens { vocab } => ModelInput::Tokens { vocab },
            IntInput::Features { dim, qp } => {
                if qp.bits() != BitWidth::B8 {
                    return Err(IrnnError::StageBitwidth {
                        stage: INPUT_STAGE.into(),
                        expected: 8,
                        got: qp.bits().bits(),
                    });
                }
                ModelInput::Features { dim }
            }
        };
        let shapes: Vec<LayerShape> = layers.iter().map(IntLayer::shape).collect();
        check_wiring(model_input, &shapes)?;
        for (i, l) in layers.iter().enumerate() {
            let produced = match (i, input) {
                (0, IntInput::Features { qp, .. }) => Some(qp),
                (0, IntInput::Tokens { .. }) => None,
                _ => layers[i - 1].out_qp(),
            };
            if let (Some(p), Some(c)) = (produced, l.in_qp()) {
                shared(format!("layer {i} input"), &p, &c)?;
            }
            match l {
                IntLayer::AttentionDecoder { memory, cell, attention } => {
                    let st = attention.stages();
                    let mem = layers[*memory].out_qp().expect("wiring excludes the projection");
                    shared(format!("layer {i} attention memory"), &st.h_enc, &mem)?;
                    shared(format!("layer {i} attention query"), &st.h_dec, &cell.stages().h)?;
                    let (s, _) = cell
                        .stages()
                        .context
                        .ok_or_else(|| IrnnError::InvalidModel(format!("layer {i}: decoder cell lacks context")))?;
                    shared(format!("layer {i} attention context"), &st.s, &s)?;
                }
                IntLayer::ResidualAdd(r) => {
                    let b = layers[r.from].out_qp().expect("wiring excludes the projection");
                    shared(format!("layer {i} residual operand"), &r.in_b, &b)?;
                }
                IntLayer::Lstm(c) | IntLayer::MadNormLstm(c) if c.stages().context.is_some() => {
                    return Err(IrnnError::InvalidModel(format!("layer {i}: context outside a decoder")));
                }
                _ => {}
            }
        }
        Ok(IntModel { input, layers, config })
    }

    pub fn input(&self) -> IntInput {
        self.input
    }

    pub fn layers(&self) -> &[IntLayer] {
        &self.layers
    }

    pub fn config(&self) -> ConvertConfig {
        self.config
    }

    /// Real value of one unit of the final outputs: the projection scale, or
    /// the last layer's 8-bit parameters.
    pub fn output_dequantize(&self, out: &[i32]) -> Vec<f64> {
        crate::instrument::float_op();
        match self.layers.last().expect("at least one layer") {
            IntLayer::FinalProjection(p) => out.iter().map(|&v| f64::from(v) * p.scale()).collect(),
            l => l.out_qp().expect("8-bit layer").dequantize_slice(out),
        }
    }

    /// Quantizes real feature frames with the model's input parameters.
    pub fn quantize_features(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<i32>>> {
        match self.input {
            IntInput::Features { qp, .. } => Ok(xs.iter().map(|x| qp.quantize_slice(x)).collect()),
            IntInput::Tokens { .. } => Err(IrnnError::InvalidModel("model takes tokens".into())),
        }
    }

    pub fn set_activation_mode(&mut self, mode: ActivationMode) {
        for l in &mut self.layers {
            match l {
                IntLayer::Lstm(c) | IntLayer::MadNormLstm(c) => c.set_activation_mode(mode),
                IntLayer::BiLstm(b) => b.set_activation_mode(mode),
                IntLayer::AttentionDecoder { cell, attention, .. } => {
                    cell.set_activation_mode(mode);
                    attention.set_activation_mode(mode);
                }
                _ => {}
            }
        }
    }

    fn check_input(&self, input: IntSequence<'_>) -> Result<()> {
        if input_len(input) == 0 {
            return Err(IrnnError::EmptySequence);
        }
        match (input, self.input) {
            (IntSequence::Tokens(t), IntInput::Tokens { vocab }) => {
                if let Some(&id) = t.iter().find(|&&id| id >= vocab) {
                    return Err(IrnnError::OutOfVocabulary { id, vocab });
                }
            }
            (IntSequence::Features(f), IntInput::Features { dim, qp }) => {
                for x in f {
                    if x.len() != dim {
                        return Err(IrnnError::Dimension(format!("feature frame of width {}, expected {dim}", x.len())));
                    }
                    if x.iter().any(|&v| !(0..=qp.qmax()).contains(&v)) {
                        return Err(IrnnError::InvalidModel("feature code outside the 8-bit range".into()));
                    }
                }
            }
            _ => return Err(IrnnError::InvalidModel("input kind does not match the model".into())),
        }
        Ok(())
    }

    /// Runs the network with integer arithmetic only.
    ///
    /// Returns 32-bit logits when the network ends in a projection, else
    /// the last layer's 8-bit codes.
    pub fn run(&self, input: IntSequence<'_>) -> Result<Vec<Vec<i32>>> {
        self.execute(input, false)
    }

    /// Exact-arithmetic reference for [`IntModel::run`].
    pub fn run_fakequant(&self, input: IntSequence<'_>) -> Result<Vec<Vec<i32>>> {
        self.execute(input, true)
    }

    fn execute(&self, input: IntSequence<'_>, reference: bool) -> Result<Vec<Vec<i32>>> {
        self.check_input(input)?;
        let mut outs: Vec<Vec<Vec<i32>>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev: &[Vec<i32>] = match (i, input) {
                (0, IntSequence::Features(f)) => f,
                (0, IntSequence::Tokens(_)) => &[],
                _ => &outs[i - 1],
            };
            let out = match layer {
                IntLayer::Embedding(t) => {
                    let IntSequence::Tokens(tokens) = input else { unreachable!("checked input kind") };
                    let dim = t.shape()[1];
                    tokens
                        .iter()
                        .map(|&id| t.data()[id * dim..(id + 1) * dim].iter().map(|&q| i32::from(q)).collect())
                        .collect()
                }
                IntLayer::Lstm(c) | IntLayer::MadNormLstm(c) => {
                    if reference {
                        c.sequence_fakequant(prev, Direction::Forward)
                    } else {
                        c.sequence(prev, Direction::Forward)
                    }
                }
                IntLayer::BiLstm(b) => {
                    if reference {
                        b.sequence_fakequant(prev)
                    } else {
                        b.sequence(prev)
                    }
                }
                IntLayer::AttentionDecoder { memory, cell, attention } => {
                    let mem = &outs[*memory];
                    let keys = if reference { Vec::new() } else { attention.keys(mem) };
                    let mut st = cell.zero_state();
                    let mut hs = Vec::with_capacity(prev.len());
                    for x in prev {
                        st = if reference {
                            let (s, _) = attention.attend_fakequant(&st.h, mem);
                            cell.step_fakequant(x, &st, Some(&s))
                        } else {
                            let (s, _) = attention.attend(&st.h, &keys, mem);
                            cell.step(x, &st, Some(&s))
                        };
                        hs.push(st.h.clone());
                    }
                    hs
                }
                IntLayer::ResidualAdd(r) => prev
                    .iter()
                    .zip(&outs[r.from])
                    .map(|(a, b)| if reference { r.add_fakequant(a, b) } else { r.add(a, b) })
                    .collect(),
                IntLayer::FinalProjection(p) => prev
                    .iter()
                    .map(|h| if reference { p.logits_fakequant(h) } else { p.logits(h) })
                    .collect(),
            };
            outs.push(out);
        }
        Ok(outs.pop().expect("at least one layer"))
    }

    /// The float network this integer network represents, with every weight
    /// dequantized.
    pub fn to_float(&self) -> Result<FloatModel> {
        let input = match self.input {
            IntInput::Tokens { vocab } => ModelInput::Tokens { vocab },
            IntInput::Features { dim, .. } => ModelInput::Features { dim },
        };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                IntLayer::Embedding(t) => FloatLayer::Embedding {
                    vocab: t.shape()[0],
                    dim: t.shape()[1],
                    table: t.dequantize(),
                },
                IntLayer::Lstm(c) => FloatLayer::Lstm(c.dequantized().0),
                IntLayer::MadNormLstm(c) => {
                    let (weights, norm, _) = c.dequantized();
                    FloatLayer::MadNormLstm {
                        weights,
                        norm: norm.expect("normalized cell"),
                    }
                }
                IntLayer::BiLstm(b) => FloatLayer::BiLstm {
                    fwd: b.fwd().dequantized().0,
                    bwd: b.bwd().dequantized().0,
                },
                IntLayer::AttentionDecoder { memory, cell, attention } => {
                    let (w, _, w_s) = cell.dequantized();
                    FloatLayer::AttentionDecoder {
                        memory: *memory,
                        cell: w,
                        attention: attention.dequantized(w_s.expect("decoder cell has W_s")),
                    }
                }
                IntLayer::ResidualAdd(r) => FloatLayer::ResidualAdd { from: r.from },
                IntLayer::FinalProjection(p) => {
                    let s = p.scale();
                    FloatLayer::FinalProjection {
                        rows: p.w.rows(),
                        cols: p.w.cols(),
                        w: p.w.dequantize(),
                        bias: p.w.bias().expect("projection bias").iter().map(|&b| f64::from(b) * s).collect(),
                    }
                }
            })
            .collect();
        FloatModel::new(input, layers)
    }
}

fn input_len(s: IntSequence<'_>) -> usize {
    match s {
        IntSequence::Tokens(t) => t.len(),
        IntSequence::Features(f) => f.len(),
    }
}

/// Quantizes `model` with calibrated stage parameters.
pub fn convert(model: &FloatModel, q: &StageQParams, cfg: &ConvertConfig) -> Result<IntModel> {
    let (cell_bits, gate_bits) = (bits(cfg.cell_bits)?, bits(cfg.gate_bits)?);
    let get = |k: &str, b: BitWidth| q.get(k, b);
    let b8 = BitWidth::B8;
    let input = match model.input() {
        ModelInput::Tokens { vocab } => IntInput::Tokens { vocab },
        ModelInput::Features { dim } => IntInput::Features {
            dim,
            qp: q.get(INPUT_STAGE, b8)?,
        },
    };
    let mut layers: Vec<IntLayer> = Vec::with_capacity(model.layers().len());
    for (i, l) in model.layers().iter().enumerate() {
        let p = layer_prefix(i);
        let x = match (i, input) {
            (0, IntInput::Features { qp, .. }) => Some(qp),
            (0, IntInput::Tokens { .. }) => None,
            _ => layers[i - 1].out_qp(),
        };
        let x_or = || x.ok_or_else(|| IrnnError::InvalidModel(format!("layer {i} has no 8-bit input")));
        let h = || q.get(&out_stage(i), b8);
        let layer = match l {
            FloatLayer::Embedding { vocab, dim, table } => {
                IntLayer::Embedding(QuantTensor::quantize_fitted(vec![*vocab, *dim], table, b8)?)
            }
            FloatLayer::Lstm(w) => {
                let st = LstmStages::lookup(&p, x_or()?, h()?, None, gate_bits, cell_bits, &get)?;
                IntLayer::Lstm(IntLstmCell::build(w, None, None, st, cfg.pieces)?)
            }
            FloatLayer::MadNormLstm { weights, norm } => {
                let st = LstmStages::lookup(&p, x_or()?, h()?, None, gate_bits, cell_bits, &get)?;
                let ns = NormStages::lookup_cell(&p, &get)?;
                IntLayer::MadNormLstm(IntLstmCell::build(weights, Some((norm, &ns)), None, st, cfg.pieces)?)
            }
            FloatLayer::BiLstm { fwd, bwd } => {
                let mut cells = Vec::with_capacity(2);
                for (w, d) in [(fwd, "fwd"), (bwd, "bwd")] {
                    let st = LstmStages::lookup(&format!("{p}.{d}"), x_or()?, h()?, None, gate_bits, cell_bits, &get)?;
                    cells.push(IntLstmCell::build(w, None, None, st, cfg.pieces)?);
                }
                let bwd = cells.pop().expect("two cells");
                IntLayer::BiLstm(IntBiLstm::new(cells.pop().expect("two cells"), bwd)?)
            }
            FloatLayer::AttentionDecoder { memory, cell, attention } => {
                let h_dec = h()?;
                let mem = layers
                    .get(*memory)
                    .and_then(IntLayer::out_qp)
                    .ok_or_else(|| IrnnError::InvalidModel(format!("layer {i}: bad memory layer")))?;
                let ast = AttentionStages::lookup(&format!("{p}.att"), h_dec, mem, &get)?;
                let s = ast.s;
                let att = IntAttention::build(attention, ast, cfg.pieces, cfg.exp_pieces)?;
                let st = LstmStages::lookup(&p, x_or()?, h_dec, Some(s), gate_bits, cell_bits, &get)?;
                IntLayer::AttentionDecoder {
                    memory: *memory,
                    cell: IntLstmCell::build(cell, None, Some(&attention.w_s), st, cfg.pieces)?,
                    attention: att,
                }
            }
            FloatLayer::ResidualAdd { from } => {
                let b = layers
                    .get(*from)
                    .and_then(IntLayer::out_qp)
                    .ok_or_else(|| IrnnError::InvalidModel(format!("layer {i}: bad residual source")))?;
                IntLayer::ResidualAdd(IntResidual::new(*from, x_or()?, b, h()?)?)
            }
            FloatLayer::FinalProjection { rows, cols, w, bias } => {
                let xq = x_or()?;
                IntLayer::FinalProjection(IntProjection::new(QuantMatrix::quantize(w, *rows, *cols, Some(bias), &xq)?, xq)?)
            }
        };
        layers.push(layer);
    }
    IntModel::new(input, layers, *cfg)
}

/// Fraction of positions where the largest logits agree, for a pair of
/// output sequences.
pub fn argmax_agreement(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    crate::instrument::float_op();
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
            .0
    };
    let hits = a.iter().zip(b).filter(|(x, y)| argmax(x) == argmax(y)).count();
    hits as f64 / a.len().max(1) as f64
}
