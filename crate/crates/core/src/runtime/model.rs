//! Floating-point reference networks.

use rand::Rng;

use crate::attention::{attention_real_observed, AttentionWeights};
use crate::error::{IrnnError, Result};
use crate::instrument::float_op;
use crate::linear::matvec;
use crate::lstm::{lstm_sequence_real_observed, lstm_step_real_observed, Direction, LstmState, LstmWeights, NormWeights};
use crate::runtime::calibrate::{NullObserver, Observer};

/// Stage name of the quantized feature input.
pub const INPUT_STAGE: &str = "input";

/// Stage prefix of layer `i`.
pub fn layer_prefix(i: usize) -> String {
    format!("L{i}")
}

/// Stage holding the output of layer `i`.
pub fn out_stage(i: usize) -> String {
    format!("L{i}.out")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelInput {
    /// Token ids in `[0, vocab)`, looked up by a leading embedding layer.
    Tokens { vocab: usize },
    /// Real feature frames of width `dim`.
    Features { dim: usize },
}

/// One layer of a float network.
#[derive(Clone, Debug, PartialEq)]
pub enum FloatLayer {
    /// `vocab x dim` table, row-major.
    Embedding { vocab: usize, dim: usize, table: Vec<f64> },
    Lstm(LstmWeights),
    BiLstm { fwd: LstmWeights, bwd: LstmWeights },
    MadNormLstm { weights: LstmWeights, norm: NormWeights },
    /// Decoder cell fed by the previous layer, attending over the outputs of
    /// layer `memory`.
    AttentionDecoder {
        memory: usize,
        cell: LstmWeights,
        attention: AttentionWeights,
    },
    /// Previous layer's output plus layer `from`'s output.
    ResidualAdd { from: usize },
    /// `rows x cols` projection whose integer outputs stay 32-bit.
    FinalProjection {
        rows: usize,
        cols: usize,
        w: Vec<f64>,
        bias: Vec<f64>,
    },
}

impl FloatLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            FloatLayer::Embedding { .. } => "embedding",
            FloatLayer::Lstm(_) => "lstm",
            FloatLayer::BiLstm { .. } => "bilstm",
            FloatLayer::MadNormLstm { .. } => "madnorm_lstm",
            FloatLayer::AttentionDecoder { .. } => "attention_decoder",
            FloatLayer::ResidualAdd { .. } => "residual_add",
            FloatLayer::FinalProjection { .. } => "final_projection",
        }
    }
}

/// Input sequence for a float model.
#[derive(Clone, Copy, Debug)]
pub enum Sequence<'a> {
    Tokens(&'a [usize]),
    Features(&'a [Vec<f64>]),
}

impl Sequence<'_> {
    pub fn len(&self) -> usize {
        match self {
            Sequence::Tokens(t) => t.len(),
            Sequence::Features(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A float network with validated layer wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatModel {
    input: ModelInput,
    layers: Vec<FloatLayer>,
    widths: Vec<usize>,
}

/// Output widths of every layer, checking the wiring.
pub(crate) fn check_wiring(input: ModelInput, kinds: &[LayerShape]) -> Result<Vec<usize>> {
    let bad = |i: usize, msg: String| Err(IrnnError::InvalidModel(format!("layer {i}: {msg}")));
    if kinds.is_empty() {
        return Err(IrnnError::InvalidModel("model has no layers".into()));
    }
    let mut widths: Vec<usize> = Vec::with_capacity(kinds.len());
    for (i, k) in kinds.iter().enumerate() {
        let prev = match (i, input) {
            (0, ModelInput::Features { dim }) => Some(dim),
            (0, ModelInput::Tokens { .. }) => None,
            _ => Some(widths[i - 1]),
        };
        if i > 0 && matches!(kinds[i - 1], LayerShape::Projection { .. }) {
            return bad(i, "nothing may follow the final projection".into());
        }
        let w = match (*k, prev) {
            (LayerShape::Embedding { vocab, dim }, None) => match input {
                ModelInput::Tokens { vocab: v } if v == vocab => dim,
                _ => return bad(i, "embedding vocabulary differs from the model input".into()),
            },
            (LayerShape::Embedding { .. }, Some(_)) => return bad(i, "embedding must be the first layer".into()),
            (_, None) => return bad(i, "token models start with an embedding".into()),
            (LayerShape::Cell { n, m, bi }, Some(p)) => {
                if n != p {
                    return bad(i, format!("cell expects width {n}, gets {p}"));
                }
                if bi {
                    2 * m
                } else {
                    m
                }
            }
            (LayerShape::Decoder { memory, n, m, m_enc }, Some(p)) => {
                if memory >= i || matches!(kinds[memory], LayerShape::Projection { .. }) {
                    return bad(i, format!("invalid attention memory layer {memory}"));
                }
                if n != p || m_enc != widths[memory] {
                    return bad(i, format!("decoder widths n={n} m_enc={m_enc} vs inputs {p}, {}", widths[memory]));
                }
                m
            }
            (LayerShape::Residual { from }, Some(p)) => {
                if from + 1 >= i || widths[from] != p {
                    return bad(i, format!("residual from layer {from} does not fit"));
                }
                p
            }
            (LayerShape::Projection { rows, cols }, Some(p)) => {
                if cols != p {
                    return bad(i, format!("projection expects width {cols}, gets {p}"));
                }
                rows
            }
        };
        widths.push(w);
    }
    Ok(widths)
}

/// Shape-only view of a layer used for wiring checks.
#[derive(Clone, Copy, Debug)]
pub(crate) enum LayerShape {
    Embedding { vocab: usize, dim: usize },
    Cell { n: usize, m: usize, bi: bool },
    Decoder { memory: usize, n: usize, m: usize, m_enc: usize },
    Residual { from: usize },
    Projection { rows: usize, cols: usize },
}

fn shape_of(l: &FloatLayer) -> Result<LayerShape> {
    Ok(match l {
        FloatLayer::Embedding { vocab, dim, table } => {
            if table.len() != vocab * dim || *vocab == 0 || *dim == 0 {
                return Err(IrnnError::Dimension("embedding table size".into()));
            }
            LayerShape::Embedding { vocab: *vocab, dim: *dim }
        }
        FloatLayer::Lstm(w) => LayerShape::Cell {
            n: w.input_size,
            m: w.hidden_size,
            bi: false,
        },
        FloatLayer::BiLstm { fwd, bwd } => {
            if fwd.input_size != bwd.input_size || fwd.hidden_size != bwd.hidden_size {
                return Err(IrnnError::Dimension("bidirectional cells differ in size".into()));
            }
            LayerShape::Cell {
                n: fwd.input_size,
                m: fwd.hidden_size,
                bi: true,
            }
        }
        FloatLayer::MadNormLstm { weights, norm } => {
            norm.validate(weights.hidden_size)?;
            LayerShape::Cell {
                n: weights.input_size,
                m: weights.hidden_size,
                bi: false,
            }
        }
        FloatLayer::AttentionDecoder {
            memory,
            cell,
            attention,
        } => {
            attention.validate()?;
            if attention.m_dec != cell.hidden_size {
                return Err(IrnnError::Dimension("attention query width differs from the decoder".into()));
            }
            LayerShape::Decoder {
                memory: *memory,
                n: cell.input_size,
                m: cell.hidden_size,
                m_enc: attention.m_enc,
            }
        }
        FloatLayer::ResidualAdd { from } => LayerShape::Residual { from: *from },
        FloatLayer::FinalProjection { rows, cols, w, bias } => {
            if w.len() != rows * cols || bias.len() != *rows {
                return Err(IrnnError::Dimension("projection size".into()));
            }
            LayerShape::Projection { rows: *rows, cols: *cols }
        }
    })
}

impl FloatModel {
    pub fn new(input: ModelInput, layers: Vec<FloatLayer>) -> Result<Self> {
        let shapes = layers.iter().map(shape_of).collect::<Result<Vec<_>>>()?;
        let widths = check_wiring(input, &shapes)?;
        Ok(FloatModel { input, layers, widths })
    }

    pub fn input(&self) -> ModelInput {
        self.input
    }

    pub fn layers(&self) -> &[FloatLayer] {
        &self.layers
    }

    /// Output width of layer `i`.
    pub fn width(&self, i: usize) -> usize {
        self.widths[i]
    }

    /// Every stage calibration must observe.
    pub fn stage_names(&self) -> Vec<String> {
        use crate::attention::AttentionStages;
        use crate::lstm::LstmStages;
        let mut v = Vec::new();
        if let ModelInput::Features { .. } = self.input {
            v.push(INPUT_STAGE.to_string());
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = layer_prefix(i);
            match l {
                FloatLayer::Embedding { .. } | FloatLayer::FinalProjection { .. } => continue,
                FloatLayer::Lstm(_) => v.extend(LstmStages::stage_names(&p, false, false)),
                FloatLayer::MadNormLstm { .. } => v.extend(LstmStages::stage_names(&p, false, true)),
                FloatLayer::BiLstm { .. } => {
                    v.extend(LstmStages::stage_names(&format!("{p}.fwd"), false, false));
                    v.extend(LstmStages::stage_names(&format!("{p}.bwd"), false, false));
                }
                FloatLayer::AttentionDecoder { .. } => {
                    v.extend(LstmStages::stage_names(&p, true, false));
                    v.extend(AttentionStages::stage_names(&format!("{p}.att")));
                }
                FloatLayer::ResidualAdd { .. } => {}
            }
            v.push(out_stage(i));
        }
        v
    }

    /// Runs the network reporting every stage to `obs`; returns the output
    /// of every layer.
    pub fn forward_observed(&self, input: Sequence<'_>, obs: &mut dyn Observer) -> Result<Vec<Vec<Vec<f64>>>> {
        if input.is_empty() {
            return Err(IrnnError::EmptySequence);
        }
        float_op();
        let mut outs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let feats: Option<Vec<Vec<f64>>> = match (input, self.input) {
            (Sequence::Features(f), ModelInput::Features { dim }) => {
                if let Some(bad) = f.iter().find(|x| x.len() != dim) {
                    return Err(IrnnError::Dimension(format!("feature frame of width {}, expected {dim}", bad.len())));
                }
                for x in f {
                    obs.observe(INPUT_STAGE, x);
                }
                Some(f.to_vec())
            }
            (Sequence::Tokens(_), ModelInput::Tokens { .. }) => None,
            _ => return Err(IrnnError::InvalidModel("input kind does not match the model".into())),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let p = layer_prefix(i);
            let prev: &[Vec<f64>] = if i == 0 {
                feats.as_deref().unwrap_or(&[])
            } else {
                &outs[i - 1]
            };
            let out: Vec<Vec<f64>> = match layer {
                FloatLayer::Embedding { vocab, dim, table } => {
                    let Sequence::Tokens(tokens) = input else { unreachable!() };
                    tokens
                        .iter()
                        .map(|&t| {
                            if t >= *vocab {
                                Err(IrnnError::OutOfVocabulary { id: t, vocab: *vocab })
                            } else {
                                Ok(table[t * dim..(t + 1) * dim].to_vec())
                            }
                        })
                        .collect::<Result<_>>()?
                }
                FloatLayer::Lstm(w) => lstm_sequence_real_observed(prev, w, None, Direction::Forward, obs, &p),
                FloatLayer::MadNormLstm { weights, norm } => {
                    lstm_sequence_real_observed(prev, weights, Some(norm), Direction::Forward, obs, &p)
                }
                FloatLayer::BiLstm { fwd, bwd } => {
                    let f = lstm_sequence_real_observed(prev, fwd, None, Direction::Forward, obs, &format!("{p}.fwd"));
                    let b = lstm_sequence_real_observed(prev, bwd, None, Direction::Backward, obs, &format!("{p}.bwd"));
                    f.into_iter()
                        .zip(b)
                        .map(|(mut a, b)| {
                            a.extend(b);
                            a
                        })
                        .collect()
                }
                FloatLayer::AttentionDecoder {
                    memory,
                    cell,
                    attention,
                } => {
                    let mem = &outs[*memory];
                    let mut st = LstmState::zeros(cell.hidden_size);
                    let att_prefix = format!("{p}.att");
                    let mut hs = Vec::with_capacity(prev.len());
                    for x in prev {
                        let (s, _) = attention_real_observed(&st.h, mem, attention, obs, &att_prefix);
                        st = lstm_step_real_observed(x, &st, cell, None, Some((&attention.w_s, &s)), obs, &p);
                        hs.push(st.h.clone());
                    }
                    hs
                }
                FloatLayer::ResidualAdd { from } => prev
                    .iter()
                    .zip(&outs[*from])
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                    .collect(),
                FloatLayer::FinalProjection { rows, cols, w, bias } => prev
                    .iter()
                    .map(|h| {
                        let mut y = matvec(w, *rows, *cols, h);
                        for (v, b) in y.iter_mut().zip(bias) {
                            *v += b;
                        }
                        y
                    })
                    .collect(),
            };
            if !matches!(layer, FloatLayer::FinalProjection { .. }) {
                for v in &out {
                    obs.observe(&out_stage(i), v);
                }
            }
            outs.push(out);
        }
        Ok(outs)
    }

    /// Final-layer outputs.
    pub fn forward(&self, input: Sequence<'_>) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_observed(input, &mut NullObserver)?.pop().expect("at least one layer"))
    }
}

/// Architecture of a randomly initialized model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub input: ModelInput,
    /// Embedding width for token inputs.
    pub embed: usize,
    pub hidden: usize,
    /// Number of recurrent layers.
    pub layers: usize,
    pub bidirectional: bool,
    pub madnorm: bool,
    /// Residual connection around every recurrent layer whose input and
    /// output widths agree.
    pub residual: bool,
    /// Attention width of a decoder appended after the recurrent stack.
    pub attention: Option<usize>,
    /// Width of the final projection.
    pub output: Option<usize>,
    /// Weights are drawn from `U(-scale, scale)`.
    pub scale: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input: ModelInput::Features { dim: 8 },
            embed: 16,
            hidden: 16,
            layers: 1,
            bidirectional: false,
            madnorm: false,
            residual: false,
            attention: None,
            output: None,
            scale: 0.1,
        }
    }
}

/// Rounds every value to the nearest `f32` so float models survive storage.
fn to_f32(v: &mut [f64]) {
    for x in v {
        *x = f64::from(*x as f32);
    }
}

fn round_lstm(w: &mut LstmWeights) {
    to_f32(&mut w.w_x);
    to_f32(&mut w.w_h);
    to_f32(&mut w.bias);
}

impl FloatModel {
    /// A randomly initialized model; weights are exactly representable as `f32`.
    pub fn random<R: Rng>(spec: &ArchSpec, rng: &mut R) -> Result<Self> {
        float_op();
        let s = spec.scale;
        let mut layers = Vec::new();
        let mut width = match spec.input {
            ModelInput::Features { dim } => dim,
            ModelInput::Tokens { vocab } => {
                let mut table: Vec<f64> = (0..vocab * spec.embed).map(|_| rng.random_range(-1.0..1.0)).collect();
                to_f32(&mut table);
                layers.push(FloatLayer::Embedding {
                    vocab,
                    dim: spec.embed,
                    table,
                });
                spec.embed
            }
        };
        let m = spec.hidden;
        for _ in 0..spec.layers {
            let in_width = width;
            let mut new = |n: usize| {
                let mut w = LstmWeights::random(n, m, s, rng);
                round_lstm(&mut w);
                w
            };
            let layer = if spec.bidirectional {
                let (fwd, bwd) = (new(width), new(width));
                width = 2 * m;
                FloatLayer::BiLstm { fwd, bwd }
            } else if spec.madnorm {
                let weights = new(width);
                width = m;
                let mut norm = NormWeights::identity(m);
                for g in [&mut norm.gamma_x, &mut norm.gamma_h, &mut norm.gamma_c] {
                    g.iter_mut().for_each(|v| *v = rng.random_range(0.8..1.2));
                    to_f32(g);
                }
                for b in [&mut norm.beta_x, &mut norm.beta_h, &mut norm.beta_c] {
                    b.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
                    to_f32(b);
                }
                FloatLayer::MadNormLstm { weights, norm }
            } else {
                let w = new(width);
                width = m;
                FloatLayer::Lstm(w)
            };
            layers.push(layer);
            // The layer just pushed sits at index len-1; its input came from len-2.
            if spec.residual && in_width == width && layers.len() >= 2 {
                layers.push(FloatLayer::ResidualAdd { from: layers.len() - 2 });
            }
        }
        if let Some(m_att) = spec.attention {
            let memory = layers.len() - 1;
            let mut cell = LstmWeights::random(width, m, s, rng);
            round_lstm(&mut cell);
            let mut attention = AttentionWeights::random(m_att, m, width, s.max(0.3), rng);
            for v in [&mut attention.w_q, &mut attention.w_k, &mut attention.v, &mut attention.w_s] {
                to_f32(v);
            }
            layers.push(FloatLayer::AttentionDecoder {
                memory,
                cell,
                attention,
            });
            width = m;
        }
        if let Some(rows) = spec.output {
            let mut w: Vec<f64> = (0..rows * width).map(|_| rng.random_range(-s..=s)).collect();
            let mut bias: Vec<f64> = (0..rows).map(|_| rng.random_range(-s..=s)).collect();
            to_f32(&mut w);
            to_f32(&mut bias);
            layers.push(FloatLayer::FinalProjection {
                rows,
                cols: width,
                w,
                bias,
            });
        }
        FloatModel::new(spec.input, layers)
    }
}
