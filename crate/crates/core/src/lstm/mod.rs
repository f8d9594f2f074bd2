//! LSTM cells and sequence layers.
//!
//! Gate blocks are laid out `(i, f, j, o)`, each `m` rows of the `4m`-row
//! weight matrices:
//!
//! ```text
//! [i; f; j; o] = W_x x_t + W_h h_{t-1} + b
//! c_t = sigmoid(f) * c_{t-1} + sigmoid(i) * tanh(j)
//! h_t = sigmoid(o) * tanh(c_t)
//! ```
//!
//! The normalized cell applies MadNorm (with its own scale and shift) to
//! `W_x x_t` and `W_h h_{t-1}` separately and to `c_t` before the output
//! tanh; the bias is carried by the shift of the input-side norm.

mod int;

pub use int::{
    sigmoid_out_qp, tanh_out_qp, GatePreactivations, IntBiLstm, IntLstmCell, LstmStages, NormStages, QState,
};

use rand::Rng;

use crate::error::{IrnnError, Result};
use crate::instrument::float_op;
use crate::linear::matvec;
use crate::madnorm::madnorm_real_traced;
use crate::pwl::Activation;
use crate::runtime::calibrate::Observer;

/// Gate block names in storage order.
pub const GATE_NAMES: [&str; 4] = ["i", "f", "j", "o"];

/// Nonlinearity applied to each gate block.
pub const GATE_ACTIVATIONS: [Activation; 4] =
    [Activation::Sigmoid, Activation::Sigmoid, Activation::Tanh, Activation::Sigmoid];

/// Names of the three normalizations of a MadNorm cell.
pub const NORM_NAMES: [&str; 3] = ["norm_x", "norm_h", "norm_c"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Real LSTM parameters: `W_x` is `4m x n`, `W_h` is `4m x m`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_x: Vec<f64>,
    pub w_h: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LstmWeights {
    pub fn new(input_size: usize, hidden_size: usize, w_x: Vec<f64>, w_h: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let g = 4 * hidden_size;
        if input_size == 0 || hidden_size == 0 {
            return Err(IrnnError::Dimension("LSTM sizes must be positive".into()));
        }
        if w_x.len() != g * input_size || w_h.len() != g * hidden_size || bias.len() != g {
            return Err(IrnnError::Dimension(format!(
                "LSTM n={input_size} m={hidden_size}: got W_x {}, W_h {}, bias {}",
                w_x.len(),
                w_h.len(),
                bias.len()
            )));
        }
        Ok(LstmWeights {
            input_size,
            hidden_size,
            w_x,
            w_h,
            bias,
        })
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let g = 4 * hidden_size;
        LstmWeights {
            input_size,
            hidden_size,
            w_x: vec![0.0; g * input_size],
            w_h: vec![0.0; g * hidden_size],
            bias: vec![0.0; g],
        }
    }

    /// Weights and biases drawn from `U(-scale, scale)`.
    pub fn random<R: Rng>(input_size: usize, hidden_size: usize, scale: f64, rng: &mut R) -> Self {
        let g = 4 * hidden_size;
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-scale..=scale)).collect::<Vec<f64>>();
        LstmWeights {
            input_size,
            hidden_size,
            w_x: draw(g * input_size),
            w_h: draw(g * hidden_size),
            bias: draw(g),
        }
    }
}

/// Scales and shifts of the three normalizations of a MadNorm cell.
#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights {
    pub gamma_x: Vec<f64>,
    pub beta_x: Vec<f64>,
    pub gamma_h: Vec<f64>,
    pub beta_h: Vec<f64>,
    pub gamma_c: Vec<f64>,
    pub beta_c: Vec<f64>,
}

impl NormWeights {
    /// `gamma = 1`, `beta = 0` everywhere.
    pub fn identity(hidden_size: usize) -> Self {
        let g = 4 * hidden_size;
        NormWeights {
            gamma_x: vec![1.0; g],
            beta_x: vec![0.0; g],
            gamma_h: vec![1.0; g],
            beta_h: vec![0.0; g],
            gamma_c: vec![1.0; hidden_size],
            beta_c: vec![0.0; hidden_size],
        }
    }

    pub fn validate(&self, hidden_size: usize) -> Result<()> {
        let g = 4 * hidden_size;
        let ok = [&self.gamma_x, &self.beta_x, &self.gamma_h, &self.beta_h]
            .iter()
            .all(|v| v.len() == g)
            && self.gamma_c.len() == hidden_size
            && self.beta_c.len() == hidden_size;
        if ok {
            Ok(())
        } else {
            Err(IrnnError::Dimension(format!("norm parameters do not match m = {hidden_size}")))
        }
    }

    /// `(gamma, beta)` of norm `k` in [`NORM_NAMES`] order, with `bias`
    /// added to the input-side shift.
    pub fn affine(&self, k: usize, bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match k {
            0 => {
                float_op();
                (self.gamma_x.clone(), self.beta_x.iter().zip(bias).map(|(b, c)| b + c).collect())
            }
            1 => (self.gamma_h.clone(), self.beta_h.clone()),
            _ => (self.gamma_c.clone(), self.beta_c.clone()),
        }
    }
}

/// Real hidden and cell state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden_size],
            c: vec![0.0; hidden_size],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalize(v: &[f64], gamma: &[f64], beta: &[f64], obs: &mut dyn Observer, prefix: &str, name: &str) -> Vec<f64> {
    let t = madnorm_real_traced(v);
    let out: Vec<f64> = t.y.iter().zip(gamma).zip(beta).map(|((y, g), b)| g * y + b).collect();
    obs.observe(&format!("{prefix}.{name}.mu"), &[t.mu]);
    obs.observe(&format!("{prefix}.{name}.xhat"), &t.xhat);
    obs.observe(&format!("{prefix}.{name}.d"), &[t.d]);
    obs.observe(&format!("{prefix}.{name}.y"), &t.y);
    obs.observe(&format!("{prefix}.{name}.out"), &out);
    out
}

/// One real step reporting every intermediate stage to `obs` under
/// `prefix`.
///
/// `context` is `(W_s, s_t)` for attention decoders: `W_s` is `4m x k`.
pub fn lstm_step_real_observed(
    x: &[f64],
    state: &LstmState,
    w: &LstmWeights,
    norm: Option<&NormWeights>,
    context: Option<(&[f64], &[f64])>,
    obs: &mut dyn Observer,
    prefix: &str,
) -> LstmState {
    float_op();
    let m = w.hidden_size;
    let g = 4 * m;
    let mut wx = matvec(&w.w_x, g, w.input_size, x);
    let wh = matvec(&w.w_h, g, m, &state.h);
    let mut pre = match norm {
        None => {
            for (a, b) in wx.iter_mut().zip(&w.bias) {
                *a += b;
            }
            obs.observe(&format!("{prefix}.wx"), &wx);
            obs.observe(&format!("{prefix}.wh"), &wh);
            wx.iter().zip(&wh).map(|(a, b)| a + b).collect::<Vec<f64>>()
        }
        Some(nw) => {
            obs.observe(&format!("{prefix}.wx"), &wx);
            obs.observe(&format!("{prefix}.wh"), &wh);
            let (gx, bx) = nw.affine(0, &w.bias);
            let nx = normalize(&wx, &gx, &bx, obs, prefix, NORM_NAMES[0]);
            let nh = normalize(&wh, &nw.gamma_h, &nw.beta_h, obs, prefix, NORM_NAMES[1]);
            nx.iter().zip(&nh).map(|(a, b)| a + b).collect()
        }
    };
    if let Some((w_s, s)) = context {
        let ws = matvec(w_s, g, s.len(), s);
        obs.observe(&format!("{prefix}.ws"), &ws);
        for (p, v) in pre.iter_mut().zip(&ws) {
            *p += v;
        }
    }
    for (k, name) in GATE_NAMES.iter().enumerate() {
        obs.observe(&format!("{prefix}.gate.{name}"), &pre[k * m..(k + 1) * m]);
    }
    let (gi, rest) = pre.split_at(m);
    let (gf, rest) = rest.split_at(m);
    let (gj, go) = rest.split_at(m);
    let fc: Vec<f64> = gf.iter().zip(&state.c).map(|(f, c)| sigmoid(*f) * c).collect();
    let ij: Vec<f64> = gi.iter().zip(gj).map(|(i, j)| sigmoid(*i) * j.tanh()).collect();
    let c: Vec<f64> = fc.iter().zip(&ij).map(|(a, b)| a + b).collect();
    obs.observe(&format!("{prefix}.fc"), &fc);
    obs.observe(&format!("{prefix}.ij"), &ij);
    obs.observe(&format!("{prefix}.c"), &c);
    let c_out = match norm {
        None => c.clone(),
        Some(nw) => normalize(&c, &nw.gamma_c, &nw.beta_c, obs, prefix, NORM_NAMES[2]),
    };
    let h = go.iter().zip(&c_out).map(|(o, c)| sigmoid(*o) * c.tanh()).collect();
    LstmState { h, c }
}

/// One step of the reference LSTM cell.
pub fn lstm_step_real(x: &[f64], state: &LstmState, w: &LstmWeights) -> LstmState {
    lstm_step_real_observed(x, state, w, None, None, &mut crate::runtime::calibrate::NullObserver, "")
}

/// One step of the reference MadNorm LSTM cell.
pub fn madnorm_lstm_step_real(x: &[f64], state: &LstmState, w: &LstmWeights, norm: &NormWeights) -> LstmState {
    lstm_step_real_observed(x, state, w, Some(norm), None, &mut crate::runtime::calibrate::NullObserver, "")
}

/// Runs a cell over `xs` from a zero state; outputs are in input time order.
pub fn lstm_sequence_real_observed(
    xs: &[Vec<f64>],
    w: &LstmWeights,
    norm: Option<&NormWeights>,
    dir: Direction,
    obs: &mut dyn Observer,
    prefix: &str,
) -> Vec<Vec<f64>> {
    let mut state = LstmState::zeros(w.hidden_size);
    let mut out = vec![Vec::new(); xs.len()];
    let order: Box<dyn Iterator<Item = usize>> = match dir {
        Direction::Forward => Box::new(0..xs.len()),
        Direction::Backward => Box::new((0..xs.len()).rev()),
    };
    for t in order {
        state = lstm_step_real_observed(&xs[t], &state, w, norm, None, obs, prefix);
        out[t] = state.h.clone();
    }
    out
}

pub fn lstm_sequence_real(xs: &[Vec<f64>], w: &LstmWeights, norm: Option<&NormWeights>, dir: Direction) -> Vec<Vec<f64>> {
    lstm_sequence_real_observed(xs, w, norm, dir, &mut crate::runtime::calibrate::NullObserver, "")
}

/// `[fwd_t ; bwd_t]` for every `t`.
pub fn bilstm_sequence_real(xs: &[Vec<f64>], fwd: &LstmWeights, bwd: &LstmWeights) -> Vec<Vec<f64>> {
    let f = lstm_sequence_real(xs, fwd, None, Direction::Forward);
    let b = lstm_sequence_real(xs, bwd, None, Direction::Backward);
    f.into_iter()
        .zip(b)
        .map(|(mut a, b)| {
            a.extend(b);
            a
        })
        .collect()
}
