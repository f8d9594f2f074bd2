//! Mean-absolute-deviation normalization (MadNorm).
//!
//! `y_i = (x_i - mu) / d` with `d = mean |x_i - mu|`. The integer form
//! quantizes `mu`, the centered values, `d` and `y` to their own 8-bit
//! parameters and needs only multiplies, adds, absolute values and one
//! rounding division per element.

use crate::error::{IrnnError, Result};
use crate::exact::{self, Exact};
use crate::instrument::float_op;
use crate::quant::{rescale_sum2, saturate, BitWidth, QuantParams, QuantTensor, Rescale};

/// Variance floor used by the LayerNorm reference.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// `(x - mean) / sqrt(var + eps)` with the population variance.
pub fn layernorm_real(x: &[f64]) -> Vec<f64> {
    float_op();
    let h = x.len() as f64;
    let mu = x.iter().sum::<f64>() / h;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / h;
    let sd = (var + LAYERNORM_EPS).sqrt();
    x.iter().map(|v| (v - mu) / sd).collect()
}

/// `mean |x_i - mean(x)|`.
pub fn mean_abs_deviation(x: &[f64]) -> f64 {
    float_op();
    let h = x.len() as f64;
    let mu = x.iter().sum::<f64>() / h;
    x.iter().map(|v| (v - mu).abs()).sum::<f64>() / h
}

/// Intermediate values of one real MadNorm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MadNormTrace {
    pub mu: f64,
    pub xhat: Vec<f64>,
    pub d: f64,
    pub y: Vec<f64>,
}

pub fn madnorm_real_traced(x: &[f64]) -> MadNormTrace {
    float_op();
    let h = x.len() as f64;
    let mu = x.iter().sum::<f64>() / h;
    let xhat: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let d = xhat.iter().map(|v| v.abs()).sum::<f64>() / h;
    // A zero deviation means every element equals the mean.
    let y = if d > 0.0 {
        xhat.iter().map(|v| v / d).collect()
    } else {
        vec![0.0; x.len()]
    };
    MadNormTrace { mu, xhat, d, y }
}

/// `(x_i - mu) / d`, or zeros when `d = 0`.
pub fn madnorm_real(x: &[f64]) -> Vec<f64> {
    madnorm_real_traced(x).y
}

/// `gamma * madnorm(x) + beta`, elementwise.
pub fn madnorm_affine_real(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let y = madnorm_real(x);
    float_op();
    y.iter().zip(gamma).zip(beta).map(|((y, g), b)| g * y + b).collect()
}

/// Quantized elementwise scale and shift applied after normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct MadNormAffine {
    pub gamma: QuantTensor,
    pub beta: QuantTensor,
    pub qp_out: QuantParams,
}

/// Stage parameters of one integer MadNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct MadNormQParams {
    /// Input; 8-bit, or 16-bit when normalizing a wide cell state.
    pub qp_x: QuantParams,
    pub qp_mu: QuantParams,
    pub qp_xhat: QuantParams,
    /// Must have zero-point 0.
    pub qp_d: QuantParams,
    pub qp_y: QuantParams,
    pub affine: Option<MadNormAffine>,
}

#[derive(Clone, Debug, PartialEq)]
struct AffineConsts {
    gamma: Vec<i64>,
    beta: Vec<i64>,
    r_gamma: Rescale,
    r_beta: Rescale,
}

/// Integer MadNorm with its fixed-point constants.
#[derive(Clone, Debug, PartialEq)]
pub struct MadNorm {
    qp: MadNormQParams,
    r_mu: Rescale,
    r_xhat_x: Rescale,
    r_xhat_mu: Rescale,
    r_d: Rescale,
    r_y: Rescale,
    affine: Option<AffineConsts>,
}

fn require_8bit(name: &str, qp: &QuantParams) -> Result<()> {
    if qp.bits() != BitWidth::B8 {
        return Err(IrnnError::StageBitwidth {
            stage: name.into(),
            expected: 8,
            got: qp.bits().bits(),
        });
    }
    Ok(())
}

impl MadNorm {
    pub fn new(qp: MadNormQParams) -> Result<Self> {
        require_8bit("madnorm.mu", &qp.qp_mu)?;
        require_8bit("madnorm.xhat", &qp.qp_xhat)?;
        require_8bit("madnorm.d", &qp.qp_d)?;
        require_8bit("madnorm.y", &qp.qp_y)?;
        if qp.qp_d.zero_point() != 0 {
            return Err(IrnnError::InvalidModel("MAD qparams must have zero-point 0".into()));
        }
        let (sx, smu, sxh, sd, sy) = (
            qp.qp_x.scale(),
            qp.qp_mu.scale(),
            qp.qp_xhat.scale(),
            qp.qp_d.scale(),
            qp.qp_y.scale(),
        );
        let affine = match &qp.affine {
            None => None,
            Some(a) => {
                require_8bit("madnorm.gamma", a.gamma.qparams())?;
                require_8bit("madnorm.beta", a.beta.qparams())?;
                require_8bit("madnorm.out", &a.qp_out)?;
                if a.gamma.data().len() != a.beta.data().len() {
                    return Err(IrnnError::Dimension("gamma and beta lengths differ".into()));
                }
                let zg = a.gamma.qparams().zero_point();
                let zb = a.beta.qparams().zero_point();
                Some(AffineConsts {
                    gamma: a.gamma.data().iter().map(|&g| i64::from(i32::from(g) - zg)).collect(),
                    beta: a.beta.data().iter().map(|&b| i64::from(i32::from(b) - zb)).collect(),
                    r_gamma: Rescale::from_real(a.gamma.qparams().scale() * sy / a.qp_out.scale())?,
                    r_beta: Rescale::from_real(a.beta.qparams().scale() / a.qp_out.scale())?,
                })
            }
        };
        Ok(MadNorm {
            r_mu: Rescale::from_real(sx / smu)?,
            r_xhat_x: Rescale::from_real(sx / sxh)?,
            r_xhat_mu: Rescale::from_real(smu / sxh)?,
            r_d: Rescale::from_real(sxh / sd)?,
            r_y: Rescale::from_real(sxh / (sy * sd))?,
            affine,
            qp,
        })
    }

    pub fn qparams(&self) -> &MadNormQParams {
        &self.qp
    }

    /// Hidden size fixed by the affine parameters, if any.
    pub fn width(&self) -> Option<usize> {
        self.affine.as_ref().map(|a| a.gamma.len())
    }

    pub fn in_qp(&self) -> &QuantParams {
        &self.qp.qp_x
    }

    /// Parameters of the final output (after the affine stage when present).
    pub fn out_qp(&self) -> &QuantParams {
        self.qp.affine.as_ref().map_or(&self.qp.qp_y, |a| &a.qp_out)
    }

    fn check_width(&self, h: usize) {
        debug_assert!(h > 0);
        debug_assert!(self.width().is_none_or(|w| w == h));
    }

    /// Integer normalization of codes under `qp_x`.
    pub fn forward(&self, q_x: &[i32]) -> Vec<i32> {
        self.check_width(q_x.len());
        let p = &self.qp;
        let h = q_x.len() as i64;
        let zx = p.qp_x.zero_point();

        let sum: i64 = q_x.iter().map(|&q| i64::from(q - zx)).sum();
        let q_mu = saturate(self.r_mu.apply_div(sum, h) + i64::from(p.qp_mu.zero_point()), p.qp_mu.bits());

        let mu_off = -i64::from(q_mu - p.qp_mu.zero_point());
        let zxh = p.qp_xhat.zero_point();
        let xhat: Vec<i64> = q_x
            .iter()
            .map(|&q| {
                let v = rescale_sum2(i64::from(q - zx), &self.r_xhat_x, mu_off, &self.r_xhat_mu);
                i64::from(saturate(v + i64::from(zxh), p.qp_xhat.bits()) - zxh)
            })
            .collect();

        let abs_sum: i64 = xhat.iter().map(|v| v.abs()).sum();
        let q_d = saturate(self.r_d.apply_div(abs_sum, h), p.qp_d.bits());
        let den = i64::from(q_d.max(1));

        let zy = p.qp_y.zero_point();
        let y = xhat
            .iter()
            .map(|&v| saturate(self.r_y.apply_div(v, den) + i64::from(zy), p.qp_y.bits()));
        match (&self.affine, &p.affine) {
            (Some(c), Some(a)) => y
                .enumerate()
                .map(|(i, qy)| {
                    let prod = c.gamma[i] * i64::from(qy - zy);
                    let v = rescale_sum2(prod, &c.r_gamma, c.beta[i], &c.r_beta);
                    saturate(v + i64::from(a.qp_out.zero_point()), a.qp_out.bits())
                })
                .collect(),
            _ => y.collect(),
        }
    }

    /// Exact-arithmetic reference for [`MadNorm::forward`].
    pub fn forward_fakequant(&self, q_x: &[i32]) -> Vec<i32> {
        let p = &self.qp;
        let h = Exact::from_integer(q_x.len() as i128);

        let sum: Exact = q_x.iter().map(|&q| exact::offset(q, &p.qp_x)).sum();
        let q_mu = exact::to_stage(&(exact::of_rescale(&self.r_mu) * sum / h), &p.qp_mu);
        let mu = exact::offset(q_mu, &p.qp_mu);

        let xhat: Vec<i32> = q_x
            .iter()
            .map(|&q| {
                let v = exact::of_rescale(&self.r_xhat_x) * exact::offset(q, &p.qp_x)
                    - exact::of_rescale(&self.r_xhat_mu) * mu;
                exact::to_stage(&v, &p.qp_xhat)
            })
            .collect();

        let abs_sum: Exact = xhat
            .iter()
            .map(|&q| {
                let o = exact::offset(q, &p.qp_xhat);
                if o < Exact::from_integer(0) {
                    -o
                } else {
                    o
                }
            })
            .sum();
        let q_d = exact::to_stage(&(exact::of_rescale(&self.r_d) * abs_sum / h), &p.qp_d);
        let den = exact::int(i64::from(q_d.max(1)));

        let y: Vec<i32> = xhat
            .iter()
            .map(|&q| {
                let v = exact::of_rescale(&self.r_y) * exact::offset(q, &p.qp_xhat) / den;
                exact::to_stage(&v, &p.qp_y)
            })
            .collect();
        match &p.affine {
            None => y,
            Some(a) => y
                .iter()
                .enumerate()
                .map(|(i, &qy)| {
                    let g = exact::offset(i32::from(a.gamma.data()[i]), a.gamma.qparams());
                    let b = exact::offset(i32::from(a.beta.data()[i]), a.beta.qparams());
                    let c = self.affine.as_ref().expect("affine constants");
                    let v = exact::of_rescale(&c.r_gamma) * g * exact::offset(qy, &p.qp_y)
                        + exact::of_rescale(&c.r_beta) * b;
                    exact::to_stage(&v, &a.qp_out)
                })
                .collect(),
        }
    }
}

/// Integer MadNorm of a quantized vector.
pub fn madnorm_int(q_x: &QuantTensor, norm: &MadNorm) -> Result<QuantTensor> {
    if q_x.qparams() != norm.in_qp() {
        return Err(IrnnError::SharedQParams("MadNorm input qparams differ from the tensor's".into()));
    }
    if q_x.data().is_empty() {
        return Err(IrnnError::EmptySequence);
    }
    if let Some(w) = norm.width() {
        if w != q_x.data().len() {
            return Err(IrnnError::Dimension(format!("MadNorm width {w}, input {}", q_x.data().len())));
        }
    }
    QuantTensor::from_codes(q_x.shape().to_vec(), &norm.forward(&q_x.codes()), *norm.out_qp())
}

/// Exact-arithmetic reference for [`madnorm_int`].
pub fn madnorm_fakequant(q_x: &QuantTensor, norm: &MadNorm) -> Vec<i32> {
    norm.forward_fakequant(&q_x.codes())
}
