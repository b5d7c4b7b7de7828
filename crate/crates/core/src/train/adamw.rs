use super::{Result, TrainConfig, TrainError};
use crate::model::Params;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.epsilon,
            weight_decay: c.weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam update on a flat slice. `t` is the
/// 1-based step used for bias correction.
pub(crate) fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    h: AdamHyper,
) {
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps) + h.lr * h.weight_decay * theta[i];
    }
}

/// Applies one AdamW step to every parameter array. Nothing is modified if
/// shapes disagree or any gradient is non-finite.
pub fn adamw_step(
    params: &mut Params,
    grads: &Params,
    opt: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let pt = params.tensors();
    let gt = grads.tensors();
    let (mt, vt) = (opt.m.tensors(), opt.v.tensors());
    if pt.len() != gt.len() || pt.len() != mt.len() || pt.len() != vt.len() {
        return Err(TrainError::ShapeMismatch("parameter and gradient array counts differ".into()));
    }
    for (i, p) in pt.iter().enumerate() {
        if gt[i].shape != p.shape || mt[i].shape != p.shape || vt[i].shape != p.shape {
            return Err(TrainError::ShapeMismatch(format!(
                "array {i}: params {:?}, grads {:?}",
                p.shape, gt[i].shape
            )));
        }
    }
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    opt.step += 1;
    let h = AdamHyper::from(config);
    let t = opt.step;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.m.tensors_mut())
        .zip(opt.v.tensors_mut())
    {
        adamw_update(&mut p.data, &g.data, &mut m.data, &mut v.data, t, h);
    }
    Ok(())
}
