//! Adam optimizer with bias correction.

use super::{GradMap, NdArray, ParamSet};
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-parameter moment estimates plus the shared step counter.
///
/// Moment arrays are kept in the owning [`ParamSet`]'s insertion order so
/// state stays aligned with parameters across save/load.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<NdArray>,
    v: Vec<NdArray>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_hyper(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyper(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let names = params.names().map(str::to_string).collect();
        let m = params.iter().map(|(_, p)| NdArray::zeros(p.shape())).collect();
        let v = params.iter().map(|(_, p)| NdArray::zeros(p.shape())).collect();
        Self {
            names,
            m,
            v,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub(crate) fn from_parts(
        names: Vec<String>,
        m: Vec<NdArray>,
        v: Vec<NdArray>,
        step: u64,
    ) -> Self {
        Self {
            names,
            m,
            v,
            step,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &NdArray, &NdArray)> {
        self.names
            .iter()
            .zip(&self.m)
            .zip(&self.v)
            .map(|((n, m), v)| (n.as_str(), m, v))
    }

    pub fn quantize_f32(&mut self) {
        for a in self.m.iter_mut().chain(self.v.iter_mut()) {
            *a = a.quantized_f32();
        }
    }
}

/// One Adam update. Deterministic given inputs; `lr == 0` leaves parameter
/// values untouched while the step counter still advances.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if state.names.len() != params.len() {
        return Err(Error::ShapeMismatch(
            "optimizer state arity differs from parameter set".to_string(),
        ));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);

    for (idx, (name, p)) in params.iter_mut().enumerate() {
        if state.names[idx] != name {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state order mismatch at {name:?}"
            )));
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Gradient(format!("missing gradient for {name:?}")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name:?}: {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_all_finite() {
            return Err(Error::NonFinite(format!("gradient for {name:?}")));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for k in 0..p.len() {
            let gk = g.data()[k];
            let mk = state.beta1 * m.data()[k] + (1.0 - state.beta1) * gk;
            let vk = state.beta2 * v.data()[k] + (1.0 - state.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
