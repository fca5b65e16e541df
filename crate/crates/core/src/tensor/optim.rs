use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::{Scalar, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are kept in `f64` regardless of
/// the parameter precision.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamW {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` holds one gradient per trainable parameter
    /// (missing entries count as zero gradients). Non-finite gradients abort
    /// the step before any parameter is modified.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[(ParamId, Vec<f64>)],
        lr: f64,
    ) -> TensorResult<()> {
        for (id, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGradient(params.get(*id).name.clone()));
            }
        }
        let mut dense: Vec<Option<&[f64]>> = vec![None; params.len()];
        for (id, g) in grads {
            dense[id.index()] = Some(g);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in dense.iter().enumerate() {
            let p = params.get_mut(ParamId(i));
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut x = w.as_f64() * (1.0 - lr * c.weight_decay);
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = T::from_f64(x);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state_tensors<T: Scalar>(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (id, p) in params.iter() {
            let shape = p.value.shape().to_vec();
            let i = id.index();
            out.push((
                format!("adamw.m/{}", p.name),
                Tensor::new(shape.clone(), self.m[i].clone()).expect("moment length"),
            ));
            out.push((
                format!("adamw.v/{}", p.name),
                Tensor::new(shape, self.v[i].clone()).expect("moment length"),
            ));
        }
        out
    }

    /// Restores moments saved by [`AdamW::state_tensors`].
    pub fn load_state<T: Scalar>(
        &mut self,
        params: &ParamStore<T>,
        step: u64,
        lookup: impl Fn(&str) -> Option<Vec<f64>>,
    ) -> TensorResult<()> {
        for (id, p) in params.iter() {
            let i = id.index();
            for (prefix, buf) in [("adamw.m/", &mut self.m[i]), ("adamw.v/", &mut self.v[i])] {
                let name = format!("{prefix}{}", p.name);
                let data = lookup(&name).ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
                if data.len() != buf.len() {
                    return Err(TensorError::DataLength {
                        shape: p.value.shape().to_vec(),
                        len: data.len(),
                    });
                }
                *buf = data;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Piecewise-linear one-cycle schedule: `start → max` over the first half of
/// training, `max → end` over the second half.
pub fn one_cycle_lr(step: u64, total_steps: u64, start: f64, max: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return start;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    let lerp = |a: f64, b: f64, f: f64| a * (1.0 - f) + b * f;
    if t <= 0.5 {
        lerp(start, max, 2.0 * t)
    } else {
        lerp(max, end, 2.0 * t - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycle {
    pub start: f64,
    pub max: f64,
    pub end: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            start: 1.5e-4,
            max: 3e-4,
            end: 1.5e-5,
        }
    }
}

impl OneCycle {
    pub fn lr(&self, step: u64, total_steps: u64) -> f64 {
        one_cycle_lr(step, total_steps, self.start, self.max, self.end)
    }
}
