use serde::{Deserialize, Serialize};

use crate::error::{GfkError, Result};
use crate::model::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments, one buffer per parameter tensor in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(sizes: &[usize], config: AdamConfig) -> Self {
        OptimizerState {
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            config,
        }
    }

    pub fn for_params(params: &ParamSet, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        Self::new(&sizes, config)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn check(&self, names: &[String], grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.first.len() || grads.iter().zip(&self.first).any(|(g, m)| g.len() != m.len()) {
            return Err(GfkError::dim("optimizer step", String::from("gradient shapes do not mirror the parameters")));
        }
        for (g, name) in grads.iter().zip(names) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(GfkError::NonFiniteGrad { name: name.clone(), step: self.step + 1 });
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update of `values[i]` by `grads[i]`; the
    /// gradients are zeroed afterwards. Nothing is modified when a gradient is
    /// non-finite.
    pub fn update(&mut self, names: &[String], values: &mut [&mut [f64]], grads: &mut [Vec<f64>], lr: f64) -> Result<()> {
        self.check(names, grads)?;
        if values.len() != grads.len() {
            return Err(GfkError::dim("optimizer step", format!("{} tensors, {} gradients", values.len(), grads.len())));
        }
        self.step += 1;
        for (i, v) in values.iter_mut().enumerate() {
            self.apply(i, v, &grads[i], lr);
        }
        grads.iter_mut().for_each(|g| g.fill(0.0));
        Ok(())
    }

    fn apply(&mut self, i: usize, values: &mut [f64], grad: &[f64], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (m, v) = (&mut self.first[i], &mut self.second[i]);
        for j in 0..values.len() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            values[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
}

/// Adam step over every tensor of `params`; `grads` follow visit order.
pub fn optimizer_step(params: &mut ParamSet, grads: &mut [Vec<f64>], state: &mut OptimizerState, lr: f64) -> Result<()> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    state.check(&names, grads)?;
    state.step += 1;
    let mut i = 0;
    params.weights_mut().visit_mut(&mut |_, t| {
        state.apply(i, t.data_mut(), &grads[i], lr);
        i += 1;
    });
    grads.iter_mut().for_each(|g| g.fill(0.0));
    Ok(())
}
