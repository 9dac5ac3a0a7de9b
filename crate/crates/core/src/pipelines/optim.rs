//! Adam with linear learning-rate warmup.

use crate::nets::{ParamSet, RegisteredParams};
use crate::tape::Grads;
use crate::tensor::Tensor;
use crate::Scalar;

pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, warmup_steps: usize) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps, step: 0, m, v }
    }

    /// Apply one update from the gradients of a registered parameter set.
    /// Parameters without a gradient slot are left unchanged.
    pub fn apply(&mut self, params: &mut ParamSet<T>, reg: &RegisteredParams, grads: &Grads<T>) {
        self.step += 1;
        let warm = if self.warmup_steps > 0 {
            (self.step as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr_t = self.lr * warm;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let one_m_b1 = T::of_f64(1.0 - self.beta1);
        let one_m_b2 = T::of_f64(1.0 - self.beta2);
        let eps = T::of_f64(self.eps);
        let scale = T::of_f64(lr_t / bc1);
        let v_corr = T::of_f64(1.0 / bc2);
        for (idx, var) in reg.vars().iter().enumerate() {
            let Some(g) = grads.get(*var) else { continue };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = params.get_mut(crate::nets::ParamId(idx)).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let denom = (v[i] * v_corr).sqrt() + eps;
                p[i] = p[i] - scale * m[i] / denom;
            }
        }
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state_tensors<'a>(
        &'a self,
        params: &'a ParamSet<T>,
    ) -> impl Iterator<Item = (String, &'a Tensor<T>)> + 'a {
        params
            .iter()
            .enumerate()
            .flat_map(move |(i, (name, _))| {
                [(format!("opt.m.{name}"), &self.m[i]), (format!("opt.v.{name}"), &self.v[i])]
            })
    }

    pub fn load_state(
        &mut self,
        params: &ParamSet<T>,
        mut fetch: impl FnMut(&str) -> Option<Tensor<T>>,
        step: usize,
    ) -> Result<(), String> {
        for (i, (name, _)) in params.iter().enumerate() {
            let m = fetch(&format!("opt.m.{name}")).ok_or_else(|| format!("missing opt.m.{name}"))?;
            let v = fetch(&format!("opt.v.{name}")).ok_or_else(|| format!("missing opt.v.{name}"))?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(format!("optimizer state shape mismatch for {name}"));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        self.step = step;
        Ok(())
    }
}
