use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// Gradients are left in place; clear them with [`ParamStore::zero_grad`].
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64, cfg: AdamConfig) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
        return Err(Error::Argument(format!("parameter {name} has no gradient")));
    }
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let (lr, eps) = (T::c(lr), T::c(cfg.eps));
    for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
        let grad = p.grad.as_ref().expect("checked above");
        p.adam.step += 1;
        let t = p.adam.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = grad[i];
            let m = b1 * p.adam.m[i] + (T::one() - b1) * g;
            let v = b2 * p.adam.v[i] + (T::one() - b2) * g * g;
            p.adam.m[i] = m;
            p.adam.v[i] = v;
            values[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}
