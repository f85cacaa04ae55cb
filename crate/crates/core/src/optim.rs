//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct State {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with per-parameter state keyed by name. Moment buffers are kept in
/// f64 so the update arithmetic is identical for f32 and f64 models.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    state: BTreeMap<String, State>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, state: BTreeMap::new() }
    }

    /// One Adam step on `param` with gradient `grad`. Rejects non-finite
    /// gradients, naming the parameter.
    pub fn step<T: Scalar>(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("grad has {} entries, param {} has {}", grad.len(), name, param.numel()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", context: format!("parameter '{}'", name) });
        }
        let st = self.state.entry(name.to_string()).or_insert_with(|| State {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        if st.m.len() != grad.len() {
            return Err(Error::shape(
                "adam_step",
                format!("state size {} does not match parameter '{}' size {}", st.m.len(), name, grad.len()),
            ));
        }
        st.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(st.t as i32);
        let bc2 = 1.0 - b2.powi(st.t as i32);
        let data = param.data_mut();
        for i in 0..grad.len() {
            let g = grad[i].to64();
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            let upd = self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            data[i] = T::of(data[i].to64() - upd);
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.data().to_vec();
        opt.step("p", &mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // bias-corrected first step with constant grad 1 moves ~lr
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let mut p = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        opt.step("p", &mut p, &[1.0]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6, "{}", p.data()[0]);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut opt = Adam::new(AdamConfig { lr: 0.01, ..Default::default() });
            let mut p = Tensor::<f64>::new(vec![2], vec![0.3, -0.7]).unwrap();
            let mut rng = crate::rng::Rng::new(21);
            for _ in 0..100 {
                let g = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
                opt.step("p", &mut p, &g).unwrap();
            }
            p.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let err = opt.step("ga.conv0.w", &mut p, &[f64::NAN]).unwrap_err();
        assert!(format!("{}", err).contains("ga.conv0.w"));
    }
}
