use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::ParamId;
use super::tensor::Real;
use super::Parameter;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: i32,
}

/// Adam with decoupled weight decay.
///
/// Moment buffers and step counts are kept per parameter, so a parameter
/// that sat frozen for a while resumes with its own bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self, id: ParamId) -> i32 {
        self.state.get(&id).map_or(0, |s| s.steps)
    }

    /// Applies one update to every non-frozen parameter that holds a
    /// gradient. Frozen parameters are skipped entirely.
    pub fn step<'a, I>(&mut self, params: I)
    where
        I: IntoIterator<Item = &'a mut Parameter<T>>,
        T: 'a,
    {
        let c = self.config;
        let (lr, b1, b2, eps, wd) = (T::lit(c.lr), T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps), T::lit(c.weight_decay));
        for p in params {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let n = p.value.numel();
            let st = self.state.entry(p.id).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = T::one() - b1.powi(st.steps);
            let bc2 = T::one() - b2.powi(st.steps);
            let decay = T::one() - lr * wd;
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *w = *w * decay;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
