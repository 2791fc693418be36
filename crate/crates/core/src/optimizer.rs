//! Adam with Nesterov momentum, with decoupled weight decay and a separate
//! decay channel for gate scalars.
//!
//! Per step (`t` counts completed steps, `t' = t + 1`):
//!
//! ```text
//! theta <- theta * (1 - lr * wd)                 (wd = k_decay for gates, weight_decay otherwise)
//! m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
//! m_hat = m / (1 - b1^(t'+1))     g_hat = g / (1 - b1^t')     v_hat = v / (1 - b2^t')
//! theta <- theta - lr (b1 m_hat + (1 - b1) g_hat) / (sqrt(v_hat) + eps)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ArrayKind, ParamSlot};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub k_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            k_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("invalid {what}: {v}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", self.beta1);
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", self.beta2);
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon", self.epsilon);
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight decay", self.weight_decay);
        }
        if self.k_decay.is_nan() || self.k_decay < 0.0 {
            return bad("k decay", self.k_decay);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nadam<T> {
    config: OptimizerConfig,
    t: u64,
    state: Vec<Moments<T>>,
}

impl<T: Scalar> Nadam<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            state: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every slot. Nothing is modified if any gradient
    /// is non-finite or the slot layout differs from earlier steps.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_, T>]) -> Result<()> {
        for s in slots.iter() {
            if s.values.len() != s.grad.len() {
                return Err(Error::shape("optimizer slot", (1, s.values.len()), (1, s.grad.len())));
            }
            if s.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { param: s.name.clone() });
            }
        }
        if self.state.is_empty() {
            self.state = slots
                .iter()
                .map(|s| Moments {
                    m: vec![T::zero(); s.values.len()],
                    v: vec![T::zero(); s.values.len()],
                })
                .collect();
        } else if self.state.len() != slots.len()
            || self.state.iter().zip(slots.iter()).any(|(st, s)| st.m.len() != s.values.len())
        {
            return Err(Error::InvalidArgument(
                "parameter layout changed between optimizer steps".into(),
            ));
        }

        let c = &self.config;
        let t_next = self.t + 1;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let m_corr = T::lit(1.0 - c.beta1.powf((t_next + 1) as f64));
        let g_corr = T::lit(1.0 - c.beta1.powf(t_next as f64));
        let v_corr = T::lit(1.0 - c.beta2.powf(t_next as f64));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.epsilon);

        for (slot, st) in slots.iter_mut().zip(&mut self.state) {
            let wd = if slot.kind == ArrayKind::Gate { c.k_decay } else { c.weight_decay };
            let shrink = (wd > 0.0).then(|| T::lit(1.0 - c.lr * wd));
            for i in 0..slot.values.len() {
                let g = slot.grad[i];
                let m = b1 * st.m[i] + (one - b1) * g;
                let v = b2 * st.v[i] + (one - b2) * g * g;
                st.m[i] = m;
                st.v[i] = v;
                let m_hat = m / m_corr;
                let g_hat = g / g_corr;
                let v_hat = v / v_corr;
                let mut theta = slot.values[i];
                if let Some(s) = shrink {
                    theta *= s;
                }
                slot.values[i] = theta - lr * (b1 * m_hat + (one - b1) * g_hat) / (v_hat.sqrt() + eps);
            }
        }
        self.t = t_next;
        Ok(())
    }
}
