use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of micro-batch gradients summed into one update.
    pub accumulation_window: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accumulation_window: 10,
        }
    }
}

/// Moment estimates, step counter and the pending gradient sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    buffer: Vec<Vec<f64>>,
    pending: usize,
}

/// Adam with gradient accumulation over a fixed window of micro-batches.
#[derive(Clone, Debug)]
pub struct Adam {
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if config.accumulation_window == 0 {
            return Err(Error::invalid("accumulation window must be positive"));
        }
        if !(config.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Ok(Self {
            state: AdamState {
                config,
                step: 0,
                first: zeros.clone(),
                second: zeros.clone(),
                buffer: zeros,
                pending: 0,
            },
        })
    }

    pub fn from_state(state: AdamState) -> Self {
        Self { state }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn pending(&self) -> usize {
        self.state.pending
    }

    /// Adds one micro-batch gradient to the buffer and applies an update once
    /// the window is full. Returns whether an update happened.
    ///
    /// Parameters missing from `grads` contribute zero.
    pub fn accumulate(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<bool> {
        if self.state.buffer.len() != store.len() {
            return Err(Error::invalid(
                "optimizer state does not match parameter store",
            ));
        }
        for (id, g) in grads.iter() {
            let target = store.get(id);
            if g.shape() != target.shape() {
                return Err(Error::Shape {
                    op: "optimizer-step",
                    lhs: target.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (b, v) in self.state.buffer[id.0].iter_mut().zip(g.data()) {
                *b += v;
            }
        }
        self.state.pending += 1;
        if self.state.pending >= self.state.config.accumulation_window {
            self.step(store)?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Applies one Adam update from the summed buffer and clears it.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let st = &mut self.state;
        if st.pending < st.config.accumulation_window {
            return Err(Error::invalid(format!(
                "accumulation window not satisfied: {} of {} micro-batches",
                st.pending, st.config.accumulation_window
            )));
        }
        st.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = st.config;
        let t = st.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let param = store.get_mut(id).data_mut();
            let (m, v, buf) = (&mut st.first[i], &mut st.second[i], &mut st.buffer[i]);
            for j in 0..param.len() {
                let g = buf[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                param[j] -= lr * mhat / (vhat.sqrt() + eps);
                buf[j] = 0.0;
            }
        }
        st.pending = 0;
        Ok(())
    }
}
