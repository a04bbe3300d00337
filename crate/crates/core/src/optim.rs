//! Adam optimizer over named parameter groups.
//!
//! Freezing is expressed by not stepping a group: its parameters, moments,
//! and step counter stay bitwise unchanged. Each group keeps its own step
//! counter so bias correction restarts correctly for late-unfrozen groups.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupState {
    pub name: String,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub hp: AdamParams,
    pub groups: Vec<GroupState>,
}

impl Adam {
    pub fn new(hp: AdamParams) -> Self {
        Adam {
            hp,
            groups: Vec::new(),
        }
    }

    /// Register a group whose tensors have the given element counts.
    pub fn register(&mut self, name: &str, sizes: &[usize]) {
        debug_assert!(self.group_index(name).is_none(), "duplicate group {name}");
        self.groups.push(GroupState {
            name: name.to_string(),
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        });
    }

    fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&GroupState> {
        self.group_index(name).map(|i| &self.groups[i])
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut GroupState> {
        self.group_index(name).map(move |i| &mut self.groups[i])
    }

    /// Apply one Adam update to a group. `params` and `grads` must match the
    /// registered tensor count and sizes.
    pub fn step(
        &mut self,
        name: &str,
        params: &mut [&mut Tensor<f32>],
        grads: &[Vec<f32>],
    ) -> Result<()> {
        let hp = self.hp;
        let group = self
            .group_mut(name)
            .ok_or_else(|| Error::config(format!("unknown optimizer group {name:?}")))?;
        if params.len() != group.m.len() || grads.len() != group.m.len() {
            return Err(Error::config(format!(
                "group {name:?}: expected {} tensors, got {} params / {} grads",
                group.m.len(),
                params.len(),
                grads.len()
            )));
        }
        group.t += 1;
        let t = group.t as f64;
        let bc1 = 1.0 - hp.beta1.powf(t);
        let bc2 = 1.0 - hp.beta2.powf(t);
        let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
        for (i, param) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != param.numel() || g.len() != group.m[i].len() {
                return Err(Error::config(format!(
                    "group {name:?}: tensor {i} size mismatch"
                )));
            }
            let m = &mut group.m[i];
            let v = &mut group.v[i];
            let data = param.data_mut();
            for j in 0..g.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                data[j] -= (hp.lr * m_hat / (v_hat.sqrt() + hp.eps)) as f32;
            }
        }
        Ok(())
    }
}
