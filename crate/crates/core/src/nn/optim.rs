//! Momentum SGD over [`DenoiserParams`] blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::denoiser::DenoiserParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: Some(1.0),
        }
    }
}

/// Parameter blocks that never receive updates, by name.
pub const FROZEN_BLOCKS: [&str; 2] = ["fusion.w_e", "fusion.w_p"];

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Option<DenoiserParams>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: None }
    }

    /// `v ← μ·v + g; θ ← θ − lr·v`. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut DenoiserParams, grads: &DenoiserParams) -> Result<f64> {
        let norm = grads.squared_norm().sqrt();
        if !norm.is_finite() {
            let bad: Vec<String> = grads
                .blocks()
                .into_iter()
                .filter(|(_, b)| b.iter().any(|v| !v.is_finite()))
                .map(|(n, _)| n)
                .collect();
            return Err(Error::NonFinite(format!("gradient blocks {}", bad.join(", "))));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        let mu = self.config.momentum;
        let lr = self.config.lr;
        let g_blocks = grads.blocks();
        for (((name, p), (_, v)), (_, g)) in params
            .blocks_mut()
            .into_iter()
            .zip(velocity.blocks_mut())
            .zip(g_blocks)
        {
            if FROZEN_BLOCKS.contains(&name.as_str()) {
                continue;
            }
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = mu * *vv + scale * gv;
                *pv -= lr * *vv;
            }
        }
        Ok(norm)
    }
}
