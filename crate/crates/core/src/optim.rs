//! Bias-corrected Adam over the field's raw grids.

use crate::field::Grid;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in buffer {buffer} at index {index}")]
    NonFiniteGradient { buffer: usize, index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, t: 0 }
    }

    pub fn for_grids(grids: &[Grid]) -> Self {
        Self::new(grids.iter().map(|g| g.data.len()))
    }
}

/// One Adam update with learning rate `lr` (overriding `hyper.lr`, which
/// lets callers apply a schedule). Nothing is written if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<(), OptimError> {
    let lrs = vec![lr; params.len()];
    adam_step_per_buffer(params, grads, state, hyper, &lrs)
}

/// [`adam_step`] with a separate learning rate for each buffer.
pub fn adam_step_per_buffer(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lrs: &[f64],
) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != lrs.len() {
        return Err(OptimError::ShapeMismatch(format!(
            "{} parameter buffers, {} gradient buffers, {} moment buffers, {} learning rates",
            params.len(),
            grads.len(),
            state.m.len(),
            lrs.len()
        )));
    }
    for (b, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[b].len() {
            return Err(OptimError::ShapeMismatch(format!("buffer {b}: {} params, {} grads", p.len(), g.len())));
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient { buffer: b, index });
        }
    }
    state.t += 1;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    // f32 arithmetic keeps the dense loop vectorizable.
    // 1 - β is formed in f64: in f32, 1 - 0.999 is off by 5e-5 relative.
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let (c1f, c2f) = ((1.0 - b1) as f32, (1.0 - b2) as f32);
    let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
    let eps = hyper.eps as f32;
    for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[b], &mut state.v[b]);
        let step_size = (lrs[b] / bc1) as f32;
        for (((pi, gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1f * *mi + c1f * gi;
            *vi = b2f * *vi + c2f * gi * gi;
            let update = step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
            *pi -= if *mi == 0.0 { 0.0 } else { update };
        }
    }
    Ok(())
}

/// Per-step multiplicative decay that reaches `final_ratio` after `iterations` steps.
pub fn decay_for(final_ratio: f64, iterations: usize) -> f64 {
    if iterations == 0 {
        1.0
    } else {
        final_ratio.powf(1.0 / iterations as f64)
    }
}
