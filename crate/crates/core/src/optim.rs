//! RMSprop in both directions and the per-epoch learning-rate / λ schedules.
//!
//! One [`OptimState`] belongs to one network. The discriminator climbs its
//! objective with [`OptimState::ascend`]; the generator descends with
//! [`OptimState::descend`]. Both share the update
//!
//! ```text
//! Δ ← β·Δ + (1 − β)·g²
//! θ ← θ ± α·g / √(Δ + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{FdnnError, Result};
use crate::layers::LayerStack;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.001;
/// Decay rate of the squared-gradient average, as published (not the usual 0.9).
pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_ALPHA_DECAY: f64 = 0.99;
pub const DEFAULT_LAMBDA_DECAY: f64 = 0.995;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        }
    }
}

/// Per-parameter squared-gradient accumulators plus the step hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    delta: Vec<Tensor>,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub iter: u64,
}

impl OptimState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, alpha: f64, beta: f64, eps: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(FdnnError::config(format!(
                "learning rate must be positive, got {alpha}"
            )));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(FdnnError::config(format!("decay rate must lie in [0, 1), got {beta}")));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(FdnnError::config(format!("eps must be positive, got {eps}")));
        }
        Ok(OptimState {
            delta: shapes.into_iter().map(Tensor::zeros).collect(),
            alpha,
            beta,
            eps,
            iter: 0,
        })
    }

    /// Fresh state shaped like the trainable parameters of `stack`.
    pub fn for_stack(stack: &LayerStack, alpha: f64, beta: f64, eps: f64) -> Result<Self> {
        let params = stack.named_params();
        Self::new(params.iter().map(|(_, p)| p.value.shape()), alpha, beta, eps)
    }

    pub fn delta(&self) -> &[Tensor] {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut [Tensor] {
        &mut self.delta
    }

    /// Gradient ascent step on `params` using `grads` (∂F/∂θ).
    pub fn ascend_tensors(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.step_tensors(params, grads, Direction::Ascend)
    }

    /// Gradient descent step on `params` using `grads` (∂Q/∂θ).
    pub fn descend_tensors(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.step_tensors(params, grads, Direction::Descend)
    }

    pub fn step_tensors(&mut self, params: &mut [Tensor], grads: &[Tensor], dir: Direction) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.delta.len() {
            return Err(FdnnError::shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.delta.len(),
                params.len(),
                grads.len()
            )));
        }
        let pairs: Vec<(&mut Tensor, &Tensor)> = params.iter_mut().zip(grads).collect();
        self.apply(pairs, dir)
    }

    /// Ascent on the parameters of `stack` using the gradients accumulated in it.
    pub fn ascend(&mut self, stack: &mut LayerStack) -> Result<()> {
        self.step_stack(stack, Direction::Ascend)
    }

    /// Descent on the parameters of `stack` using the gradients accumulated in it.
    pub fn descend(&mut self, stack: &mut LayerStack) -> Result<()> {
        self.step_stack(stack, Direction::Descend)
    }

    fn step_stack(&mut self, stack: &mut LayerStack, dir: Direction) -> Result<()> {
        let mut params = stack.named_params_mut();
        if params.len() != self.delta.len() {
            return Err(FdnnError::shape(format!(
                "optimizer tracks {} tensors, stack has {}",
                self.delta.len(),
                params.len()
            )));
        }
        let pairs: Vec<(&mut Tensor, &Tensor)> = params
            .iter_mut()
            .map(|(_, p)| {
                let p = &mut **p;
                (&mut p.value, &p.grad)
            })
            .collect();
        self.apply(pairs, dir)
    }

    fn apply(&mut self, pairs: Vec<(&mut Tensor, &Tensor)>, dir: Direction) -> Result<()> {
        for (i, ((value, grad), delta)) in pairs.iter().zip(&self.delta).enumerate() {
            if value.shape() != grad.shape() || value.shape() != delta.shape() {
                return Err(FdnnError::shape(format!(
                    "optimizer slot {i}: param {:?}, grad {:?}, accumulator {:?}",
                    value.shape(),
                    grad.shape(),
                    delta.shape()
                )));
            }
        }
        let (alpha, beta, eps) = (self.alpha, self.beta, self.eps);
        let sign = dir.sign();
        for ((value, grad), delta) in pairs.into_iter().zip(&mut self.delta) {
            for ((theta, &g), d) in value.data_mut().iter_mut().zip(grad.data()).zip(delta.data_mut()) {
                *d = beta * *d + (1.0 - beta) * g * g;
                *theta += sign * alpha * g / (*d + eps).sqrt();
            }
        }
        self.iter += 1;
        Ok(())
    }
}

/// Epoch-indexed learning rate and adversarial weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub lambda0: f64,
    pub lambda_decay: f64,
    pub alpha0: f64,
    pub alpha_decay: f64,
}

impl Default for Schedules {
    fn default() -> Self {
        Schedules {
            lambda0: DEFAULT_LAMBDA,
            lambda_decay: DEFAULT_LAMBDA_DECAY,
            alpha0: DEFAULT_ALPHA,
            alpha_decay: DEFAULT_ALPHA_DECAY,
        }
    }
}

impl Schedules {
    /// λⁿ = max(λ₀·0.995ⁿ, λ₀/2)
    pub fn lambda_at(&self, epoch: u32) -> f64 {
        (self.lambda0 * self.lambda_decay.powi(epoch as i32)).max(self.lambda0 / 2.0)
    }

    /// αⁿ = α₀·0.99ⁿ
    pub fn alpha_at(&self, epoch: u32) -> f64 {
        self.alpha0 * self.alpha_decay.powi(epoch as i32)
    }
}

/// λ at `epoch` with the default schedule.
pub fn lambda_at(epoch: u32) -> f64 {
    Schedules::default().lambda_at(epoch)
}

/// α at `epoch` with the default schedule.
pub fn alpha_at(epoch: u32) -> f64 {
    Schedules::default().alpha_at(epoch)
}
