//! Leaky integrate-and-fire dynamics.
//!
//! One step of a neuron layer is
//!
//! ```text
//! ũ[t] = u[t-1] + I[t]
//! s[t] = H(ũ[t] - θ)            (fires at ũ == θ)
//! u[t] = ũ[t]·(1 - s[t])        hard reset
//!      = τ·ũ[t] - θ·s[t]        soft reset
//! ```
//!
//! Training replaces `ds/dũ` by the triangle `max(0, β - |ũ - θ|)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifParams {
    pub tau: f64,
    pub theta: f64,
    pub reset_mode: ResetMode,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            theta: 1.0,
            reset_mode: ResetMode::Hard,
        }
    }
}

impl LifParams {
    pub fn hard(theta: f64) -> Self {
        Self {
            tau: 1.0,
            theta,
            reset_mode: ResetMode::Hard,
        }
    }

    pub fn soft(tau: f64, theta: f64) -> Self {
        Self {
            tau,
            theta,
            reset_mode: ResetMode::Soft,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::param("tau", format!("must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(Error::param("theta", format!("must be > 0, got {}", self.theta)));
        }
        Ok(())
    }

    /// Membrane after reset, given the integrated potential and the spike
    /// value (0/1, or a relaxed value in `[0, β²]`).
    #[inline]
    pub fn reset(&self, u_tilde: f64, s: f64) -> f64 {
        match self.reset_mode {
            ResetMode::Hard => u_tilde * (1.0 - s),
            ResetMode::Soft => self.tau * u_tilde - self.theta * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateParams {
    pub beta: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::param("beta", format!("must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// How the forward pass turns potentials into spikes.
///
/// `Relaxed` swaps the step for the antiderivative of the surrogate
/// triangle, so the forward becomes C¹ and its true derivative equals the
/// surrogate. Only gradient checks use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    #[default]
    Heaviside,
    Relaxed,
}

#[inline]
pub fn heaviside(u_tilde: f64, theta: f64) -> f64 {
    if u_tilde >= theta {
        1.0
    } else {
        0.0
    }
}

/// `∫ max(0, β - |x - θ|) dx` from -∞ to `u_tilde`.
#[inline]
pub fn relaxed_spike(u_tilde: f64, theta: f64, beta: f64) -> f64 {
    let x = u_tilde - theta;
    if x <= -beta {
        0.0
    } else if x <= 0.0 {
        0.5 * (x + beta) * (x + beta)
    } else if x < beta {
        0.5 * beta * beta + beta * x - 0.5 * x * x
    } else {
        beta * beta
    }
}

/// Triangular surrogate for `∂s/∂ũ`.
#[inline]
pub fn surrogate_grad(u_tilde: f64, params: &LifParams, sg: &SurrogateParams) -> f64 {
    (sg.beta - (u_tilde - params.theta).abs()).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub membrane: Tensor,
    pub step_index: usize,
}

impl NeuronState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            membrane: Tensor::zeros(shape),
            step_index: 0,
        }
    }

    pub fn reset(&mut self) {
        self.membrane.fill(0.0);
        self.step_index = 0;
    }

    /// Integrates `input`, fires and resets in place. Returns `(spikes, ũ)`.
    pub fn fire(
        &mut self,
        input: &Tensor,
        params: &LifParams,
        sg: &SurrogateParams,
        mode: SpikeMode,
    ) -> Result<(Tensor, Tensor)> {
        if input.len() != self.membrane.len() {
            return Err(Error::dim(
                "lif_step",
                format!("input {:?} vs membrane {:?}", input.shape(), self.membrane.shape()),
            ));
        }
        let mut spikes = input.clone();
        let mut u_tilde = input.clone();
        for ((u, s), ut) in self
            .membrane
            .data_mut()
            .iter_mut()
            .zip(spikes.data_mut())
            .zip(u_tilde.data_mut())
        {
            let v = *u + *ut;
            *ut = v;
            *s = match mode {
                SpikeMode::Heaviside => heaviside(v, params.theta),
                SpikeMode::Relaxed => relaxed_spike(v, params.theta, sg.beta),
            };
            *u = params.reset(v, *s);
        }
        self.step_index += 1;
        Ok((spikes, u_tilde))
    }

    /// Rows `rows` of this state as a standalone state.
    pub fn gather(&self, rows: &[usize]) -> NeuronState {
        NeuronState {
            membrane: self.membrane.gather_rows(rows),
            step_index: self.step_index,
        }
    }

    /// Writes a gathered state back. Rows not listed keep their membrane;
    /// the step counter follows the gathered state.
    pub fn scatter(&mut self, rows: &[usize], part: &NeuronState) {
        self.membrane.scatter_rows(rows, &part.membrane);
        self.step_index = part.step_index;
    }
}

/// Functional single step: returns spikes and the successor state.
pub fn lif_step(state: &NeuronState, input: &Tensor, params: &LifParams) -> Result<(Tensor, NeuronState)> {
    let mut next = state.clone();
    let (s, _) = next.fire(input, params, &SurrogateParams::default(), SpikeMode::Heaviside)?;
    Ok((s, next))
}

pub fn reset_state(state: &NeuronState) -> NeuronState {
    let mut s = state.clone();
    s.reset();
    s
}

/// Reverse of one `fire` step.
///
/// `carry` holds `∂L/∂u[t]` on entry and `∂L/∂u[t-1]` on exit (which equals
/// `∂L/∂ũ[t]`). Returns `∂L/∂I[t]`. The reset term is differentiated
/// through `s`, so relaxed-mode forwards are matched exactly.
pub fn lif_backward(
    u_tilde: &Tensor,
    spikes: &Tensor,
    grad_spikes: &Tensor,
    carry: &mut Tensor,
    params: &LifParams,
    sg: &SurrogateParams,
) -> Tensor {
    let mut g_in = grad_spikes.clone();
    for (((gi, &ut), &s), c) in g_in
        .data_mut()
        .iter_mut()
        .zip(u_tilde.data())
        .zip(spikes.data())
        .zip(carry.data_mut())
    {
        let ds = surrogate_grad(ut, params, sg);
        let du = match params.reset_mode {
            ResetMode::Hard => (1.0 - s) - ut * ds,
            ResetMode::Soft => params.tau - params.theta * ds,
        };
        let g = *gi * ds + *c * du;
        *gi = g;
        *c = g;
    }
    g_in
}
