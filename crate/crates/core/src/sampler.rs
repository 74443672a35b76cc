//! Deterministic denoising sampler with classifier-free guidance, step-gated
//! adapter deltas, and a configurable gradient gate.
//!
//! The chain runs executed step indices `i = 0..T`, mapping each to the
//! schedule transition `t = T - i -> t - 1`. When `grad_gate = Some(g)` the
//! latent is detached from the graph immediately before step `g`, so
//! gradients flow only through steps at or after the gate (`g = T` detaches
//! the final latent instead, cutting the graph entirely).

use tinyvid_autodiff::{RawTensor, Tensor};

use crate::adapter::AdapterBinding;
use crate::error::{Error, Result};
use crate::model::{denoiser_forward, render_condition, uncond_condition, DenoiserState};
use crate::prompts::PromptSpec;
use crate::schedule::NoiseSchedule;

/// Clean latents live in the encoder's tanh-bounded box, so any predicted
/// value outside [-1, 1] is off-manifold. Clipping the prediction keeps the
/// 1/alpha[t] factor at high-noise steps from amplifying estimation error
/// into a runaway latent scale (static thresholding).
const Z0_BOUND: f64 = 1.0;

/// One denoising transition on graph tensors: predict the clean latent,
/// clip it to the valid latent box, and re-noise to the previous level.
fn chain_step(z: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a_t, s_t) = (sched.alpha[t], sched.sigma[t]);
    let (a_p, s_p) = (sched.alpha[t - 1], sched.sigma[t - 1]);
    if a_t == 0.0 {
        return Err(Error::NumericSingularity(format!("alpha[{t}] = 0 in sampler")));
    }
    let z0_pred = z
        .sub(&eps_hat.affine(s_t, 0.0))
        .affine(1.0 / a_t, 0.0)
        .clamp(-Z0_BOUND, Z0_BOUND);
    Ok(z0_pred.affine(a_p, 0.0).add(&eps_hat.affine(s_p, 0.0)))
}

/// Full chain from `z_start` at level T down to 0, recording the latent
/// after every step. `eps_fn(z, t, step_index)` supplies the noise estimate.
fn run_chain<F>(
    z_start: Tensor,
    sched: &NoiseSchedule,
    grad_gate: Option<usize>,
    mut eps_fn: F,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&Tensor, usize, usize) -> Result<Tensor>,
{
    let steps = sched.steps;
    if let Some(g) = grad_gate {
        if g > steps {
            return Err(Error::invalid(format!("gradient gate {g} beyond {steps} steps")));
        }
    }
    let mut z = z_start;
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(z.clone());
    for i in 0..steps {
        if grad_gate == Some(i) {
            z = z.detach();
        }
        let t = steps - i;
        let eps_hat = eps_fn(&z, t, i)?;
        z = chain_step(&z, &eps_hat, t, sched)?;
        trace.push(z.clone());
    }
    if grad_gate == Some(steps) {
        let cut = trace.pop().expect("trace never empty").detach();
        trace.push(cut);
    }
    Ok(trace)
}

/// The gradient gate aligned with an adapter's own step gate.
pub fn default_grad_gate(binding: Option<&AdapterBinding>, steps: usize) -> Option<usize> {
    binding.map(|b| crate::adapter::gate_start(b.spec.gate_fraction, steps))
}

/// Denoise pure noise into a latent video, returning every intermediate
/// latent; index 0 is `z_start` and index T the clean prediction.
pub fn sample_video_traced(
    z_start: &RawTensor,
    prompt: &PromptSpec,
    state: &DenoiserState,
    adapter: Option<&AdapterBinding>,
    sched: &NoiseSchedule,
    cfg_scale: f64,
    grad_gate: Option<usize>,
) -> Result<Vec<Tensor>> {
    if !cfg_scale.is_finite() {
        return Err(Error::invalid("guidance scale must be finite"));
    }
    if let Some(b) = adapter {
        b.spec.validate_against(state)?;
    }
    let cfg = &state.config;
    let params = state.leaves();
    let cond = render_condition(prompt, cfg, &params)?;
    let uncond = uncond_condition(cfg, &params)?;
    let steps = sched.steps;

    run_chain(Tensor::leaf(z_start.clone()), sched, grad_gate, |z, t, i| {
        let overlay = adapter.filter(|b| b.spec.is_gated(i, steps)).map(|b| &b.tensors);
        let eps_c = denoiser_forward(cfg, &params, z, &cond, t, overlay)?;
        if cfg_scale == 1.0 {
            return Ok(eps_c);
        }
        let eps_u = denoiser_forward(cfg, &params, z, &uncond, t, overlay)?;
        Ok(eps_c.sub(&eps_u).affine(cfg_scale, 0.0).add(&eps_u))
    })
}

/// As `sample_video_traced`, keeping only the final latent.
pub fn sample_video(
    z_start: &RawTensor,
    prompt: &PromptSpec,
    state: &DenoiserState,
    adapter: Option<&AdapterBinding>,
    sched: &NoiseSchedule,
    cfg_scale: f64,
    grad_gate: Option<usize>,
) -> Result<Tensor> {
    let trace =
        sample_video_traced(z_start, prompt, state, adapter, sched, cfg_scale, grad_gate)?;
    Ok(trace.into_iter().next_back().expect("trace never empty"))
}
