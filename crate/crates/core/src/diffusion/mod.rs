//! Noise schedule, ε-prediction loss, DDIM sampling and inversion.

pub mod schedule;
pub mod trajectory;

use crate::error::{Error, Result};
use crate::mmdit::{patchify, Mmdit, ModelInput, ParamVars, Prompt, TraceSpec};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub use schedule::{add_noise, ddim_step, Schedule, ScheduleConfig};
pub use trajectory::Trajectory;

/// Mean squared error between the model's noise prediction for
/// `add_noise(x0, ε, t)` and `ε`, recorded on `tape` so gradients reach any
/// leaves inside `params`.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_loss_vars<T: Scalar>(
    tape: &Tape<T>,
    model: &Mmdit<T>,
    params: &ParamVars<T>,
    schedule: &Schedule,
    x0: &Tensor<T>,
    prompt: &Prompt,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Var<T>> {
    let xt = add_noise(schedule, x0, eps, t)?;
    let input = ModelInput {
        latent: &xt,
        t,
        prompt,
    };
    let (pred, _, _) = model.forward_vars(tape, params, input, None, &TraceSpec::none())?;
    let (target, _) = patchify(eps, model.config().patch)?;
    let diff = tape.sub(&pred, &tape.constant(target))?;
    let loss = tape.mean(&tape.mul(&diff, &diff)?);
    if !loss.value().all_finite() {
        return Err(Error::non_finite(format!("epsilon loss at t={t}")));
    }
    Ok(loss)
}

/// [`epsilon_loss_vars`] evaluated without gradients.
pub fn epsilon_loss<T: Scalar>(
    model: &Mmdit<T>,
    schedule: &Schedule,
    x0: &Tensor<T>,
    prompt: &Prompt,
    t: usize,
    eps: &Tensor<T>,
) -> Result<T> {
    let tape = Tape::new();
    let params = model.param_vars(&tape);
    epsilon_loss_vars(&tape, model, &params, schedule, x0, prompt, t, eps)?.value().item()
}

/// Deterministic sampling from `x_T`, with `eps_fn(step, t, x_t)` supplying
/// the noise prediction. Returns every latent `x_T … x_0`.
pub fn sample_with<T: Scalar>(
    schedule: &Schedule,
    x_t: Tensor<T>,
    mut eps_fn: impl FnMut(usize, usize, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Trajectory<T>> {
    let steps = schedule.steps();
    let mut traj = Trajectory::new(schedule.steps(), x_t);
    for step in 0..steps {
        let t = schedule.step_timestep(step);
        let x = traj.last();
        let eps = eps_fn(step, t, x)?;
        let next = ddim_step(schedule, x, &eps, t, t - 1)?;
        next.ensure_finite(&format!("sampler step {step} (t={t})"))?;
        traj.push(t - 1, next)?;
    }
    Ok(traj)
}

/// Plain single-branch sampling.
pub fn sample<T: Scalar>(
    model: &Mmdit<T>,
    schedule: &Schedule,
    x_t: Tensor<T>,
    prompt: &Prompt,
) -> Result<Trajectory<T>> {
    sample_with(schedule, x_t, |_, t, x| {
        model.predict(ModelInput { latent: x, t, prompt })
    })
}

/// Inversion settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InvertOptions {
    /// Fixed-point refinements per step. Zero gives the textbook inversion
    /// (noise predicted at the current point); each refinement re-predicts at
    /// the current estimate of the next point, making the step closer to an
    /// exact inverse of the sampler step.
    pub refine: usize,
}

impl Default for InvertOptions {
    fn default() -> Self {
        InvertOptions { refine: 2 }
    }
}

/// DDIM inversion `x_0 → x_T`. The returned trajectory is ordered `x_T … x_0`
/// like a sampler trajectory.
pub fn ddim_invert<T: Scalar>(
    model: &Mmdit<T>,
    schedule: &Schedule,
    x0: &Tensor<T>,
    prompt: &Prompt,
    opts: InvertOptions,
) -> Result<Trajectory<T>> {
    let predict = |x: &Tensor<T>, t: usize| model.predict(ModelInput { latent: x, t, prompt });
    let mut forward = vec![x0.clone()];
    for t in 0..schedule.steps() {
        let x = forward.last().unwrap();
        let mut eps = predict(x, t)?;
        let mut next = ddim_step(schedule, x, &eps, t, t + 1)?;
        for _ in 0..opts.refine {
            eps = predict(&next, t + 1)?;
            next = ddim_step(schedule, x, &eps, t, t + 1)?;
        }
        next.ensure_finite(&format!("inversion step {t}"))?;
        forward.push(next);
    }
    Trajectory::from_ascending(forward)
}
