//! Flow sampling: deterministic ODE rollout, stochastic Euler-Maruyama SDE
//! rollout, per-step Gaussian transition log-probabilities, and the
//! closed-form per-step KL between a policy and a reference velocity field.
//!
//! Time ascends from `eps` (pure noise) to 1 (data); the grid is
//! t_k = eps + (1-eps) * k / T.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Lower bound on t wherever the 1/(2t) drift term appears.
pub const TIME_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub eps: f64,
    /// Constant diffusion magnitude sigma_t. Zero degenerates to the ODE.
    pub sigma: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { steps: 50, eps: TIME_FLOOR, sigma: 0.3 }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(self.eps >= TIME_FLOOR && self.eps < 0.5) {
            return Err(Error::Config(format!(
                "schedule eps must lie in [{TIME_FLOOR}, 0.5), got {}",
                self.eps
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// The T+1 grid points.
    pub fn grid(&self) -> Vec<f64> {
        let t_span = 1.0 - self.eps;
        (0..=self.steps)
            .map(|k| self.eps + t_span * k as f64 / self.steps as f64)
            .collect()
    }

    pub fn dt(&self) -> f64 {
        (1.0 - self.eps) / self.steps as f64
    }
}

/// One sampled generation: states along the grid, the noise draws, and the
/// transition log-densities under the generating policy.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Tensor>,
    pub times: Vec<f64>,
    pub noises: Vec<Tensor>,
    pub logprobs: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// Euler step of dx = v dt.
pub fn ode_step(x: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor> {
    x.same_shape(v)?;
    x.zip(v, |xi, vi| xi + vi * dt)
}

/// Drift of the variance-matched SDE: v + sigma^2/(2t) * (x + (1-t) v).
pub fn sde_drift(x: &Tensor, v: &Tensor, t: f64, sigma: f64) -> Result<Tensor> {
    x.same_shape(v)?;
    if t < TIME_FLOOR {
        return Err(Error::Domain(format!(
            "t = {t} below the time floor {TIME_FLOOR}"
        )));
    }
    let coef = sigma * sigma / (2.0 * t);
    x.zip(v, |xi, vi| vi + coef * (xi + (1.0 - t) * vi))
}

/// Euler-Maruyama step: x + drift*dt + sigma*sqrt(dt)*noise.
pub fn sde_step(
    x: &Tensor,
    v: &Tensor,
    t: f64,
    dt: f64,
    sigma: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    if dt <= 0.0 {
        return Err(Error::Domain(format!("dt must be > 0, got {dt}")));
    }
    x.same_shape(noise)?;
    let drift = sde_drift(x, v, t, sigma)?;
    let diff = sigma * dt.sqrt();
    let mut out = x.clone();
    for i in 0..out.len() {
        out.data[i] = x.data[i] + drift.data[i] * dt + diff * noise.data[i];
    }
    Ok(out)
}

/// Log-density of x_next under N(x + drift*dt, sigma^2 dt I), summed over dims.
pub fn transition_logprob(
    x_next: &Tensor,
    x: &Tensor,
    v: &Tensor,
    t: f64,
    dt: f64,
    sigma: f64,
) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::DegenerateDensity);
    }
    if dt <= 0.0 {
        return Err(Error::Domain(format!("dt must be > 0, got {dt}")));
    }
    x_next.same_shape(x)?;
    let drift = sde_drift(x, v, t, sigma)?;
    let var = sigma * sigma * dt;
    let d = x.len() as f64;
    let mut quad = 0.0;
    for i in 0..x.len() {
        let mean = x.data[i] + drift.data[i] * dt;
        let r = x_next.data[i] - mean;
        quad += r * r;
    }
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - quad / (2.0 * var))
}

/// Closed-form per-step KL between two step transitions that share sigma and
/// differ only in predicted velocity.
pub fn step_kl(v_policy: &Tensor, v_ref: &Tensor, t: f64, dt: f64, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::DegenerateDensity);
    }
    if t < TIME_FLOOR {
        return Err(Error::Domain(format!(
            "t = {t} below the time floor {TIME_FLOOR}"
        )));
    }
    let dv = v_policy.sub(v_ref)?;
    let coef = sigma * (1.0 - t) / (2.0 * t) + 1.0 / sigma;
    Ok(dt / 2.0 * coef * coef * dv.sum_sq())
}

/// Roll out one trajectory from fresh standard-normal noise. With sigma == 0
/// this is exactly the deterministic ODE rollout (no noise is drawn and the
/// recorded logprobs are zero).
pub fn sample_trajectory<F>(
    mut velocity: F,
    shape: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Trajectory>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    schedule.validate()?;
    let times = schedule.grid();
    let dt = schedule.dt();
    let sigma = schedule.sigma;
    let mut states = Vec::with_capacity(schedule.steps + 1);
    let mut noises = Vec::with_capacity(schedule.steps);
    let mut logprobs = Vec::with_capacity(schedule.steps);
    let mut x = Tensor::standard_normal(shape.to_vec(), rng);
    states.push(x.clone());
    for k in 0..schedule.steps {
        let t = times[k];
        let v = velocity(&x, t)?;
        let next = if sigma == 0.0 {
            noises.push(Tensor::zeros(shape.to_vec()));
            logprobs.push(0.0);
            ode_step(&x, &v, dt)?
        } else {
            let noise = Tensor::standard_normal(shape.to_vec(), rng);
            let next = sde_step(&x, &v, t, dt, sigma, &noise)?;
            logprobs.push(transition_logprob(&next, &x, &v, t, dt, sigma)?);
            noises.push(noise);
            next
        };
        states.push(next.clone());
        x = next;
    }
    Ok(Trajectory { states, times, noises, logprobs })
}

/// Replay a trajectory's recorded noises through the stepper; the states must
/// reproduce exactly.
pub fn replay_trajectory<F>(
    mut velocity: F,
    traj: &Trajectory,
    schedule: &NoiseSchedule,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let dt = schedule.dt();
    let mut states = vec![traj.states[0].clone()];
    let mut x = traj.states[0].clone();
    for k in 0..schedule.steps {
        let t = traj.times[k];
        let v = velocity(&x, t)?;
        let next = if schedule.sigma == 0.0 {
            ode_step(&x, &v, dt)?
        } else {
            sde_step(&x, &v, t, dt, schedule.sigma, &traj.noises[k])?
        };
        states.push(next.clone());
        x = next;
    }
    Ok(states)
}
