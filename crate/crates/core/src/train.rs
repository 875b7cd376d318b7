//! Training machinery: the Adam optimizer, graph builders for the FM, DPO
//! and GRPO losses, and a finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::net::{gradient, Model, NetInput, ParamSet};
use crate::preference::RLConfig;
use crate::rng::derive_rng;
use crate::sampler::TIME_FLOOR;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; None disables.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: "adam".into(),
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "adam" {
            return Err(Error::Config(format!("unknown optimizer '{}'", self.name)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: OptimizerConfig) -> Self {
        let m = params.entries.iter().map(|(_, t)| Tensor::zeros(t.shape.clone())).collect();
        let v = params.entries.iter().map(|(_, t)| Tensor::zeros(t.shape.clone())).collect();
        Adam { cfg, m, v, step: 0 }
    }

    /// Global L2 norm of a gradient list.
    pub fn grad_norm(grads: &[Tensor]) -> f64 {
        grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        self.step += 1;
        let mut scale = 1.0;
        if let Some(clip) = self.cfg.grad_clip {
            let norm = Self::grad_norm(grads);
            if norm > clip {
                scale = clip / norm;
            }
        }
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for ((m, v), ((_, p), g)) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(params.entries.iter_mut().zip(grads))
        {
            for i in 0..p.len() {
                let gi = g.data[i] * scale;
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// One flow-matching training example (already interpolated).
#[derive(Debug, Clone)]
pub struct FmItem {
    pub prompt: Vec<usize>,
    pub condition: Option<Tensor>,
    pub grid: (usize, usize),
    pub t: f64,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

/// Mean FM loss over a batch, built on one graph.
pub fn build_fm_loss(
    model: &Model,
    items: &[FmItem],
    g: &mut Graph,
    pids: &[NodeId],
) -> Result<NodeId> {
    assert!(!items.is_empty());
    let mut total: Option<NodeId> = None;
    for item in items {
        let mut input = NetInput::new(&item.prompt, &item.x_t, item.grid, item.t);
        input.condition = item.condition.as_ref();
        let out = model.forward_graph(g, pids, &input)?;
        let tgt = g.constant(item.v_target.clone());
        let l = g.mse(out, tgt);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / items.len() as f64))
}

/// One DPO example; the frozen-reference preference difference is baked in
/// as a constant.
#[derive(Debug, Clone)]
pub struct DpoItem {
    pub prompt: Vec<usize>,
    pub grid: (usize, usize),
    pub t: f64,
    pub x_t_win: Tensor,
    pub v_t_win: Tensor,
    pub x_t_lose: Tensor,
    pub v_t_lose: Tensor,
    pub diff_ref: f64,
}

/// Policy-side preference difference for one item (graph node).
fn build_diff_policy(
    model: &Model,
    item: &DpoItem,
    g: &mut Graph,
    pids: &[NodeId],
) -> Result<NodeId> {
    let win = model.forward_graph(g, pids, &NetInput::new(&item.prompt, &item.x_t_win, item.grid, item.t))?;
    let wt = g.constant(item.v_t_win.clone());
    let wd = g.sub(win, wt);
    let wss = g.sum_sq(wd);
    let lose = model.forward_graph(g, pids, &NetInput::new(&item.prompt, &item.x_t_lose, item.grid, item.t))?;
    let lt = g.constant(item.v_t_lose.clone());
    let ld = g.sub(lose, lt);
    let lss = g.sum_sq(ld);
    Ok(g.sub(wss, lss))
}

/// Mean DPO loss over a batch: softplus(beta * (diff_policy - diff_ref)).
pub fn build_dpo_loss(
    model: &Model,
    items: &[DpoItem],
    beta: f64,
    g: &mut Graph,
    pids: &[NodeId],
) -> Result<NodeId> {
    assert!(!items.is_empty());
    let mut total: Option<NodeId> = None;
    for item in items {
        let dp = build_diff_policy(model, item, g, pids)?;
        let z = g.add_const(dp, -item.diff_ref);
        let z = g.scale(z, beta);
        let l = g.softplus(z);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / items.len() as f64))
}

/// One recorded SDE step of a rollout, ready for re-evaluation under the
/// current policy.
#[derive(Debug, Clone)]
pub struct GrpoStepItem {
    pub x: Tensor,
    pub x_next: Tensor,
    pub t: f64,
    pub old_logprob: f64,
    /// Frozen-reference velocity at (x, t), for the KL penalty.
    pub v_ref: Tensor,
}

#[derive(Debug, Clone)]
pub struct GrpoTrajItem {
    pub advantage: f64,
    pub steps: Vec<GrpoStepItem>,
}

/// Negated GRPO objective for one group of trajectories sharing a condition.
#[allow(clippy::too_many_arguments)]
pub fn build_grpo_group_loss(
    model: &Model,
    prompt: &[usize],
    condition: Option<&Tensor>,
    grid: (usize, usize),
    trajs: &[GrpoTrajItem],
    dt: f64,
    sigma: f64,
    rl: &RLConfig,
    g: &mut Graph,
    pids: &[NodeId],
) -> Result<NodeId> {
    if trajs.len() < 2 {
        return Err(Error::GroupSize(trajs.len()));
    }
    if sigma <= 0.0 {
        return Err(Error::DegenerateDensity);
    }
    let var = sigma * sigma * dt;
    let mut group_total: Option<NodeId> = None;
    for traj in trajs {
        let t_len = traj.steps.len();
        let mut traj_total: Option<NodeId> = None;
        for step in &traj.steps {
            let t = step.t;
            if t < TIME_FLOOR {
                return Err(Error::Domain(format!("t = {t} below the time floor {TIME_FLOOR}")));
            }
            let mut input = NetInput::new(prompt, &step.x, grid, t);
            input.condition = condition;
            let v = model.forward_graph(g, pids, &input)?;

            // mean = x + dt*(v + s2/(2t)*(x + (1-t) v))
            //      = x*(1 + dt*s2/(2t)) + v * dt*(1 + s2(1-t)/(2t))
            let coef = sigma * sigma / (2.0 * t);
            let cx = 1.0 + dt * coef;
            let cv = dt * (1.0 + coef * (1.0 - t));
            let resid_const = step.x_next.zip(&step.x, |n, x| n - cx * x)?;
            let rc = g.constant(resid_const);
            let vs = g.scale(v, cv);
            let resid = g.sub(rc, vs);
            let ss = g.sum_sq(resid);
            let d = step.x.len() as f64;
            let c0 = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
            let quad = g.scale(ss, -1.0 / (2.0 * var));
            let logprob = g.add_const(quad, c0);

            // clipped importance-ratio surrogate
            let delta = g.add_const(logprob, -step.old_logprob);
            let ratio = g.exp(delta);
            let unclipped = g.scale(ratio, traj.advantage);
            let clipped_ratio = g.clamp(ratio, 1.0 - rl.clip_eps, 1.0 + rl.clip_eps);
            let clipped = g.scale(clipped_ratio, traj.advantage);
            let surr = g.minimum(unclipped, clipped);

            // closed-form per-step KL to the frozen reference
            let kcoef = sigma * (1.0 - t) / (2.0 * t) + 1.0 / sigma;
            let vr = g.constant(step.v_ref.clone());
            let dv = g.sub(v, vr);
            let dss = g.sum_sq(dv);
            let kl = g.scale(dss, dt / 2.0 * kcoef * kcoef);
            let kl_pen = g.scale(kl, rl.beta_kl);
            let term = g.sub(surr, kl_pen);
            traj_total = Some(match traj_total {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        let mean_t = g.scale(traj_total.expect("trajectory has steps"), 1.0 / t_len as f64);
        group_total = Some(match group_total {
            None => mean_t,
            Some(acc) => g.add(acc, mean_t),
        });
    }
    let objective = g.scale(group_total.unwrap(), 1.0 / trajs.len() as f64);
    Ok(g.scale(objective, -1.0))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences on
/// `n_samples` randomly chosen parameters.
pub fn finite_diff_check<F>(
    params: &ParamSet,
    build: F,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_check_with(params, build, n_samples, h, seed, 0.0)
}

/// As [`finite_diff_check`], with `corrupt` added to every analytic gradient
/// entry first — a negative-control hook that simulates a broken backward
/// pass (nonzero corrupt must make the check fail).
pub fn finite_diff_check_with<F>(
    params: &ParamSet,
    build: F,
    n_samples: usize,
    h: f64,
    seed: u64,
    corrupt: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (_, mut grads) = gradient(params, &build)?;
    if corrupt != 0.0 {
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v += corrupt;
            }
        }
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let pids = p.bind(&mut g);
        let loss = build(&mut g, &pids)?;
        Ok(g.value(loss).item())
    };
    let total = params.total_len();
    let mut rng = derive_rng(seed, 0);
    let mut max_rel = 0.0f64;
    for _ in 0..n_samples {
        use rand::Rng as _;
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= params.entries[pi].1.len() {
            flat -= params.entries[pi].1.len();
            pi += 1;
        }
        let mut plus = params.clone();
        plus.entries[pi].1.data[flat] += h;
        let mut minus = params.clone();
        minus.entries[pi].1.data[flat] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let an = grads[pi].data[flat];
        // relative error with an absolute floor so near-zero gradients,
        // where central differences are pure roundoff noise, do not dominate
        let denom = fd.abs().max(an.abs()).max(1e-3);
        max_rel = max_rel.max((fd - an).abs() / denom);
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked: n_samples })
}
