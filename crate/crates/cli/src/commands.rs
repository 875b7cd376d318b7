//! The five experiment commands. Each validates its configuration fully
//! before touching the filesystem, streams metrics to CSV, and writes
//! checkpoints via atomic rename.

use crate::data::{
    self, eval_prompt, make_payload, mixture_reward, sample_reward, to_fm_items, EvalPrompt,
};
use flowlab_core::checkpoint::{load_checkpoint_for, save_checkpoint};
use flowlab_core::config::{RunConfig, TaskKind};
use flowlab_core::error::{Error, Result};
use flowlab_core::flow::clamp_timestep;
use flowlab_core::net::{patchify, Condition, Model, NetInput};
use flowlab_core::pipeline::{BucketKey, Pipeline, Resequencer};
use flowlab_core::preference::Group;
use flowlab_core::rng::{derive_rng, Rng};
use flowlab_core::sampler::{sample_trajectory, step_kl};
use flowlab_core::tasks::write_pgm;
use flowlab_core::tensor::Tensor;
use flowlab_core::train::{
    build_dpo_loss, build_fm_loss, build_grpo_group_loss, finite_diff_check_with, Adam, DpoItem,
    FmItem, GrpoStepItem, GrpoTrajItem,
};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

// rng stream blocks per purpose, so no command reuses another's draws
const STREAM_TRAIN: u64 = 1 << 32;
const STREAM_SAMPLE: u64 = 2 << 32;
const STREAM_DPO: u64 = 3 << 32;
const STREAM_GRPO: u64 = 4 << 32;
const STREAM_GRADCHECK: u64 = 5 << 32;

/// Buffered CSV writer with a fixed header row.
struct Csv {
    file: std::io::BufWriter<std::fs::File>,
}

impl Csv {
    fn create(path: &Path, header: &str) -> Result<Csv> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "{header}")?;
        Ok(Csv { file })
    }

    fn row(&mut self, line: std::fmt::Arguments) -> Result<()> {
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::init(cfg.model.clone(), &mut derive_rng(cfg.seed, 0))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("model.ffck")
}

fn ensure_finite_grads(grads: &[Tensor]) -> Result<()> {
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Numeric("gradient contains non-finite values".into()));
    }
    Ok(())
}

/// Flow-matching training over the producer-consumer pipeline.
/// Writes metrics.csv (step, loss, grad_norm), timings.csv (step, wall_ms),
/// and the final checkpoint. On a numeric failure the last good parameters
/// are saved before the error propagates.
pub fn cmd_train_fm(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut model = init_model(cfg)?;
    let mut adam = Adam::new(&model.params, cfg.optimizer.clone());
    let mut metrics = Csv::create(&cfg.out_dir.join("metrics.csv"), "step,loss,grad_norm")?;
    let mut timings = Csv::create(&cfg.out_dir.join("timings.csv"), "step,wall_ms")?;
    let ckpt = checkpoint_path(cfg);

    let src_cfg = cfg.clone();
    let source =
        move |id: u64, bucket: &BucketKey, rng: &mut Rng| make_payload(&src_cfg, id, bucket, rng);
    let mut pipe = Pipeline::spawn(&cfg.pipeline, cfg.seed, source)?;
    let mut reseq = Resequencer::new();

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let item = reseq
            .next_in_order(&pipe.rx)
            .ok_or_else(|| Error::Config("data pipeline ended before training did".into()))?;
        let mut rng = derive_rng(cfg.seed, STREAM_TRAIN + step as u64);
        let items = to_fm_items(cfg, &item.payload, &mut rng)?;
        let step_result = (|| {
            let (loss, grads) = flowlab_core::net::gradient(&model.params, |g, pids| {
                build_fm_loss(&model, &items, g, pids)
            })?;
            ensure_finite_grads(&grads)?;
            Ok((loss, grads))
        })();
        let (loss, grads) = match step_result {
            Ok(v) => v,
            Err(e) => {
                // retain the last good parameters for post-mortem use
                save_checkpoint(&ckpt, &model.config, &model.params)?;
                return Err(e);
            }
        };
        let grad_norm = Adam::grad_norm(&grads);
        adam.apply(&mut model.params, &grads);
        metrics.row(format_args!("{step},{loss},{grad_norm}"))?;
        timings.row(format_args!("{step},{}", t0.elapsed().as_millis()))?;
    }
    pipe.shutdown();
    save_checkpoint(&ckpt, &model.config, &model.params)?;
    metrics.finish()?;
    timings.finish()?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Ode,
    Sde,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub task: String,
    pub mode: SampleMode,
    pub n: usize,
    /// Per-sample rewards where the task defines them, else empty.
    pub rewards: Vec<f64>,
    pub mean_reward: Option<f64>,
}

/// Sample n generations from a checkpoint. Glyph and edit samples are saved
/// as PGM images, mixture samples as CSV points; a JSON summary reports
/// rewards where the task defines them.
pub fn cmd_sample(
    cfg: &RunConfig,
    ckpt: &Path,
    mode: SampleMode,
    n: usize,
) -> Result<SampleSummary> {
    cfg.validate()?;
    let params = load_checkpoint_for(ckpt, &cfg.model)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let model = Model {
        config: cfg.model.clone(),
        params,
    };
    let mut schedule = cfg.schedule;
    if mode == SampleMode::Ode {
        schedule.sigma = 0.0;
    }
    let grid = cfg.grid();
    let shape = cfg.latent_shape();

    let mut points = if cfg.task == TaskKind::Mixture {
        Some(Csv::create(&cfg.out_dir.join("points.csv"), "x,y")?)
    } else {
        None
    };
    let mut rewards = Vec::new();
    for i in 0..n {
        let ep = eval_prompt(cfg, i)?;
        let cond = Condition {
            prompt: ep.prompt.clone(),
            image: ep.condition.clone(),
        };
        let mut rng = derive_rng(cfg.seed, STREAM_SAMPLE + i as u64);
        let traj = sample_trajectory(
            |x, t| model.velocity(x, t, &cond, grid),
            &shape,
            &schedule,
            &mut rng,
        )?;
        let x = traj.final_state();
        match cfg.task {
            TaskKind::Mixture => {
                points
                    .as_mut()
                    .unwrap()
                    .row(format_args!("{},{}", x.data[0], x.data[1]))?;
            }
            TaskKind::Glyph | TaskKind::Edit => {
                let img = flowlab_core::net::unpatchify(x, grid, cfg.model.patch)?;
                write_pgm(&cfg.out_dir.join(format!("sample_{i:03}.pgm")), &img)?;
            }
        }
        if let Some(r) = sample_reward(cfg, &ep, x)? {
            rewards.push(r);
        }
    }
    if let Some(p) = points {
        p.finish()?;
    }
    let mean_reward = if rewards.is_empty() {
        None
    } else {
        Some(rewards.iter().sum::<f64>() / rewards.len() as f64)
    };
    let summary = SampleSummary {
        task: cfg.task.name().into(),
        mode,
        n,
        rewards,
        mean_reward,
    };
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    std::fs::write(cfg.out_dir.join("summary.json"), text)?;
    Ok(summary)
}

/// One stored preference pair: pixel-space win/lose canvases for a prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: Vec<usize>,
    pub win: Vec<f64>,
    pub lose: Vec<f64>,
}

/// Read a JSON-lines pairs file, reporting the 1-based line of any bad record.
pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if rec.win.len() != rec.lose.len() || rec.win.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!(
                    "win/lose must be equal-length and non-empty, got {} and {}",
                    rec.win.len(),
                    rec.lose.len()
                ),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} holds no pairs", path.display())));
    }
    Ok(out)
}

/// Write a synthetic separable pairs file for the glyph task: each win is the
/// rendered prompt character, each lose a different character.
pub fn write_glyph_pairs(path: &Path, n: usize) -> Result<()> {
    let spec = data::glyph_spec();
    let chars = spec.charset();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..n {
        let k = i % chars.len();
        let wrong = (k + 1 + i / chars.len()) % chars.len();
        let rec = PairRecord {
            prompt: vec![k],
            win: flowlab_core::tasks::render_glyph(&spec, chars[k])?.data,
            lose: flowlab_core::tasks::render_glyph(&spec, chars[wrong])?.data,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

fn pair_to_tokens(cfg: &RunConfig, flat: &[f64]) -> Result<Tensor> {
    match cfg.task {
        TaskKind::Mixture => {
            if flat.len() != 2 {
                return Err(Error::shape("2 values", format!("{}", flat.len())));
            }
            Ok(Tensor::new(vec![1, 2], flat.to_vec()))
        }
        TaskKind::Glyph | TaskKind::Edit => {
            let c = cfg.canvas();
            if flat.len() != c * c {
                return Err(Error::shape(
                    format!("{} pixels", c * c),
                    format!("{}", flat.len()),
                ));
            }
            patchify(&Tensor::new(vec![c, c], flat.to_vec()), cfg.model.patch)
        }
    }
}

/// Squared flow-matching residual difference (win minus lose) for one model.
fn fm_diff(model: &Model, item: &DpoItem) -> Result<f64> {
    let vw = model.forward(&NetInput::new(
        &item.prompt,
        &item.x_t_win,
        item.grid,
        item.t,
    ))?;
    let vl = model.forward(&NetInput::new(
        &item.prompt,
        &item.x_t_lose,
        item.grid,
        item.t,
    ))?;
    Ok(vw.sub(&item.v_t_win)?.sum_sq() - vl.sub(&item.v_t_lose)?.sum_sq())
}

/// Preference optimization against a frozen reference checkpoint.
/// metrics.csv columns: step, loss, margin (mean reference-minus-policy
/// residual difference; positive when the policy separates wins from loses
/// more strongly than the reference).
pub fn cmd_train_dpo(cfg: &RunConfig, ckpt: &Path, pairs_path: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let ref_params = load_checkpoint_for(ckpt, &cfg.model)?;
    let pairs = read_pairs(pairs_path)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let reference = Model {
        config: cfg.model.clone(),
        params: ref_params,
    };
    let mut policy = Model {
        config: cfg.model.clone(),
        params: reference.params.clone(),
    };
    let mut adam = Adam::new(&policy.params, cfg.optimizer.clone());
    let mut metrics = Csv::create(&cfg.out_dir.join("metrics.csv"), "step,loss,margin")?;
    let out_ckpt = checkpoint_path(cfg);
    let grid = cfg.grid();

    for step in 0..cfg.steps {
        let mut rng = derive_rng(cfg.seed, STREAM_DPO + step as u64);
        let mut items = Vec::with_capacity(cfg.batch);
        for j in 0..cfg.batch {
            let rec = &pairs[(step * cfg.batch + j) % pairs.len()];
            let win = pair_to_tokens(cfg, &rec.win)?;
            let lose = pair_to_tokens(cfg, &rec.lose)?;
            let t = clamp_timestep(flowlab_core::flow::sample_timestep(&cfg.timestep, &mut rng));
            let nw = Tensor::standard_normal(win.shape.clone(), &mut rng);
            let nl = Tensor::standard_normal(lose.shape.clone(), &mut rng);
            let fw = flowlab_core::flow::interpolate(&win, &nw, t)?;
            let fl = flowlab_core::flow::interpolate(&lose, &nl, t)?;
            let mut item = DpoItem {
                prompt: rec.prompt.clone(),
                grid,
                t,
                x_t_win: fw.x_t,
                v_t_win: fw.v_t,
                x_t_lose: fl.x_t,
                v_t_lose: fl.v_t,
                diff_ref: 0.0,
            };
            item.diff_ref = fm_diff(&reference, &item)?;
            items.push(item);
        }
        let margin = {
            let mut m = 0.0;
            for item in &items {
                m += item.diff_ref - fm_diff(&policy, item)?;
            }
            m / items.len() as f64
        };
        let (loss, grads) = flowlab_core::net::gradient(&policy.params, |g, pids| {
            build_dpo_loss(&policy, &items, cfg.rl.beta_dpo, g, pids)
        })?;
        ensure_finite_grads(&grads)?;
        adam.apply(&mut policy.params, &grads);
        metrics.row(format_args!("{step},{loss},{margin}"))?;
    }
    save_checkpoint(&out_ckpt, &policy.config, &policy.params)?;
    metrics.finish()?;
    Ok(out_ckpt)
}

fn trajectory_reward(cfg: &RunConfig, ep: &EvalPrompt, x: &Tensor) -> Result<f64> {
    match cfg.task {
        TaskKind::Mixture => Ok(mixture_reward(x)),
        TaskKind::Glyph | TaskKind::Edit => Ok(sample_reward(cfg, ep, x)?
            .expect("glyph and edit tasks always define a reward")),
    }
}

/// Group-relative policy optimization from a frozen reference checkpoint.
/// metrics.csv columns: step, loss, mean_reward, mean_kl, clip_fraction.
pub fn cmd_train_grpo(cfg: &RunConfig) -> Result<PathBuf> {
    let ckpt = checkpoint_path(cfg);
    cmd_train_grpo_from(cfg, &ckpt)
}

pub fn cmd_train_grpo_from(cfg: &RunConfig, ckpt: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.schedule.sigma <= 0.0 {
        return Err(Error::Config(
            "GRPO needs a stochastic sampler: schedule.sigma must be > 0".into(),
        ));
    }
    let ref_params = load_checkpoint_for(ckpt, &cfg.model)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let reference = Model {
        config: cfg.model.clone(),
        params: ref_params,
    };
    let mut policy = Model {
        config: cfg.model.clone(),
        params: reference.params.clone(),
    };
    let mut adam = Adam::new(&policy.params, cfg.optimizer.clone());
    let mut metrics = Csv::create(
        &cfg.out_dir.join("metrics.csv"),
        "step,loss,mean_reward,mean_kl,clip_fraction",
    )?;
    let out_ckpt = checkpoint_path(cfg);
    let grid = cfg.grid();
    let shape = cfg.latent_shape();
    let dt = cfg.schedule.dt();
    let sigma = cfg.schedule.sigma;
    let g_size = cfg.rl.group_size;

    for step in 0..cfg.steps {
        let ep = eval_prompt(cfg, step)?;
        let cond = Condition {
            prompt: ep.prompt.clone(),
            image: ep.condition.clone(),
        };
        let mut trajs = Vec::with_capacity(g_size);
        let mut rewards = Vec::with_capacity(g_size);
        for gi in 0..g_size {
            let mut rng = derive_rng(cfg.seed, STREAM_GRPO + (step * 1024 + gi) as u64);
            let traj = sample_trajectory(
                |x, t| policy.velocity(x, t, &cond, grid),
                &shape,
                &cfg.schedule,
                &mut rng,
            )?;
            rewards.push(trajectory_reward(cfg, &ep, traj.final_state())?);
            trajs.push(traj);
        }
        let group = Group::new(cond.clone(), trajs, rewards)?;
        let mean_reward = group.rewards.iter().sum::<f64>() / g_size as f64;

        let mut items = Vec::with_capacity(g_size);
        let mut kl_sum = 0.0;
        let mut kl_count = 0usize;
        for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
            let mut steps = Vec::with_capacity(cfg.schedule.steps);
            for k in 0..cfg.schedule.steps {
                let x = traj.states[k].clone();
                let t = traj.times[k];
                let v_ref = reference.velocity(&x, t, &cond, grid)?;
                let v_pol = policy.velocity(&x, t, &cond, grid)?;
                kl_sum += step_kl(&v_pol, &v_ref, t, dt, sigma)?;
                kl_count += 1;
                steps.push(GrpoStepItem {
                    x,
                    x_next: traj.states[k + 1].clone(),
                    t,
                    old_logprob: traj.logprobs[k],
                    v_ref,
                });
            }
            items.push(GrpoTrajItem {
                advantage: adv,
                steps,
            });
        }
        let mean_kl = kl_sum / kl_count as f64;
        // one on-policy gradient step per rollout: ratios start at exactly 1
        let clip_fraction = 0.0;

        let (loss, grads) = flowlab_core::net::gradient(&policy.params, |g, pids| {
            build_grpo_group_loss(
                &policy,
                &ep.prompt,
                ep.condition.as_ref(),
                grid,
                &items,
                dt,
                sigma,
                &cfg.rl,
                g,
                pids,
            )
        })?;
        ensure_finite_grads(&grads)?;
        adam.apply(&mut policy.params, &grads);
        metrics.row(format_args!(
            "{step},{loss},{mean_reward},{mean_kl},{clip_fraction}"
        ))?;
    }
    save_checkpoint(&out_ckpt, &policy.config, &policy.params)?;
    metrics.finish()?;
    Ok(out_ckpt)
}

pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub fm: f64,
    pub dpo: f64,
    pub grpo: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Finite-difference gradient audit of all three training losses on this
/// configuration's model. `corrupt` perturbs the analytic gradients and must
/// make the check fail (negative control).
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: f64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut model = init_model(cfg)?;
    // shake the zero-initialized blocks so every parameter participates
    let mut rng = derive_rng(cfg.seed, STREAM_GRADCHECK);
    for (_, t) in model.params.entries.iter_mut() {
        let noise = Tensor::standard_normal(t.shape.clone(), &mut rng);
        *t = t.zip(&noise, |a, b| a + 0.05 * b)?;
    }
    let grid = cfg.grid();
    let shape = cfg.latent_shape();
    let prompt = eval_prompt(cfg, 0)?.prompt;
    let condition = eval_prompt(cfg, 0)?.condition;

    let fm_items: Vec<FmItem> = (0..2)
        .map(|i| FmItem {
            prompt: prompt.clone(),
            condition: condition.clone(),
            grid,
            t: 0.25 + 0.4 * i as f64,
            x_t: Tensor::standard_normal(shape.clone(), &mut rng),
            v_target: Tensor::standard_normal(shape.clone(), &mut rng),
        })
        .collect();
    let fm = finite_diff_check_with(
        &model.params,
        |g, pids| build_fm_loss(&model, &fm_items, g, pids),
        40,
        1e-5,
        cfg.seed.wrapping_add(1),
        corrupt,
    )?
    .max_rel_err;

    let dpo_items: Vec<DpoItem> = (0..2)
        .map(|_| DpoItem {
            prompt: prompt.clone(),
            grid,
            t: 0.45,
            x_t_win: Tensor::standard_normal(shape.clone(), &mut rng),
            v_t_win: Tensor::standard_normal(shape.clone(), &mut rng),
            x_t_lose: Tensor::standard_normal(shape.clone(), &mut rng),
            v_t_lose: Tensor::standard_normal(shape.clone(), &mut rng),
            diff_ref: 0.2,
        })
        .collect();
    // small beta keeps softplus away from saturation so gradients are O(1)
    let dpo = finite_diff_check_with(
        &model.params,
        |g, pids| build_dpo_loss(&model, &dpo_items, 0.05, g, pids),
        40,
        1e-5,
        cfg.seed.wrapping_add(2),
        corrupt,
    )?
    .max_rel_err;

    let (dt, sigma) = (0.1, 0.5);
    let rl = flowlab_core::preference::RLConfig {
        beta_kl: 0.1,
        ..cfg.rl
    };
    // roll genuine stochastic steps so old log-probabilities match the model
    // and importance ratios start near 1
    let cond = Condition {
        prompt: prompt.clone(),
        image: condition.clone(),
    };
    let mut grpo_items = Vec::with_capacity(2);
    for &adv in &[1.0, -1.0] {
        let mut steps = Vec::with_capacity(2);
        for k in 0..2 {
            let t = 0.3 + 0.3 * k as f64;
            let x = Tensor::standard_normal(shape.clone(), &mut rng);
            let v = model.velocity(&x, t, &cond, grid)?;
            let noise = Tensor::standard_normal(shape.clone(), &mut rng);
            let x_next = flowlab_core::sampler::sde_step(&x, &v, t, dt, sigma, &noise)?;
            let old_logprob =
                flowlab_core::sampler::transition_logprob(&x_next, &x, &v, t, dt, sigma)?;
            let v_ref = v.zip(&Tensor::standard_normal(shape.clone(), &mut rng), |a, b| {
                a + 0.1 * b
            })?;
            steps.push(GrpoStepItem {
                x,
                x_next,
                t,
                old_logprob,
                v_ref,
            });
        }
        grpo_items.push(GrpoTrajItem {
            advantage: adv,
            steps,
        });
    }
    let grpo = finite_diff_check_with(
        &model.params,
        |g, pids| {
            build_grpo_group_loss(
                &model,
                &prompt,
                condition.as_ref(),
                grid,
                &grpo_items,
                dt,
                sigma,
                &rl,
                g,
                pids,
            )
        },
        40,
        1e-5,
        cfg.seed.wrapping_add(3),
        corrupt,
    )?
    .max_rel_err;

    let report = GradcheckReport {
        fm,
        dpo,
        grpo,
        threshold: GRADCHECK_TOL,
        pass: fm < GRADCHECK_TOL && dpo < GRADCHECK_TOL && grpo < GRADCHECK_TOL,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(cfg.out_dir.join("gradcheck.json"), text)?;
    Ok(report)
}
