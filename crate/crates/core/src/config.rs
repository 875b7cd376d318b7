//! Run configuration: one JSON document describing a full experiment.

use crate::error::{Error, Result};
use crate::flow::TimestepDist;
use crate::net::ModelConfig;
use crate::pipeline::PipelineConfig;
use crate::preference::RLConfig;
use crate::sampler::NoiseSchedule;
use crate::train::OptimizerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mixture,
    Glyph,
    Edit,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Mixture => "mixture",
            TaskKind::Glyph => "glyph",
            TaskKind::Edit => "edit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub rl: RLConfig,
    #[serde(default)]
    pub timestep: TimestepDist,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_seed() -> u64 {
    0
}
fn default_steps() -> usize {
    200
}
fn default_batch() -> usize {
    8
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// A ready-to-run configuration for the given task, with training budgets
    /// sized so each converges in well under a minute per seed on one core.
    pub fn default_for(task: TaskKind) -> RunConfig {
        let mut model = ModelConfig::toy();
        let mut cfg = RunConfig {
            task,
            model: ModelConfig::toy(),
            schedule: NoiseSchedule::default(),
            rl: RLConfig::default(),
            timestep: TimestepDist::default(),
            pipeline: PipelineConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: default_seed(),
            steps: default_steps(),
            batch: 16,
            out_dir: default_out_dir(),
        };
        match task {
            TaskKind::Mixture => {
                model.patch = 1;
                model.token_dim = 2;
                model.layers = 2;
                model.heads = 2;
                model.head_dim = 8;
                model.hidden = 16;
                model.rope = crate::positional::RopeConfig::with_frames(8);
                cfg.steps = 6_000;
                cfg.schedule = NoiseSchedule { steps: 50, eps: 1e-3, sigma: 0.3 };
                // covariance recovery is limited by gradient noise around the
                // Adam stationary point: a large batch with a moderate rate
                // beats small-batch long runs. Broader timestep coverage and
                // a loose clip also help the point model.
                cfg.batch = 128;
                cfg.optimizer.lr = 1.5e-3;
                cfg.optimizer.grad_clip = Some(10.0);
                cfg.timestep.scale = 1.4;
            }
            TaskKind::Glyph => {
                model.patch = 4;
                model.token_dim = 16;
                cfg.steps = 100;
                cfg.schedule = NoiseSchedule { steps: 20, eps: 1e-3, sigma: 0.3 };
            }
            TaskKind::Edit => {
                model.patch = 4;
                model.token_dim = 16;
                cfg.steps = 300;
                cfg.schedule = NoiseSchedule { steps: 20, eps: 1e-3, sigma: 0.3 };
            }
        }
        cfg.model = model;
        cfg
    }

    /// The reinforcement-learning rollout schedule used by GRPO on this
    /// task: few steps, and a time floor well clear of the 1/(2t) drift
    /// singularity.
    pub fn rl_schedule(&self) -> NoiseSchedule {
        NoiseSchedule { steps: 10, eps: 0.05, sigma: 0.3 }
    }

    /// Side length of the latent canvas for this task.
    pub fn canvas(&self) -> usize {
        match self.task {
            TaskKind::Mixture => 1,
            TaskKind::Glyph | TaskKind::Edit => crate::tasks::GlyphSpec::default().canvas,
        }
    }

    /// Patch-token grid (rows, cols) of one generated latent.
    pub fn grid(&self) -> (usize, usize) {
        match self.task {
            TaskKind::Mixture => (1, 1),
            TaskKind::Glyph | TaskKind::Edit => {
                let g = self.canvas() / self.model.patch;
                (g, g)
            }
        }
    }

    /// Shape of one latent in patch-token layout.
    pub fn latent_shape(&self) -> Vec<usize> {
        let (h, w) = self.grid();
        vec![h * w, self.model.token_dim]
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.rl.validate()?;
        self.timestep.validate()?;
        self.pipeline.validate()?;
        self.optimizer.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        match self.task {
            TaskKind::Mixture => {
                if self.model.token_dim != 2 {
                    return Err(Error::Config(format!(
                        "mixture task needs token_dim = 2, got {}",
                        self.model.token_dim
                    )));
                }
            }
            TaskKind::Glyph | TaskKind::Edit => {
                let canvas = self.canvas();
                if canvas % self.model.patch != 0 {
                    return Err(Error::Config(format!(
                        "canvas {} not divisible by patch {}",
                        canvas, self.model.patch
                    )));
                }
                if self.model.token_dim != self.model.patch * self.model.patch {
                    return Err(Error::Config(format!(
                        "image tasks need token_dim = patch^2 = {}, got {}",
                        self.model.patch * self.model.patch,
                        self.model.token_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parse a JSON document. Missing sections default to the values of
    /// `default_for` the configured task, so `{"task": "mixture"}` is a
    /// complete, calibrated run rather than a generic one.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if value.is_object() {
            let task: TaskKind = serde_json::from_value(
                value
                    .get("task")
                    .cloned()
                    .ok_or_else(|| Error::Config("missing required key 'task'".into()))?,
            )
            .map_err(|e| Error::Config(format!("bad task: {e}")))?;
            let defaults = serde_json::to_value(RunConfig::default_for(task))
                .expect("default config serializes");
            let obj = value.as_object_mut().expect("checked is_object");
            for (key, default) in defaults.as_object().expect("config is an object") {
                obj.entry(key.clone()).or_insert_with(|| default.clone());
            }
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_task() {
        for task in [TaskKind::Mixture, TaskKind::Glyph, TaskKind::Edit] {
            RunConfig::default_for(task).validate().unwrap();
        }
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default_for(TaskKind::Glyph);
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn minimal_json_uses_task_defaults() {
        let c = RunConfig::parse(r#"{"task": "mixture"}"#).unwrap();
        assert_eq!(c, RunConfig::default_for(TaskKind::Mixture));
    }

    #[test]
    fn explicit_keys_override_task_defaults() {
        let c = RunConfig::parse(r#"{"task": "mixture", "steps": 7, "seed": 3}"#).unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.seed, 3);
        assert_eq!(c.batch, RunConfig::default_for(TaskKind::Mixture).batch);
    }

    #[test]
    fn mixture_rejects_wrong_token_dim() {
        let mut c = RunConfig::default_for(TaskKind::Mixture);
        c.model.token_dim = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn glyph_rejects_indivisible_patch() {
        let mut c = RunConfig::default_for(TaskKind::Glyph);
        c.model.patch = 5;
        c.model.token_dim = 25;
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_and_latent_shape() {
        let c = RunConfig::default_for(TaskKind::Glyph);
        assert_eq!(c.grid(), (4, 4));
        assert_eq!(c.latent_shape(), vec![16, 16]);
        let m = RunConfig::default_for(TaskKind::Mixture);
        assert_eq!(m.latent_shape(), vec![1, 2]);
    }
}
