//! Task-specific data plumbing: turning pipeline payloads into training
//! examples and picking evaluation prompts per task.

use flowlab_core::config::{RunConfig, TaskKind};
use flowlab_core::error::Result;
use flowlab_core::flow::{interpolate, sample_timestep};
use flowlab_core::net::patchify;
use flowlab_core::pipeline::{BucketKey, Payload};
use flowlab_core::tasks::{render_glyph, EditOp, GlyphSpec, MixtureSpec, sample_mixture};
use flowlab_core::tensor::Tensor;
use flowlab_core::train::FmItem;
use flowlab_core::Rng;
use rand::Rng as _;

/// Target distribution for the mixture task: a single Gaussian at (1, 1).
pub fn mixture_spec() -> MixtureSpec {
    MixtureSpec::single_gaussian([1.0, 1.0])
}

pub fn glyph_spec() -> GlyphSpec {
    GlyphSpec::default()
}

/// Produce one payload of `batch` raw examples for a work item.
///
/// Layout per task:
/// - mixture: prompt [0], latent = the 2-D point as a [1, 2] tensor
/// - glyph:   prompt [char index], latent = rendered canvas [C, C]
/// - edit:    prompt [op token], latent = condition stacked over target
///            as a [2C, C] tensor
pub fn make_payload(cfg: &RunConfig, _id: u64, _bucket: &BucketKey, rng: &mut Rng) -> Payload {
    let mut prompts = Vec::with_capacity(cfg.batch);
    let mut latents = Vec::with_capacity(cfg.batch);
    let spec = glyph_spec();
    for _ in 0..cfg.batch {
        match cfg.task {
            TaskKind::Mixture => {
                let p = sample_mixture(&mixture_spec(), 1, rng).expect("valid spec")[0];
                prompts.push(vec![0usize]);
                latents.push(Tensor::new(vec![1, 2], vec![p[0], p[1]]));
            }
            TaskKind::Glyph => {
                let k = rng.gen_range(0..spec.charset().len());
                let canvas = render_glyph(&spec, spec.char_at(k)).expect("valid spec");
                prompts.push(vec![k]);
                latents.push(canvas);
            }
            TaskKind::Edit => {
                let k = rng.gen_range(0..spec.charset().len());
                let op = EditOp::ALL[rng.gen_range(0..EditOp::ALL.len())];
                let source = render_glyph(&spec, spec.char_at(k)).expect("valid spec");
                let target = op.apply(&source);
                let c = spec.canvas;
                let mut stacked = Tensor::zeros(vec![2 * c, c]);
                stacked.data[..c * c].copy_from_slice(&source.data);
                stacked.data[c * c..].copy_from_slice(&target.data);
                prompts.push(vec![op.token()]);
                latents.push(stacked);
            }
        }
    }
    Payload { prompts, latents }
}

/// Convert one payload into flow-matching items: draw t and noise, build the
/// interpolant, patchify into token space.
pub fn to_fm_items(cfg: &RunConfig, payload: &Payload, rng: &mut Rng) -> Result<Vec<FmItem>> {
    let grid = cfg.grid();
    let patch = cfg.model.patch;
    let mut items = Vec::with_capacity(payload.prompts.len());
    for (prompt, latent) in payload.prompts.iter().zip(&payload.latents) {
        let (x0, condition) = match cfg.task {
            TaskKind::Mixture => (latent.clone(), None),
            TaskKind::Glyph => (patchify(latent, patch)?, None),
            TaskKind::Edit => {
                let c = latent.shape[1];
                let source = Tensor::new(vec![c, c], latent.data[..c * c].to_vec());
                let target = Tensor::new(vec![c, c], latent.data[c * c..].to_vec());
                (patchify(&target, patch)?, Some(patchify(&source, patch)?))
            }
        };
        let t = sample_timestep(&cfg.timestep, rng);
        let x1 = Tensor::standard_normal(x0.shape.clone(), rng);
        let fs = interpolate(&x0, &x1, t)?;
        items.push(FmItem {
            prompt: prompt.clone(),
            condition,
            grid,
            t,
            x_t: fs.x_t,
            v_target: fs.v_t,
        });
    }
    Ok(items)
}

/// Evaluation prompt for sample index i: prompt tokens, optional condition
/// tokens, and a reward target where the task defines one.
pub struct EvalPrompt {
    pub prompt: Vec<usize>,
    pub condition: Option<Tensor>,
    /// Pixel-space target for reward scoring (glyph: the rendered character;
    /// edit: the edited source).
    pub target: Option<Tensor>,
    /// Target character for glyph rewards.
    pub target_char: Option<char>,
}

pub fn eval_prompt(cfg: &RunConfig, i: usize) -> Result<EvalPrompt> {
    let spec = glyph_spec();
    Ok(match cfg.task {
        TaskKind::Mixture => EvalPrompt {
            prompt: vec![0],
            condition: None,
            target: None,
            target_char: None,
        },
        TaskKind::Glyph => {
            let k = i % spec.charset().len();
            let ch = spec.char_at(k);
            EvalPrompt {
                prompt: vec![k],
                condition: None,
                target: Some(render_glyph(&spec, ch)?),
                target_char: Some(ch),
            }
        }
        TaskKind::Edit => {
            let k = i % spec.charset().len();
            let op = EditOp::ALL[i % EditOp::ALL.len()];
            let source = render_glyph(&spec, spec.char_at(k))?;
            let target = op.apply(&source);
            EvalPrompt {
                prompt: vec![op.token()],
                condition: Some(patchify(&source, cfg.model.patch)?),
                target: Some(target),
                target_char: None,
            }
        }
    })
}

/// Reward of a generated latent (token space) under this task's scorer.
/// Mixture has no per-sample reward during FM sampling; GRPO uses
/// [`mixture_reward`].
pub fn sample_reward(cfg: &RunConfig, ep: &EvalPrompt, tokens: &Tensor) -> Result<Option<f64>> {
    let spec = glyph_spec();
    match cfg.task {
        TaskKind::Mixture => Ok(None),
        TaskKind::Glyph => {
            let img = flowlab_core::net::unpatchify(tokens, cfg.grid(), cfg.model.patch)?;
            let ch = ep.target_char.expect("glyph eval prompt has a target char");
            Ok(Some(flowlab_core::tasks::glyph_reward(&img, ch, &spec)?))
        }
        TaskKind::Edit => {
            let img = flowlab_core::net::unpatchify(tokens, cfg.grid(), cfg.model.patch)?;
            let target = ep.target.as_ref().expect("edit eval prompt has a target");
            Ok(Some(flowlab_core::tasks::pixel_agreement(&img, target)?))
        }
    }
}

/// Negative squared distance to the mixture mean; used as the GRPO reward on
/// the mixture task.
pub fn mixture_reward(tokens: &Tensor) -> f64 {
    let m = mixture_spec().means[0];
    -((tokens.data[0] - m[0]).powi(2) + (tokens.data[1] - m[1]).powi(2))
}
