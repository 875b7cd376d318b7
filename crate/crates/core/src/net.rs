//! Toy double-stream velocity transformer.
//!
//! Text and image tokens keep separate projections and feed-forwards but
//! attend jointly; query/key vectors are RMS-normalized per head and rotated
//! by MSRoPE ids. Timestep conditioning enters through learned scale/shift
//! modulation with zero-initialized modulation and output projections, so a
//! fresh model predicts exactly zero velocity.
//!
//! The VAE stand-in is a lossless patchifier: pixels become patch tokens and
//! back without loss. The condition encoder stand-in is an embedding table
//! over a small prompt vocabulary.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::positional::{
    image_position_ids, text_diagonal_offset, text_position_ids, PositionId, RopeConfig, RopeTable,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Must equal heads * head_dim.
    pub hidden: usize,
    pub ffn_mult: f64,
    pub patch: usize,
    /// Input channels per token (patch*patch for images, 2 for 2-D points).
    pub token_dim: usize,
    pub vocab: usize,
    pub rope: RopeConfig,
}

impl ModelConfig {
    /// Desk-scale default: full gradient checks run in seconds.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            head_dim: 16,
            hidden: 64,
            ffn_mult: 4.0,
            patch: 2,
            token_dim: 4,
            vocab: 64,
            rope: RopeConfig::with_frames(16),
        }
    }

    pub fn ffn_dim(&self) -> usize {
        (self.hidden as f64 * self.ffn_mult).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden {} != heads {} * head_dim {}",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if self.patch == 0 || self.token_dim == 0 || self.vocab == 0 {
            return Err(Error::Config("patch, token_dim, vocab must be positive".into()));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(Error::Config(format!(
                "rope.head_dim {} != head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        self.rope.validate()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing param {name}"))
            .1
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing param {name}"))
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Insert every tensor as a tracked leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (_, t))| g.param(t.clone(), i))
            .collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Conditioning for one generation: prompt tokens plus an optional condition
/// image latent (editing).
#[derive(Debug, Clone)]
pub struct Condition {
    pub prompt: Vec<usize>,
    pub image: Option<Tensor>,
}

/// One forward invocation.
pub struct NetInput<'a> {
    pub prompt: &'a [usize],
    /// Noised image latent as patch tokens, [grid.0 * grid.1, token_dim].
    pub image: &'a Tensor,
    /// Token grid (rows, cols).
    pub grid: (usize, usize),
    pub t: f64,
    pub condition: Option<&'a Tensor>,
    /// Override for image-token position ids (tests permute tokens with ids).
    pub image_ids: Option<&'a [PositionId]>,
    /// Exchange the frame ids of condition and target tokens.
    pub swap_frames: bool,
}

impl<'a> NetInput<'a> {
    pub fn new(prompt: &'a [usize], image: &'a Tensor, grid: (usize, usize), t: f64) -> Self {
        NetInput {
            prompt,
            image,
            grid,
            t,
            condition: None,
            image_ids: None,
            swap_frames: false,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z = normal.sample(rng);
        if z.abs() <= 2.0 * std {
            data.push(z);
        }
    }
    Tensor::new(shape, data)
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let h = config.hidden;
        let f = config.ffn_dim();
        let mut p = ParamSet::new();
        fn w(p: &mut ParamSet, name: String, shape: Vec<usize>, rng: &mut Rng) {
            p.entries.push((name, trunc_normal(shape, 0.02, rng)));
        }
        w(&mut p, "text.embed".into(), vec![config.vocab, h], rng);
        w(&mut p, "img.embed.w".into(), vec![config.token_dim, h], rng);
        p.entries.push(("img.embed.b".into(), Tensor::zeros(vec![h])));
        w(&mut p, "temb.w1".into(), vec![h, h], rng);
        p.entries.push(("temb.b1".into(), Tensor::zeros(vec![h])));
        w(&mut p, "temb.w2".into(), vec![h, h], rng);
        p.entries.push(("temb.b2".into(), Tensor::zeros(vec![h])));
        for l in 0..config.layers {
            for s in ["txt", "img"] {
                for m in ["wq", "wk", "wv", "wo"] {
                    w(&mut p, format!("l{l}.{s}.{m}"), vec![h, h], rng);
                }
                w(&mut p, format!("l{l}.{s}.ffn.w1"), vec![h, f], rng);
                p.entries.push((format!("l{l}.{s}.ffn.b1"), Tensor::zeros(vec![f])));
                w(&mut p, format!("l{l}.{s}.ffn.w2"), vec![f, h], rng);
                p.entries.push((format!("l{l}.{s}.ffn.b2"), Tensor::zeros(vec![h])));
                // zero-init modulation: blocks start as identity maps
                p.entries.push((format!("l{l}.{s}.mod.w"), Tensor::zeros(vec![h, 6 * h])));
                p.entries.push((format!("l{l}.{s}.mod.b"), Tensor::zeros(vec![6 * h])));
            }
        }
        p.entries.push(("out.mod.w".into(), Tensor::zeros(vec![h, 2 * h])));
        p.entries.push(("out.mod.b".into(), Tensor::zeros(vec![2 * h])));
        // zero-init output projection: initial velocity field is exactly 0
        p.entries.push(("out.w".into(), Tensor::zeros(vec![h, config.token_dim])));
        p.entries.push(("out.b".into(), Tensor::zeros(vec![config.token_dim])));
        Ok(Model { config, params: p })
    }

    /// Sinusoidal timestep features, dim = hidden.
    fn t_features(&self, t: f64) -> Tensor {
        let h = self.config.hidden;
        let half = h / 2;
        let mut data = vec![0.0; h];
        for i in 0..half {
            let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
            let arg = t * 1000.0 * freq;
            data[i] = arg.cos();
            data[half + i] = arg.sin();
        }
        Tensor::new(vec![1, h], data)
    }

    fn validate_input(&self, input: &NetInput) -> Result<()> {
        let (gh, gw) = input.grid;
        if gh == 0 || gw == 0 {
            return Err(Error::Dimension("token grid must be at least 1x1".into()));
        }
        for &id in input.prompt {
            if id >= self.config.vocab {
                return Err(Error::Vocab { id, vocab: self.config.vocab });
            }
        }
        let want = vec![gh * gw, self.config.token_dim];
        if input.image.shape != want {
            return Err(Error::shape(format!("{want:?}"), format!("{:?}", input.image.shape)));
        }
        if let Some(c) = input.condition {
            if c.shape != want {
                return Err(Error::shape(format!("{want:?}"), format!("{:?}", c.shape)));
            }
        }
        if let Some(ids) = input.image_ids {
            if ids.len() != gh * gw {
                return Err(Error::shape(format!("{} ids", gh * gw), format!("{}", ids.len())));
            }
        }
        Ok(())
    }

    /// Build the forward pass on a graph whose param leaves are `pids`
    /// (in `ParamSet` order). Returns the velocity node for the noised image
    /// tokens, [n_tokens, token_dim].
    pub fn forward_graph(&self, g: &mut Graph, pids: &[NodeId], input: &NetInput) -> Result<NodeId> {
        self.validate_input(input)?;
        let cfg = &self.config;
        let (gh, gw) = input.grid;
        let n_img = gh * gw;
        let n_txt = input.prompt.len();
        let has_cond = input.condition.is_some();
        let table = RopeTable::new(&cfg.rope)?;
        let pid = |name: &str| pids[self.params.index_of(name)];

        // position ids: text on the diagonal (frame 0); with a condition
        // image present, condition tokens take frame 0 and the noised target
        // frame 1, otherwise the target sits at frame 0.
        let (mut cond_frame, mut target_frame) = (0, if has_cond { 1 } else { 0 });
        if input.swap_frames {
            std::mem::swap(&mut cond_frame, &mut target_frame);
        }
        let target_ids: Vec<PositionId> = match input.image_ids {
            Some(ids) => ids
                .iter()
                .map(|p| PositionId::new(target_frame, p.row, p.col))
                .collect(),
            None => image_position_ids(target_frame, gh, gw)?,
        };
        let mut ids = text_position_ids(text_diagonal_offset(gh, gw), n_txt);
        if has_cond {
            ids.extend(image_position_ids(cond_frame, gh, gw)?);
        }
        ids.extend(target_ids);

        // embeddings
        let mut txt = g.gather(pid("text.embed"), input.prompt);
        let embed_w = pid("img.embed.w");
        let embed_b = pid("img.embed.b");
        let mut img = {
            let mut rows = Vec::new();
            if let Some(c) = input.condition {
                rows.push(g.constant(c.clone()));
            }
            rows.push(g.constant(input.image.clone()));
            let stacked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
            let e = g.matmul(stacked, embed_w);
            g.add_row(e, embed_b)
        };

        // timestep embedding
        let temb = {
            let f = g.constant(self.t_features(input.t));
            let a = g.matmul(f, pid("temb.w1"));
            let a = g.add_row(a, pid("temb.b1"));
            let a = g.silu(a);
            let a = g.matmul(a, pid("temb.w2"));
            g.add_row(a, pid("temb.b2"))
        };
        let temb_act = g.silu(temb);

        let h = cfg.hidden;
        let modulation = |g: &mut Graph, w: NodeId, b: NodeId, chunks: usize| -> Vec<NodeId> {
            let m = g.matmul(temb_act, w);
            let m = g.add_row(m, b);
            (0..chunks).map(|i| g.slice(m, i * h, h)).collect()
        };

        for l in 0..cfg.layers {
            let streams = [("txt", txt, n_txt), ("img", img, if has_cond { 2 * n_img } else { n_img })];
            let mut qs = Vec::new();
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            let mut mods = Vec::new();
            for (name, x, _) in streams.iter() {
                let m = modulation(
                    g,
                    pid(&format!("l{l}.{name}.mod.w")),
                    pid(&format!("l{l}.{name}.mod.b")),
                    6,
                );
                let hn = g.layer_norm(*x);
                let hm = g.row_affine(hn, m[0], m[1]);
                qs.push(g.matmul(hm, pid(&format!("l{l}.{name}.wq"))));
                ks.push(g.matmul(hm, pid(&format!("l{l}.{name}.wk"))));
                vs.push(g.matmul(hm, pid(&format!("l{l}.{name}.wv"))));
                mods.push(m);
            }
            let q = g.concat_rows(&qs);
            let k = g.concat_rows(&ks);
            let v = g.concat_rows(&vs);
            // QK-Norm: RMS per head vector, then rotary
            let q = g.rms_norm_groups(q, cfg.head_dim);
            let k = g.rms_norm_groups(k, cfg.head_dim);
            let q = g.rope(q, &ids, &table, cfg.heads);
            let k = g.rope(k, &ids, &table, cfg.heads);
            let att = g.attention(q, k, v, cfg.heads);

            let mut offset = 0;
            let mut next = Vec::new();
            for ((name, x, rows), m) in streams.iter().zip(&mods) {
                let part = g.slice_rows(att, offset, *rows);
                offset += rows;
                let o = g.matmul(part, pid(&format!("l{l}.{name}.wo")));
                let gated = g.row_scale(o, m[2]);
                let x1 = g.add(*x, gated);
                // feed-forward
                let hn = g.layer_norm(x1);
                let hm = g.row_affine(hn, m[3], m[4]);
                let f1 = g.matmul(hm, pid(&format!("l{l}.{name}.ffn.w1")));
                let f1 = g.add_row(f1, pid(&format!("l{l}.{name}.ffn.b1")));
                let f1 = g.silu(f1);
                let f2 = g.matmul(f1, pid(&format!("l{l}.{name}.ffn.w2")));
                let f2 = g.add_row(f2, pid(&format!("l{l}.{name}.ffn.b2")));
                let gated = g.row_scale(f2, m[5]);
                next.push(g.add(x1, gated));
            }
            txt = next[0];
            img = next[1];
        }

        // velocity head over the noised-image tokens only
        let target = if has_cond {
            g.slice_rows(img, n_img, n_img)
        } else {
            img
        };
        let m = modulation(g, pid("out.mod.w"), pid("out.mod.b"), 2);
        let hn = g.layer_norm(target);
        let hm = g.row_affine(hn, m[0], m[1]);
        let out = g.matmul(hm, pid("out.w"));
        Ok(g.add_row(out, pid("out.b")))
    }

    /// Plain forward: build a graph, run it, return the velocity tensor.
    pub fn forward(&self, input: &NetInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let pids = self.params.bind(&mut g);
        let out = self.forward_graph(&mut g, &pids, input)?;
        Ok(g.value(out).clone())
    }

    /// Velocity-oracle view: x is the patch-token latent for `grid`.
    pub fn velocity(&self, x: &Tensor, t: f64, cond: &Condition, grid: (usize, usize)) -> Result<Tensor> {
        let input = NetInput {
            prompt: &cond.prompt,
            image: x,
            grid,
            t,
            condition: cond.image.as_ref(),
            image_ids: None,
            swap_frames: false,
        };
        self.forward(&input)
    }
}

/// Gradient of a scalar loss w.r.t. every parameter.
/// The closure builds the loss on a graph whose param leaves are supplied in
/// `ParamSet` order. Returns (loss, per-parameter gradients).
pub fn gradient<F>(params: &ParamSet, build: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let pids = params.bind(&mut g);
    let loss = build(&mut g, &pids)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {value}")));
    }
    let slots = g.backward(loss, params.entries.len())?;
    let grads = slots
        .into_iter()
        .zip(&params.entries)
        .map(|(s, (_, t))| s.unwrap_or_else(|| Tensor::zeros(t.shape.clone())))
        .collect();
    Ok((value, grads))
}

/// Pixels [h, w] -> patch tokens [gh*gw, patch*patch], row-major patches.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    if img.shape.len() != 2 {
        return Err(Error::shape("[h, w] image", format!("{:?}", img.shape)));
    }
    let (h, w) = (img.shape[0], img.shape[1]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "patch {patch} does not divide image {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                for c in 0..patch {
                    data.push(img.data[(pr * patch + r) * w + pc * patch + c]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, patch * patch], data))
}

/// Inverse of `patchify`.
pub fn unpatchify(tokens: &Tensor, grid: (usize, usize), patch: usize) -> Result<Tensor> {
    let (gh, gw) = grid;
    if tokens.shape != vec![gh * gw, patch * patch] {
        return Err(Error::shape(
            format!("[{}, {}]", gh * gw, patch * patch),
            format!("{:?}", tokens.shape),
        ));
    }
    let (h, w) = (gh * patch, gw * patch);
    let mut img = Tensor::zeros(vec![h, w]);
    for pr in 0..gh {
        for pc in 0..gw {
            let tok = &tokens.data[(pr * gw + pc) * patch * patch..];
            for r in 0..patch {
                for c in 0..patch {
                    img.data[(pr * patch + r) * w + pc * patch + c] = tok[r * patch + c];
                }
            }
        }
    }
    Ok(img)
}
