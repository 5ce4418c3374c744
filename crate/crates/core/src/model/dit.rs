use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::lora::LoraAdapter;
use super::patchify::{grid_positions, patchify, unpatchify, Patches, TokenPos};
use super::prompt::PromptTokens;
use super::rope::rope_tables;
use super::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::numerics::{grad_check, Graph, Real, Tensor, Var};
use crate::rng;

const LN_EPS: f64 = 1e-6;

/// Which parameters a training run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    /// Every base weight (base pretraining).
    Full,
    /// Adapter factors only; the base stays frozen.
    Lora,
    /// Prompt embeddings only; the base stays frozen.
    Prompt,
}

impl std::fmt::Display for TuningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TuningMode::Full => "full",
            TuningMode::Lora => "lora",
            TuningMode::Prompt => "prompt",
        })
    }
}

/// Named weights of the velocity network, in canonical (sorted) order.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    params: BTreeMap<String, Tensor>,
}

impl BaseWeights {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in self.params.values_mut() {
            t.set_requires_grad(on);
        }
    }
}

/// Expected `(name, shape)` of every base weight.
pub fn weight_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let mut out = Vec::new();
    let mut linear = |name: String, din: usize, dout: usize| {
        out.push((format!("{name}.weight"), vec![dout, din]));
        out.push((format!("{name}.bias"), vec![dout]));
    };
    linear("patch_embed".into(), cfg.patch_in_dim(), d);
    linear("time_in".into(), d, d);
    linear("time_out".into(), d, d);
    for l in 0..cfg.num_layers {
        linear(format!("blocks.{l}.ada"), d, 4 * d);
        for kind in ["q", "k", "v", "o"] {
            linear(format!("blocks.{l}.{kind}"), d, d);
        }
        linear(format!("blocks.{l}.ff1"), d, cfg.ff_dim());
        linear(format!("blocks.{l}.ff2"), cfg.ff_dim(), d);
    }
    linear("final_ada".into(), d, 2 * d);
    linear("out_proj".into(), d, cfg.patch_out_dim());
    out.push(("token_embed".into(), vec![cfg.token_vocab_size, d]));
    out
}

/// Model input for a batch of stitched canvases (`[batch, height, width, ·]`).
#[derive(Clone, Copy, Debug)]
pub struct VelocityInput<'a> {
    pub batch: usize,
    pub height: usize,
    /// Width of the stitched canvas (twice the width of one image).
    pub width: usize,
    pub noisy: &'a [f32],
    pub masked: &'a [f32],
    pub mask: &'a [f32],
    pub t: &'a [f32],
    /// `batch × caption_len` condition token ids; may be empty.
    pub tokens: &'a [u32],
}

/// Graph handles of all weights taking part in a forward pass.
pub struct Binding {
    vars: HashMap<String, Var>,
    lora_scale: f64,
    has_prompt: bool,
}

impl Binding {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    fn w(&self, name: &str) -> Result<Var> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("weight {name} is not bound")))
    }
}

pub struct ForwardOutput {
    /// Velocity tokens `[batch, visual_tokens, p²·C]`.
    pub velocity: Var,
    /// Post-softmax attention per layer, `[batch·heads, tokens, tokens]`.
    pub attention: Vec<Var>,
    pub cond_len: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

/// Attention of one head, with the reference-mass summary.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    pub batch: usize,
    pub num_tokens: usize,
    pub cond_len: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// `[batch, tokens, tokens]` row-stochastic matrices.
    pub probs: Vec<f32>,
    /// `[batch, grid_rows, grid_cols / 2]`: mass each right-canvas query puts on left-canvas keys.
    pub left_mass: Vec<f32>,
}

/// Head-averaged reference mass of one layer, `[batch, grid_rows, grid_cols / 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub layer: usize,
    pub batch: usize,
    pub grid_rows: usize,
    pub half_cols: usize,
    pub left_mass: Vec<f32>,
    /// Largest deviation of any softmax row sum from 1.
    pub max_row_error: f32,
}

/// The velocity transformer: patch tokens plus condition tokens through
/// single-stream blocks with adaptive layer norm on the timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Dit {
    pub config: ModelConfig,
    pub base: BaseWeights,
}

impl Dit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::purpose::INIT, 0);
        let mut params = BTreeMap::new();
        for (name, shape) in weight_shapes(&config) {
            let zero_init = name.ends_with(".bias")
                || name.starts_with("out_proj")
                || name.starts_with("final_ada")
                || name.contains(".ada.");
            let t = if zero_init {
                Tensor::zeros(shape)
            } else if name == "token_embed" {
                Tensor::randn(shape, 1.0, &mut rng)
            } else {
                let fan_in = shape[1] as f32;
                Tensor::randn(shape, 1.0 / fan_in.sqrt(), &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            base: BaseWeights { params },
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in weight_shapes(&config) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::dimension(format!("missing weight {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dimension(format!(
                    "weight {name} has shape {:?}, config needs {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::dimension(format!("unexpected weight {extra}")));
        }
        Ok(Self {
            config,
            base: BaseWeights { params },
        })
    }

    pub fn token_embedding(&self) -> &Tensor {
        self.base.get("token_embed").expect("always present")
    }

    /// Binds weights as graph leaves, inheriting each tensor's grad flag.
    pub fn bind<T: Real>(
        &self,
        g: &mut Graph<T>,
        adapter: Option<&LoraAdapter>,
        prompt: Option<&PromptTokens>,
    ) -> Result<Binding> {
        self.bind_with(g, adapter, prompt, |g, _, t| Ok(g.param(t)))
    }

    /// Binds weights through a caller-supplied leaf constructor.
    pub fn bind_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        adapter: Option<&LoraAdapter>,
        prompt: Option<&PromptTokens>,
        mut leaf: impl FnMut(&mut Graph<T>, &str, &Tensor) -> Result<Var>,
    ) -> Result<Binding> {
        let mut vars = HashMap::new();
        for (name, t) in self.base.iter() {
            vars.insert(name.to_string(), leaf(g, name, t)?);
        }
        if let Some(a) = adapter {
            a.check_compatible(&self.config)?;
            for (name, t) in a.tensors() {
                let v = leaf(g, &name, t)?;
                vars.insert(name, v);
            }
        }
        if let Some(p) = prompt {
            if p.dim() != self.config.hidden_dim {
                return Err(Error::dimension(format!(
                    "prompt width {} vs hidden_dim {}",
                    p.dim(),
                    self.config.hidden_dim
                )));
            }
            vars.insert("prompt".into(), leaf(g, "prompt", &p.tokens)?);
        }
        Ok(Binding {
            vars,
            lora_scale: adapter.map_or(0.0, |a| f64::from(a.scale)),
            has_prompt: prompt.is_some(),
        })
    }

    fn linear<T: Real>(&self, g: &mut Graph<T>, b: &Binding, name: &str, x: Var) -> Result<Var> {
        let w = b.w(&format!("{name}.weight"))?;
        let bias = b.w(&format!("{name}.bias"))?;
        let y = g.matmul_t(x, w, false, true)?;
        let mut y = g.add_bias(y, bias)?;
        if let (Some(a), Some(bb)) = (b.get(&format!("lora.{name}.a")), b.get(&format!("lora.{name}.b"))) {
            let ax = g.matmul_t(x, a, false, true)?;
            let bax = g.matmul_t(ax, bb, false, true)?;
            let delta = g.scale(bax, b.lora_scale)?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }

    /// `LN(x)·(1 + scale) + shift`, with per-sample shift/scale broadcast over tokens.
    fn modulate<T: Real>(&self, g: &mut Graph<T>, x: Var, shift: Var, scale: Var, tokens: usize) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let sc = g.expand(scale, tokens)?;
        let sc = g.add_scalar(sc, 1.0)?;
        let sh = g.expand(shift, tokens)?;
        let y = g.mul(n, sc)?;
        g.add(y, sh)
    }

    fn check_input(&self, input: &VelocityInput<'_>) -> Result<()> {
        let c = self.config.image_channels;
        let (b, h, w) = (input.batch, input.height, input.width);
        ensure!(b >= 1, "empty batch");
        let px = b * h * w;
        if input.noisy.len() != px * c || input.masked.len() != px * c || input.mask.len() != px {
            return Err(Error::Contract(format!(
                "input triple sizes {}/{}/{} do not match {b}×{h}×{w}×({c},{c},1)",
                input.noisy.len(),
                input.masked.len(),
                input.mask.len()
            )));
        }
        let p = self.config.patch_size;
        ensure!(h % p == 0 && w % p == 0, "{h}×{w} canvas is not divisible by patch size {p}");
        ensure!(w % (2 * p) == 0, "stitched width {w} does not split into two patch-aligned halves");
        ensure!(input.t.len() == b, "need one timestep per sample");
        ensure!(
            input.t.iter().all(|t| (0.0..=1.0).contains(t)),
            "timesteps must lie in [0, 1]"
        );
        ensure!(
            input.mask.iter().all(|&m| m == 0.0 || m == 1.0),
            "mask values must be 0 or 1"
        );
        ensure!(input.tokens.len() % b == 0, "token ids do not split evenly over the batch");
        Ok(())
    }

    fn patch_features(&self, input: &VelocityInput<'_>) -> Result<(Vec<f32>, usize, usize)> {
        let p = self.config.patch_size;
        let c = self.config.image_channels;
        let (h, w) = (input.height, input.width);
        let img = h * w * c;
        let mut feats = Vec::new();
        let (mut rows, mut cols) = (0, 0);
        for i in 0..input.batch {
            let z = patchify(&input.noisy[i * img..(i + 1) * img], h, w, c, p)?;
            let m = patchify(&input.masked[i * img..(i + 1) * img], h, w, c, p)?;
            let mk = patchify(&input.mask[i * h * w..(i + 1) * h * w], h, w, 1, p)?;
            rows = z.grid_rows;
            cols = z.grid_cols;
            for t in 0..z.len() {
                feats.extend_from_slice(z.token(t));
                feats.extend_from_slice(m.token(t));
                let pooled = mk.token(t).iter().sum::<f32>() / (p * p) as f32;
                feats.push(pooled);
            }
        }
        Ok((feats, rows, cols))
    }

    /// Builds the forward pass on `g`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, input: &VelocityInput<'_>) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let batch = input.batch;

        let (feats, grid_rows, grid_cols) = self.patch_features(input)?;
        let tv = grid_rows * grid_cols;
        let feats = g.constant([batch, tv, cfg.patch_in_dim()], feats.into_iter().map(T::of_f32).collect())?;
        let x_vis = self.linear(g, b, "patch_embed", feats)?;

        let mut parts = Vec::new();
        if b.has_prompt {
            let p = b.w("prompt")?;
            let np = g.shape(p)[0];
            let flat = g.reshape(p, [1, np * d])?;
            let rep = g.expand(flat, batch)?;
            parts.push(g.reshape(rep, [batch, np, d])?);
        }
        let caption_len = input.tokens.len() / batch;
        if caption_len > 0 {
            let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
            let emb = g.embedding(b.w("token_embed")?, &ids)?;
            parts.push(g.reshape(emb, [batch, caption_len, d])?);
        }
        let cond_len: usize = parts.iter().map(|&v| g.shape(v)[1]).sum();
        parts.push(x_vis);
        let mut x = if parts.len() == 1 { x_vis } else { g.concat_axis1(&parts)? };
        let tokens = cond_len + tv;

        let temb = g.constant([batch, d], timestep_embedding(input.t, d))?;
        let c = self.linear(g, b, "time_in", temb)?;
        let c = g.silu(c)?;
        let c = self.linear(g, b, "time_out", c)?;
        let c_act = g.silu(c)?;

        let mut positions = vec![TokenPos { row: 0, col: 0 }; cond_len];
        positions.extend(grid_positions(grid_rows, grid_cols));
        let tables = rope_tables::<T>(&positions, dh, cfg.rope_base);

        let mut attention = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let m = self.linear(g, b, &format!("blocks.{l}.ada"), c_act)?;
            let shift1 = g.slice_last(m, 0, d)?;
            let scale1 = g.slice_last(m, d, d)?;
            let shift2 = g.slice_last(m, 2 * d, d)?;
            let scale2 = g.slice_last(m, 3 * d, d)?;

            let h = self.modulate(g, x, shift1, scale1, tokens)?;
            let heads_of = |g: &mut Graph<T>, kind: &str, rotate: bool| -> Result<Var> {
                let y = self.linear(g, b, &format!("blocks.{l}.{kind}"), h)?;
                let y = g.reshape(y, [batch, tokens, heads, dh])?;
                let mut y = g.swap_axes12(y)?;
                if rotate {
                    y = g.rope(y, &tables)?;
                }
                g.reshape(y, [batch * heads, tokens, dh])
            };
            let q = heads_of(g, "q", true)?;
            let k = heads_of(g, "k", true)?;
            let v = heads_of(g, "v", false)?;
            let logits = g.batch_matmul(q, k, false, true)?;
            let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
            let probs = g.softmax(logits)?;
            attention.push(probs);
            let ctx = g.batch_matmul(probs, v, false, false)?;
            let ctx = g.reshape(ctx, [batch, heads, tokens, dh])?;
            let ctx = g.swap_axes12(ctx)?;
            let ctx = g.reshape(ctx, [batch, tokens, d])?;
            let attn_out = self.linear(g, b, &format!("blocks.{l}.o"), ctx)?;
            x = g.add(x, attn_out)?;

            let h2 = self.modulate(g, x, shift2, scale2, tokens)?;
            let f = self.linear(g, b, &format!("blocks.{l}.ff1"), h2)?;
            let f = g.gelu(f)?;
            let f = self.linear(g, b, &format!("blocks.{l}.ff2"), f)?;
            x = g.add(x, f)?;
        }

        let m = self.linear(g, b, "final_ada", c_act)?;
        let shift = g.slice_last(m, 0, d)?;
        let scale = g.slice_last(m, d, d)?;
        let h = self.modulate(g, x, shift, scale, tokens)?;
        let h_vis = g.narrow_axis1(h, cond_len, tv)?;
        let velocity = self.linear(g, b, "out_proj", h_vis)?;
        Ok(ForwardOutput {
            velocity,
            attention,
            cond_len,
            grid_rows,
            grid_cols,
        })
    }

    /// Velocity over the whole stitched canvas, `[batch, height, width, C]`.
    pub fn predict_velocity(
        &self,
        input: &VelocityInput<'_>,
        adapter: Option<&LoraAdapter>,
        prompt: Option<&PromptTokens>,
    ) -> Result<Vec<f32>> {
        Ok(self.predict_velocity_with_attention(input, adapter, prompt, false)?.0)
    }

    /// As [`Dit::predict_velocity`], optionally summarising attention per layer.
    pub fn predict_velocity_with_attention(
        &self,
        input: &VelocityInput<'_>,
        adapter: Option<&LoraAdapter>,
        prompt: Option<&PromptTokens>,
        summarize: bool,
    ) -> Result<(Vec<f32>, Vec<LayerAttention>)> {
        let mut g = Graph::<f32>::new();
        let b = self.bind(&mut g, adapter, prompt)?;
        let out = self.forward(&mut g, &b, input)?;
        let velocity = self.tokens_to_canvas(g.value(out.velocity), &out, input.batch)?;
        let summaries = if summarize {
            (0..out.attention.len())
                .map(|l| self.summarize_layer(&g, &out, l, input.batch))
                .collect()
        } else {
            Vec::new()
        };
        Ok((velocity, summaries))
    }

    fn tokens_to_canvas(&self, tokens: &[f32], out: &ForwardOutput, batch: usize) -> Result<Vec<f32>> {
        let per = tokens.len() / batch;
        let mut canvas = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(per) {
            canvas.extend(unpatchify(&Patches {
                grid_rows: out.grid_rows,
                grid_cols: out.grid_cols,
                patch_size: self.config.patch_size,
                channels: self.config.image_channels,
                data: chunk.to_vec(),
            }));
        }
        Ok(canvas)
    }

    /// Patch-token layout of a canvas batch, matching the velocity output.
    pub fn canvas_to_tokens(&self, values: &[f32], batch: usize, height: usize, width: usize) -> Result<Vec<f32>> {
        let c = self.config.image_channels;
        let per = height * width * c;
        ensure!(values.len() == batch * per, "canvas batch has {} values", values.len());
        let mut out = Vec::with_capacity(values.len());
        for chunk in values.chunks(per) {
            out.extend(patchify(chunk, height, width, c, self.config.patch_size)?.data);
        }
        Ok(out)
    }

    fn summarize_layer(&self, g: &Graph<f32>, out: &ForwardOutput, layer: usize, batch: usize) -> LayerAttention {
        let heads = self.config.num_heads;
        let probs = g.value(out.attention[layer]);
        let t = out.cond_len + out.grid_rows * out.grid_cols;
        let half = out.grid_cols / 2;
        let mut left_mass = vec![0.0f32; batch * out.grid_rows * half];
        let mut max_row_error = 0.0f32;
        for bi in 0..batch {
            for h in 0..heads {
                let m = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for row in m.chunks(t) {
                    max_row_error = max_row_error.max((row.iter().sum::<f32>() - 1.0).abs());
                }
                let masses = left_mass_of(m, t, out.cond_len, out.grid_rows, out.grid_cols);
                for (dst, v) in left_mass[bi * out.grid_rows * half..(bi + 1) * out.grid_rows * half]
                    .iter_mut()
                    .zip(masses)
                {
                    *dst += v / heads as f32;
                }
            }
        }
        LayerAttention {
            layer,
            batch,
            grid_rows: out.grid_rows,
            half_cols: half,
            left_mass,
            max_row_error,
        }
    }

    /// Per-query attention distribution of one layer and head.
    pub fn attention_scores(
        &self,
        input: &VelocityInput<'_>,
        adapter: Option<&LoraAdapter>,
        prompt: Option<&PromptTokens>,
        layer: usize,
        head: usize,
    ) -> Result<AttentionScores> {
        ensure!(layer < self.config.num_layers, "layer {layer} out of range");
        ensure!(head < self.config.num_heads, "head {head} out of range");
        let mut g = Graph::<f32>::new();
        let b = self.bind(&mut g, adapter, prompt)?;
        let out = self.forward(&mut g, &b, input)?;
        let all = g.value(out.attention[layer]);
        let t = out.cond_len + out.grid_rows * out.grid_cols;
        let heads = self.config.num_heads;
        let mut probs = Vec::with_capacity(input.batch * t * t);
        let mut left_mass = Vec::new();
        for bi in 0..input.batch {
            let m = &all[(bi * heads + head) * t * t..(bi * heads + head + 1) * t * t];
            probs.extend_from_slice(m);
            left_mass.extend(left_mass_of(m, t, out.cond_len, out.grid_rows, out.grid_cols));
        }
        Ok(AttentionScores {
            batch: input.batch,
            num_tokens: t,
            cond_len: out.cond_len,
            grid_rows: out.grid_rows,
            grid_cols: out.grid_cols,
            probs,
            left_mass,
        })
    }

    /// Rectified-flow loss of one batch on a fresh graph; returns the graph,
    /// the binding and the loss node so the caller can run `backward`.
    pub fn loss_graph<T: Real>(
        &self,
        input: &VelocityInput<'_>,
        target: &[f32],
        adapter: Option<&LoraAdapter>,
        prompt: Option<&PromptTokens>,
    ) -> Result<(Graph<T>, Binding, Var)> {
        let mut g = Graph::<T>::new();
        let b = self.bind(&mut g, adapter, prompt)?;
        let loss = self.loss_on(&mut g, &b, input, target)?;
        Ok((g, b, loss))
    }

    fn loss_on<T: Real>(&self, g: &mut Graph<T>, b: &Binding, input: &VelocityInput<'_>, target: &[f32]) -> Result<Var> {
        let out = self.forward(g, b, input)?;
        let target_tokens = self.canvas_to_tokens(target, input.batch, input.height, input.width)?;
        let shape = g.shape(out.velocity).to_vec();
        if target_tokens.len() != shape.iter().product::<usize>() {
            return Err(Error::dimension("loss target does not match the canvas batch"));
        }
        let tgt = g.constant(shape, target_tokens.into_iter().map(T::of_f32).collect())?;
        g.mse(out.velocity, tgt)
    }

    /// Names and tensors that a given mode trains.
    pub fn trainable<'a>(
        &'a self,
        mode: TuningMode,
        adapter: Option<&'a LoraAdapter>,
        prompt: Option<&'a PromptTokens>,
    ) -> Result<Vec<(String, &'a Tensor)>> {
        Ok(match mode {
            TuningMode::Full => self.base.iter().map(|(n, t)| (n.to_string(), t)).collect(),
            TuningMode::Lora => adapter
                .ok_or_else(|| Error::contract("lora mode needs an adapter"))?
                .tensors()
                .collect(),
            TuningMode::Prompt => vec![(
                "prompt".to_string(),
                &prompt.ok_or_else(|| Error::contract("prompt mode needs prompt tokens"))?.tokens,
            )],
        })
    }

    /// Maximum relative error between autodiff and central differences of
    /// the rectified-flow loss with respect to the parameters `mode` trains.
    /// Evaluated in `f64` on the same kernels used for training.
    pub fn loss_grad_check(
        &self,
        mode: TuningMode,
        adapter: Option<&LoraAdapter>,
        prompt: Option<&PromptTokens>,
        input: &VelocityInput<'_>,
        target: &[f32],
        step: f64,
    ) -> Result<f64> {
        let trainable = self.trainable(mode, adapter, prompt)?;
        let mut offsets = HashMap::new();
        let mut point = Vec::new();
        for (name, t) in &trainable {
            offsets.insert(name.clone(), (point.len(), t.shape().to_vec()));
            point.extend(t.data().iter().map(|&v| f64::from(v)));
        }
        grad_check(
            |g, flat| {
                let b = self.bind_with(g, adapter, prompt, |g, name, t| match offsets.get(name) {
                    Some((off, shape)) => g.flat_view(flat, *off, shape.clone()),
                    None => g.constant(t.shape().to_vec(), t.data().iter().map(|&v| f64::from(v)).collect()),
                })?;
                self.loss_on(g, &b, input, target)
            },
            &point,
            step,
        )
    }
}

fn left_mass_of(m: &[f32], t: usize, cond_len: usize, rows: usize, cols: usize) -> Vec<f32> {
    let half = cols / 2;
    let mut out = Vec::with_capacity(rows * half);
    for r in 0..rows {
        for c in half..cols {
            let q = cond_len + r * cols + c;
            let row = &m[q * t..(q + 1) * t];
            let mass: f32 = (0..rows)
                .flat_map(|kr| (0..half).map(move |kc| cond_len + kr * cols + kc))
                .map(|k| row[k])
                .sum();
            out.push(mass.clamp(0.0, 1.0));
        }
    }
    out
}

/// Sinusoidal embedding of `1000·t`, `[cos | sin]` halves.
pub fn timestep_embedding<T: Real>(t: &[f32], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let x = f64::from(ti) * 1000.0;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
            .collect();
        out.extend(freqs.iter().map(|f| T::of_f64((x * f).cos())));
        out.extend(freqs.iter().map(|f| T::of_f64((x * f).sin())));
        out.extend((2 * half..dim).map(|_| T::zero()));
    }
    out
}
