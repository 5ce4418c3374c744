//! The optimisation loop shared by the `train` command and the acceptance runs.

use lpgflow_core::flow::sample_timesteps;
use lpgflow_core::lpg::{stitch, StitchedInput};
use lpgflow_core::model::{init_prompt_tokens, Dit, LoraAdapter, PromptTokens, TuningMode, VelocityInput};
use lpgflow_core::numerics::{adamw_step, OptimizerState, Tensor};
use lpgflow_core::rng::{self, purpose};
use lpgflow_core::taskdata::{task_description, TrainPair, CAPTION_LEN, PAD_TOKEN};
use lpgflow_core::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;

/// One stitched example, flattened for batching.
struct Prepared {
    canvas: Vec<f32>,
    masked: Vec<f32>,
    mask: Vec<f32>,
    tokens: Vec<u32>,
}

/// Truncates or pads condition tokens to the fixed caption length.
pub fn padded_caption(caption: &[u32]) -> Vec<u32> {
    let mut t: Vec<u32> = caption.iter().copied().take(CAPTION_LEN).collect();
    t.resize(CAPTION_LEN, PAD_TOKEN);
    t
}

fn prepare(pairs: &[TrainPair]) -> Result<(Vec<Prepared>, usize, usize)> {
    let first = pairs.first().ok_or_else(|| Error::Contract("no training pairs".into()))?;
    let (h, w) = (first.left.height(), first.left.width() * 2);
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let StitchedInput { canvas, mask, masked } = stitch(&p.left, &p.right, &p.mask)?;
        if (canvas.height(), canvas.width()) != (h, w) {
            return Err(Error::Dimension(format!(
                "pair is {}×{}, the first pair {h}×{w}",
                canvas.height(),
                canvas.width()
            )));
        }
        out.push(Prepared {
            canvas: canvas.into_data(),
            masked: masked.into_data(),
            mask: mask.data().to_vec(),
            tokens: padded_caption(&p.caption),
        });
    }
    Ok((out, h, w))
}

/// One training batch: examples drawn with replacement from the `BATCH`
/// stream, noise and timesteps from their own streams, all keyed by step.
pub struct Batch {
    pub size: usize,
    pub t: Vec<f32>,
    pub noisy: Vec<f32>,
    /// `ε − z₀`.
    pub target: Vec<f32>,
    pub masked: Vec<f32>,
    pub mask: Vec<f32>,
    pub tokens: Vec<u32>,
}

impl Batch {
    pub fn input(&self, height: usize, width: usize) -> VelocityInput<'_> {
        VelocityInput {
            batch: self.size,
            height,
            width,
            noisy: &self.noisy,
            masked: &self.masked,
            mask: &self.mask,
            t: &self.t,
            tokens: &self.tokens,
        }
    }
}

fn make_batch(seed: u64, data: &[Prepared], size: usize, step: usize) -> Batch {
    let mut pick = rng::stream(seed, purpose::BATCH, step as u64);
    let mut noise = rng::stream(seed, purpose::NOISE, step as u64);
    let t = sample_timesteps(&mut rng::stream(seed, purpose::TIMESTEP, step as u64), size);
    let per = data[0].canvas.len();
    let mut b = Batch {
        size,
        noisy: Vec::with_capacity(size * per),
        target: Vec::with_capacity(size * per),
        masked: Vec::with_capacity(size * per),
        mask: Vec::with_capacity(size * data[0].mask.len()),
        tokens: Vec::with_capacity(size * CAPTION_LEN),
        t,
    };
    for &t in &b.t {
        let ex = &data[pick.random_range(0..data.len())];
        for &z0 in &ex.canvas {
            let e: f32 = noise.sample(StandardNormal);
            b.noisy.push((1.0 - t) * z0 + t * e);
            b.target.push(e - z0);
        }
        b.masked.extend_from_slice(&ex.masked);
        b.mask.extend_from_slice(&ex.mask);
        b.tokens.extend_from_slice(&ex.tokens);
    }
    b
}

/// The batch that step `step` of a run with `seed` trains on.
pub fn training_batch(seed: u64, pairs: &[TrainPair], size: usize, step: usize) -> Result<(Batch, usize, usize)> {
    let (data, h, w) = prepare(pairs)?;
    Ok((make_batch(seed, &data, size, step), h, w))
}

/// Trainable state after a run.
pub struct Trained {
    pub model: Dit,
    pub adapter: Option<LoraAdapter>,
    pub prompt: Option<PromptTokens>,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Fresh adapter or prompt for `cfg.tuning_mode`.
pub fn init_tuning(cfg: &RunConfig, model: &Dit) -> Result<(Option<LoraAdapter>, Option<PromptTokens>)> {
    Ok(match cfg.tuning_mode {
        TuningMode::Full => (None, None),
        TuningMode::Lora => {
            let mut r = rng::stream(cfg.seed, purpose::INIT, 1);
            (Some(LoraAdapter::new(cfg.task.kind.name(), &cfg.model, &mut r)), None)
        }
        TuningMode::Prompt => {
            let p = init_prompt_tokens(
                &task_description(cfg.task.kind),
                model.token_embedding(),
                cfg.model.num_prompt_tokens,
            )?;
            (None, Some(p))
        }
    })
}

/// Runs `cfg.optimizer.train_steps` AdamW steps of the rectified-flow loss on
/// `pairs`, calling `on_step(step, loss)` after each. Only the tensors of
/// `cfg.tuning_mode` change; everything else is bound as a constant.
pub fn train(
    cfg: &RunConfig,
    mut model: Dit,
    pairs: &[TrainPair],
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<Trained> {
    let (data, h, w) = prepare(pairs)?;
    let (mut adapter, mut prompt) = init_tuning(cfg, &model)?;
    let mode = cfg.tuning_mode;
    model.base.set_trainable(mode == TuningMode::Full);
    if let Some(a) = adapter.as_mut() {
        a.check_compatible(&model.config)?;
        a.set_trainable(true);
    }
    if let Some(p) = prompt.as_mut() {
        p.tokens.set_requires_grad(true);
    }
    let sizes: Vec<(String, usize)> = model
        .trainable(mode, adapter.as_ref(), prompt.as_ref())?
        .into_iter()
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let mut opt = OptimizerState::new(cfg.optimizer.adamw(), sizes.iter().map(|(n, s)| (n.as_str(), *s)))?;

    let batch = cfg.optimizer.batch_size;
    let mut losses = Vec::with_capacity(cfg.optimizer.train_steps);
    for step in 0..cfg.optimizer.train_steps {
        let b = make_batch(cfg.seed, &data, batch, step);
        let input = b.input(h, w);
        let (mut g, binding, loss_var) = model.loss_graph::<f32>(&input, &b.target, adapter.as_ref(), prompt.as_ref())?;
        let loss = f64::from(g.scalar(loss_var)?);
        if !loss.is_finite() {
            return Err(Error::Numeric {
                context: "training loss is not finite".into(),
                step: Some(step),
            });
        }
        g.backward(loss_var)?;

        let mut params: Vec<(String, &mut Tensor)> = match mode {
            TuningMode::Full => model.base.iter_mut().map(|(n, t)| (n.to_string(), t)).collect(),
            TuningMode::Lora => adapter.as_mut().expect("lora mode").tensors_mut().collect(),
            TuningMode::Prompt => vec![("prompt".into(), &mut prompt.as_mut().expect("prompt mode").tokens)],
        };
        for (name, t) in params.iter_mut() {
            let v = binding
                .get(name)
                .ok_or_else(|| Error::Contract(format!("trainable {name} is not bound")))?;
            t.zero_grad();
            g.accumulate_into(v, t)?;
        }
        let mut view: Vec<(&str, &mut Tensor)> = params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        adamw_step(&mut view, &mut opt).map_err(|e| e.at_step(step))?;
        losses.push(loss);
        on_step(step, loss)?;
    }

    model.base.set_trainable(false);
    if let Some(a) = adapter.as_mut() {
        a.set_trainable(false);
    }
    if let Some(p) = prompt.as_mut() {
        p.tokens.set_requires_grad(false);
    }
    Ok(Trained {
        model,
        adapter,
        prompt,
        losses,
    })
}
