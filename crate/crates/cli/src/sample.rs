//! Right-canvas generation from a reference image.

use lpgflow_core::flow::{euler_sample, make_schedule, recompose, AttentionDump, ModelField};
use lpgflow_core::lpg::{crop_right, stitch, Canvas, MaskMode};
use lpgflow_core::model::{lora_merge, Dit, LoraAdapter, PromptTokens};
use lpgflow_core::rng::{self, purpose};
use lpgflow_core::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// One reference image and the condition tokens it is sampled with.
#[derive(Clone, Debug)]
pub struct SampleItem {
    pub left: Canvas,
    pub caption: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Sampled {
    /// Generated right halves, in item order.
    pub outputs: Vec<Canvas>,
    pub attention: Vec<AttentionDump>,
}

/// Checks every adapter against the base and folds two or more into one.
pub fn combine_adapters(model: &Dit, adapters: &[LoraAdapter]) -> Result<Option<LoraAdapter>> {
    for a in adapters {
        a.check_compatible(&model.config)?;
    }
    Ok(match adapters {
        [] => None,
        [one] => Some(one.clone()),
        many => Some(lora_merge(many)?.into_adapter()),
    })
}

/// Samples all items as one batch with the right half fully masked. Item `i`
/// starts from noise stream `i` of `seed`, so outputs do not depend on which
/// other items share the batch.
pub fn sample_batch(
    model: &Dit,
    adapter: Option<&LoraAdapter>,
    prompt: Option<&PromptTokens>,
    items: &[SampleItem],
    steps: usize,
    seed: u64,
    attention_every: Option<usize>,
) -> Result<Sampled> {
    let first = items.first().ok_or_else(|| Error::Contract("nothing to sample".into()))?;
    let (h, w, c) = (first.left.height(), first.left.width(), first.left.channels());
    let caption_len = first.caption.len();
    let mut canvas = Vec::new();
    let mut masked = Vec::new();
    let mut mask = Vec::new();
    let mut tokens = Vec::new();
    let mut eps = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if (item.left.height(), item.left.width(), item.left.channels()) != (h, w, c) {
            return Err(Error::Contract("batched references must share one size".into()));
        }
        if item.caption.len() != caption_len {
            return Err(Error::Contract("batched captions must share one length".into()));
        }
        let blank = Canvas::filled(h, w, c, 0.0)?;
        let s = stitch(&item.left, &blank, &MaskMode::Full)?;
        let mut noise = rng::stream(seed, purpose::NOISE, i as u64);
        eps.extend((0..s.canvas.data().len()).map(|_| noise.sample::<f32, _>(StandardNormal)));
        canvas.extend_from_slice(s.canvas.data());
        masked.extend_from_slice(s.masked.data());
        mask.extend_from_slice(s.mask.data());
        tokens.extend_from_slice(&item.caption);
    }
    let field = ModelField {
        model,
        adapter,
        prompt,
        batch: items.len(),
        height: h,
        width: 2 * w,
        masked: &masked,
        mask: &mask,
        tokens: &tokens,
    };
    let out = euler_sample(&field, &eps, &make_schedule(steps)?, attention_every)?;
    let z = recompose(&out.z, &canvas, &mask)?;
    let per = h * 2 * w * c;
    let outputs = z
        .chunks(per)
        .map(|s| crop_right(&Canvas::from_clamped(h, 2 * w, c, s.to_vec())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sampled {
        outputs,
        attention: out.attention,
    })
}
