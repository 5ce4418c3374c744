//! Rectified flow: straight-line interpolation between data and noise,
//! the velocity regression loss, and Euler integration back to data.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::model::{Dit, LayerAttention, LoraAdapter, PromptTokens, VelocityInput};

/// A point on the straight path from `z0` (t = 0) to `eps` (t = 1).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z_t: Vec<f32>,
    pub t: f32,
    pub eps: Vec<f32>,
    pub z0: Vec<f32>,
}

impl FlowSample {
    /// The regression target `eps − z0`.
    pub fn velocity_target(&self) -> Vec<f32> {
        self.eps.iter().zip(&self.z0).map(|(e, z)| e - z).collect()
    }
}

pub fn interpolate(z0: &[f32], eps: &[f32], t: f32) -> Result<FlowSample> {
    ensure!((0.0..=1.0).contains(&t), "t = {t} outside [0, 1]");
    ensure!(z0.len() == eps.len(), "z0 has {} values, eps {}", z0.len(), eps.len());
    let z_t = z0.iter().zip(eps).map(|(&z, &e)| (1.0 - t) * z + t * e).collect();
    Ok(FlowSample {
        z_t,
        t,
        eps: eps.to_vec(),
        z0: z0.to_vec(),
    })
}

/// Mean squared error between `v_pred` and `eps − z0`.
pub fn rf_loss(v_pred: &[f32], z0: &[f32], eps: &[f32]) -> Result<f64> {
    if v_pred.len() != z0.len() || z0.len() != eps.len() {
        return Err(Error::dimension(format!(
            "rf_loss sizes {}/{}/{}",
            v_pred.len(),
            z0.len(),
            eps.len()
        )));
    }
    ensure!(!v_pred.is_empty(), "rf_loss of empty tensors");
    let sum: f64 = v_pred
        .iter()
        .zip(z0.iter().zip(eps))
        .map(|(&v, (&z, &e))| {
            let d = f64::from(v) - (f64::from(e) - f64::from(z));
            d * d
        })
        .sum();
    Ok(sum / v_pred.len() as f64)
}

/// Training timesteps, uniform on `[0, 1]`.
pub fn sample_timesteps(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>()).collect()
}

/// Decreasing knots from 1 to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSchedule {
    knots: Vec<f32>,
}

impl FlowSchedule {
    pub fn knots(&self) -> &[f32] {
        &self.knots
    }

    /// Number of Euler steps.
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }
}

/// Uniform grid `t_i = i / n`, listed from `i = n` down to 0.
pub fn make_schedule(n: usize) -> Result<FlowSchedule> {
    ensure!(n >= 1, "a schedule needs at least one step");
    let knots = (0..=n).rev().map(|i| (i as f64 / n as f64) as f32).collect();
    Ok(FlowSchedule { knots })
}

/// Something that predicts a velocity for a state at time `t`.
pub trait VelocityField {
    /// Returns the velocity and, when `capture` is set, per-layer attention summaries.
    fn velocity(&self, z: &[f32], t: f32, capture: bool) -> Result<(Vec<f32>, Vec<LayerAttention>)>;
}

/// Adapts a plain closure; it never reports attention.
pub struct FnField<F>(pub F);

impl<F: Fn(&[f32], f32) -> Vec<f32>> VelocityField for FnField<F> {
    fn velocity(&self, z: &[f32], t: f32, _capture: bool) -> Result<(Vec<f32>, Vec<LayerAttention>)> {
        Ok(((self.0)(z, t), Vec::new()))
    }
}

/// The network with everything except the noisy state fixed: the masked
/// canvas and mask stay noise-free for every step.
pub struct ModelField<'a> {
    pub model: &'a Dit,
    pub adapter: Option<&'a LoraAdapter>,
    pub prompt: Option<&'a PromptTokens>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub masked: &'a [f32],
    pub mask: &'a [f32],
    pub tokens: &'a [u32],
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, z: &[f32], t: f32, capture: bool) -> Result<(Vec<f32>, Vec<LayerAttention>)> {
        let ts = vec![t; self.batch];
        let input = VelocityInput {
            batch: self.batch,
            height: self.height,
            width: self.width,
            noisy: z,
            masked: self.masked,
            mask: self.mask,
            t: &ts,
            tokens: self.tokens,
        };
        self.model
            .predict_velocity_with_attention(&input, self.adapter, self.prompt, capture)
    }
}

/// Attention summaries recorded at one Euler step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub step: usize,
    pub t: f32,
    pub layers: Vec<LayerAttention>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub z: Vec<f32>,
    pub attention: Vec<AttentionDump>,
}

/// Integrates `dz/dt = v` from `t = 1` to `t = 0` with explicit Euler steps.
/// With `attention_every = Some(k)`, steps `0, k, 2k, …` record attention.
pub fn euler_sample(
    field: &impl VelocityField,
    eps_start: &[f32],
    schedule: &FlowSchedule,
    attention_every: Option<usize>,
) -> Result<SampleOutput> {
    ensure!(attention_every != Some(0), "attention interval must be positive");
    let mut z = eps_start.to_vec();
    let mut attention = Vec::new();
    let knots = schedule.knots();
    for (step, pair) in knots.windows(2).enumerate() {
        let (t, t_next) = (pair[0], pair[1]);
        let capture = attention_every.is_some_and(|k| step % k == 0);
        let (v, layers) = field.velocity(&z, t, capture)?;
        if v.len() != z.len() {
            return Err(Error::dimension(format!(
                "velocity has {} values for a state of {}",
                v.len(),
                z.len()
            )));
        }
        let dt = t_next - t;
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += dt * vi;
        }
        if !z.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric {
                context: "sampling state became non-finite".into(),
                step: Some(step),
            });
        }
        if capture {
            attention.push(AttentionDump { step, t, layers });
        }
    }
    Ok(SampleOutput { z, attention })
}

/// `z·M + original·(1 − M)`, with one mask value per pixel shared by all channels.
pub fn recompose(z: &[f32], original: &[f32], mask: &[f32]) -> Result<Vec<f32>> {
    ensure!(z.len() == original.len(), "sample and original sizes differ");
    ensure!(
        !mask.is_empty() && z.len() % mask.len() == 0,
        "mask of {} values does not tile {} values",
        mask.len(),
        z.len()
    );
    let c = z.len() / mask.len();
    Ok(z
        .chunks(c)
        .zip(original.chunks(c))
        .zip(mask)
        .flat_map(|((zs, os), &m)| {
            zs.iter()
                .zip(os)
                .map(move |(&zv, &ov)| if m != 0.0 { zv } else { ov })
        })
        .collect())
}
