//! Image metrics and attention heatmap export.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::flow::AttentionDump;
use crate::image_io;
use crate::lpg::Canvas;
use crate::model::LayerAttention;
use crate::taskdata::sobel_edges;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Canvas, b: &Canvas) -> Result<()> {
    ensure!(
        (a.height(), a.width(), a.channels()) == (b.height(), b.width(), b.channels()),
        "images differ in shape: {}×{}×{} vs {}×{}×{}",
        a.height(),
        a.width(),
        a.channels(),
        b.height(),
        b.width(),
        b.channels()
    );
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images, capped at 99 dB.
pub fn psnr(a: &Canvas, b: &Canvas) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM of luminance over every valid 8×8 window.
pub fn ssim(a: &Canvas, b: &Canvas) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
    );
    let (la, lb) = (a.luminance(), b.luminance());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (f64::from(la[y * w + x]), f64::from(lb[y * w + x]));
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            windows += 1;
        }
    }
    Ok((total / windows as f64).clamp(-1.0, 1.0))
}

fn dilate(edges: &[f32], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if edges[y * w + x] == 0.0 {
                continue;
            }
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

/// F1 between the Sobel edges of `generated` and a condition edge map,
/// each side matched within one pixel of the other. 0 if either has no edges.
pub fn edge_alignment(generated: &Canvas, condition_edges: &[f32]) -> Result<f64> {
    let (h, w) = (generated.height(), generated.width());
    ensure!(
        condition_edges.len() == h * w,
        "edge map of {} values for a {h}×{w} image",
        condition_edges.len()
    );
    let gen = sobel_edges(generated);
    let (ng, nc) = (
        gen.iter().filter(|&&v| v != 0.0).count(),
        condition_edges.iter().filter(|&&v| v != 0.0).count(),
    );
    if ng == 0 || nc == 0 {
        return Ok(0.0);
    }
    let (dg, dc) = (dilate(&gen, h, w), dilate(condition_edges, h, w));
    let tp_gen = gen.iter().zip(&dc).filter(|(&g, &c)| g != 0.0 && c).count();
    let tp_cond = condition_edges.iter().zip(&dg).filter(|(&c, &g)| c != 0.0 && g).count();
    let precision = tp_gen as f64 / ng as f64;
    let recall = tp_cond as f64 / nc as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    Ssim,
    EdgeAlignment,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::EdgeAlignment];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::EdgeAlignment => "edge_alignment",
        }
    }

    /// Scores a prediction against ground truth. Edge alignment uses the
    /// ground truth's own Sobel edges as the condition.
    pub fn score(self, pred: &Canvas, gt: &Canvas) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(pred, gt),
            Metric::Ssim => ssim(pred, gt),
            Metric::EdgeAlignment => {
                same_shape(pred, gt)?;
                edge_alignment(pred, &sobel_edges(gt))
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown metric {s:?}; expected psnr, ssim or edge_alignment")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub scores: BTreeMap<Metric, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: BTreeMap<Metric, Aggregate>,
    pub count: usize,
    pub skipped: Vec<String>,
    pub config_digest: String,
}

impl MetricReport {
    pub fn from_entries(per_image: Vec<ImageMetrics>, skipped: Vec<String>, config_digest: String) -> Self {
        let mut values: BTreeMap<Metric, Vec<f64>> = BTreeMap::new();
        for e in &per_image {
            for (&m, &v) in &e.scores {
                values.entry(m).or_default().push(v);
            }
        }
        let aggregate = values
            .into_iter()
            .map(|(m, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                (m, Aggregate { mean, std, count: v.len() })
            })
            .collect();
        Self {
            count: per_image.len(),
            per_image,
            aggregate,
            skipped,
            config_digest,
        }
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.aggregate.get(&metric).map(|a| a.mean)
    }
}

/// Scores named (prediction, ground truth) pairs.
pub fn evaluate_pairs(
    pairs: &[(String, Canvas, Canvas)],
    metrics: &[Metric],
    skipped: Vec<String>,
    config_digest: String,
) -> Result<MetricReport> {
    let mut per_image = Vec::with_capacity(pairs.len());
    for (name, pred, gt) in pairs {
        let mut scores = BTreeMap::new();
        for &m in metrics {
            scores.insert(m, m.score(pred, gt)?);
        }
        per_image.push(ImageMetrics {
            name: name.clone(),
            scores,
        });
    }
    Ok(MetricReport::from_entries(per_image, skipped, config_digest))
}

/// Grey levels of one sample's reference-mass map, max-normalised to 255.
pub fn heatmap_bytes(layer: &LayerAttention, sample: usize) -> Vec<u8> {
    let n = layer.grid_rows * layer.half_cols;
    let vals = &layer.left_mass[sample * n..(sample + 1) * n];
    let max = vals.iter().copied().fold(0.0f32, f32::max);
    vals.iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

/// Writes one grey PNG per (recorded step, layer) for sample 0, each map
/// enlarged by `scale` with nearest-neighbour repetition.
pub fn attention_heatmaps(dumps: &[AttentionDump], out_dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    ensure!(!dumps.is_empty(), "no attention records to export");
    ensure!(scale >= 1, "heatmap scale must be positive");
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for d in dumps {
        for layer in &d.layers {
            let small = heatmap_bytes(layer, 0);
            let (h, w) = (layer.grid_rows * scale, layer.half_cols * scale);
            let big: Vec<u8> = (0..h * w)
                .map(|i| small[(i / w / scale) * layer.half_cols + (i % w) / scale])
                .collect();
            let path = out_dir.join(format!("attn_step{:03}_layer{}.png", d.step, layer.layer));
            image_io::write_gray(&path, w, h, &big)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskdata::gen_scene;

    fn ramp(offset: f32) -> Canvas {
        let data = (0..16 * 16 * 3).map(|i| (i % 97) as f32 / 200.0 + offset).collect();
        Canvas::new(16, 16, 3, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = ramp(0.0);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = ramp(0.5);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Canvas::filled(16, 8, 3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = ramp(0.1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let zero = Canvas::filled(16, 16, 3, 0.0).unwrap();
        let one = Canvas::filled(16, 16, 3, 1.0).unwrap();
        assert!(ssim(&zero, &one).unwrap() < 0.01);
        let b = ramp(0.3);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&Canvas::filled(4, 4, 3, 0.0).unwrap(), &Canvas::filled(4, 4, 3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn edge_alignment_examples() {
        let s = gen_scene(3);
        assert!(edge_alignment(&s.rgb, &s.edges).unwrap() >= 0.9);
        assert_eq!(edge_alignment(&Canvas::filled(32, 32, 3, 0.5).unwrap(), &s.edges).unwrap(), 0.0);
    }

    #[test]
    fn aggregates_are_means_of_entries() {
        let a = ramp(0.0);
        let pairs: Vec<_> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&o| (format!("{o}"), a.clone(), ramp(o)))
            .collect();
        let r = evaluate_pairs(&pairs, &[Metric::Psnr, Metric::Ssim], vec![], "x".into()).unwrap();
        let mean = r.per_image.iter().map(|e| e.scores[&Metric::Psnr]).sum::<f64>() / 3.0;
        assert!((r.mean(Metric::Psnr).unwrap() - mean).abs() < 1e-9);
        assert_eq!(r.aggregate[&Metric::Ssim].count, 3);
    }

    fn uniform_layer(layer: usize) -> LayerAttention {
        LayerAttention {
            layer,
            batch: 1,
            grid_rows: 2,
            half_cols: 3,
            left_mass: vec![0.4; 6],
            max_row_error: 0.0,
        }
    }

    #[test]
    fn heatmap_files_and_flat_values() {
        let dir = tempfile::tempdir().unwrap();
        let dumps: Vec<AttentionDump> = (0..5)
            .map(|i| AttentionDump {
                step: i * 10,
                t: 1.0,
                layers: vec![uniform_layer(0), uniform_layer(1)],
            })
            .collect();
        let files = attention_heatmaps(&dumps, dir.path(), 4).unwrap();
        assert_eq!(files.len(), 10);
        assert!(heatmap_bytes(&uniform_layer(0), 0).iter().all(|&v| v == 255));
        assert!(attention_heatmaps(&[], dir.path(), 1).is_err());
    }
}
