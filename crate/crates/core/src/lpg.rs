//! Left-prompt-guided canvases: the reference sits on the left, the target
//! on the right, and a binary mask marks what the model must generate.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// An `H×W×C` image with values in `[0, 1]`, stored row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Canvas {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0 && channels > 0, "empty canvas {height}×{width}×{channels}");
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "{} values for a {height}×{width}×{channels} canvas",
                data.len()
            )));
        }
        ensure!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "canvas values must be finite and within [0, 1]"
        );
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Clamps into range instead of rejecting; non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Rec.601 luminance per pixel (single-channel canvases pass through).
    pub fn luminance(&self) -> Vec<f32> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks(self.channels)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    /// Repeats a single-channel plane into `channels` identical channels.
    pub fn from_plane(height: usize, width: usize, plane: &[f32], channels: usize) -> Result<Self> {
        ensure!(plane.len() == height * width, "plane has {} values", plane.len());
        let data = plane.iter().flat_map(|&v| std::iter::repeat_n(v, channels)).collect();
        Self::new(height, width, channels, data)
    }
}

/// Binary `H×W` mask; 1 marks pixels to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(data.len() == height * width, "{} values for a {height}×{width} mask", data.len());
        ensure!(data.iter().all(|&v| v == 0.0 || v == 1.0), "mask values must be 0 or 1");
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0.0
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Columns `width/2..width`.
    pub fn right_half(&self) -> Mask {
        let half = self.width / 2;
        let data = self
            .data
            .chunks(self.width)
            .flat_map(|row| row[half..].iter().copied())
            .collect();
        Mask {
            height: self.height,
            width: self.width - half,
            data,
        }
    }

    /// Places a target-size mask on the right of an all-zero left half.
    pub fn placed_right(&self) -> Mask {
        let w = self.width;
        let mut data = Vec::with_capacity(self.height * 2 * w);
        for row in self.data.chunks(w) {
            data.extend(std::iter::repeat_n(0.0, w));
            data.extend_from_slice(row);
        }
        Mask {
            height: self.height,
            width: 2 * w,
            data,
        }
    }
}

/// How the target half is masked.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskMode {
    /// The whole right half is generated.
    Full,
    /// Only a region of the right half is generated. The mask may be target
    /// sized (placed on the right) or canvas sized with an empty left half.
    Partial(Mask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchedInput {
    pub canvas: Canvas,
    pub mask: Mask,
    /// `canvas ⊙ (1 − mask)`.
    pub masked: Canvas,
}

pub fn stitch(reference: &Canvas, target: &Canvas, mode: &MaskMode) -> Result<StitchedInput> {
    let (h, w, c) = (reference.height, reference.width, reference.channels);
    ensure!(
        (target.height, target.width, target.channels) == (h, w, c),
        "reference {h}×{w}×{c} and target {}×{}×{} differ",
        target.height,
        target.width,
        target.channels
    );
    let mut data = Vec::with_capacity(h * 2 * w * c);
    for y in 0..h {
        data.extend_from_slice(&reference.data[y * w * c..(y + 1) * w * c]);
        data.extend_from_slice(&target.data[y * w * c..(y + 1) * w * c]);
    }
    let canvas = Canvas::new(h, 2 * w, c, data)?;
    let mask = match mode {
        MaskMode::Full => Mask::ones(h, w).placed_right(),
        MaskMode::Partial(m) if (m.height, m.width) == (h, w) => m.placed_right(),
        MaskMode::Partial(m) if (m.height, m.width) == (h, 2 * w) => {
            ensure!(
                (0..h).all(|y| (0..w).all(|x| !m.get(y, x))),
                "partial mask touches the reference half"
            );
            m.clone()
        }
        MaskMode::Partial(m) => {
            return Err(Error::Contract(format!(
                "partial mask {}×{} fits neither {h}×{w} nor {h}×{}",
                m.height,
                m.width,
                2 * w
            )))
        }
    };
    let masked = masked_latent(&canvas, &mask)?;
    Ok(StitchedInput { canvas, mask, masked })
}

/// Zeros exactly where the mask is set.
pub fn masked_latent(canvas: &Canvas, mask: &Mask) -> Result<Canvas> {
    ensure!(
        (mask.height, mask.width) == (canvas.height, canvas.width),
        "mask {}×{} for canvas {}×{}",
        mask.height,
        mask.width,
        canvas.height,
        canvas.width
    );
    ensure!(mask.data.iter().all(|&v| v == 0.0 || v == 1.0), "mask values must be 0 or 1");
    let c = canvas.channels;
    let data = canvas
        .data
        .chunks(c)
        .zip(&mask.data)
        .flat_map(|(px, &m)| px.iter().map(move |&v| if m != 0.0 { 0.0 } else { v }))
        .collect();
    Ok(Canvas { data, ..canvas.clone() })
}

/// Columns `W..2W` of a stitched canvas.
pub fn crop_right(stitched: &Canvas) -> Result<Canvas> {
    ensure!(stitched.width % 2 == 0, "cannot split odd width {}", stitched.width);
    let (w, c) = (stitched.width / 2, stitched.channels);
    let data = stitched
        .data
        .chunks(stitched.width * c)
        .flat_map(|row| row[w * c..].iter().copied())
        .collect();
    Ok(Canvas {
        height: stitched.height,
        width: w,
        channels: c,
        data,
    })
}

/// Even-odd scanline fill sampled at pixel centres; vertices are `(x, y)`.
pub fn rasterize_polygon(vertices: &[(f32, f32)], height: usize, width: usize) -> Mask {
    let mut mask = Mask::zeros(height, width);
    if vertices.len() < 3 {
        return mask;
    }
    let n = vertices.len();
    let mut xs = Vec::new();
    for y in 0..height {
        let sy = y as f32 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = vertices[i];
            let (x1, y1) = vertices[(i + 1) % n];
            if (y0 <= sy) != (y1 <= sy) {
                xs.push(x0 + (sy - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(f32::total_cmp);
        for span in xs.chunks_exact(2) {
            for x in 0..width {
                let sx = x as f32 + 0.5;
                if sx >= span[0] && sx < span[1] {
                    mask.data[y * width + x] = 1.0;
                }
            }
        }
    }
    mask
}

const POLYGON_RETRIES: usize = 100;

/// A filled random polygon of 5–15 vertices on the right half of an
/// `H×2W` canvas, covering 10–60% of that half.
pub fn random_polygon_mask(height: usize, width: usize, rng: &mut impl Rng) -> Result<Mask> {
    ensure!(height >= 8 && width >= 8, "polygon masks need at least 8×8, got {height}×{width}");
    let (hf, wf) = (height as f32, width as f32);
    for _ in 0..POLYGON_RETRIES {
        let n = rng.random_range(5..=15);
        let cx = rng.random_range(0.3..0.7) * wf;
        let cy = rng.random_range(0.3..0.7) * hf;
        let radius = rng.random_range(0.25..0.5f32);
        let mut angles: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
        angles.sort_by(f32::total_cmp);
        let vertices: Vec<(f32, f32)> = angles
            .iter()
            .map(|&a| {
                let r = radius * rng.random_range(0.6..1.0f32);
                let x = (cx + r * wf * a.cos()).clamp(0.0, wf);
                let y = (cy + r * hf * a.sin()).clamp(0.0, hf);
                (x, y)
            })
            .collect();
        let target = rasterize_polygon(&vertices, height, width);
        let coverage = target.mean();
        if (0.10..=0.60).contains(&coverage) {
            return Ok(target.placed_right());
        }
    }
    Err(Error::Contract(format!(
        "no polygon met the coverage bounds after {POLYGON_RETRIES} attempts"
    )))
}

/// A correspondence between the reference (left) and target (right) views,
/// each point `(x, y)` in its own image's pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub left: (f32, f32),
    pub right: (f32, f32),
    pub confidence: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        let inside = |(x, y): (f32, f32)| x >= 0.0 && y >= 0.0 && x <= width as f32 && y <= height as f32;
        self.matches
            .iter()
            .all(|m| inside(m.left) && inside(m.right) && (0.0..=1.0).contains(&m.confidence))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingParams {
    pub conf_threshold: f32,
    /// Bounds on the crop area as a fraction of the matched bounding box.
    pub crop_range: (f32, f32),
    pub vertex_range: (usize, usize),
}

impl Default for MatchingParams {
    fn default() -> Self {
        Self {
            conf_threshold: 0.8,
            crop_range: (0.2, 0.5),
            vertex_range: (15, 30),
        }
    }
}

/// Axis-aligned `[x0, x1) × [y0, y1)` in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl Rect {
    pub fn contains(&self, (x, y): (f32, f32)) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatchingOutcome {
    /// Target-size mask, with the polygon and crop it came from.
    Mask {
        mask: Mask,
        vertices: Vec<(f32, f32)>,
        crop: Rect,
    },
    /// Too few confident matches; use [`random_polygon_mask`] instead.
    FallbackToRandomMask,
}

/// Polygon through confident matched points inside a random sub-region of
/// the matched area. The mask is target sized (`H×W`).
pub fn matching_mask(
    matches: &MatchSet,
    params: &MatchingParams,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<MatchingOutcome> {
    ensure!(!matches.matches.is_empty(), "no matches to build a mask from");
    let (lo, hi) = params.crop_range;
    ensure!(0.0 < lo && lo <= hi && hi <= 1.0, "crop range ({lo}, {hi}) is not within (0, 1]");
    let (vmin, vmax) = params.vertex_range;
    ensure!(3 <= vmin && vmin <= vmax, "vertex range ({vmin}, {vmax}) is invalid");

    let kept: Vec<(f32, f32)> = matches
        .matches
        .iter()
        .filter(|m| m.confidence >= params.conf_threshold)
        .map(|m| m.right)
        .collect();
    if kept.len() < vmin {
        return Ok(MatchingOutcome::FallbackToRandomMask);
    }
    let (mut bx0, mut by0, mut bx1, mut by1) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
    for &(x, y) in &kept {
        bx0 = bx0.min(x);
        by0 = by0.min(y);
        bx1 = bx1.max(x);
        by1 = by1.max(y);
    }
    let (bw, bh) = (bx1 - bx0, by1 - by0);
    let area = rng.random_range(lo..=hi);
    let fx = rng.random_range(area..=1.0);
    let fy = area / fx;
    let (cw, ch) = (fx * bw, fy * bh);
    let x0 = bx0 + rng.random::<f32>() * (bw - cw);
    let y0 = by0 + rng.random::<f32>() * (bh - ch);
    let crop = Rect {
        x0,
        y0,
        x1: x0 + cw,
        y1: y0 + ch,
    };

    let inside: Vec<(f32, f32)> = kept.into_iter().filter(|&p| crop.contains(p)).collect();
    if inside.len() < vmin {
        return Ok(MatchingOutcome::FallbackToRandomMask);
    }
    let n = rng.random_range(vmin..=vmax.min(inside.len()));
    let mut vertices: Vec<(f32, f32)> = index::sample(rng, inside.len(), n).into_iter().map(|i| inside[i]).collect();
    let (mx, my) = vertices
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x / n as f32, sy + y / n as f32));
    vertices.sort_by(|a, b| (a.1 - my).atan2(a.0 - mx).total_cmp(&(b.1 - my).atan2(b.0 - mx)));
    let mask = rasterize_polygon(&vertices, height, width);
    Ok(MatchingOutcome::Mask { mask, vertices, crop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(h: usize, w: usize, offset: f32) -> Canvas {
        let data = (0..h * w * 3).map(|i| (i as f32 * 0.01 + offset) % 1.0).collect();
        Canvas::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn canvas_rejects_out_of_range() {
        assert!(Canvas::new(1, 1, 3, vec![0.0, 1.2, 0.0]).is_err());
        assert!(Canvas::new(1, 1, 3, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(Canvas::new(1, 2, 3, vec![0.0; 3]).is_err());
    }

    #[test]
    fn stitch_full_doubles_width_and_masks_right() {
        let s = stitch(&ramp(32, 32, 0.0), &ramp(32, 32, 0.3), &MaskMode::Full).unwrap();
        assert_eq!((s.canvas.height(), s.canvas.width()), (32, 64));
        assert_eq!(s.mask.mean(), 0.5);
        assert!((0..32).all(|y| (0..32).all(|x| !s.mask.get(y, x) && s.mask.get(y, x + 32))));
    }

    #[test]
    fn stitch_partial_empty_polygon_keeps_everything() {
        let s = stitch(&ramp(8, 8, 0.0), &ramp(8, 8, 0.5), &MaskMode::Partial(Mask::zeros(8, 8))).unwrap();
        assert_eq!(s.mask.count(), 0);
        assert_eq!(s.masked, s.canvas);
    }

    #[test]
    fn stitch_rejects_mismatch_and_left_masks() {
        assert!(stitch(&ramp(8, 8, 0.0), &ramp(8, 4, 0.0), &MaskMode::Full).is_err());
        let mut bad = Mask::zeros(8, 16);
        bad.data[0] = 1.0;
        assert!(stitch(&ramp(8, 8, 0.0), &ramp(8, 8, 0.0), &MaskMode::Partial(bad)).is_err());
    }

    #[test]
    fn masked_latent_extremes_and_checkerboard() {
        let c = ramp(4, 4, 0.1);
        assert!(masked_latent(&c, &Mask::ones(4, 4)).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(masked_latent(&c, &Mask::zeros(4, 4)).unwrap(), c);
        let board = Mask::new(4, 4, (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect()).unwrap();
        let out = masked_latent(&c, &board).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect: Vec<f32> = if (x + y) % 2 == 1 { vec![0.0; 3] } else { c.pixel(y, x).to_vec() };
                assert_eq!(out.pixel(y, x), expect.as_slice());
            }
        }
        assert!(Mask::new(1, 1, vec![0.5]).is_err());
    }

    #[test]
    fn crop_right_inverts_stitch() {
        let b = ramp(6, 5, 0.7);
        let s = stitch(&ramp(6, 5, 0.0), &b, &MaskMode::Full).unwrap();
        let r = crop_right(&s.canvas).unwrap();
        assert_eq!(r, b);
        assert_eq!(r.pixel(2, 0), s.canvas.pixel(2, 5));
        let odd = Canvas::filled(2, 3, 3, 0.5).unwrap();
        assert!(crop_right(&odd).is_err());
    }

    #[test]
    fn rasterize_square() {
        let m = rasterize_polygon(&[(1.0, 1.0), (5.0, 1.0), (5.0, 5.0), (1.0, 5.0)], 8, 8);
        assert_eq!(m.count(), 16);
        assert!(m.get(1, 1) && m.get(4, 4) && !m.get(0, 0) && !m.get(5, 5));
    }

    #[test]
    fn random_polygon_confined_and_bounded() {
        for i in 0..50 {
            let mut r = rng::stream(3, rng::purpose::MASK, i);
            let m = random_polygon_mask(32, 32, &mut r).unwrap();
            assert_eq!((m.height(), m.width()), (32, 64));
            assert!((0..32).all(|y| (0..32).all(|x| !m.get(y, x))));
            let cov = m.count() as f64 / (32.0 * 32.0);
            assert!((0.10..=0.60).contains(&cov), "{cov}");
        }
        let a = random_polygon_mask(16, 16, &mut rng::stream(9, rng::purpose::MASK, 0)).unwrap();
        let b = random_polygon_mask(16, 16, &mut rng::stream(9, rng::purpose::MASK, 0)).unwrap();
        assert_eq!(a, b);
        assert!(random_polygon_mask(4, 32, &mut rng::stream(9, rng::purpose::MASK, 0)).is_err());
    }

    fn grid_matches(conf: f32) -> MatchSet {
        let mut matches = Vec::new();
        for y in 0..16 {
            for x in 0..16 {
                let p = (x as f32 * 2.0 + 1.0, y as f32 * 2.0 + 1.0);
                matches.push(Match {
                    left: p,
                    right: p,
                    confidence: conf,
                });
            }
        }
        MatchSet { matches }
    }

    #[test]
    fn matching_mask_respects_threshold_vertices_and_crop() {
        let params = MatchingParams::default();
        let mut produced = 0;
        for i in 0..20 {
            let mut r = rng::stream(4, rng::purpose::MASK, i);
            match matching_mask(&grid_matches(0.9), &params, 32, 32, &mut r).unwrap() {
                MatchingOutcome::Mask { mask, vertices, crop } => {
                    produced += 1;
                    assert!((15..=30).contains(&vertices.len()));
                    for y in 0..32 {
                        for x in 0..32 {
                            if mask.get(y, x) {
                                assert!(crop.contains((x as f32 + 0.5, y as f32 + 0.5)));
                            }
                        }
                    }
                }
                MatchingOutcome::FallbackToRandomMask => {}
            }
        }
        assert!(produced > 0);
        let mut r = rng::stream(4, rng::purpose::MASK, 0);
        assert_eq!(
            matching_mask(&grid_matches(0.5), &params, 32, 32, &mut r).unwrap(),
            MatchingOutcome::FallbackToRandomMask
        );
        assert!(matching_mask(&MatchSet::default(), &params, 32, 32, &mut r).is_err());
    }
}
