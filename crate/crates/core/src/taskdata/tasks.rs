use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{quantize8, Scene, NAMED_COLORS};
use super::warp::{warp_view, Homography};
use crate::error::{ensure, Error, Result};
use crate::lpg::{matching_mask, random_polygon_mask, Canvas, MaskMode, MatchSet, MatchingOutcome, MatchingParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Canny2Img,
    Depth2Img,
    Seg2Img,
    Img2Canny,
    Img2Depth,
    Img2Seg,
    Colorize,
    Deblur,
    #[serde(rename = "superres4x")]
    SuperRes4x,
    #[serde(rename = "superres8x")]
    SuperRes8x,
    #[serde(rename = "superres16x")]
    SuperRes16x,
    RefInpaint,
}

impl TaskKind {
    pub const ALL: [TaskKind; 12] = [
        TaskKind::Canny2Img,
        TaskKind::Depth2Img,
        TaskKind::Seg2Img,
        TaskKind::Img2Canny,
        TaskKind::Img2Depth,
        TaskKind::Img2Seg,
        TaskKind::Colorize,
        TaskKind::Deblur,
        TaskKind::SuperRes4x,
        TaskKind::SuperRes8x,
        TaskKind::SuperRes16x,
        TaskKind::RefInpaint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Canny2Img => "canny2img",
            TaskKind::Depth2Img => "depth2img",
            TaskKind::Seg2Img => "seg2img",
            TaskKind::Img2Canny => "img2canny",
            TaskKind::Img2Depth => "img2depth",
            TaskKind::Img2Seg => "img2seg",
            TaskKind::Colorize => "colorize",
            TaskKind::Deblur => "deblur",
            TaskKind::SuperRes4x => "superres4x",
            TaskKind::SuperRes8x => "superres8x",
            TaskKind::SuperRes16x => "superres16x",
            TaskKind::RefInpaint => "refinpaint",
        }
    }

    /// The caption token naming this task.
    pub fn token(self) -> u32 {
        1 + Self::ALL.iter().position(|&k| k == self).expect("listed") as u32
    }

    pub fn is_perception(self) -> bool {
        matches!(self, TaskKind::Img2Canny | TaskKind::Img2Depth | TaskKind::Img2Seg)
    }

    /// The generation task this perception task reverses.
    pub fn reversed(self) -> Option<TaskKind> {
        match self {
            TaskKind::Img2Canny => Some(TaskKind::Canny2Img),
            TaskKind::Img2Depth => Some(TaskKind::Depth2Img),
            TaskKind::Img2Seg => Some(TaskKind::Seg2Img),
            TaskKind::Canny2Img => Some(TaskKind::Img2Canny),
            TaskKind::Depth2Img => Some(TaskKind::Img2Depth),
            TaskKind::Seg2Img => Some(TaskKind::Img2Seg),
            _ => None,
        }
    }

    pub fn superres_factor(self) -> Option<usize> {
        match self {
            TaskKind::SuperRes4x => Some(4),
            TaskKind::SuperRes8x => Some(8),
            TaskKind::SuperRes16x => Some(16),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Contract(format!("unknown task {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

pub const PAD_TOKEN: u32 = 0;
pub const COLOR_TOKEN_BASE: u32 = 16;
pub const CAPTION_LEN: usize = 8;

/// `[task, colour words front to back…, PAD…]`, always [`CAPTION_LEN`] long.
pub fn caption(kind: TaskKind, scene: &Scene) -> Vec<u32> {
    let mut out = vec![kind.token()];
    out.extend(
        scene
            .objects
            .iter()
            .rev()
            .map(|o| COLOR_TOKEN_BASE + o.color_index as u32)
            .take(CAPTION_LEN - 1),
    );
    out.resize(CAPTION_LEN, PAD_TOKEN);
    out
}

/// Words describing the task, used to seed prompt tokens.
pub fn task_description(kind: TaskKind) -> Vec<u32> {
    vec![kind.token()]
}

pub fn color_word(token: u32) -> Option<&'static str> {
    let i = token.checked_sub(COLOR_TOKEN_BASE)? as usize;
    NAMED_COLORS.get(i).map(|c| c.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Standard deviation of the deblur noise, in `[0, 1]` units.
    pub noise_sigma: f32,
    /// Probability that a refinpaint mask is matching-based.
    pub matching_probability: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Colorize,
            noise_sigma: 0.1,
            matching_probability: 0.25,
        }
    }
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.noise_sigma.is_finite() && (0.0..=1.0).contains(&self.noise_sigma),
            "noise_sigma must lie in [0, 1]"
        );
        ensure!(
            (0.0..=1.0).contains(&self.matching_probability),
            "matching_probability must lie in [0, 1]"
        );
        Ok(())
    }

    /// Whether the conditioning map sits on the left (false for perception).
    pub fn map_on_left(&self) -> bool {
        !self.kind.is_perception()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    Noise { sigma: f32 },
    SuperRes { factor: usize },
    Grayscale,
}

pub fn degrade(canvas: &Canvas, degradation: Degradation, rng: &mut impl Rng) -> Result<Canvas> {
    let (h, w, c) = (canvas.height(), canvas.width(), canvas.channels());
    match degradation {
        Degradation::Noise { sigma } => {
            ensure!(sigma.is_finite() && sigma >= 0.0, "noise sigma must be non-negative");
            let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::Contract(e.to_string()))?;
            let data = canvas
                .data()
                .iter()
                .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
                .collect();
            Canvas::new(h, w, c, data)
        }
        Degradation::SuperRes { factor: k } => {
            ensure!(k >= 1 && h % k == 0 && w % k == 0, "{h}×{w} is not divisible by {k}");
            let mut out = vec![0.0f32; h * w * c];
            for by in (0..h).step_by(k) {
                for bx in (0..w).step_by(k) {
                    for ch in 0..c {
                        let mut sum = 0.0f64;
                        for y in by..by + k {
                            for x in bx..bx + k {
                                sum += f64::from(canvas.pixel(y, x)[ch]);
                            }
                        }
                        let mean = (sum / (k * k) as f64) as f32;
                        for y in by..by + k {
                            for x in bx..bx + k {
                                out[(y * w + x) * c + ch] = mean;
                            }
                        }
                    }
                }
            }
            Canvas::from_clamped(h, w, c, out)
        }
        Degradation::Grayscale => Canvas::from_plane(h, w, &canvas.luminance(), c),
    }
}

/// A training example before stitching.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub left: Canvas,
    pub right: Canvas,
    pub mask: MaskMode,
    pub matches: Option<MatchSet>,
    pub task: TaskKind,
    pub caption: Vec<u32>,
}

pub const OVERLAP_RANGE: (f64, f64) = (0.40, 0.70);

/// Keep a view pair iff its overlap lies in the closed range [0.40, 0.70].
/// Endpoints compare with a 1e-9 slack so values such as `70.0 / 100.0`
/// and `0.7` agree.
pub fn overlap_filter(fraction: f64) -> bool {
    fraction >= OVERLAP_RANGE.0 - 1e-9 && fraction <= OVERLAP_RANGE.1 + 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Random,
    Matching,
}

/// `Matching` with probability `p_matching`, otherwise `Random`.
pub fn mask_mode_sampler(rng: &mut impl Rng, p_matching: f64) -> MaskSource {
    if rng.random_bool(p_matching.clamp(0.0, 1.0)) {
        MaskSource::Matching
    } else {
        MaskSource::Random
    }
}

const VIEW_RETRIES: usize = 200;
/// Correspondence grid spacing in pixels. A dense grid keeps enough confident
/// matches inside a 20–50% crop to reach the minimum vertex count.
pub const MATCH_GRID_STEP: usize = 1;

fn quantized(c: Canvas) -> Result<Canvas> {
    let (h, w, ch) = (c.height(), c.width(), c.channels());
    Canvas::new(h, w, ch, c.into_data().into_iter().map(quantize8).collect())
}

pub fn make_pair(spec: &TaskSpec, scene: &Scene, rng: &mut impl Rng) -> Result<TrainPair> {
    spec.validate()?;
    let rgb = scene.rgb.clone();
    let (left, right, mask, matches) = match spec.kind {
        TaskKind::Canny2Img => (scene.edge_canvas()?, rgb, MaskMode::Full, None),
        TaskKind::Depth2Img => (scene.depth_canvas()?, rgb, MaskMode::Full, None),
        TaskKind::Seg2Img => (scene.segmentation.clone(), rgb, MaskMode::Full, None),
        TaskKind::Img2Canny => (rgb, scene.edge_canvas()?, MaskMode::Full, None),
        TaskKind::Img2Depth => (rgb, scene.depth_canvas()?, MaskMode::Full, None),
        TaskKind::Img2Seg => (rgb, scene.segmentation.clone(), MaskMode::Full, None),
        TaskKind::Colorize => (quantized(degrade(&rgb, Degradation::Grayscale, rng)?)?, rgb, MaskMode::Full, None),
        TaskKind::Deblur => {
            let noisy = degrade(&rgb, Degradation::Noise { sigma: spec.noise_sigma }, rng)?;
            (quantized(noisy)?, rgb, MaskMode::Full, None)
        }
        TaskKind::SuperRes4x | TaskKind::SuperRes8x | TaskKind::SuperRes16x => {
            let factor = spec.kind.superres_factor().expect("superres kind");
            (quantized(degrade(&rgb, Degradation::SuperRes { factor }, rng)?)?, rgb, MaskMode::Full, None)
        }
        TaskKind::RefInpaint => {
            let (h, w) = (scene.height(), scene.width());
            let mut chosen = None;
            for _ in 0..VIEW_RETRIES {
                let hm = Homography::random_view(h, w, rng);
                let (view, matches, overlap) = warp_view(&rgb, &hm, MATCH_GRID_STEP, rng)?;
                if overlap_filter(overlap) {
                    chosen = Some((view, matches));
                    break;
                }
            }
            let (view, matches) = chosen.ok_or_else(|| {
                Error::Contract(format!("no view within the overlap range after {VIEW_RETRIES} attempts"))
            })?;
            let mask = match mask_mode_sampler(rng, spec.matching_probability) {
                MaskSource::Matching => match matching_mask(&matches, &MatchingParams::default(), h, w, rng)? {
                    MatchingOutcome::Mask { mask, .. } => mask.placed_right(),
                    MatchingOutcome::FallbackToRandomMask => random_polygon_mask(h, w, rng)?,
                },
                MaskSource::Random => random_polygon_mask(h, w, rng)?,
            };
            (rgb, view, MaskMode::Partial(mask), Some(matches))
        }
    };
    Ok(TrainPair {
        left,
        right,
        mask,
        matches,
        task: spec.kind,
        caption: caption(spec.kind, scene),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::taskdata::gen_scene;

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("paint".parse::<TaskKind>().is_err());
    }

    #[test]
    fn superres_constant_and_blocky() {
        let mut r = rng::stream(1, "t", 0);
        let flat = Canvas::filled(16, 16, 3, 0.3).unwrap();
        assert_eq!(degrade(&flat, Degradation::SuperRes { factor: 4 }, &mut r).unwrap(), flat);
        let s = gen_scene(2);
        let d = degrade(&s.rgb, Degradation::SuperRes { factor: 8 }, &mut r).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(d.pixel(y, x), d.pixel(y / 8 * 8, x / 8 * 8));
            }
        }
        assert!(degrade(&Canvas::filled(12, 12, 3, 0.1).unwrap(), Degradation::SuperRes { factor: 8 }, &mut r).is_err());
    }

    #[test]
    fn grayscale_of_red() {
        let mut r = rng::stream(1, "t", 0);
        let red = Canvas::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let g = degrade(&red, Degradation::Grayscale, &mut r).unwrap();
        for v in g.data() {
            assert!((v - 0.299).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_stays_in_range() {
        let mut r = rng::stream(1, "t", 0);
        let s = gen_scene(3);
        let d = degrade(&s.rgb, Degradation::Noise { sigma: 0.5 }, &mut r).unwrap();
        assert!(d.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(d, s.rgb);
    }

    #[test]
    fn pair_layouts() {
        let s = gen_scene(4);
        let mut r = rng::stream(4, rng::purpose::PAIR, 0);
        let p = make_pair(&TaskSpec::new(TaskKind::Canny2Img), &s, &mut r).unwrap();
        assert_eq!((p.left.clone(), p.right.clone()), (s.edge_canvas().unwrap(), s.rgb.clone()));
        assert_eq!(p.mask, MaskMode::Full);
        let p = make_pair(&TaskSpec::new(TaskKind::Img2Depth), &s, &mut r).unwrap();
        assert_eq!((p.left, p.right), (s.rgb.clone(), s.depth_canvas().unwrap()));
        let p = make_pair(&TaskSpec::new(TaskKind::Deblur), &s, &mut r).unwrap();
        assert_eq!(p.right, s.rgb);
        assert_ne!(p.left, s.rgb);
        assert_eq!(p.caption.len(), CAPTION_LEN);
        assert_eq!(p.caption[0], TaskKind::Deblur.token());
    }

    #[test]
    fn perception_pairs_reverse_generation_pairs() {
        let s = gen_scene(5);
        for gen in [TaskKind::Canny2Img, TaskKind::Depth2Img, TaskKind::Seg2Img] {
            let mut r = rng::stream(5, rng::purpose::PAIR, 0);
            let a = make_pair(&TaskSpec::new(gen), &s, &mut r).unwrap();
            let b = make_pair(&TaskSpec::new(gen.reversed().unwrap()), &s, &mut r).unwrap();
            assert_eq!((a.left, a.right), (b.right, b.left));
        }
    }

    #[test]
    fn refinpaint_pairs_are_partial_with_valid_overlap() {
        let s = gen_scene(6);
        for i in 0..10 {
            let mut r = rng::stream(6, rng::purpose::PAIR, i);
            let p = make_pair(&TaskSpec::new(TaskKind::RefInpaint), &s, &mut r).unwrap();
            let MaskMode::Partial(m) = &p.mask else { panic!("refinpaint must be partial") };
            assert_eq!((m.height(), m.width()), (32, 64));
            assert!(m.count() > 0);
            assert!(p.matches.is_some());
        }
    }

    #[test]
    fn overlap_boundaries() {
        assert!(overlap_filter(0.55));
        assert!(!overlap_filter(0.30));
        assert!(overlap_filter(0.40) && overlap_filter(0.70));
        assert!(!overlap_filter(0.39) && !overlap_filter(0.71));
    }

    #[test]
    fn sampler_ratio_and_degenerate_probability() {
        let mut r = rng::stream(7, rng::purpose::MASK_MODE, 0);
        let n = 10_000;
        let hits = (0..n).filter(|_| mask_mode_sampler(&mut r, 0.25) == MaskSource::Matching).count();
        let frac = hits as f64 / n as f64;
        assert!((0.235..=0.265).contains(&frac), "{frac}");
        let mut r = rng::stream(7, rng::purpose::MASK_MODE, 1);
        assert!((0..1000).all(|_| mask_mode_sampler(&mut r, 0.0) == MaskSource::Random));
    }

    #[test]
    fn caption_words() {
        let s = gen_scene(9);
        let c = caption(TaskKind::Colorize, &s);
        let front = s.objects.last().unwrap();
        assert_eq!(color_word(c[1]), Some(NAMED_COLORS[front.color_index].0));
        assert!(c.iter().all(|&t| t < 64));
    }
}
