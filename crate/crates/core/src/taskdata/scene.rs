use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lpg::Canvas;
use crate::rng;

/// Object colours; the index doubles as the caption colour word.
pub const NAMED_COLORS: [(&str, [f32; 3]); 16] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.70, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.90, 0.15]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("magenta", [0.85, 0.15, 0.80]),
    ("orange", [0.98, 0.55, 0.10]),
    ("purple", [0.50, 0.20, 0.70]),
    ("pink", [0.98, 0.60, 0.75]),
    ("brown", [0.55, 0.35, 0.15]),
    ("white", [0.97, 0.97, 0.97]),
    ("gray", [0.50, 0.50, 0.50]),
    ("lime", [0.65, 0.95, 0.20]),
    ("navy", [0.05, 0.10, 0.45]),
    ("teal", [0.05, 0.50, 0.50]),
    ("olive", [0.50, 0.50, 0.10]),
];

/// Flat segmentation colours per object slot; the background is black.
pub const SEGMENT_PALETTE: [[f32; 3]; 16] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 1.0, 0.5],
    [1.0, 0.0, 0.5],
    [0.5, 1.0, 0.0],
    [0.0, 0.5, 1.0],
    [1.0, 1.0, 1.0],
    [0.5, 0.5, 0.5],
    [0.5, 0.25, 0.0],
    [0.25, 0.5, 0.5],
];

pub const EDGE_THRESHOLD: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    Disc { cx: f32, cy: f32, r: f32 },
    Rectangle { x0: f32, y0: f32, x1: f32, y1: f32 },
    Triangle { points: [(f32, f32); 3] },
}

impl Geometry {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Geometry::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Rectangle { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Geometry::Triangle { points: [a, b, c] } => {
                let side = |p: (f32, f32), q: (f32, f32)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let (s1, s2, s3) = (side(a, b), side(b, c), side(c, a));
                (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0)
            }
        }
    }

    /// Fraction of a 4×4 grid of sub-samples of pixel `(x, y)` inside the shape.
    pub fn coverage(&self, x: usize, y: usize) -> f32 {
        let mut inside = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                if self.contains(x as f32 + (sx as f32 + 0.5) / 4.0, y as f32 + (sy as f32 + 0.5) / 4.0) {
                    inside += 1;
                }
            }
        }
        inside as f32 / 16.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    /// Index into [`NAMED_COLORS`].
    pub color_index: usize,
    pub color: [f32; 3],
    /// 0 is the back-most object.
    pub depth_order: usize,
    pub geometry: Geometry,
}

/// A procedural scene and every map derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub rgb: Canvas,
    /// `H×W`, front-most object 1, background 0.
    pub depth: Vec<f32>,
    pub segmentation: Canvas,
    /// `H×W` values in `{0, 1}`.
    pub edges: Vec<f32>,
    /// Back to front.
    pub objects: Vec<SceneObject>,
    /// `H×W` index of the visible object, `None` for background.
    pub ids: Vec<Option<usize>>,
}

pub fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Sobel gradient magnitude of luminance (normalised so a unit step reads 1),
/// clamped to `[0, 1]` and thresholded; borders replicate.
pub fn sobel_edges(canvas: &Canvas) -> Vec<f32> {
    let (h, w) = (canvas.height(), canvas.width());
    let lum = canvas.luminance();
    let at = |y: isize, x: isize| lum[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let mag = ((gx / 4.0).powi(2) + (gy / 4.0).powi(2)).sqrt().min(1.0);
            out.push(if mag >= EDGE_THRESHOLD { 1.0 } else { 0.0 });
        }
    }
    out
}

pub const SCENE_SIZE: usize = 32;

pub fn gen_scene(seed: u64) -> Scene {
    gen_scene_sized(seed, SCENE_SIZE, SCENE_SIZE)
}

fn random_geometry(kind: ShapeKind, h: f32, w: f32, rng: &mut impl Rng) -> Geometry {
    let m = h.min(w);
    match kind {
        ShapeKind::Disc => Geometry::Disc {
            cx: rng.random_range(0.15..0.85) * w,
            cy: rng.random_range(0.15..0.85) * h,
            r: rng.random_range(0.12..0.28) * m,
        },
        ShapeKind::Rectangle => {
            let (rw, rh) = (rng.random_range(0.2..0.5) * w, rng.random_range(0.2..0.5) * h);
            let x0 = rng.random_range(0.0..w - rw);
            let y0 = rng.random_range(0.0..h - rh);
            Geometry::Rectangle {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
            }
        }
        ShapeKind::Triangle => {
            let size = rng.random_range(0.3..0.6) * m;
            let ox = rng.random_range(0.0..w - size);
            let oy = rng.random_range(0.0..h - size);
            let mut pt = || (ox + rng.random::<f32>() * size, oy + rng.random::<f32>() * size);
            let mut points = [pt(), pt(), pt()];
            // Degenerate slivers vanish under rasterisation; stretch them.
            let area = ((points[1].0 - points[0].0) * (points[2].1 - points[0].1)
                - (points[2].0 - points[0].0) * (points[1].1 - points[0].1))
                .abs();
            if area < 0.1 * size * size {
                points = [(ox, oy + size), (ox + size, oy + size), (ox + size * 0.5, oy)];
            }
            Geometry::Triangle { points }
        }
    }
}

/// 2–6 anti-aliased shapes at distinct depths over a linear gradient.
/// Layouts in which an object ends up with no visible pixel are redrawn.
pub fn gen_scene_sized(seed: u64, height: usize, width: usize) -> Scene {
    let mut rng = rng::stream(seed, rng::purpose::SCENE, 0);
    let (hf, wf) = (height as f32, width as f32);
    loop {
        let n = rng.random_range(2..=6);
        let mut color_ids: Vec<usize> = (0..NAMED_COLORS.len()).collect();
        color_ids.shuffle(&mut rng);
        let objects: Vec<SceneObject> = (0..n)
            .map(|i| {
                let kind = [ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Triangle][rng.random_range(0..3)];
                let ci = color_ids[i];
                let base = NAMED_COLORS[ci].1;
                let color = base.map(|c| (c + rng.random_range(-0.04..0.04f32)).clamp(0.0, 1.0));
                SceneObject {
                    kind,
                    color_index: ci,
                    color,
                    depth_order: i,
                    geometry: random_geometry(kind, hf, wf, &mut rng),
                }
            })
            .collect();

        let bg0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.55));
        let bg1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.55));
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());

        let mut rgb = Vec::with_capacity(height * width * 3);
        let mut ids = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let u = ((x as f32 / wf - 0.5) * dx + (y as f32 / hf - 0.5) * dy + 0.75) / 1.5;
                let mut px: [f32; 3] = std::array::from_fn(|c| bg0[c] + (bg1[c] - bg0[c]) * u.clamp(0.0, 1.0));
                let mut id = None;
                for (i, o) in objects.iter().enumerate() {
                    let cov = o.geometry.coverage(x, y);
                    if cov > 0.0 {
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - cov) + o.color[c] * cov;
                        }
                    }
                    if cov >= 0.5 {
                        id = Some(i);
                    }
                }
                rgb.extend(px.map(quantize8));
                ids.push(id);
            }
        }
        if (0..n).any(|i| !ids.contains(&Some(i))) {
            continue;
        }
        let rgb = Canvas::new(height, width, 3, rgb).expect("quantised colours are in range");
        let depth = ids
            .iter()
            .map(|id| id.map_or(0.0, |i| (i + 1) as f32 / n as f32))
            .collect();
        let seg = ids
            .iter()
            .flat_map(|id| id.map_or([0.0; 3], |i| SEGMENT_PALETTE[i]))
            .collect();
        let segmentation = Canvas::new(height, width, 3, seg).expect("palette is in range");
        let edges = sobel_edges(&rgb);
        return Scene {
            seed,
            rgb,
            depth,
            segmentation,
            edges,
            objects,
            ids,
        };
    }
}

impl Scene {
    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn edge_canvas(&self) -> Result<Canvas> {
        Canvas::from_plane(self.height(), self.width(), &self.edges, 3)
    }

    pub fn depth_canvas(&self) -> Result<Canvas> {
        let q: Vec<f32> = self.depth.iter().map(|&d| quantize8(d)).collect();
        Canvas::from_plane(self.height(), self.width(), &q, 3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_scene(11), gen_scene(11));
        assert_ne!(gen_scene(11).rgb, gen_scene(12).rgb);
    }

    #[test]
    fn every_object_visible_and_depth_ordered() {
        for seed in 0..40 {
            let s = gen_scene(seed);
            assert!((2..=6).contains(&s.objects.len()));
            for i in 0..s.objects.len() {
                assert!(s.ids.iter().filter(|&&id| id == Some(i)).count() > 0);
            }
            for (p, id) in s.ids.iter().enumerate() {
                let expected = id.map_or(0.0, |i| (i + 1) as f32 / s.objects.len() as f32);
                assert_eq!(s.depth[p], expected);
            }
        }
    }

    #[test]
    fn front_object_is_nearer_where_shapes_overlap() {
        for seed in 0..40 {
            let s = gen_scene(seed);
            let w = s.width();
            for (p, id) in s.ids.iter().enumerate() {
                let Some(front) = *id else { continue };
                let (x, y) = (p % w, p / w);
                for back in 0..front {
                    if s.objects[back].geometry.coverage(x, y) >= 0.5 {
                        let back_depth = (back + 1) as f32 / s.objects.len() as f32;
                        assert!(s.depth[p] > back_depth);
                    }
                }
            }
        }
    }

    #[test]
    fn segmentation_uses_palette_and_black_background() {
        let s = gen_scene(5);
        for (p, id) in s.ids.iter().enumerate() {
            let px = &s.segmentation.data()[p * 3..p * 3 + 3];
            match id {
                None => assert_eq!(px, [0.0; 3]),
                Some(i) => assert_eq!(px, SEGMENT_PALETTE[*i]),
            }
        }
    }

    #[test]
    fn sobel_on_step_edge() {
        let mut data = vec![0.0; 8 * 8 * 3];
        for y in 0..8 {
            for x in 4..8 {
                data[(y * 8 + x) * 3..(y * 8 + x) * 3 + 3].copy_from_slice(&[1.0; 3]);
            }
        }
        let e = sobel_edges(&Canvas::new(8, 8, 3, data).unwrap());
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(e[y * 8 + x], if x == 3 || x == 4 { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }
        assert!(sobel_edges(&Canvas::filled(8, 8, 3, 0.4).unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_map_matches_extractor() {
        let s = gen_scene(8);
        assert_eq!(sobel_edges(&s.rgb), s.edges);
        assert!(s.edges.iter().any(|&v| v == 1.0));
    }
}
