use rand::Rng;

use crate::error::{ensure, Result};
use crate::lpg::{Canvas, Match, MatchSet};

/// Row-major 3×3 projective transform acting on `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        ensure!(d.abs() > 1e-3, "homography is near singular (det {d})");
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        Ok(Homography([
            [cof(1, 2, 1, 2) / d, -cof(0, 2, 1, 2) / d, cof(0, 1, 1, 2) / d],
            [-cof(1, 2, 0, 2) / d, cof(0, 2, 0, 2) / d, -cof(0, 1, 0, 2) / d],
            [cof(1, 2, 0, 1) / d, -cof(0, 2, 0, 1) / d, cof(0, 1, 0, 1) / d],
        ]))
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        (
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        )
    }

    /// A mild rotation/scale/perspective about the centre plus a sizeable shift.
    pub fn random_view(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = (w / 2.0, h / 2.0);
        let angle = rng.random_range(-0.15..0.15f64);
        let scale = rng.random_range(0.9..1.1f64);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let tx = sign * rng.random_range(0.25..0.6) * w;
        let ty = rng.random_range(-0.15..0.15) * h;
        let px = rng.random_range(-1e-3..1e-3);
        let py = rng.random_range(-1e-3..1e-3);
        let (c, s) = (angle.cos() * scale, angle.sin() * scale);
        // translate(-c) · rotate-scale · translate(c + t), then a small projective row
        Homography([
            [c, -s, cx + tx - c * cx + s * cy],
            [s, c, cy + ty - s * cx - c * cy],
            [px, py, 1.0 - px * cx - py * cy],
        ])
    }
}

/// Second view `target(p) = reference(H⁻¹p)` with bilinear sampling in pixel-centre
/// coordinates; unseen pixels are black. Returns the view, grid correspondences
/// and the fraction of target pixels seen in the reference.
pub fn warp_view(
    reference: &Canvas,
    homography: &Homography,
    grid_step: usize,
    rng: &mut impl Rng,
) -> Result<(Canvas, MatchSet, f64)> {
    ensure!(grid_step >= 1, "grid step must be positive");
    let inv = homography.inverse()?;
    let (h, w, c) = (reference.height(), reference.width(), reference.channels());
    let (hf, wf) = (h as f64, w as f64);
    let mut data = Vec::with_capacity(h * w * c);
    let mut seen = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply((x as f64 + 0.5, y as f64 + 0.5));
            if sx >= 0.0 && sx < wf && sy >= 0.0 && sy < hf {
                seen += 1;
                let fx = (sx - 0.5).clamp(0.0, wf - 1.0);
                let fy = (sy - 0.5).clamp(0.0, hf - 1.0);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
                for ch in 0..c {
                    let v = |yy: usize, xx: usize| reference.pixel(yy, xx)[ch];
                    let top = v(y0, x0) * (1.0 - ax) + v(y0, x1) * ax;
                    let bottom = v(y1, x0) * (1.0 - ax) + v(y1, x1) * ax;
                    data.push(super::scene::quantize8(top * (1.0 - ay) + bottom * ay));
                }
            } else {
                data.extend(std::iter::repeat_n(0.0, c));
            }
        }
    }
    let mut matches = Vec::new();
    for gy in (grid_step / 2..h).step_by(grid_step) {
        for gx in (grid_step / 2..w).step_by(grid_step) {
            let right = (gx as f64 + 0.5, gy as f64 + 0.5);
            let left = inv.apply(right);
            if left.0 >= 0.0 && left.0 <= wf && left.1 >= 0.0 && left.1 <= hf {
                matches.push(Match {
                    left: (left.0 as f32, left.1 as f32),
                    right: (right.0 as f32, right.1 as f32),
                    confidence: rng.random_range(0.7..=1.0),
                });
            }
        }
    }
    let view = Canvas::new(h, w, c, data)?;
    Ok((view, MatchSet { matches }, seen as f64 / (h * w) as f64))
}
