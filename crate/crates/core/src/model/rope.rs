//! Two-axis rotary position encoding.
//!
//! The rotary pairs of each head are split between the row and the column
//! coordinate of a token. Column indices run continuously across the seam of
//! the stitched canvas, so the reference and target halves share one
//! coordinate frame instead of an interpolated one.

use std::rc::Rc;

use super::patchify::TokenPos;
use crate::error::{ensure, Result};
use crate::numerics::{Graph, Real, RopeTables};

/// Rotation angle of every pair of a head at `pos`.
pub fn rope_angles(pos: TokenPos, head_dim: usize, base: f32) -> Vec<f64> {
    let pairs = head_dim / 2;
    let row_pairs = pairs / 2;
    let col_pairs = pairs - row_pairs;
    let base = f64::from(base);
    let freq = |i: usize, n: usize| base.powf(-(i as f64) / n as f64);
    (0..pairs)
        .map(|j| {
            if j < row_pairs {
                pos.row as f64 * freq(j, row_pairs)
            } else {
                pos.col as f64 * freq(j - row_pairs, col_pairs)
            }
        })
        .collect()
}

pub fn rope_tables<T: Real>(positions: &[TokenPos], head_dim: usize, base: f32) -> RopeTables<T> {
    let pairs = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for &p in positions {
        for a in rope_angles(p, head_dim, base) {
            cos.push(T::of_f64(a.cos()));
            sin.push(T::of_f64(a.sin()));
        }
    }
    RopeTables {
        tokens: positions.len(),
        pairs,
        cos: Rc::new(cos),
        sin: Rc::new(sin),
    }
}

/// Rotates per-token query and key rows (`[tokens, head_dim]`) by their positions.
pub fn rope_apply(
    q: &[f32],
    k: &[f32],
    positions: &[TokenPos],
    head_dim: usize,
    base: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    ensure!(head_dim % 2 == 0, "rotary head_dim {head_dim} is odd");
    let n = positions.len();
    ensure!(
        q.len() == n * head_dim && k.len() == n * head_dim,
        "q/k must hold {n}×{head_dim} values"
    );
    let tables = rope_tables::<f32>(positions, head_dim, base);
    let mut g = Graph::<f32>::new();
    let qv = g.constant([1, 1, n, head_dim], q.to_vec())?;
    let kv = g.constant([1, 1, n, head_dim], k.to_vec())?;
    let qr = g.rope(qv, &tables)?;
    let kr = g.rope(kv, &tables)?;
    Ok((g.value(qr).to_vec(), g.value(kr).to_vec()))
}
