use crate::error::{ensure, Result};

/// Grid position of a patch token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenPos {
    pub row: usize,
    pub col: usize,
}

/// Non-overlapping `p×p` patches of an `H×W×C` image, flattened row-major
/// as `(py, px, c)` within each patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn positions(&self) -> Vec<TokenPos> {
        grid_positions(self.grid_rows, self.grid_cols)
    }
}

pub fn grid_positions(rows: usize, cols: usize) -> Vec<TokenPos> {
    (0..rows)
        .flat_map(|row| (0..cols).map(move |col| TokenPos { row, col }))
        .collect()
}

pub fn patchify(values: &[f32], height: usize, width: usize, channels: usize, p: usize) -> Result<Patches> {
    ensure!(p >= 1, "patch size must be positive");
    ensure!(
        values.len() == height * width * channels,
        "image buffer holds {} values, expected {height}×{width}×{channels}",
        values.len()
    );
    ensure!(
        height % p == 0 && width % p == 0,
        "{height}×{width} canvas is not divisible by patch size {p}"
    );
    let (gr, gc) = (height / p, width / p);
    let mut data = Vec::with_capacity(values.len());
    for r in 0..gr {
        for c in 0..gc {
            for py in 0..p {
                let y = r * p + py;
                let start = (y * width + c * p) * channels;
                data.extend_from_slice(&values[start..start + p * channels]);
            }
        }
    }
    Ok(Patches {
        grid_rows: gr,
        grid_cols: gc,
        patch_size: p,
        channels,
        data,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Patches) -> Vec<f32> {
    let p = patches.patch_size;
    let ch = patches.channels;
    let width = patches.grid_cols * p;
    let mut out = vec![0.0; patches.data.len()];
    let mut src = patches.data.chunks(p * ch);
    for r in 0..patches.grid_rows {
        for c in 0..patches.grid_cols {
            for py in 0..p {
                let y = r * p + py;
                let start = (y * width + c * p) * ch;
                out[start..start + p * ch].copy_from_slice(src.next().expect("sized above"));
            }
        }
    }
    out
}
