use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::gen_scene;
use super::tasks::{make_pair, TaskKind, TaskSpec, TrainPair};
use crate::error::{ensure, Error, Result};
use crate::image_io;
use crate::lpg::MaskMode;
use crate::rng;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub left: String,
    pub right: String,
    /// `"full"` or the path of a stitched-size mask PNG.
    pub mask: String,
    pub task: TaskKind,
    pub caption_tokens: Vec<u32>,
    pub seed: u64,
}

/// Scene seed of record `index` of a dataset built with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, rng::purpose::SCENE, index as u64)
}

/// The in-memory pair that record `index` of a dataset holds.
pub fn dataset_pair(spec: &TaskSpec, seed: u64, index: usize) -> Result<TrainPair> {
    let scene = gen_scene(scene_seed(seed, index));
    let mut r = rng::stream(seed, rng::purpose::PAIR, index as u64);
    make_pair(spec, &scene, &mut r)
}

/// Writes `count` pairs as PNGs plus `manifest.jsonl` into `out_dir`.
pub fn build_dataset(spec: &TaskSpec, count: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    ensure!(count >= 1, "dataset count must be at least 1");
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut lines = String::new();
    for i in 0..count {
        let pair = dataset_pair(spec, seed, i)?;
        let left = format!("{i:05}_left.png");
        let right = format!("{i:05}_right.png");
        image_io::write_canvas(&out_dir.join(&left), &pair.left)?;
        image_io::write_canvas(&out_dir.join(&right), &pair.right)?;
        let mask = match &pair.mask {
            MaskMode::Full => "full".to_string(),
            MaskMode::Partial(m) => {
                let name = format!("{i:05}_mask.png");
                let stitched = if m.width() == pair.left.width() { m.placed_right() } else { m.clone() };
                image_io::write_mask(&out_dir.join(&name), &stitched)?;
                name
            }
        };
        let record = ManifestRecord {
            left,
            right,
            mask,
            task: spec.kind,
            caption_tokens: pair.caption,
            seed: scene_seed(seed, i),
        };
        lines.push_str(&serde_json::to_string(&record).expect("record serialises"));
        lines.push('\n');
    }
    let path = out_dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads every pair listed in a manifest.
pub fn load_dataset(manifest: &Path) -> Result<Vec<TrainPair>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let left = image_io::read_canvas(&dir.join(&r.left))?;
            let right = image_io::read_canvas(&dir.join(&r.right))?;
            let mask = match r.mask.as_str() {
                "full" => MaskMode::Full,
                p => MaskMode::Partial(image_io::read_mask(&dir.join(p))?),
            };
            Ok(TrainPair {
                left,
                right,
                mask,
                matches: None,
                task: r.task,
                caption: r.caption_tokens,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::new(TaskKind::Canny2Img);
        let m = build_dataset(&spec, 10, 3, dir.path()).unwrap();
        let recs = read_manifest(&m).unwrap();
        assert_eq!(recs.len(), 10);
        let pngs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert!(pngs >= 20);
        let loaded = load_dataset(&m).unwrap();
        assert_eq!(loaded[4], dataset_pair(&spec, 3, 4).unwrap());
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = TaskSpec::new(TaskKind::RefInpaint);
        let ma = build_dataset(&spec, 4, 9, a.path()).unwrap();
        let mb = build_dataset(&spec, 4, 9, b.path()).unwrap();
        assert_eq!(fs::read(ma).unwrap(), fs::read(mb).unwrap());
        let loaded = load_dataset(&a.path().join(MANIFEST_NAME)).unwrap();
        let fresh = dataset_pair(&spec, 9, 1).unwrap();
        assert_eq!(loaded[1].left, fresh.left);
        assert_eq!(loaded[1].right, fresh.right);
        assert_eq!(loaded[1].mask, fresh.mask);
    }

    #[test]
    fn zero_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(&TaskSpec::default(), 0, 1, dir.path()),
            Err(Error::Contract(_))
        ));
    }
}
