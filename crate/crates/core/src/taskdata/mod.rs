//! Procedural scenes and the task pairs built from them.

mod dataset;
mod scene;
mod tasks;
mod warp;

pub use dataset::{build_dataset, dataset_pair, load_dataset, read_manifest, scene_seed, ManifestRecord, MANIFEST_NAME};
pub use scene::{
    gen_scene, gen_scene_sized, quantize8, sobel_edges, Geometry, Scene, SceneObject, ShapeKind, EDGE_THRESHOLD,
    NAMED_COLORS, SCENE_SIZE, SEGMENT_PALETTE,
};
pub use tasks::{
    caption, color_word, degrade, make_pair, mask_mode_sampler, overlap_filter, task_description, Degradation,
    MaskSource, TaskKind, TaskSpec, TrainPair, CAPTION_LEN, COLOR_TOKEN_BASE, MATCH_GRID_STEP, OVERLAP_RANGE,
    PAD_TOKEN,
};
pub use warp::{warp_view, Homography};
