//! Synthetic RGB-D video data: PPM/PGM files, scene generation and clip
//! loading.

pub mod error;
pub mod loader;
pub mod pnm;
pub mod synth;

pub use error::{DataError, Result};
pub use loader::{load_clip, load_unlabeled_clip, pseudo_depth, sub_clip, ClipSampler, PseudoDepth, Window};
pub use pnm::Image;
pub use synth::{generate_sequence, generate_suite, read_manifest, ManifestEntry, SceneSpec, Shape, SuiteSpec};
