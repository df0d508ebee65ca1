//! Synthetic fingerprint corpus, image and manifest I/O, protocol splits
//! and a pixel-space linear baseline.

mod corpus;
mod manifest;
mod pgm;
mod probe;
mod split;
pub mod synth;

pub use corpus::{generate_corpus, load_samples, quantize, synthesize, CorpusSpec, Sample};
pub use manifest::{Manifest, ManifestRecord, LIVE_MATERIAL, MANIFEST_HEADER};
pub use pgm::{decode_pgm, encode_pgm, read_image, write_image};
pub use probe::{downsample, LinearProbe, ProbeConfig};
pub use split::{build_split, check_split, split_indices, split_samples, Protocol, SplitSpec, Tagged};
