//! Synthetic datasets, noise injection, patch tiling, splits and file formats.

mod blur;
mod container;
mod glyph;
mod idx;
mod noise;
mod patch;
mod sample;
mod split;
mod texture;

pub use blur::{convolve_separable, gaussian_kernel, NoiseType};
pub use container::{read_dataset, write_dataset};
pub use glyph::{gen_blurred_glyphs, gen_blurred_glyphs_named, glyph_mask, GLYPH_SIZE};
pub use idx::{parse_idx, read_idx, read_idx_raw, IdxData};
pub use noise::inject_salt_pepper;
pub use patch::{departchify, grid_side, patchify, patchify_labels, stitch_labels, PatchGrid};
pub use sample::{batch_images, LabelMap, SampleMeta, SegSample};
pub use split::{split_dataset, SplitRatios, SplitSet};
pub use texture::{gen_phase_texture, gen_phase_texture_with, TextureConfig};
