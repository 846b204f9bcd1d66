//! Procedural multilingual word images: three disjoint synthetic scripts
//! over one shared lexicon, with seeded writing-style distortions.

mod dataset;
mod glyphs;
mod lexicon;
pub mod pgm;
mod render;

pub use dataset::{
    build_manifest, check_invariants, generate_dataset, manifest_path, read_dataset, synthesize,
    write_dataset, Dataset, DatasetConfig, DatasetManifest, ManifestHeader, ManifestRecord, Sample,
    Split, SplitSizes, StyleRange, StyleSplitSpec, MANIFEST_FILE,
};
pub use glyphs::{script_for, supported_languages, Glyph, Polyline, Script};
pub use lexicon::{Lexicon, MAX_WORD_LEN, MIN_WORD_LEN};
pub use render::{layout_word, rasterize, render_word, Canvas, GrayImage, StyleParams};
