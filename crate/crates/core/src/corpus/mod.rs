//! Synthetic scene corpus: rendering, recaptioning and the 9:1 split.

mod caption;
mod image;
mod scene;
mod split;

pub use caption::{
    dialect_a_words, dialect_b_words, raw_caption, recaption, scene_tags, tag_keys, to_dialect_a, tokenize, translate,
    CaptionMode, CaptionRecord, CaptionRewriter, CaptionSource, Dialect, Recaptioner, Tags, DEFAULT_SYSTEM_PROMPT,
    PUNCTUATION, VOCAB_VERSION,
};
pub use image::{batch_tensor, downsample, fit_resolution, psnr, ImageSample};
pub use scene::{
    check_resolution, gen_scene, gen_scene_in, Furniture, FurnitureKind, PaletteColor, Position, RoomType, SceneDomain,
    SceneSpec, Style, MAX_FURNITURE,
};
pub use split::{build_corpus, build_corpus_with, CaptionStyle, CorpusConfig, CorpusItem, CorpusManifest, CorpusSplit};
