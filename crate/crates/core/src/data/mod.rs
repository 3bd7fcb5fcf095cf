//! Corpus types, vocabulary, and the synthetic scene generator.

mod dataset;
mod synth;
mod vocab;

pub use dataset::{
    batches, CaptionEntry, CaptionRecord, Dataset, Example, ImageRecord, RegionFeatureSet, Split,
    Style,
};
pub use synth::{
    scene_features, synth_captions, synth_corpus, synth_scenes, CaptionConfig, CorpusConfig,
    Scene, SceneConfig, SceneObject, StyleGroup, StyleLexicon,
};
pub use vocab::{Vocabulary, BEGIN, END, PAD, RESERVED, UNKNOWN};
