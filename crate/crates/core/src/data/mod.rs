//! Tokenization, vocabularies, dataset files, fusion and synthetic data.

pub mod dataset;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use dataset::{
    fuse_datasets, fusion_ratio, load_dataset, load_dataset_with, load_features, mean_ratings,
    parse_dataset, parse_features, save_dataset, to_jsonl, Dataset, Example, FeatureRecord,
    Ratings,
};
pub use synth::{classword, synth_general, synth_generate, GeneralConfig, SynthConfig};
pub use tokenize::{tokenize, Tokenizer};
pub use vocab::{ClasswordRegistry, Vocabulary, END, START, UNK};
