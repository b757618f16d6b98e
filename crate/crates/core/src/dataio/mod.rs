//! Corpora, vocabularies, gold trees, expert features and batching.

mod batching;
mod corpus;
mod features;
mod synth;
mod trees;

pub use batching::{make_batches, pick_negative};
pub use corpus::{
    build_vocab, read_corpus, tokenize, write_corpus, CorpusEntry, Punctuation, Vocab, DEFAULT_PUNCT_TOKENS,
    MAX_TRAIN_LEN, UNK,
};
pub use features::{
    known_dim, load_features, read_manifest, Category, ExpertDecl, ExpertFeatures, FeatureManifest, FeatureSet,
    StreamRecord, VideoFeatures, VideoRecord, FEATURE_MAGIC,
};
pub use synth::{synth_corpus, Derivation, GenRule, GeneratorGrammar, Sym, SynthConfig, SynthData, SynthExpert};
pub use trees::{parse_gold_text, parse_gold_tree, read_gold_trees, strip_function_tags, to_labeled_bracketed, GoldTree};

use crate::error::{Error, Result};

/// Rejects corpus entries whose video is absent from the feature set.
pub fn check_references(entries: &[CorpusEntry], features: &FeatureSet) -> Result<()> {
    match entries.iter().find(|e| features.get(&e.video_id).is_none()) {
        Some(e) => Err(Error::input(format!(
            "sentence {} refers to video {} which has no features",
            e.id, e.video_id
        ))),
        None => Ok(()),
    }
}

/// Gold trees must align with the corpus line by line, token for token.
pub fn check_alignment(entries: &[CorpusEntry], gold: &[GoldTree]) -> Result<()> {
    if entries.len() != gold.len() {
        return Err(Error::input(format!(
            "{} sentences but {} gold trees",
            entries.len(),
            gold.len()
        )));
    }
    for (e, g) in entries.iter().zip(gold) {
        if e.tokens != g.tokens {
            return Err(Error::input(format!("gold tree tokens differ from sentence {}", e.id)));
        }
    }
    Ok(())
}
