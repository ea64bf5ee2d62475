//! Document-structured corpora: vocabularies, talks, batching and the
//! synthetic discourse generator.

mod batch;
mod synth;
mod talk;
mod vocab;

pub use batch::{shuffle_epoch, Batch, EpochPlan, ShuffleStrategy};
pub use synth::{
    connective, expected_connective, make_synthetic_discourse_corpus, reference_translation,
    source_word, target_topic, target_word, SynthConfig, CONNECTIVES, LINK_TOKEN,
};
pub use talk::{
    check_same_structure, encode_talks, format_documents, parse_documents, read_documents,
    split_talk, write_documents, Sentence, Talk, TextTalk, MAX_TALK_SENTENCES,
};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
