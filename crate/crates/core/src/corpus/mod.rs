//! Dataset ingestion and multilingual parallel-corpus construction.

mod parallel;
mod sequence;
mod squad;
mod translate;
mod vocab;

use serde::{Deserialize, Serialize};

pub use parallel::{
    build_parallel_corpus, read_jsonl, tokenize_corpus, translate_corpus, write_jsonl,
    CorpusBuild, DropReport, MemberText, ParallelInstance, ParallelText, ProviderMap,
};
pub use sequence::{build_input_sequence, tokenize_instance, TokenizedInstance};
pub use squad::{load_gold, parse_squad, serialize_squad, GoldEntry, SquadParse};
pub use translate::{
    parse_provider, translate_instance, ChainProvider, CipherProvider, CommandProvider,
    IdentityProvider, TranslationProvider, Translated,
};
pub use vocab::{align_answer, segment, Token, Vocabulary, CLS, PAD, SEP, UNK};

/// One extractive QA example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answer_text: String,
    /// Character (not byte) offset of the answer in `context`.
    pub answer_char_start: usize,
    pub language: String,
    pub source_dataset: String,
}

impl QAInstance {
    /// Whether `answer_text` sits at `answer_char_start` in the context.
    pub fn answer_matches(&self) -> bool {
        let n = self.answer_text.chars().count();
        n > 0
            && self
                .context
                .chars()
                .skip(self.answer_char_start)
                .take(n)
                .eq(self.answer_text.chars())
    }
}
