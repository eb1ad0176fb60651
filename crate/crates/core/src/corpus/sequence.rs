use serde::{Deserialize, Serialize};

use super::vocab::{align_answer, Token, Vocabulary};
use super::QAInstance;
use crate::error::{Error, Result};

/// `[CLS] question [SEP] passage [SEP]` with the gold span as indices into
/// the full sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedInstance {
    pub input_ids: Vec<usize>,
    /// 0 for `[CLS]`, question and first `[SEP]`; 1 for passage and last `[SEP]`.
    pub token_types: Vec<usize>,
    pub answer_span: (usize, usize),
    /// Character span per token: into the question for question tokens, into
    /// the context for passage tokens, `None` for markers.
    pub char_offsets: Vec<Option<(usize, usize)>>,
    pub language: String,
    pub context: String,
    pub answer_text: String,
    question_len: usize,
}

impl TokenizedInstance {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Sequence positions of passage tokens.
    pub fn passage_range(&self) -> std::ops::Range<usize> {
        self.question_len + 2..self.input_ids.len() - 1
    }

    /// Context substring covered by tokens `start..=end`.
    pub fn span_text(&self, start: usize, end: usize) -> Option<String> {
        let passage = self.passage_range();
        if start > end || !passage.contains(&start) || !passage.contains(&end) {
            return None;
        }
        let (b, _) = self.char_offsets[start]?;
        let (_, e) = self.char_offsets[end]?;
        Some(self.context.chars().skip(b).take(e - b).collect())
    }

    /// Same content tagged with another language.
    pub fn with_language(mut self, language: &str) -> Self {
        self.language = language.to_string();
        self
    }
}

/// Assembles `[CLS] q [SEP] p [SEP]`, truncating the passage from the right
/// to fit `max_len`. `answer` indexes passage tokens; the result indexes the
/// full sequence. Language and texts are left empty for the caller.
pub fn build_input_sequence(
    question: &[Token],
    passage: &[Token],
    answer: (usize, usize),
    max_len: usize,
) -> Result<TokenizedInstance> {
    if question.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    if question.len() + 3 > max_len {
        return Err(Error::QuestionTooLong {
            len: question.len(),
            max_len,
        });
    }
    let room = max_len - question.len() - 3;
    let (s, e) = answer;
    if s > e || e >= passage.len() {
        return Err(Error::InvalidSpan {
            start: s,
            end: e,
            len: passage.len(),
        });
    }
    if e >= room {
        return Err(Error::AnswerTruncated {
            needed: question.len() + 2 + e + 2,
            max_len,
        });
    }
    let kept = &passage[..passage.len().min(room)];
    let len = question.len() + kept.len() + 3;
    let mut input_ids = Vec::with_capacity(len);
    let mut token_types = Vec::with_capacity(len);
    let mut char_offsets = Vec::with_capacity(len);

    input_ids.push(Vocabulary::CLS_ID);
    token_types.push(0);
    char_offsets.push(None);
    for t in question {
        input_ids.push(t.id);
        token_types.push(0);
        char_offsets.push(Some((t.begin, t.end)));
    }
    input_ids.push(Vocabulary::SEP_ID);
    token_types.push(0);
    char_offsets.push(None);
    for t in kept {
        input_ids.push(t.id);
        token_types.push(1);
        char_offsets.push(Some((t.begin, t.end)));
    }
    input_ids.push(Vocabulary::SEP_ID);
    token_types.push(1);
    char_offsets.push(None);

    let shift = question.len() + 2;
    Ok(TokenizedInstance {
        input_ids,
        token_types,
        answer_span: (s + shift, e + shift),
        char_offsets,
        language: String::new(),
        context: String::new(),
        answer_text: String::new(),
        question_len: question.len(),
    })
}

/// Tokenizes, aligns and sequences one instance.
pub fn tokenize_instance(
    inst: &QAInstance,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenizedInstance> {
    let q = vocab.tokenize(&inst.question);
    let p = vocab.tokenize(&inst.context);
    let answer_len = inst.answer_text.chars().count();
    let span = align_answer(&p, inst.answer_char_start, answer_len)?;
    let mut seq = build_input_sequence(&q, &p, span, max_len)?;
    seq.language = inst.language.clone();
    seq.context = inst.context.clone();
    seq.answer_text = inst.answer_text.clone();
    Ok(seq)
}
