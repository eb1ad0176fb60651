use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sequence::{tokenize_instance, TokenizedInstance};
use super::translate::{translate_instance, TranslationProvider, Translated};
use super::vocab::Vocabulary;
use super::QAInstance;
use crate::error::{Error, Result};

/// One instance rendered in the pivot language and each auxiliary language.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelInstance {
    pub id: String,
    pub source_dataset: String,
    pub pivot: TokenizedInstance,
    pub auxiliaries: Vec<TokenizedInstance>,
}

impl ParallelInstance {
    /// Pivot first, then auxiliaries in order.
    pub fn members(&self) -> Vec<&TokenizedInstance> {
        std::iter::once(&self.pivot).chain(&self.auxiliaries).collect()
    }
}

/// Untokenized text of one member, as stored in corpus files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberText {
    pub language: String,
    pub question: String,
    pub context: String,
    pub answer_text: String,
    pub answer_char_start: usize,
}

/// One line of a parallel-corpus JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelText {
    pub id: String,
    pub source_dataset: String,
    pub members: Vec<MemberText>,
}

impl ParallelText {
    pub fn instance(&self, member: usize) -> QAInstance {
        let m = &self.members[member];
        QAInstance {
            id: self.id.clone(),
            question: m.question.clone(),
            context: m.context.clone(),
            answer_text: m.answer_text.clone(),
            answer_char_start: m.answer_char_start,
            language: m.language.clone(),
            source_dataset: self.source_dataset.clone(),
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.members
            .iter()
            .flat_map(|m| [m.question.as_str(), m.context.as_str()])
    }
}

/// Dropped-instance counts keyed by cause.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub causes: BTreeMap<String, usize>,
}

impl DropReport {
    pub fn record(&mut self, cause: &str) {
        *self.causes.entry(cause.to_string()).or_default() += 1;
    }

    pub fn total(&self) -> usize {
        self.causes.values().sum()
    }

    pub fn merge(&mut self, other: &DropReport) {
        for (k, v) in &other.causes {
            *self.causes.entry(k.clone()).or_default() += v;
        }
    }
}

/// Language-keyed translation providers.
pub type ProviderMap = BTreeMap<String, Box<dyn TranslationProvider>>;

/// Translates every instance into each auxiliary language. `languages[0]`
/// is the pivot; an instance survives only if every translation keeps its
/// answer.
pub fn translate_corpus(
    dataset: &[QAInstance],
    providers: &ProviderMap,
    languages: &[String],
) -> Result<(Vec<ParallelText>, DropReport)> {
    let (pivot, aux) = languages
        .split_first()
        .ok_or_else(|| Error::Config("empty language list".into()))?;
    for lang in aux {
        if !providers.contains_key(lang) {
            return Err(Error::Config(format!("no provider for language {lang}")));
        }
    }
    let results: Vec<Result<Option<ParallelText>>> = dataset
        .par_iter()
        .map(|inst| {
            let mut members = vec![member_text(inst, pivot)];
            for lang in aux {
                match translate_instance(inst, providers[lang].as_ref(), lang)? {
                    Translated::Kept(t) => members.push(member_text(&t, lang)),
                    Translated::AnswerMissing => return Ok(None),
                }
            }
            Ok(Some(ParallelText {
                id: inst.id.clone(),
                source_dataset: inst.source_dataset.clone(),
                members,
            }))
        })
        .collect();
    let mut texts = Vec::with_capacity(dataset.len());
    let mut drops = DropReport::default();
    for r in results {
        match r? {
            Some(t) => texts.push(t),
            None => drops.record("answer_not_found"),
        }
    }
    Ok((texts, drops))
}

fn member_text(inst: &QAInstance, language: &str) -> MemberText {
    MemberText {
        language: language.to_string(),
        question: inst.question.clone(),
        context: inst.context.clone(),
        answer_text: inst.answer_text.clone(),
        answer_char_start: inst.answer_char_start,
    }
}

fn drop_cause(err: &Error) -> Option<&'static str> {
    match err {
        Error::Alignment(_) | Error::InvalidSpan { .. } => Some("alignment"),
        Error::AnswerTruncated { .. } => Some("answer_truncated"),
        Error::QuestionTooLong { .. } => Some("question_too_long"),
        Error::EmptyQuestion => Some("empty_question"),
        _ => None,
    }
}

/// Tokenizes every member; an instance survives only if all members align
/// and fit `max_len`. Returns the survivors together with their texts.
pub fn tokenize_corpus(
    texts: Vec<ParallelText>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<ParallelInstance>, Vec<ParallelText>, DropReport)> {
    let results: Vec<Result<std::result::Result<ParallelInstance, &'static str>>> = texts
        .par_iter()
        .map(|t| {
            let mut members = Vec::with_capacity(t.members.len());
            for i in 0..t.members.len() {
                match tokenize_instance(&t.instance(i), vocab, max_len) {
                    Ok(seq) => members.push(seq),
                    Err(e) => match drop_cause(&e) {
                        Some(cause) => return Ok(Err(cause)),
                        None => return Err(e),
                    },
                }
            }
            let mut members = members.into_iter();
            let pivot = members
                .next()
                .ok_or_else(|| Error::Config(format!("instance {} has no members", t.id)))?;
            Ok(Ok(ParallelInstance {
                id: t.id.clone(),
                source_dataset: t.source_dataset.clone(),
                pivot,
                auxiliaries: members.collect(),
            }))
        })
        .collect();
    let mut instances = Vec::new();
    let mut kept = Vec::new();
    let mut drops = DropReport::default();
    for (r, text) in results.into_iter().zip(texts) {
        match r? {
            Ok(inst) => {
                instances.push(inst);
                kept.push(text);
            }
            Err(cause) => drops.record(cause),
        }
    }
    Ok((instances, kept, drops))
}

#[derive(Clone, Debug)]
pub struct CorpusBuild {
    pub instances: Vec<ParallelInstance>,
    pub texts: Vec<ParallelText>,
    pub drops: DropReport,
}

/// Translation followed by tokenization; output order follows input order.
pub fn build_parallel_corpus(
    dataset: &[QAInstance],
    providers: &ProviderMap,
    languages: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<CorpusBuild> {
    let (texts, mut drops) = translate_corpus(dataset, providers, languages)?;
    let (instances, texts, more) = tokenize_corpus(texts, vocab, max_len)?;
    drops.merge(&more);
    Ok(CorpusBuild {
        instances,
        texts,
        drops,
    })
}

pub fn write_jsonl(path: &Path, texts: &[ParallelText]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in texts {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ParallelText>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
