//! SQuAD v1.1 shaped JSON: `data → paragraphs → {context, qas → answers}`.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::QAInstance;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SquadParse {
    pub instances: Vec<QAInstance>,
    /// Questions whose first answer did not match the context at its offset.
    pub skipped_mismatch: usize,
    /// Questions without any answer.
    pub skipped_unanswered: usize,
}

impl SquadParse {
    pub fn skipped(&self) -> usize {
        self.skipped_mismatch + self.skipped_unanswered
    }
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

fn field<'v>(obj: &'v Value, key: &str, path: &str) -> Result<&'v Value> {
    obj.as_object()
        .ok_or_else(|| schema(path, "expected an object"))?
        .get(key)
        .ok_or_else(|| schema(path, format!("missing field `{key}`")))
}

fn array<'v>(obj: &'v Value, key: &str, path: &str) -> Result<&'v Vec<Value>> {
    field(obj, key, path)?
        .as_array()
        .ok_or_else(|| schema(&format!("{path}.{key}"), "expected an array"))
}

fn string<'v>(obj: &'v Value, key: &str, path: &str) -> Result<&'v str> {
    field(obj, key, path)?
        .as_str()
        .ok_or_else(|| schema(&format!("{path}.{key}"), "expected a string"))
}

/// Walks every question of a SQuAD document, yielding
/// `(path, context, qa object)`.
fn for_each_qa<'v>(
    doc: &'v Value,
    mut visit: impl FnMut(&str, &'v str, &'v Value) -> Result<()>,
) -> Result<()> {
    for (i, article) in array(doc, "data", "$")?.iter().enumerate() {
        let apath = format!("data[{i}]");
        for (j, para) in array(article, "paragraphs", &apath)?.iter().enumerate() {
            let ppath = format!("{apath}.paragraphs[{j}]");
            let context = string(para, "context", &ppath)?;
            for (k, qa) in array(para, "qas", &ppath)?.iter().enumerate() {
                visit(&format!("{ppath}.qas[{k}]"), context, qa)?;
            }
        }
    }
    Ok(())
}

/// One instance per question, taken from its first answer. Answers whose
/// text does not sit at `answer_start` are skipped and counted.
pub fn parse_squad(doc: &Value, dataset_id: &str, language: &str) -> Result<SquadParse> {
    let mut out = SquadParse::default();
    for_each_qa(doc, |path, context, qa| {
        let question = string(qa, "question", path)?;
        let id = match field(qa, "id", path)? {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(schema(&format!("{path}.id"), "expected a string")),
        };
        let answers = array(qa, "answers", path)?;
        let Some(first) = answers.first() else {
            out.skipped_unanswered += 1;
            return Ok(());
        };
        let apath = format!("{path}.answers[0]");
        let text = string(first, "text", &apath)?;
        let start = field(first, "answer_start", &apath)?
            .as_u64()
            .ok_or_else(|| schema(&format!("{apath}.answer_start"), "expected an integer"))?
            as usize;
        let inst = QAInstance {
            id,
            question: question.to_string(),
            context: context.to_string(),
            answer_text: text.to_string(),
            answer_char_start: start,
            language: language.to_string(),
            source_dataset: dataset_id.to_string(),
        };
        if inst.answer_matches() {
            out.instances.push(inst);
        } else {
            log::warn!("{apath}: answer text not found at offset {start}; skipping");
            out.skipped_mismatch += 1;
        }
        Ok(())
    })?;
    Ok(out)
}

/// Writes instances back into a SQuAD document, one paragraph per instance.
pub fn serialize_squad(instances: &[QAInstance]) -> Value {
    let paragraphs: Vec<Value> = instances
        .iter()
        .map(|inst| {
            json!({
                "context": inst.context,
                "qas": [{
                    "id": inst.id,
                    "question": inst.question,
                    "answers": [{"text": inst.answer_text, "answer_start": inst.answer_char_start}],
                }],
            })
        })
        .collect();
    json!({"version": "1.1", "data": [{"title": "xltt", "paragraphs": paragraphs}]})
}

/// Gold answers for one question.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldEntry {
    pub language: String,
    pub answers: Vec<String>,
}

/// Every answer alternative of every question in an MLQA/SQuAD shaped file.
pub fn load_gold(doc: &Value, language: &str) -> Result<BTreeMap<String, GoldEntry>> {
    let mut gold = BTreeMap::new();
    for_each_qa(doc, |path, _, qa| {
        let id = match field(qa, "id", path)? {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(schema(&format!("{path}.id"), "expected a string")),
        };
        let answers = array(qa, "answers", path)?
            .iter()
            .enumerate()
            .map(|(i, a)| string(a, "text", &format!("{path}.answers[{i}]")).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        gold.insert(
            id,
            GoldEntry {
                language: language.to_string(),
                answers,
            },
        );
        Ok(())
    })?;
    Ok(gold)
}
