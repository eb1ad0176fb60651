//! Task-level dataset weights from TF-IDF question documents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{segment, QAInstance};
use crate::error::{Error, Result};
use crate::tensor::cosine_slices;

/// Bag of question tokens for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionDocument {
    pub dataset_id: String,
    pub counts: BTreeMap<String, usize>,
}

impl QuestionDocument {
    pub fn from_questions<'q>(
        dataset_id: &str,
        questions: impl IntoIterator<Item = &'q str>,
    ) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for q in questions {
            for (tok, _, _) in segment(q) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "{dataset_id}: no question tokens"
            )));
        }
        Ok(QuestionDocument {
            dataset_id: dataset_id.to_string(),
            counts,
        })
    }
}

/// Question document of a dataset, named after the first instance's
/// `source_dataset`.
pub fn build_question_document(dataset: &[QAInstance]) -> Result<QuestionDocument> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::EmptyDataset("no instances".into()))?;
    QuestionDocument::from_questions(
        &first.source_dataset,
        dataset.iter().map(|d| d.question.as_str()),
    )
}

pub type TfidfVector = BTreeMap<String, f64>;

/// Raw term frequency times smoothed idf `ln((1+N)/(1+df)) + 1`.
pub fn tfidf(documents: &[QuestionDocument]) -> Vec<TfidfVector> {
    let n = documents.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for d in documents {
        for term in d.counts.keys() {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    documents
        .iter()
        .map(|d| {
            d.counts
                .iter()
                .map(|(term, &tf)| {
                    let idf = ((1.0 + n) / (1.0 + df[term.as_str()] as f64)).ln() + 1.0;
                    (term.clone(), tf as f64 * idf)
                })
                .collect()
        })
        .collect()
}

/// Cosine over the union of terms; 0 when either vector is zero.
pub fn raw_weight(v_i: &TfidfVector, v_t: &TfidfVector) -> f64 {
    let terms: std::collections::BTreeSet<&String> = v_i.keys().chain(v_t.keys()).collect();
    let a: Vec<f64> = terms.iter().map(|t| v_i.get(*t).copied().unwrap_or(0.0)).collect();
    let b: Vec<f64> = terms.iter().map(|t| v_t.get(*t).copied().unwrap_or(0.0)).collect();
    cosine_slices(&a, &b).map(|c| c.value).unwrap_or(0.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub weights: BTreeMap<String, f64>,
}

impl WeightTable {
    pub fn uniform<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyDataset("no datasets to weight".into()));
        }
        let w = 1.0 / ids.len() as f64;
        Ok(WeightTable {
            weights: ids.iter().map(|s| (s.as_ref().to_string(), w)).collect(),
        })
    }

    pub fn get(&self, id: &str) -> Result<f64> {
        self.weights
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingWeight(id.to_string()))
    }

    /// Drops `id` and re-normalizes the survivors.
    pub fn without(&self, id: &str) -> Result<Self> {
        let mut raw = self.weights.clone();
        raw.remove(id)
            .ok_or_else(|| Error::MissingWeight(id.to_string()))?;
        normalize_weights(&raw)
    }
}

/// Divides each raw weight by the total.
pub fn normalize_weights(raw: &BTreeMap<String, f64>) -> Result<WeightTable> {
    if let Some((id, w)) = raw.iter().find(|(_, w)| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeight(format!("{id}: {w}")));
    }
    let total: f64 = raw.values().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(WeightTable {
        weights: raw.iter().map(|(k, v)| (k.clone(), v / total)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub raw: f64,
    pub normalized: f64,
}

/// Raw and normalized weights of each training document against `target`.
/// The target takes part in document-frequency counting.
pub fn similarity_report(
    training: &[QuestionDocument],
    target: &QuestionDocument,
) -> Result<BTreeMap<String, WeightEntry>> {
    let mut docs = training.to_vec();
    docs.push(target.clone());
    let vectors = tfidf(&docs);
    let (target_vec, train_vecs) = vectors.split_last().expect("target present");
    let raw: BTreeMap<String, f64> = training
        .iter()
        .zip(train_vecs)
        .map(|(d, v)| (d.dataset_id.clone(), raw_weight(v, target_vec)))
        .collect();
    let table = normalize_weights(&raw)?;
    Ok(raw
        .into_iter()
        .map(|(k, r)| {
            let normalized = table.weights[&k];
            (k, WeightEntry { raw: r, normalized })
        })
        .collect())
}
