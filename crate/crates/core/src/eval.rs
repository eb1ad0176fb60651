//! Exact-match / F1 scoring and the zero-shot evaluation protocol.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_general_category::get_general_category;

use crate::corpus::{GoldEntry, ParallelInstance};
use crate::error::{Error, Result};
use crate::model::{predict_text, Model};

fn is_punctuation(c: char) -> bool {
    get_general_category(c).abbreviation().starts_with('P')
}

/// Lowercase, drop punctuation, drop the articles a/an/the, squeeze spaces.
pub fn normalize_answer(text: &str) -> String {
    let lower: String = text
        .to_lowercase()
        .chars()
        .filter(|&c| !is_punctuation(c))
        .collect();
    lower
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn em(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of token-bag precision and recall.
pub fn f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt == gt { 1.0 } else { 0.0 };
    }
    let mut bag: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *bag.entry(t).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(n) = bag.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
    /// Gold instances without a prediction (scored 0).
    pub missing: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub languages: BTreeMap<String, LanguageScore>,
    pub macro_em: f64,
    pub macro_f1: f64,
    /// False when the target overlaps the training data (sanity mode).
    pub zero_shot: bool,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:>8} {:>8} {:>8}\n", "language", "EM", "F1", "count");
        for (lang, s) in &self.languages {
            out += &format!("{:<12} {:>8.2} {:>8.2} {:>8}\n", lang, s.em, s.f1, s.count);
        }
        out += &format!("{:<12} {:>8.2} {:>8.2}\n", "macro", self.macro_em, self.macro_f1);
        if !self.zero_shot {
            out += "note: not zero-shot (target overlaps training data)\n";
        }
        out
    }
}

/// Scores predictions against every gold alternative (keeping the best),
/// averaged per language and scaled to 0..100.
pub fn evaluate(
    predictions: &BTreeMap<String, String>,
    gold: &BTreeMap<String, GoldEntry>,
) -> Result<EvalReport> {
    if let Some(unknown) = predictions.keys().find(|id| !gold.contains_key(*id)) {
        return Err(Error::UnknownId(unknown.clone()));
    }
    let mut sums: BTreeMap<String, (f64, f64, usize, usize)> = BTreeMap::new();
    for (id, entry) in gold {
        let slot = sums.entry(entry.language.clone()).or_default();
        slot.2 += 1;
        match predictions.get(id) {
            Some(pred) => {
                slot.0 += entry.answers.iter().map(|g| em(pred, g)).fold(0.0, f64::max);
                slot.1 += entry.answers.iter().map(|g| f1(pred, g)).fold(0.0, f64::max);
            }
            None => {
                log::warn!("no prediction for {id}; scored as 0");
                slot.3 += 1;
            }
        }
    }
    let languages: BTreeMap<String, LanguageScore> = sums
        .into_iter()
        .map(|(lang, (e, f, n, missing))| {
            let score = LanguageScore {
                em: 100.0 * e / n as f64,
                f1: 100.0 * f / n as f64,
                count: n,
                missing,
            };
            (lang, score)
        })
        .collect();
    let k = languages.len().max(1) as f64;
    Ok(EvalReport {
        macro_em: languages.values().map(|s| s.em).sum::<f64>() / k,
        macro_f1: languages.values().map(|s| s.f1).sum::<f64>() / k,
        languages,
        zero_shot: true,
    })
}

/// Gold entries of the pivot members.
pub fn gold_of(target: &[ParallelInstance]) -> BTreeMap<String, GoldEntry> {
    target
        .iter()
        .map(|t| {
            let entry = GoldEntry {
                language: t.pivot.language.clone(),
                answers: vec![t.pivot.answer_text.clone()],
            };
            (t.id.clone(), entry)
        })
        .collect()
}

pub fn predict_all(model: &Model, target: &[ParallelInstance]) -> Result<BTreeMap<String, String>> {
    let preds = target
        .par_iter()
        .map(|t| Ok((t.id.clone(), predict_text(model, t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(preds.into_iter().collect())
}

/// Enforces the zero-shot protocol: refuses targets whose dataset ids
/// appear in `train_datasets` unless `sanity` is set. Returns whether the
/// evaluation is zero-shot.
pub fn check_zero_shot(
    train_datasets: &[String],
    target: &[ParallelInstance],
    sanity: bool,
) -> Result<bool> {
    let mut overlap: Vec<String> = target
        .iter()
        .map(|t| t.source_dataset.clone())
        .filter(|d| train_datasets.contains(d))
        .collect();
    overlap.sort();
    overlap.dedup();
    if !overlap.is_empty() && !sanity {
        return Err(Error::ZeroShotViolation(overlap));
    }
    Ok(overlap.is_empty() && !sanity)
}

/// Zero-shot evaluation of `model` on `target`, whose instances carry the
/// target sequence as pivot and its translations as auxiliaries, scored
/// against `gold` (by default the pivot answers).
pub fn run_xlg_with_gold(
    model: &Model,
    train_datasets: &[String],
    target: &[ParallelInstance],
    gold: &BTreeMap<String, GoldEntry>,
    sanity: bool,
) -> Result<EvalReport> {
    let zero_shot = check_zero_shot(train_datasets, target, sanity)?;
    let predictions = predict_all(model, target)?;
    let mut report = evaluate(&predictions, gold)?;
    report.zero_shot = zero_shot;
    Ok(report)
}

pub fn run_xlg(
    model: &Model,
    train_datasets: &[String],
    target: &[ParallelInstance],
    sanity: bool,
) -> Result<EvalReport> {
    run_xlg_with_gold(model, train_datasets, target, &gold_of(target), sanity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(entries: &[(&str, &str, &[&str])]) -> BTreeMap<String, GoldEntry> {
        entries
            .iter()
            .map(|(id, lang, answers)| {
                let entry = GoldEntry {
                    language: lang.to_string(),
                    answers: answers.iter().map(|a| a.to_string()).collect(),
                };
                (id.to_string(), entry)
            })
            .collect()
    }

    fn preds(entries: &[(&str, &str)]) -> BTreeMap<String, String> {
        entries.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Cat."), "cat");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  An  apple, a day!  "), "apple day");
        assert_eq!(normalize_answer("«Théâtre» \u{2014} there"), "théâtre there");
        assert_eq!(normalize_answer("them the"), "them");
    }

    #[test]
    fn metric_examples() {
        assert_eq!(em("The Cat.", "the cat"), 1.0);
        assert_eq!(f1("The Cat.", "the cat"), 1.0);
        assert_eq!(em("cat", "dog"), 0.0);
        assert_eq!(em("", "cat"), 0.0);
        assert!((f1("cat sat", "the cat") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1("cat", "dog"), 0.0);
        assert_eq!(f1("", ""), 1.0);
        assert_eq!(f1("the", "cat"), 0.0);
        assert!((f1("a a b", "a b b") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_averages_per_language() {
        let g = gold(&[
            ("1", "en", &["cat"]),
            ("2", "en", &["dog"]),
            ("3", "de", &["Katze", "die Katze"]),
        ]);
        let r = evaluate(&preds(&[("1", "the cat"), ("2", "bird"), ("3", "die katze")]), &g).unwrap();
        assert_eq!(r.languages["en"].f1, 50.0);
        assert_eq!(r.languages["en"].em, 50.0);
        assert_eq!(r.languages["de"].em, 100.0);
        assert_eq!(r.languages.values().map(|s| s.count).sum::<usize>(), 3);
        assert_eq!(r.macro_em, 75.0);
    }

    #[test]
    fn evaluate_missing_and_unknown() {
        let g = gold(&[("1", "en", &["cat"]), ("2", "en", &["dog"])]);
        let r = evaluate(&preds(&[("1", "cat")]), &g).unwrap();
        assert_eq!(r.languages["en"].em, 50.0);
        assert_eq!(r.languages["en"].missing, 1);
        assert!(matches!(
            evaluate(&preds(&[("9", "cat")]), &g),
            Err(Error::UnknownId(id)) if id == "9"
        ));
    }

    #[test]
    fn table_lists_languages() {
        let g = gold(&[("1", "en", &["cat"])]);
        let mut r = evaluate(&preds(&[("1", "cat")]), &g).unwrap();
        r.zero_shot = false;
        let t = r.to_table();
        assert!(t.contains("en") && t.contains("100.00") && t.contains("not zero-shot"));
    }
}
