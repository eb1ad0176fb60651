//! End-to-end synthetic runs: build the corpora, weight the datasets,
//! train, and score the held-out set and the zero-shot target.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{run_xlg, EvalReport};
use crate::similarity::{build_question_document, similarity_report, WeightTable};
use crate::synth::{build_experiment, DatasetSpec, Experiment, SynthConfig, SynthWorld};
use crate::trainer::{Corpora, TraceRow, TrainConfig, Trainer};

/// Datasets of one synthetic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpecs {
    pub train: Vec<DatasetSpec>,
    pub heldout: DatasetSpec,
    pub target: DatasetSpec,
}

impl Default for ExperimentSpecs {
    /// Two training datasets that each cover one marker pair and one
    /// question pool; held-out and target sets mix both.
    fn default() -> Self {
        ExperimentSpecs {
            train: vec![
                DatasetSpec::new("syn-a", 1000, &[0], &[0]),
                DatasetSpec::new("syn-b", 1000, &[1], &[1]),
            ],
            heldout: DatasetSpec::new("syn-held", 200, &[0, 1], &[0, 1]),
            target: DatasetSpec::new("syn-target", 200, &[0, 1], &[0, 1]),
        }
    }
}

/// Training setup for the synthetic corpora. The encoder is trained from
/// scratch, so the learning rate is far above the fine-tuning default.
pub fn synthetic_train_config(vocab_size: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        lr0: 3e-3,
        total_steps: 1000,
        pivot_unk_rate: 0.5,
        max_grad_norm: Some(1.0),
        ..TrainConfig::default()
    };
    cfg.model.encoder.vocab_size = vocab_size;
    cfg
}

pub fn generate(synth: &SynthConfig, specs: &ExperimentSpecs, max_len: usize) -> Result<Experiment> {
    let world = SynthWorld::new(synth.clone())?;
    build_experiment(&world, &specs.train, &specs.heldout, &specs.target, max_len)
}

/// Similarity weights of the training datasets against the target's
/// pivot-language questions.
pub fn experiment_weights(exp: &Experiment) -> Result<WeightTable> {
    let docs = exp
        .train_raw
        .iter()
        .map(|(_, raw)| build_question_document(raw))
        .collect::<Result<Vec<_>>>()?;
    let target = build_question_document(&exp.target_pivot)?;
    let report = similarity_report(&docs, &target)?;
    Ok(WeightTable {
        weights: report.into_iter().map(|(id, e)| (id, e.normalized)).collect(),
    })
}

/// Training corpora restricted to the datasets carrying a weight.
pub fn corpora(exp: &Experiment, weights: &WeightTable) -> Result<Corpora> {
    let out: Corpora = exp
        .train
        .iter()
        .filter(|(id, _)| weights.weights.contains_key(id))
        .map(|(id, b)| (id.clone(), b.instances.clone()))
        .collect();
    if let Some(id) = weights.weights.keys().find(|id| !out.contains_key(*id)) {
        return Err(Error::MissingWeight(format!("{id} has a weight but no corpus")));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub trainer: Trainer,
    pub heldout: EvalReport,
    pub target: EvalReport,
}

impl RunOutcome {
    pub fn trace(&self) -> &[TraceRow] {
        &self.trainer.trace
    }
}

pub fn train_and_evaluate(
    exp: &Experiment,
    config: TrainConfig,
    weights: WeightTable,
) -> Result<RunOutcome> {
    let data = corpora(exp, &weights)?;
    let train_ids: Vec<String> = data.keys().cloned().collect();
    let mut trainer = Trainer::new(config, weights)?;
    trainer.run(&data, None)?;
    let heldout = run_xlg(&trainer.model, &train_ids, &exp.heldout.instances, false)?;
    let target = run_xlg(&trainer.model, &train_ids, &exp.target.instances, false)?;
    Ok(RunOutcome {
        trainer,
        heldout,
        target,
    })
}

/// Per-dataset sizes, for logging.
pub fn corpus_sizes(exp: &Experiment) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = exp
        .train
        .iter()
        .map(|(id, b)| (id.clone(), b.instances.len()))
        .collect();
    out.insert("heldout".into(), exp.heldout.instances.len());
    out.insert("target".into(), exp.target.instances.len());
    out
}
