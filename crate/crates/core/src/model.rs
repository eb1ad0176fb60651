//! Parameter registry and forward passes tying encoder, MAA and span heads
//! together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelInstance;
use crate::encoder::{encode, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::maa::{maa_forward, MaaConfig, MaaParams, MaaVars};
use crate::objective::{
    alpha, decode_span, instance_loss, source_coefficients, span_distributions,
    span_representation, HeadVars, SpanHeads, SpanPrediction,
};
use crate::similarity::WeightTable;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub maa: MaaConfig,
    /// Auxiliary languages per instance.
    pub auxiliaries: usize,
    /// Include the α-weighted auxiliary losses in the objective.
    pub auxiliary_loss: bool,
    pub max_answer_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            maa: MaaConfig::default(),
            auxiliaries: 2,
            auxiliary_loss: true,
            max_answer_len: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub maa: MaaParams,
    pub heads: SpanHeads,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub maa: MaaVars,
    pub heads: HeadVars,
}

impl ModelVars {
    /// Inverse of [`ModelVars::flatten`] for a model with `layers` blocks.
    pub fn from_flat(layers: usize, v: &[Var]) -> Result<Self> {
        let enc = EncoderVars::flat_len(layers);
        if v.len() != enc + 8 {
            return Err(Error::Config(format!(
                "expected {} vars, got {}",
                enc + 8,
                v.len()
            )));
        }
        let m = &v[enc..];
        Ok(ModelVars {
            encoder: EncoderVars::from_flat(layers, &v[..enc]),
            maa: MaaVars {
                w_c: m[0],
                b_c: m[1],
                ln_gain: m[2],
                ln_bias: m[3],
            },
            heads: HeadVars {
                w_start: m[4],
                b_start: m[5],
                w_end: m[6],
                b_end: m[7],
            },
        })
    }

    /// Vars in the order of [`Model::named`].
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = self.encoder.flatten();
        out.extend(self.maa.flatten());
        out.extend(self.heads.flatten());
        out
    }
}

impl Model {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let h = config.encoder.hidden;
        if h == 0 || config.encoder.vocab_size == 0 || config.encoder.max_len == 0 {
            return Err(Error::Config(
                "hidden, vocab_size and max_len must be positive".into(),
            ));
        }
        if h % config.encoder.heads.max(1) != 0 || h % config.maa.heads.max(1) != 0 {
            return Err(Error::Config(format!(
                "hidden size {h} must be divisible by the head counts"
            )));
        }
        if config.auxiliaries == 0 {
            return Err(Error::Config("at least one auxiliary language".into()));
        }
        let encoder = EncoderParams::init(&config.encoder, rng);
        let maa = MaaParams::init(h, config.auxiliaries, rng);
        let heads = SpanHeads::init(2 * h, rng);
        Ok(Model {
            config,
            encoder,
            maa,
            heads,
        })
    }

    /// All parameters in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        out.extend(self.maa.named());
        out.extend(self.heads.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_mut();
        out.extend(self.maa.named_mut());
        out.extend(self.heads.named_mut());
        out
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelVars {
        ModelVars {
            encoder: EncoderVars::bind(&self.encoder, tape),
            maa: MaaVars::bind(&self.maa, tape),
            heads: HeadVars::bind(&self.heads, tape),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Differentiable pieces of one instance's contribution to the objective.
#[derive(Clone, Debug)]
pub struct InstanceTerms {
    /// Span loss of the pivot member.
    pub source: Var,
    /// Span loss of each auxiliary member re-pivoted; empty when the
    /// auxiliary loss is off.
    pub aux: Vec<Var>,
    /// Translation-quality coefficient per auxiliary (detached).
    pub alphas: Vec<f64>,
}

fn check_members(config: &ModelConfig, inst: &ParallelInstance) -> Result<()> {
    if inst.auxiliaries.len() != config.auxiliaries {
        return Err(Error::Config(format!(
            "instance {} has {} auxiliaries, model expects {}",
            inst.id,
            inst.auxiliaries.len(),
            config.auxiliaries
        )));
    }
    Ok(())
}

/// Span distributions for member `pivot` of `bs`, the others attending in
/// their original order.
fn distributions_for(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    config: &ModelConfig,
    bs: &[Var],
    pivot: usize,
) -> Result<(Var, Var)> {
    let others: Vec<Var> = bs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pivot)
        .map(|(_, &b)| b)
        .collect();
    let out = maa_forward(tape, bs[pivot], &others, &vars.maa, &config.maa)?;
    span_distributions(tape, out.g, &vars.heads)
}

/// Builds the source loss, the re-pivoted auxiliary losses and α values.
pub fn instance_terms(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    config: &ModelConfig,
    inst: &ParallelInstance,
) -> Result<InstanceTerms> {
    check_members(config, inst)?;
    let members = inst.members();
    let bs = members
        .iter()
        .map(|m| encode(tape, &vars.encoder, &config.encoder, m))
        .collect::<Result<Vec<_>>>()?;
    let (ps, pe) = distributions_for(tape, vars, config, &bs, 0)?;
    let source = instance_loss(tape, ps, pe, members[0].answer_span)?;
    let mut aux = Vec::new();
    let mut alphas = Vec::new();
    if config.auxiliary_loss {
        let h_s = span_representation(tape.value(bs[0]), members[0].answer_span)?;
        for r in 1..members.len() {
            let h_r = span_representation(tape.value(bs[r]), members[r].answer_span)?;
            alphas.push(alpha(&h_s, &h_r)?);
            let (ps, pe) = distributions_for(tape, vars, config, &bs, r)?;
            aux.push(instance_loss(tape, ps, pe, members[r].answer_span)?);
        }
    }
    Ok(InstanceTerms {
        source,
        aux,
        alphas,
    })
}

/// Scalar weights turning per-instance terms into the batch objective.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchWeights {
    /// Per instance: `weight_d / n_d`.
    pub source: Vec<f64>,
    /// Per auxiliary: batch-mean α.
    pub alpha_mean: Vec<f64>,
    /// Per auxiliary: `alpha_mean / K`, applied to every instance's loss.
    pub aux: Vec<f64>,
}

pub fn batch_weights(
    datasets: &[&str],
    alphas: &[Vec<f64>],
    weights: &WeightTable,
) -> Result<BatchWeights> {
    let source = source_coefficients(datasets, weights)?;
    let k = datasets.len() as f64;
    let n_aux = alphas.first().map_or(0, Vec::len);
    let alpha_mean: Vec<f64> = (0..n_aux)
        .map(|r| alphas.iter().map(|a| a[r]).sum::<f64>() / k)
        .collect();
    let aux = alpha_mean.iter().map(|a| a / k).collect();
    Ok(BatchWeights {
        source,
        alpha_mean,
        aux,
    })
}

/// `c_s·source + Σ_R c_R·aux_R` for instance `index` of the batch.
pub fn weighted_terms(
    tape: &mut Tape<'_>,
    terms: &InstanceTerms,
    weights: &BatchWeights,
    index: usize,
) -> Result<Var> {
    let mut acc = tape.scale(terms.source, weights.source[index]);
    for (&l, &c) in terms.aux.iter().zip(&weights.aux) {
        let scaled = tape.scale(l, c);
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}

/// Batch statistics reported alongside the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub total: f64,
    pub source: f64,
    pub alpha: Vec<f64>,
    pub aux: Vec<f64>,
}

pub fn batch_stats(
    source_values: &[f64],
    aux_values: &[Vec<f64>],
    weights: &BatchWeights,
) -> BatchStats {
    let k = source_values.len() as f64;
    let source: f64 = source_values
        .iter()
        .zip(&weights.source)
        .map(|(l, c)| l * c)
        .sum();
    let aux: Vec<f64> = (0..weights.alpha_mean.len())
        .map(|r| aux_values.iter().map(|a| a[r]).sum::<f64>() / k)
        .collect();
    let total = source
        + weights
            .alpha_mean
            .iter()
            .zip(&aux)
            .map(|(a, l)| a * l)
            .sum::<f64>();
    BatchStats {
        total,
        source,
        alpha: weights.alpha_mean.clone(),
        aux,
    }
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub loss: Var,
    pub stats: BatchStats,
    /// α per instance and auxiliary, as used in the loss.
    pub alphas: Vec<Vec<f64>>,
}

/// The whole batch objective on one tape; used for gradient checking and as
/// a reference for the parallel training step. `frozen_alphas` replaces the
/// computed α values. Because α carries no gradient, finite differences only
/// agree with backprop when α is held at its base-point value.
pub fn batch_objective(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    config: &ModelConfig,
    batch: &[&ParallelInstance],
    weights: &WeightTable,
    frozen_alphas: Option<&[Vec<f64>]>,
) -> Result<BatchOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let terms = batch
        .iter()
        .map(|inst| instance_terms(tape, vars, config, inst))
        .collect::<Result<Vec<_>>>()?;
    let datasets: Vec<&str> = batch.iter().map(|b| b.source_dataset.as_str()).collect();
    let alphas: Vec<Vec<f64>> = match frozen_alphas {
        Some(a) if a.len() == terms.len() => a.to_vec(),
        Some(a) => {
            return Err(Error::Config(format!(
                "{} frozen α rows for a batch of {}",
                a.len(),
                terms.len()
            )))
        }
        None => terms.iter().map(|t| t.alphas.clone()).collect(),
    };
    let bw = batch_weights(&datasets, &alphas, weights)?;
    let mut total: Option<Var> = None;
    for (i, t) in terms.iter().enumerate() {
        let w = weighted_terms(tape, t, &bw, i)?;
        total = Some(match total {
            None => w,
            Some(acc) => tape.add(acc, w)?,
        });
    }
    let sources: Vec<f64> = terms.iter().map(|t| tape.scalar(t.source)).collect();
    let auxes: Vec<Vec<f64>> = terms
        .iter()
        .map(|t| t.aux.iter().map(|&v| tape.scalar(v)).collect())
        .collect();
    let stats = batch_stats(&sources, &auxes, &bw);
    Ok(BatchOutput {
        loss: total.expect("nonempty batch"),
        stats,
        alphas,
    })
}

/// Span prediction for the pivot member.
pub fn predict(model: &Model, inst: &ParallelInstance) -> Result<SpanPrediction> {
    check_members(&model.config, inst)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let bs = inst
        .members()
        .iter()
        .map(|m| encode(&mut tape, &vars.encoder, &model.config.encoder, m))
        .collect::<Result<Vec<_>>>()?;
    let (ps, pe) = distributions_for(&mut tape, &vars, &model.config, &bs, 0)?;
    decode_span(
        tape.value(ps).data(),
        tape.value(pe).data(),
        inst.pivot.passage_range(),
        model.config.max_answer_len,
    )
}

/// Predicted answer text of the pivot member.
pub fn predict_text(model: &Model, inst: &ParallelInstance) -> Result<String> {
    let p = predict(model, inst)?;
    Ok(inst.pivot.span_text(p.start, p.end).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_input_sequence, Token, TokenizedInstance};
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(ids: &[usize]) -> Vec<Token> {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| Token {
                id,
                text: String::new(),
                begin: i,
                end: i + 1,
            })
            .collect()
    }

    fn member(q: &[usize], p: &[usize], span: (usize, usize)) -> TokenizedInstance {
        build_input_sequence(&toks(q), &toks(p), span, 16).unwrap()
    }

    fn instance(ds: &str, shift: usize) -> ParallelInstance {
        ParallelInstance {
            id: format!("{ds}{shift}"),
            source_dataset: ds.into(),
            pivot: member(&[4, 5], &[6 + shift, 7, 8], (1, 1)),
            auxiliaries: vec![
                member(&[9, 5], &[10, 11 + shift, 12, 13], (1, 2)),
                member(&[4], &[14, 15], (0, 0)),
            ],
        }
    }

    fn config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                hidden: 8,
                layers: 1,
                heads: 2,
                max_len: 16,
                vocab_size: 20,
                embed_std: 0.5,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn registry_orders_agree() {
        let model = Model::init(config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let flat = vars.flatten();
        let named = model.named();
        assert_eq!(flat.len(), named.len());
        for (v, (name, t)) in flat.iter().zip(&named) {
            assert_eq!(tape.value(*v), *t, "{name}");
        }
    }

    #[test]
    fn zero_alpha_means_source_only() {
        let model = Model::init(config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let inst = instance("a", 0);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let terms = instance_terms(&mut tape, &vars, &model.config, &inst).unwrap();
        assert_eq!(terms.aux.len(), 2);
        assert!(terms.alphas.iter().all(|a| (0.0..=1.0).contains(a)));
        let bw = BatchWeights {
            source: vec![1.0],
            alpha_mean: vec![0.0, 0.0],
            aux: vec![0.0, 0.0],
        };
        let total = weighted_terms(&mut tape, &terms, &bw, 0).unwrap();
        assert_eq!(tape.scalar(total), tape.scalar(terms.source));
    }

    #[test]
    fn batch_objective_matches_stats() {
        let model = Model::init(config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let weights = WeightTable {
            weights: [("a".to_string(), 0.75), ("b".to_string(), 0.25)].into(),
        };
        let insts = [instance("a", 0), instance("b", 1), instance("a", 2)];
        let batch: Vec<&ParallelInstance> = insts.iter().collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out =
            batch_objective(&mut tape, &vars, &model.config, &batch, &weights, None).unwrap();
        assert!((tape.scalar(out.loss) - out.stats.total).abs() < 1e-12);
        assert!(out.stats.total >= out.stats.source);
        assert_eq!(out.stats.alpha.len(), 2);
    }

    #[test]
    fn aux_loss_off_leaves_source() {
        let cfg = ModelConfig {
            auxiliary_loss: false,
            ..config()
        };
        let model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let weights = WeightTable::uniform(&["a"]).unwrap();
        let inst = instance("a", 0);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out =
            batch_objective(&mut tape, &vars, &model.config, &[&inst], &weights, None).unwrap();
        assert_eq!(tape.scalar(out.loss), out.stats.source);
        assert!(out.stats.alpha.is_empty());
    }

    #[test]
    fn objective_gradcheck() {
        let model = Model::init(config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let weights = WeightTable {
            weights: [("a".to_string(), 0.6), ("b".to_string(), 0.4)].into(),
        };
        let insts = [instance("a", 0), instance("b", 1)];
        let batch: Vec<&ParallelInstance> = insts.iter().collect();
        let params: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
        let mut base = Tape::new();
        let vars = model.bind(&mut base);
        let frozen = batch_objective(&mut base, &vars, &model.config, &batch, &weights, None)
            .unwrap()
            .alphas;
        assert!(frozen.iter().flatten().any(|&a| a > 0.0));
        let report = gradcheck(
            |tape, v| {
                let vars = ModelVars::from_flat(1, v)?;
                let out =
                    batch_objective(tape, &vars, &model.config, &batch, &weights, Some(&frozen))?;
                Ok(out.loss)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn prediction_is_inside_passage() {
        let model = Model::init(config(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let inst = instance("a", 0);
        let p = predict(&model, &inst).unwrap();
        assert!(inst.pivot.passage_range().contains(&p.start));
        assert!(p.start <= p.end && p.end < inst.pivot.passage_range().end);
    }
}
