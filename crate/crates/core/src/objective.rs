//! Span heads, the per-instance and batch losses, the translation-quality
//! coefficient, and answer decoding.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::WeightTable;
use crate::tensor::{cosine_slices, Tape, Tensor, Var};

/// Start and end scoring vectors over `G` rows (`2h×1` each) plus biases.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanHeads {
    pub w_start: Tensor,
    pub b_start: Tensor,
    pub w_end: Tensor,
    pub b_end: Tensor,
}

impl SpanHeads {
    pub fn init<R: Rng>(width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        SpanHeads {
            w_start: Tensor::uniform(width, 1, bound, rng),
            b_start: Tensor::zeros(1, 1),
            w_end: Tensor::uniform(width, 1, bound, rng),
            b_end: Tensor::zeros(1, 1),
        }
    }

    pub fn zeros(width: usize) -> Self {
        SpanHeads {
            w_start: Tensor::zeros(width, 1),
            b_start: Tensor::zeros(1, 1),
            w_end: Tensor::zeros(width, 1),
            b_end: Tensor::zeros(1, 1),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("heads.w_start".into(), &self.w_start),
            ("heads.b_start".into(), &self.b_start),
            ("heads.w_end".into(), &self.w_end),
            ("heads.b_end".into(), &self.b_end),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("heads.w_start".into(), &mut self.w_start),
            ("heads.b_start".into(), &mut self.b_start),
            ("heads.w_end".into(), &mut self.w_end),
            ("heads.b_end".into(), &mut self.b_end),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_start: Var,
    pub b_start: Var,
    pub w_end: Var,
    pub b_end: Var,
}

impl HeadVars {
    pub fn bind<'a>(heads: &'a SpanHeads, tape: &mut Tape<'a>) -> Self {
        HeadVars {
            w_start: tape.param(&heads.w_start),
            b_start: tape.param(&heads.b_start),
            w_end: tape.param(&heads.w_end),
            b_end: tape.param(&heads.b_end),
        }
    }

    pub fn flatten(&self) -> Vec<Var> {
        vec![self.w_start, self.b_start, self.w_end, self.b_end]
    }
}

/// Start and end distributions (`1×L` each) from per-row logits `g·w + b`.
pub fn span_distributions(tape: &mut Tape<'_>, g: Var, heads: &HeadVars) -> Result<(Var, Var)> {
    let mut dist = |w: Var, b: Var| -> Result<Var> {
        let logits = tape.linear(g, w, b)?;
        let row = tape.transpose(logits);
        Ok(tape.row_softmax(row))
    };
    let start = dist(heads.w_start, heads.b_start)?;
    let end = dist(heads.w_end, heads.b_end)?;
    Ok((start, end))
}

/// `-ln p_start[s] - ln p_end[e]`.
pub fn instance_loss(tape: &mut Tape<'_>, p_start: Var, p_end: Var, gold: (usize, usize)) -> Result<Var> {
    let (s, e) = gold;
    if s > e {
        return Err(Error::InvalidSpan {
            start: s,
            end: e,
            len: tape.value(p_start).cols(),
        });
    }
    let ls = tape.nll_of_index(p_start, s)?;
    let le = tape.nll_of_index(p_end, e)?;
    tape.add(ls, le)
}

/// `Σ_i weight_i · mean(losses_i)` over datasets present in the batch.
pub fn weighted_source_loss(
    batch_losses: &BTreeMap<String, Vec<f64>>,
    weights: &WeightTable,
) -> Result<f64> {
    let mut total = 0.0;
    for (id, losses) in batch_losses {
        let w = weights.get(id)?;
        if losses.is_empty() {
            continue;
        }
        total += w * losses.iter().sum::<f64>() / losses.len() as f64;
    }
    Ok(total)
}

/// Per-instance gradient coefficients realizing [`weighted_source_loss`]:
/// `weight_i / n_i` where `n_i` counts batch members from dataset `i`.
pub fn source_coefficients(datasets: &[&str], weights: &WeightTable) -> Result<Vec<f64>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in datasets {
        *counts.entry(d).or_insert(0) += 1;
    }
    datasets
        .iter()
        .map(|d| Ok(weights.get(d)? / counts[d] as f64))
        .collect()
}

/// Mean of rows `s..=e`.
pub fn span_representation(b: &Tensor, span: (usize, usize)) -> Result<Tensor> {
    let (s, e) = span;
    if s > e || e >= b.rows() {
        return Err(Error::InvalidSpan {
            start: s,
            end: e,
            len: b.rows(),
        });
    }
    let mut acc = vec![0.0; b.cols()];
    for r in s..=e {
        for (a, v) in acc.iter_mut().zip(b.row_slice(r)) {
            *a += v;
        }
    }
    let n = (e - s + 1) as f64;
    Ok(Tensor::row(&acc.iter().map(|a| a / n).collect::<Vec<_>>()))
}

/// `max(0, cos(h_s, h_r))`; a plain number, never differentiated.
pub fn alpha(h_s: &Tensor, h_r: &Tensor) -> Result<f64> {
    if h_s.len() != h_r.len() {
        return Err(Error::shape("alpha", h_s.shape(), h_r.shape()));
    }
    Ok(cosine_slices(h_s.data(), h_r.data())?.value.max(0.0))
}

/// `L_s + Σ_R α_R · L_R`.
pub fn total_objective(source_loss: f64, aux: &BTreeMap<String, (f64, f64)>) -> f64 {
    source_loss + aux.values().map(|(a, l)| a * l).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Highest `p_start[s]·p_end[e]` over `s ≤ e < s + max_answer_len` with both
/// ends inside `allowed`. Earlier starts, then earlier ends, win ties.
pub fn decode_span(
    p_start: &[f64],
    p_end: &[f64],
    allowed: Range<usize>,
    max_answer_len: usize,
) -> Result<SpanPrediction> {
    let end_limit = allowed.end.min(p_start.len()).min(p_end.len());
    let mut best: Option<SpanPrediction> = None;
    for s in allowed.start..end_limit {
        for e in s..end_limit.min(s + max_answer_len) {
            let score = p_start[s] * p_end[e];
            if best.is_none_or(|b| score > b.score) {
                best = Some(SpanPrediction { start: s, end: e, score });
            }
        }
    }
    best.ok_or(Error::NoValidSpan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_heads_give_uniform() {
        let heads = SpanHeads::zeros(6);
        let mut t = Tape::new();
        let hv = HeadVars::bind(&heads, &mut t);
        let g = t.constant(Tensor::normal(4, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let (ps, pe) = span_distributions(&mut t, g, &hv).unwrap();
        for p in [ps, pe] {
            assert_eq!(t.value(p).shape(), (1, 4));
            assert!(t.value(p).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
        let loss = instance_loss(&mut t, ps, pe, (1, 2)).unwrap();
        assert!((t.scalar(loss) - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_row_is_certain() {
        let heads = SpanHeads::init(4, &mut ChaCha8Rng::seed_from_u64(2));
        let mut t = Tape::new();
        let hv = HeadVars::bind(&heads, &mut t);
        let g = t.constant(Tensor::row(&[0.1, 2.0, -3.0, 0.5]));
        let (ps, pe) = span_distributions(&mut t, g, &hv).unwrap();
        assert_eq!(t.value(ps).data(), &[1.0]);
        assert_eq!(t.value(pe).data(), &[1.0]);
    }

    #[test]
    fn loss_hand_case() {
        let mut t = Tape::new();
        let ps = t.constant(Tensor::row(&[0.1, 0.2, 0.3, 0.4]));
        let pe = t.constant(Tensor::row(&[0.4, 0.3, 0.2, 0.1]));
        let l = instance_loss(&mut t, ps, pe, (2, 3)).unwrap();
        assert!((t.scalar(l) - (-(0.3f64.ln()) - 0.1f64.ln())).abs() < 1e-12);
        assert!(instance_loss(&mut t, ps, pe, (3, 2)).is_err());
        assert!(instance_loss(&mut t, ps, pe, (0, 4)).is_err());
    }

    #[test]
    fn weighted_loss_cases() {
        let weights = WeightTable {
            weights: [("A".to_string(), 0.75), ("B".to_string(), 0.25)].into(),
        };
        let losses: BTreeMap<String, Vec<f64>> =
            [("A".to_string(), vec![2.0, 4.0]), ("B".to_string(), vec![8.0])].into();
        assert_eq!(weighted_source_loss(&losses, &weights).unwrap(), 4.25);
        let missing: BTreeMap<String, Vec<f64>> = [("C".to_string(), vec![1.0])].into();
        assert!(weighted_source_loss(&missing, &weights).is_err());
        let coef = source_coefficients(&["A", "B", "A"], &weights).unwrap();
        assert_eq!(coef, vec![0.375, 0.25, 0.375]);
        let via_coef: f64 = coef.iter().zip([2.0, 8.0, 4.0]).map(|(c, l)| c * l).sum();
        assert_eq!(via_coef, 4.25);
    }

    #[test]
    fn span_mean_and_alpha() {
        let b = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]]);
        assert_eq!(span_representation(&b, (1, 1)).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(span_representation(&b, (0, 2)).unwrap().data(), &[3.0, 5.0]);
        assert!(span_representation(&b, (2, 3)).is_err());
        let h = Tensor::row(&[1.0, -2.0, 0.5]);
        let neg = h.map(|x| -x);
        assert!((alpha(&h, &h).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(alpha(&h, &neg).unwrap(), 0.0);
        assert_eq!(alpha(&Tensor::row(&[1.0, 0.0]), &Tensor::row(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn total_objective_cases() {
        let zero: BTreeMap<String, (f64, f64)> =
            [("M".to_string(), (0.0, 5.0)), ("N".to_string(), (0.0, 7.0))].into();
        assert_eq!(total_objective(1.5, &zero), 1.5);
        let one: BTreeMap<String, (f64, f64)> =
            [("M".to_string(), (1.0, 2.0)), ("N".to_string(), (1.0, 3.0))].into();
        assert_eq!(total_objective(1.0, &one), 6.0);
    }

    #[test]
    fn decode_cases() {
        let mut ps = vec![0.01; 6];
        let mut pe = vec![0.01; 6];
        ps[2] = 0.9;
        pe[4] = 0.9;
        let p = decode_span(&ps, &pe, 0..6, 3).unwrap();
        assert_eq!((p.start, p.end), (2, 4));
        let p = decode_span(&ps, &pe, 0..6, 1).unwrap();
        assert_eq!(p.start, p.end);
        assert!(decode_span(&ps, &pe, 3..3, 2).is_err());
        let flat = vec![0.25; 4];
        let p = decode_span(&flat, &flat, 1..4, 4).unwrap();
        assert_eq!((p.start, p.end), (1, 1));
    }
}
