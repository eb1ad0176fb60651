//! Small shared multilingual encoder: token + position + segment embeddings
//! followed by pre-norm self-attention blocks and, when there is at least
//! one block, a final layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedInstance;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Standard deviation of the embedding tables at initialization.
    pub embed_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 32,
            layers: 2,
            heads: 1,
            max_len: 128,
            vocab_size: 0,
            embed_std: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub token_emb: Tensor,
    pub position_emb: Tensor,
    pub segment_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    /// Final layer-norm gain and bias; absent for a zero-layer encoder.
    pub final_ln: Option<(Tensor, Tensor)>,
}

fn linear_init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl BlockParams {
    fn init<R: Rng>(h: usize, rng: &mut R) -> Self {
        BlockParams {
            ln1_gain: Tensor::ones(1, h),
            ln1_bias: Tensor::zeros(1, h),
            wq: linear_init(h, h, rng),
            bq: Tensor::zeros(1, h),
            wk: linear_init(h, h, rng),
            wv: linear_init(h, h, rng),
            bv: Tensor::zeros(1, h),
            wo: linear_init(h, h, rng),
            bo: Tensor::zeros(1, h),
            ln2_gain: Tensor::ones(1, h),
            ln2_bias: Tensor::zeros(1, h),
            w1: linear_init(h, 4 * h, rng),
            b1: Tensor::zeros(1, 4 * h),
            w2: linear_init(4 * h, h, rng),
            b2: Tensor::zeros(1, h),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 15] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 15] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl EncoderParams {
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Self {
        let h = config.hidden;
        EncoderParams {
            token_emb: Tensor::normal(config.vocab_size, h, config.embed_std, rng),
            position_emb: Tensor::normal(config.max_len, h, config.embed_std, rng),
            segment_emb: Tensor::normal(2, h, config.embed_std, rng),
            blocks: (0..config.layers).map(|_| BlockParams::init(h, rng)).collect(),
            final_ln: (config.layers > 0).then(|| (Tensor::ones(1, h), Tensor::zeros(1, h))),
        }
    }

    /// Parameters in canonical order with dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("position_emb".to_string(), &self.position_emb),
            ("segment_emb".to_string(), &self.segment_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        if let Some((g, b)) = &self.final_ln {
            out.push(("final_ln_gain".to_string(), g));
            out.push(("final_ln_bias".to_string(), b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), &mut self.token_emb),
            ("position_emb".to_string(), &mut self.position_emb),
            ("segment_emb".to_string(), &mut self.segment_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("block{i}.{n}"), t)),
            );
        }
        if let Some((g, b)) = &mut self.final_ln {
            out.push(("final_ln_gain".to_string(), g));
            out.push(("final_ln_bias".to_string(), b));
        }
        out
    }
}

/// Tape handles for [`BlockParams`], same field order. Keys carry no bias:
/// it would shift every score in a row equally and cancel in the softmax.
#[derive(Clone, Debug)]
pub struct BlockVars {
    vars: [Var; 15],
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub token_emb: Var,
    pub position_emb: Var,
    pub segment_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub final_ln: Option<(Var, Var)>,
}

impl EncoderVars {
    pub fn bind<'a>(params: &'a EncoderParams, tape: &mut Tape<'a>) -> Self {
        EncoderVars {
            token_emb: tape.param(&params.token_emb),
            position_emb: tape.param(&params.position_emb),
            segment_emb: tape.param(&params.segment_emb),
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockVars {
                    vars: b.tensors().map(|(_, t)| tape.param(t)),
                })
                .collect(),
            final_ln: params
                .final_ln
                .as_ref()
                .map(|(g, b)| (tape.param(g), tape.param(b))),
        }
    }

    pub fn flat_len(layers: usize) -> usize {
        if layers == 0 {
            3
        } else {
            5 + 15 * layers
        }
    }

    /// Inverse of [`EncoderVars::flatten`].
    pub fn from_flat(layers: usize, v: &[Var]) -> Self {
        EncoderVars {
            token_emb: v[0],
            position_emb: v[1],
            segment_emb: v[2],
            blocks: (0..layers)
                .map(|i| BlockVars {
                    vars: v[3 + 15 * i..3 + 15 * (i + 1)].try_into().expect("15 vars per block"),
                })
                .collect(),
            final_ln: (layers > 0).then(|| (v[3 + 15 * layers], v[4 + 15 * layers])),
        }
    }

    /// Vars in the order of [`EncoderParams::named`].
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = vec![self.token_emb, self.position_emb, self.segment_emb];
        for b in &self.blocks {
            out.extend_from_slice(&b.vars);
        }
        if let Some((g, b)) = self.final_ln {
            out.extend([g, b]);
        }
        out
    }
}

/// Multi-head scaled dot-product self-attention over `x` (already normed).
fn self_attention(tape: &mut Tape<'_>, x: Var, v: &[Var; 15], heads: usize) -> Result<Var> {
    let [_, _, wq, bq, wk, wv, bv, wo, bo, ..] = *v;
    let q = tape.linear(x, wq, bq)?;
    let k = tape.matmul(x, wk)?;
    let val = tape.linear(x, wv, bv)?;
    let h = tape.value(q).cols();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out: Option<Var> = None;
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, val)
        } else {
            (
                tape.slice_cols(q, head * dh, dh)?,
                tape.slice_cols(k, head * dh, dh)?,
                tape.slice_cols(val, head * dh, dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.row_softmax(scores);
        let o = tape.matmul(probs, vh)?;
        out = Some(match out {
            None => o,
            Some(prev) => tape.concat_cols(prev, o)?,
        });
    }
    let merged = out.expect("at least one head");
    tape.linear(merged, wo, bo)
}

/// Contextual representations `B` (`L×h`) of one sequence.
pub fn encode(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    seq: &TokenizedInstance,
) -> Result<Var> {
    let l = seq.input_ids.len();
    if l == 0 || l > config.max_len {
        return Err(Error::Sequence(format!(
            "length {l} outside 1..={}",
            config.max_len
        )));
    }
    if let Some(&bad) = seq.input_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Sequence(format!(
            "token id {bad} >= vocabulary size {}",
            config.vocab_size
        )));
    }
    if seq.token_types.len() != l || seq.token_types.iter().any(|&t| t > 1) {
        return Err(Error::Sequence("token types must be 0/1 per token".into()));
    }
    let positions: Vec<usize> = (0..l).collect();
    let tok = tape.gather_rows(vars.token_emb, &seq.input_ids)?;
    let pos = tape.gather_rows(vars.position_emb, &positions)?;
    let seg = tape.gather_rows(vars.segment_emb, &seq.token_types)?;
    let x = tape.add(tok, pos)?;
    let mut x = tape.add(x, seg)?;
    for block in &vars.blocks {
        let v = &block.vars;
        let a = tape.layer_norm(x, v[0], v[1], LN_EPS)?;
        let attn = self_attention(tape, a, v, config.heads)?;
        x = tape.add(x, attn)?;
        let f = tape.layer_norm(x, v[9], v[10], LN_EPS)?;
        let hidden = tape.linear(f, v[11], v[12])?;
        let hidden = tape.gelu(hidden);
        let ff = tape.linear(hidden, v[13], v[14])?;
        x = tape.add(x, ff)?;
    }
    if let Some((g, b)) = vars.final_ln {
        x = tape.layer_norm(x, g, b, LN_EPS)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_input_sequence, Token};
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(q: usize, p: usize) -> TokenizedInstance {
        let toks = |n: usize, off: usize| -> Vec<Token> {
            (0..n)
                .map(|i| Token {
                    id: 4 + (i + off) % 12,
                    text: String::new(),
                    begin: i,
                    end: i + 1,
                })
                .collect()
        };
        build_input_sequence(&toks(q, 0), &toks(p, 5), (0, 0), 64).unwrap()
    }

    fn config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            hidden: 8,
            layers,
            heads: 1,
            max_len: 32,
            vocab_size: 16,
            embed_std: 0.5,
        }
    }

    #[test]
    fn output_shape() {
        let cfg = config(2);
        let params = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let vars = EncoderVars::bind(&params, &mut tape);
        let s = seq(4, 10);
        let b = encode(&mut tape, &vars, &cfg, &s).unwrap();
        assert_eq!(tape.value(b).shape(), (17, 8));
    }

    #[test]
    fn zero_layers_is_embedding_sum() {
        let cfg = config(0);
        let params = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let vars = EncoderVars::bind(&params, &mut tape);
        let s = seq(2, 3);
        let b = encode(&mut tape, &vars, &cfg, &s).unwrap();
        for (r, (&id, &ty)) in s.input_ids.iter().zip(&s.token_types).enumerate() {
            for c in 0..8 {
                let want = params.token_emb.get(id, c)
                    + params.position_emb.get(r, c)
                    + params.segment_emb.get(ty, c);
                assert_eq!(tape.value(b).get(r, c), want);
            }
        }
    }

    #[test]
    fn language_tag_does_not_matter() {
        let cfg = config(1);
        let params = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let a = seq(3, 5);
        let b = a.clone().with_language("zz");
        let run = |s: &TokenizedInstance| {
            let mut tape = Tape::new();
            let vars = EncoderVars::bind(&params, &mut tape);
            let out = encode(&mut tape, &vars, &cfg, s).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(&a).data(), run(&b).data());
    }

    #[test]
    fn rejects_bad_ids_and_lengths() {
        let cfg = config(1);
        let params = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut tape = Tape::new();
        let vars = EncoderVars::bind(&params, &mut tape);
        let mut s = seq(2, 3);
        s.input_ids[1] = 99;
        assert!(encode(&mut tape, &vars, &cfg, &s).is_err());
        let long = seq(4, 40);
        assert!(encode(&mut tape, &vars, &cfg, &long).is_err());
    }

    #[test]
    fn gradcheck_through_encoder() {
        let cfg = EncoderConfig {
            heads: 2,
            ..config(1)
        };
        let params = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let s = seq(2, 3);
        let weights = Tensor::uniform(s.len(), 8, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let flat: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let report = gradcheck(
            |tape, vars| {
                let ev = EncoderVars::from_flat(1, vars);
                let b = encode(tape, &ev, &cfg, &s)?;
                let w = tape.constant(weights.clone());
                let m = tape.mul(b, w)?;
                Ok(tape.sum(m))
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
