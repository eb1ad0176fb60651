//! Gradient-check suite over random fixtures: every tape op, the encoder,
//! the MAA stack and the full batch objective.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{build_input_sequence, ParallelInstance, Token, TokenizedInstance};
use crate::encoder::{encode, EncoderConfig, EncoderParams, EncoderVars, LN_EPS};
use crate::error::Result;
use crate::maa::{maa_forward, MaaConfig, MaaParams, MaaVars};
use crate::model::{batch_objective, Model, ModelConfig, ModelVars};
use crate::similarity::WeightTable;
use crate::tensor::{gradcheck_with, GradcheckReport, OpKind, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
const HIDDEN: usize = 8;
const MAX_L: usize = 10;

/// Names accepted by [`check_component`], in suite order.
pub const COMPONENTS: [&str; 19] = [
    "matmul",
    "matmul_t",
    "transpose",
    "add",
    "mul",
    "add_row",
    "scale",
    "row_softmax",
    "concat_cols",
    "slice_cols",
    "layer_norm",
    "gelu",
    "gather_rows",
    "sum",
    "mean_rows",
    "nll",
    "encoder",
    "maa",
    "objective",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Fixture = fn(&mut ChaCha8Rng, Option<OpKind>) -> Result<GradcheckReport>;

fn fixture(name: &str) -> Option<Fixture> {
    let f: Fixture = match name {
        "matmul" => |r, c| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            let ps = [rand_t(m, k, r), rand_t(k, n, r)];
            weighted(r, c, &ps, m, n, |t, v| t.matmul(v[0], v[1]))
        },
        "matmul_t" => |r, c| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            let ps = [rand_t(m, k, r), rand_t(n, k, r)];
            weighted(r, c, &ps, m, n, |t, v| t.matmul_t(v[0], v[1]))
        },
        "transpose" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let ps = [rand_t(m, n, r)];
            weighted(r, c, &ps, n, m, |t, v| Ok(t.transpose(v[0])))
        },
        "add" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let ps = [rand_t(m, n, r), rand_t(m, n, r)];
            weighted(r, c, &ps, m, n, |t, v| t.add(v[0], v[1]))
        },
        "mul" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let ps = [rand_t(m, n, r), rand_t(m, n, r)];
            weighted(r, c, &ps, m, n, |t, v| t.mul(v[0], v[1]))
        },
        "add_row" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let ps = [rand_t(m, n, r), rand_t(1, n, r)];
            weighted(r, c, &ps, m, n, |t, v| t.add_row(v[0], v[1]))
        },
        "scale" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let k = r.gen_range(-2.0..2.0);
            let ps = [rand_t(m, n, r)];
            weighted(r, c, &ps, m, n, move |t, v| Ok(t.scale(v[0], k)))
        },
        "row_softmax" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let ps = [rand_t(m, n, r)];
            weighted(r, c, &ps, m, n, |t, v| Ok(t.row_softmax(v[0])))
        },
        "concat_cols" => |r, c| {
            let (m, a, b) = (dim(r), dim(r), dim(r));
            let ps = [rand_t(m, a, r), rand_t(m, b, r)];
            weighted(r, c, &ps, m, a + b, |t, v| t.concat_cols(v[0], v[1]))
        },
        "slice_cols" => |r, c| {
            let (m, n) = (dim(r), dim(r) + 1);
            let start = r.gen_range(0..n);
            let width = r.gen_range(1..=n - start);
            let ps = [rand_t(m, n, r)];
            weighted(r, c, &ps, m, width, move |t, v| {
                t.slice_cols(v[0], start, width)
            })
        },
        "layer_norm" => |r, c| {
            let (m, n) = (dim(r), dim(r) + 1);
            let ps = [rand_t(m, n, r), rand_t(1, n, r), rand_t(1, n, r)];
            weighted(r, c, &ps, m, n, |t, v| t.layer_norm(v[0], v[1], v[2], LN_EPS))
        },
        "gelu" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let ps = [rand_t(m, n, r)];
            weighted(r, c, &ps, m, n, |t, v| Ok(t.gelu(v[0])))
        },
        "gather_rows" => |r, c| {
            let (rows, n, l) = (dim(r), dim(r), dim(r));
            let ids: Vec<usize> = (0..l).map(|_| r.gen_range(0..rows)).collect();
            let ps = [rand_t(rows, n, r)];
            weighted(r, c, &ps, l, n, move |t, v| {
                t.gather_rows(v[0], &ids)
            })
        },
        "sum" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let ps = [rand_t(m, n, r)];
            gradcheck_with(
                |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                },
                &ps,
                STEP,
                c,
            )
        },
        "mean_rows" => |r, c| {
            let (m, n) = (dim(r), dim(r));
            let start = r.gen_range(0..m);
            let end = r.gen_range(start..m);
            let ps = [rand_t(m, n, r)];
            weighted(r, c, &ps, 1, n, move |t, v| {
                t.mean_rows(v[0], start, end)
            })
        },
        "nll" => |r, c| {
            let n = dim(r);
            let gold = r.gen_range(0..n);
            gradcheck_with(
                |t, v| {
                    let p = t.row_softmax(v[0]);
                    t.nll_of_index(p, gold)
                },
                &[rand_t(1, n, r)],
                STEP,
                c,
            )
        },
        "encoder" => encoder_fixture,
        "maa" => maa_fixture,
        "objective" => objective_fixture,
        _ => return None,
    };
    Some(f)
}

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.gen_range(1..=MAX_L)
}

fn rand_t(m: usize, n: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(m, n, 1.0, r)
}

/// Checks `sum(f(params) ⊙ W)` for a random constant `W` of shape `m×n`.
fn weighted<F>(
    r: &mut ChaCha8Rng,
    corrupt: Option<OpKind>,
    params: &[Tensor],
    m: usize,
    n: usize,
    f: F,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let w = rand_t(m, n, r);
    gradcheck_with(
        |t, v| {
            let out = f(t, v)?;
            let w = t.constant(w.clone());
            let prod = t.mul(out, w)?;
            Ok(t.sum(prod))
        },
        params,
        STEP,
        corrupt,
    )
}

fn random_sequence(r: &mut ChaCha8Rng, vocab: usize) -> TokenizedInstance {
    let toks = |n: usize, r: &mut ChaCha8Rng| -> Vec<Token> {
        (0..n)
            .map(|i| Token {
                id: r.gen_range(4..vocab),
                text: String::new(),
                begin: i,
                end: i + 1,
            })
            .collect()
    };
    let q = toks(r.gen_range(1..=2), r);
    let p = toks(r.gen_range(1..=MAX_L - 5), r);
    let s = r.gen_range(0..p.len());
    let e = r.gen_range(s..p.len());
    build_input_sequence(&q, &p, (s, e), MAX_L).expect("fixture fits")
}

fn encoder_fixture(r: &mut ChaCha8Rng, corrupt: Option<OpKind>) -> Result<GradcheckReport> {
    let cfg = EncoderConfig {
        hidden: HIDDEN,
        layers: 1,
        heads: r.gen_range(1..=2),
        max_len: MAX_L,
        vocab_size: 12,
        embed_std: 0.5,
    };
    let params = EncoderParams::init(&cfg, r);
    let seq = random_sequence(r, cfg.vocab_size);
    let flat: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let w = rand_t(seq.len(), HIDDEN, r);
    gradcheck_with(
        |t, v| {
            let vars = EncoderVars::from_flat(cfg.layers, v);
            let b = encode(t, &vars, &cfg, &seq)?;
            let w = t.constant(w.clone());
            let prod = t.mul(b, w)?;
            Ok(t.sum(prod))
        },
        &flat,
        STEP,
        corrupt,
    )
}

fn maa_fixture(r: &mut ChaCha8Rng, corrupt: Option<OpKind>) -> Result<GradcheckReport> {
    let cfg = MaaConfig {
        heads: if r.gen_bool(0.5) { 1 } else { 2 },
        scaled: r.gen_bool(0.5),
        enabled: true,
    };
    let params = MaaParams::init(HIDDEN, 2, r);
    let l_s = dim(r);
    let mut flat: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    for l in [l_s, dim(r), dim(r)] {
        flat.push(Tensor::normal(l, HIDDEN, 0.7, r));
    }
    let w = rand_t(l_s, 2 * HIDDEN, r);
    gradcheck_with(
        |t, v| {
            let vars = MaaVars {
                w_c: v[0],
                b_c: v[1],
                ln_gain: v[2],
                ln_bias: v[3],
            };
            let out = maa_forward(t, v[4], &[v[5], v[6]], &vars, &cfg)?;
            let w = t.constant(w.clone());
            let prod = t.mul(out.g, w)?;
            Ok(t.sum(prod))
        },
        &flat,
        STEP,
        corrupt,
    )
}

/// The full weighted objective on a two-instance batch. The translation
/// quality weights are treated as constants by the objective, so they are
/// frozen at the unperturbed parameters.
fn objective_fixture(r: &mut ChaCha8Rng, corrupt: Option<OpKind>) -> Result<GradcheckReport> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            hidden: HIDDEN,
            layers: 1,
            heads: r.gen_range(1..=2),
            max_len: MAX_L,
            vocab_size: 12,
            embed_std: 0.5,
        },
        ..ModelConfig::default()
    };
    let model = Model::init(config, r)?;
    let insts: Vec<ParallelInstance> = ["a", "b"]
        .iter()
        .map(|ds| ParallelInstance {
            id: format!("{ds}0"),
            source_dataset: ds.to_string(),
            pivot: random_sequence(r, 12),
            auxiliaries: vec![random_sequence(r, 12), random_sequence(r, 12)],
        })
        .collect();
    let batch: Vec<&ParallelInstance> = insts.iter().collect();
    let wa = r.gen_range(0.1..0.9);
    let weights = WeightTable {
        weights: BTreeMap::from([("a".to_string(), wa), ("b".to_string(), 1.0 - wa)]),
    };
    let frozen = {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        batch_objective(&mut tape, &vars, &model.config, &batch, &weights, None)?.alphas
    };
    let flat: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
    gradcheck_with(
        |t, v| {
            let vars = ModelVars::from_flat(model.config.encoder.layers, v)?;
            let out = batch_objective(t, &vars, &model.config, &batch, &weights, Some(&frozen))?;
            Ok(out.loss)
        },
        &flat,
        STEP,
        corrupt,
    )
}

/// One fixture of `component` drawn from `seed`.
pub fn check_component(
    component: &str,
    seed: u64,
    corrupt: Option<OpKind>,
) -> Result<GradcheckReport> {
    let f = fixture(component).ok_or_else(|| {
        crate::Error::Config(format!("unknown gradcheck component `{component}`"))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(component.len() as u64));
    f(&mut rng, corrupt)
}

/// Every component over seeds `0..seeds`.
pub fn gradcheck_suite(seeds: u64, corrupt: Option<OpKind>) -> Result<Vec<ComponentResult>> {
    COMPONENTS
        .iter()
        .map(|&name| {
            let mut res = ComponentResult {
                component: name.to_string(),
                seeds,
                max_rel_error: 0.0,
                worst_seed: 0,
            };
            for seed in 0..seeds {
                let report = check_component(name, seed, corrupt)?;
                if report.max_rel_error > res.max_rel_error {
                    res.max_rel_error = report.max_rel_error;
                    res.worst_seed = seed;
                }
            }
            Ok(res)
        })
        .collect()
}
