//! Multilingual attention: the pivot sequence attends to each auxiliary
//! sequence through an adaptive affinity built from intra- and
//! inter-sequence dot products, then the fused context is added back
//! through a layer-normed residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::LN_EPS;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaaConfig {
    /// Number of attention heads. With more than one head the affinities
    /// are computed on column slices and the attended outputs averaged.
    pub heads: usize,
    /// Divide dot-product affinities by `sqrt(d)`.
    pub scaled: bool,
    /// When false the module is bypassed and `G = [B, B]`.
    pub enabled: bool,
}

impl Default for MaaConfig {
    fn default() -> Self {
        MaaConfig {
            heads: 1,
            scaled: false,
            enabled: true,
        }
    }
}

/// Fusion projection `W_c` (`k·h × h`, `k` auxiliaries), its bias, and the
/// residual layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MaaParams {
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl MaaParams {
    pub fn init<R: Rng>(hidden: usize, auxiliaries: usize, rng: &mut R) -> Self {
        let fan_in = auxiliaries * hidden;
        MaaParams {
            w_c: Tensor::uniform(fan_in, hidden, 1.0 / (fan_in as f64).sqrt(), rng),
            b_c: Tensor::zeros(1, hidden),
            ln_gain: Tensor::ones(1, hidden),
            ln_bias: Tensor::zeros(1, hidden),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("maa.w_c".into(), &self.w_c),
            ("maa.b_c".into(), &self.b_c),
            ("maa.ln_gain".into(), &self.ln_gain),
            ("maa.ln_bias".into(), &self.ln_bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("maa.w_c".into(), &mut self.w_c),
            ("maa.b_c".into(), &mut self.b_c),
            ("maa.ln_gain".into(), &mut self.ln_gain),
            ("maa.ln_bias".into(), &mut self.ln_bias),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaaVars {
    pub w_c: Var,
    pub b_c: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl MaaVars {
    pub fn bind<'a>(params: &'a MaaParams, tape: &mut Tape<'a>) -> Self {
        MaaVars {
            w_c: tape.param(&params.w_c),
            b_c: tape.param(&params.b_c),
            ln_gain: tape.param(&params.ln_gain),
            ln_bias: tape.param(&params.ln_bias),
        }
    }

    pub fn flatten(&self) -> Vec<Var> {
        vec![self.w_c, self.b_c, self.ln_gain, self.ln_bias]
    }
}

fn maybe_scale(tape: &mut Tape<'_>, x: Var, width: usize, scaled: bool) -> Var {
    if scaled {
        tape.scale(x, 1.0 / (width as f64).sqrt())
    } else {
        x
    }
}

/// `rowsoftmax(B Bᵀ)`, `L×L`.
pub fn intra_attention(tape: &mut Tape<'_>, b: Var) -> Result<Var> {
    let scores = tape.matmul_t(b, b)?;
    Ok(tape.row_softmax(scores))
}

/// `B_S B_Xᵀ`, `L_S×L_X`, unnormalized.
pub fn inter_attention(tape: &mut Tape<'_>, b_s: Var, b_x: Var) -> Result<Var> {
    tape.matmul_t(b_s, b_x)
}

/// `A_S · A_SX · A_Xᵀ`, `L_S×L_X`.
pub fn adaptive_attention(tape: &mut Tape<'_>, a_s: Var, a_sx: Var, a_x: Var) -> Result<Var> {
    let left = tape.matmul(a_s, a_sx)?;
    tape.matmul_t(left, a_x)
}

/// `rowsoftmax(Ã) · B_X`, one row per pivot token.
pub fn attend(tape: &mut Tape<'_>, adaptive: Var, b_x: Var) -> Result<Var> {
    let probs = tape.row_softmax(adaptive);
    tape.matmul(probs, b_x)
}

/// `C'_X` for one auxiliary sequence, honoring heads and scaling.
pub fn attend_auxiliary(
    tape: &mut Tape<'_>,
    b_s: Var,
    b_x: Var,
    config: &MaaConfig,
) -> Result<Var> {
    let h = tape.value(b_s).cols();
    if tape.value(b_x).cols() != h {
        return Err(Error::shape(
            "attend_auxiliary",
            tape.value(b_s).shape(),
            tape.value(b_x).shape(),
        ));
    }
    let heads = config.heads.max(1);
    if h % heads != 0 {
        return Err(Error::Config(format!(
            "hidden size {h} not divisible by {heads} heads"
        )));
    }
    let d = h / heads;
    let mut acc: Option<Var> = None;
    for k in 0..heads {
        let (s, x) = if heads == 1 {
            (b_s, b_x)
        } else {
            (tape.slice_cols(b_s, k * d, d)?, tape.slice_cols(b_x, k * d, d)?)
        };
        let a_s = tape.matmul_t(s, s)?;
        let a_s = maybe_scale(tape, a_s, d, config.scaled);
        let a_s = tape.row_softmax(a_s);
        let a_x = tape.matmul_t(x, x)?;
        let a_x = maybe_scale(tape, a_x, d, config.scaled);
        let a_x = tape.row_softmax(a_x);
        let a_sx = inter_attention(tape, s, x)?;
        let a_sx = maybe_scale(tape, a_sx, d, config.scaled);
        let adaptive = adaptive_attention(tape, a_s, a_sx, a_x)?;
        let out = attend(tape, adaptive, b_x)?;
        acc = Some(match acc {
            None => out,
            Some(prev) => tape.add(prev, out)?,
        });
    }
    let sum = acc.expect("at least one head");
    Ok(if heads == 1 {
        sum
    } else {
        tape.scale(sum, 1.0 / heads as f64)
    })
}

/// `C = [C'_1, …, C'_k] W_c + b_c`.
pub fn multilingual_fuse(tape: &mut Tape<'_>, attended: &[Var], vars: &MaaVars) -> Result<Var> {
    let (&first, rest) = attended
        .split_first()
        .ok_or_else(|| Error::Config("fusion needs at least one auxiliary".into()))?;
    let mut cat = first;
    for &c in rest {
        cat = tape.concat_cols(cat, c)?;
    }
    tape.linear(cat, vars.w_c, vars.b_c)
}

#[derive(Clone, Copy, Debug)]
pub struct MaaOutput {
    /// `[B_S, LN(B_S + C)]`, `L_S×2h`.
    pub g: Var,
    /// Fused context `C`, `L_S×h`; `None` when bypassed.
    pub fused: Option<Var>,
}

/// Full module: pivot `b_s` with auxiliaries `b_aux` in their given order.
pub fn maa_forward(
    tape: &mut Tape<'_>,
    b_s: Var,
    b_aux: &[Var],
    vars: &MaaVars,
    config: &MaaConfig,
) -> Result<MaaOutput> {
    if !config.enabled {
        let g = tape.concat_cols(b_s, b_s)?;
        return Ok(MaaOutput { g, fused: None });
    }
    let attended = b_aux
        .iter()
        .map(|&b_x| attend_auxiliary(tape, b_s, b_x, config))
        .collect::<Result<Vec<_>>>()?;
    let c = multilingual_fuse(tape, &attended, vars)?;
    let residual = tape.add(b_s, c)?;
    let normed = tape.layer_norm(residual, vars.ln_gain, vars.ln_bias, LN_EPS)?;
    let g = tape.concat_cols(b_s, normed)?;
    Ok(MaaOutput { g, fused: Some(c) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn intra_single_token_is_one() {
        let mut t = Tape::new();
        let b = t.constant(Tensor::row(&[0.3, -2.0, 5.0]));
        let a = intra_attention(&mut t, b).unwrap();
        assert_eq!(t.value(a).data(), &[1.0]);
    }

    #[test]
    fn intra_identity_rows() {
        let mut t = Tape::new();
        let b = t.constant(Tensor::identity(2));
        let a = intra_attention(&mut t, b).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let want = [hi, 1.0 - hi, 1.0 - hi, hi];
        for (x, w) in t.value(a).data().iter().zip(want) {
            assert!((x - w).abs() < 1e-12);
        }
    }

    #[test]
    fn inter_shape_and_values() {
        let mut r = rng(1);
        let s = Tensor::normal(5, 8, 1.0, &mut r);
        let x = Tensor::normal(7, 8, 1.0, &mut r);
        let mut t = Tape::new();
        let (vs, vx) = (t.constant(s.clone()), t.constant(x.clone()));
        let a = inter_attention(&mut t, vs, vx).unwrap();
        assert_eq!(t.value(a).shape(), (5, 7));
        for i in 0..5 {
            for j in 0..7 {
                let dot: f64 = s.row_slice(i).iter().zip(x.row_slice(j)).map(|(p, q)| p * q).sum();
                assert!((t.value(a).get(i, j) - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_matches_triple_sum() {
        let mut r = rng(2);
        let a_s = Tensor::uniform(3, 3, 1.0, &mut r);
        let a_sx = Tensor::uniform(3, 4, 1.0, &mut r);
        let a_x = Tensor::uniform(4, 4, 1.0, &mut r);
        let mut t = Tape::new();
        let (p, q, w) = (
            t.constant(a_s.clone()),
            t.constant(a_sx.clone()),
            t.constant(a_x.clone()),
        );
        let out = adaptive_attention(&mut t, p, q, w).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut want = 0.0;
                for k in 0..3 {
                    for l in 0..4 {
                        want += a_s.get(i, k) * a_sx.get(k, l) * a_x.get(j, l);
                    }
                }
                assert!((t.value(out).get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attend_stays_in_convex_hull() {
        let mut r = rng(3);
        let adaptive = Tensor::normal(4, 6, 3.0, &mut r);
        let b_x = Tensor::normal(6, 5, 1.0, &mut r);
        let mut t = Tape::new();
        let (a, b) = (t.constant(adaptive), t.constant(b_x.clone()));
        let out = attend(&mut t, a, b).unwrap();
        for c in 0..5 {
            let col: Vec<f64> = (0..6).map(|r| b_x.get(r, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..4 {
                let v = t.value(out).get(r, c);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn output_keeps_pivot_half() {
        let mut r = rng(4);
        let params = MaaParams::init(8, 2, &mut r);
        let b_s = Tensor::normal(5, 8, 1.0, &mut r);
        let b_m = Tensor::normal(7, 8, 1.0, &mut r);
        let b_n = Tensor::normal(6, 8, 1.0, &mut r);
        let mut t = Tape::new();
        let vars = MaaVars::bind(&params, &mut t);
        let (s, m, n) = (t.constant(b_s.clone()), t.constant(b_m), t.constant(b_n));
        let out = maa_forward(&mut t, s, &[m, n], &vars, &MaaConfig::default()).unwrap();
        let g = t.value(out.g);
        assert_eq!(g.shape(), (5, 16));
        assert_eq!(g.slice_cols(0, 8).unwrap(), b_s);
        let c = t.value(out.fused.unwrap());
        assert_eq!(c.shape(), (5, 8));
    }

    #[test]
    fn bypass_duplicates_pivot() {
        let mut r = rng(5);
        let params = MaaParams::init(4, 2, &mut r);
        let b_s = Tensor::normal(3, 4, 1.0, &mut r);
        let mut t = Tape::new();
        let vars = MaaVars::bind(&params, &mut t);
        let s = t.constant(b_s.clone());
        let x = t.constant(Tensor::normal(2, 4, 1.0, &mut r));
        let cfg = MaaConfig {
            enabled: false,
            ..MaaConfig::default()
        };
        let out = maa_forward(&mut t, s, &[x, x], &vars, &cfg).unwrap();
        let g = t.value(out.g);
        assert_eq!(g.slice_cols(0, 4).unwrap(), b_s);
        assert_eq!(g.slice_cols(4, 4).unwrap(), b_s);
    }

    #[test]
    fn auxiliary_row_permutation_is_invisible() {
        let mut r = rng(6);
        let b_s = Tensor::normal(4, 6, 1.0, &mut r);
        let b_x = Tensor::normal(5, 6, 1.0, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| b_x.row_slice(p).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows);
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let (s, v) = (t.constant(b_s.clone()), t.constant(x.clone()));
            let out = attend_auxiliary(&mut t, s, v, &MaaConfig::default()).unwrap();
            t.value(out).clone()
        };
        let (a, b) = (run(&b_x), run(&permuted));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn gradcheck_full_module() {
        for (heads, scaled) in [(1, false), (2, true)] {
            let mut r = rng(7 + heads as u64);
            let params = MaaParams::init(4, 2, &mut r);
            let b_s = Tensor::normal(3, 4, 0.7, &mut r);
            let b_m = Tensor::normal(4, 4, 0.7, &mut r);
            let b_n = Tensor::normal(2, 4, 0.7, &mut r);
            let weights = Tensor::uniform(3, 8, 1.0, &mut r);
            let flat = vec![
                params.w_c.clone(),
                params.b_c.clone(),
                params.ln_gain.clone(),
                params.ln_bias.clone(),
                b_s,
                b_m,
                b_n,
            ];
            let cfg = MaaConfig {
                heads,
                scaled,
                enabled: true,
            };
            let report = gradcheck(
                |t, v| {
                    let vars = MaaVars {
                        w_c: v[0],
                        b_c: v[1],
                        ln_gain: v[2],
                        ln_bias: v[3],
                    };
                    let out = maa_forward(t, v[4], &[v[5], v[6]], &vars, &cfg)?;
                    let w = t.constant(weights.clone());
                    let m = t.mul(out.g, w)?;
                    Ok(t.sum(m))
                },
                &flat,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{heads} {report:?}");
        }
    }
}
