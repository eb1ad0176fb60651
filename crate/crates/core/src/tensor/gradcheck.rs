//! Central finite-difference check of tape gradients.

use super::dense::Tensor;
use super::tape::{OpKind, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Central differences at the
/// usual steps carry ~1e-10 of roundoff on O(1) losses, so gradients that
/// are exactly zero (e.g. biases feeding a softmax) need an absolute check.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares tape gradients of `f` against central differences over every
/// coordinate of `params`.
///
/// `f` receives one tape var per param, in order, and must return a `1×1`
/// node. Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn gradcheck<F>(f: F, params: &[Tensor], step: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, params, step, None)
}

/// [`gradcheck`] with an optional corrupted backward rule.
pub fn gradcheck_with<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    corrupt: Option<OpKind>,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        if let Some(kind) = corrupt {
            tape.corrupt_backward(kind);
        }
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.scalar(loss);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("gradcheck objective".into()))
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for p in 0..work.len() {
        for j in 0..work[p].len() {
            let original = work[p].data()[j];
            work[p].data_mut()[j] = original + step;
            let plus = eval(&work)?;
            work[p].data_mut()[j] = original - step;
            let minus = eval(&work)?;
            work[p].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].data()[j];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::row(&[0.5, -1.25, 2.0]);
        let r = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn matmul_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(3, 4, 1.0, &mut rng);
        let b = Tensor::uniform(4, 2, 1.0, &mut rng);
        let r = gradcheck(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                Ok(t.sum(c))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::uniform(3, 3, 1.0, &mut rng);
        let w = Tensor::uniform(3, 3, 1.0, &mut rng);
        let f = |t: &mut Tape<'_>, v: &[Var]| {
            let s = t.row_softmax(v[0]);
            let m = t.mul(s, v[1])?;
            Ok(t.sum(m))
        };
        let clean = gradcheck(f, &[a.clone(), w.clone()], 1e-5).unwrap();
        assert!(clean.max_rel_error < 1e-5, "{clean:?}");
        let bad = gradcheck_with(f, &[a, w], 1e-5, Some(OpKind::RowSoftmax)).unwrap();
        assert!(bad.max_rel_error > 1e-2, "{bad:?}");
    }
}
