use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Floor on the relative-error denominator, so gradients that are
    /// numerically zero are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many entries per parameter (sampled with `seed`).
    pub max_entries: usize,
    pub seed: u64,
    /// Entries failing at `step` are retried at `step / 100`. Central
    /// differences straddling a ReLU kink are wrong at any step larger than
    /// the distance to the kink; the retry tells those apart from real errors.
    pub refine: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-3,
            tolerance: 1e-3,
            abs_floor: 1e-5,
            max_entries: usize::MAX,
            seed: 0,
            refine: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub params: Vec<ParamError>,
    pub tolerance: f64,
    /// Entries that only passed after refinement.
    pub refined: usize,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, per parameter. `f` must be deterministic.
pub fn finite_difference_check<Fun>(store: &ParamStore<f64>, f: Fun, opts: &FdOptions) -> Result<FdReport>
where
    Fun: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(s);
        let out = f(&mut tape)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    let grads = tape.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = Vec::new();
    let mut refined = 0;
    for id in store.ids() {
        let name = store.name(id).to_string();
        let n = store.get(id).len();
        let analytic: Vec<f64> = grads
            .param(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = if n > opts.max_entries {
            let mut v = sample(&mut rng, n, opts.max_entries).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let mut worst = ParamError {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in entries {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + opts.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - opts.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let mut numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}[{k}]")));
            }
            let rel_err = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(opts.abs_floor);
            let mut rel = rel_err(numeric);
            if rel > opts.tolerance && opts.refine {
                let h = opts.step / 100.0;
                work.get_mut(id).data_mut()[k] = orig + h;
                let up = eval(&work)?;
                work.get_mut(id).data_mut()[k] = orig - h;
                let down = eval(&work)?;
                work.get_mut(id).data_mut()[k] = orig;
                let fine = (up - down) / (2.0 * h);
                if fine.is_finite() && rel_err(fine) <= opts.tolerance {
                    refined += 1;
                    numeric = fine;
                    rel = rel_err(fine);
                }
            }
            if rel > worst.max_rel_err {
                worst = ParamError {
                    name: name.clone(),
                    max_rel_err: rel,
                    worst_index: k,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    Ok(FdReport {
        params: report,
        tolerance: opts.tolerance,
        refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn quadratic_matches() {
        let mut s = ParamStore::<f64>::new();
        let x = s.insert("x", Tensor::from_vec(vec![3.0])).unwrap();
        let report = finite_difference_check(
            &s,
            |t| {
                let v = t.param(x);
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &FdOptions::default(),
        )
        .unwrap();
        let p = &report.params[0];
        assert!((p.analytic - 6.0).abs() < 1e-12);
        assert!((p.numeric - 6.0).abs() < 1e-6);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut s = ParamStore::<f64>::new();
        let x = s.insert("x", Tensor::from_vec(vec![f64::NAN])).unwrap();
        let err = finite_difference_check(
            &s,
            |t| {
                let v = t.param(x);
                Ok(t.sum(v))
            },
            &FdOptions::default(),
        );
        assert!(err.is_err());
    }
}
