use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamTree;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Checks at most this many entries per tensor (plus its largest-gradient
    /// entry); `None` checks every entry.
    pub max_entries: Option<usize>,
    /// Magnitude floor for the relative-error denominator, so entries whose
    /// true gradient is ~0 are compared on an absolute scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-5,
            max_entries: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `grads` against central differences of `loss_fn` around `params`.
pub fn grad_check<P, F>(mut loss_fn: F, params: &P, grads: &P, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: ParamTree + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let mut work = params.clone();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    let shapes: Vec<(String, usize)> = params.named().into_iter().map(|(n, t)| (n, t.len())).collect();
    if shapes.len() != analytic.len() || shapes.iter().zip(&analytic).any(|(a, b)| a.1 != b.1.len()) {
        return Err(Error::shape("gradient tree does not match parameter tree"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(shapes.len());
    let mut eval = |work: &P| -> Result<f64> {
        let v = loss_fn(work)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad-check loss".into()))
        }
    };

    for (k, ((name, len), (_, grad))) in shapes.iter().zip(&analytic).enumerate() {
        let mut idx: Vec<usize> = match opts.max_entries {
            Some(m) if m < *len => {
                let mut v = sample(&mut rng, *len, m).into_vec();
                let argmax = (0..*len)
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                v.push(argmax);
                v.sort_unstable();
                v.dedup();
                v
            }
            _ => (0..*len).collect(),
        };
        idx.shrink_to_fit();
        let mut worst = 0.0f64;
        for &i in &idx {
            let orig = entry(&mut work, k, i, None);
            entry(&mut work, k, i, Some(orig + opts.eps));
            let plus = eval(&work)?;
            entry(&mut work, k, i, Some(orig - opts.eps));
            let minus = eval(&work)?;
            entry(&mut work, k, i, Some(orig));
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(grad[i], numeric, opts.floor));
        }
        report.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst,
            checked: idx.len(),
        });
    }
    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
        tol: opts.tol,
        passed: max_rel_error <= opts.tol,
    })
}

/// Reads (and optionally overwrites) entry `i` of tensor `k`.
fn entry<P: ParamTree>(tree: &mut P, k: usize, i: usize, value: Option<f64>) -> f64 {
    let mut named = tree.named_mut();
    let cell = named[k].1.iter_mut().nth(i).expect("index in range");
    let old = *cell;
    if let Some(v) = value {
        *cell = v;
    }
    old
}
