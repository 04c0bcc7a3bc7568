//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

use super::{Graph, ParamId, ParamStore, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink or
    /// changed an expert selection.
    pub skipped: usize,
    /// Parameter name and flat index of the largest error.
    pub worst: Option<(String, usize)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per parameter
    /// block; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::dim("grad_check: function must return a scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check evaluation".into(),
        });
    }
    Ok((v, g.branch_signature()))
}

/// Compares the gradient of the scalar built by `f` with central
/// differences over the parameters in `store`.
pub fn grad_check<F>(name: &str, store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.value(loss).ensure_finite("grad_check evaluation")?;
        g.backward(loss)?
    };
    let (_, base_sig) = evaluate(store, &f)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        op: name.to_string(),
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
        passed: true,
        checked: 0,
        skipped: 0,
        worst: None,
    };

    for id in store.ids() {
        let grad = analytic.dense(id, store);
        let n = grad.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = evaluate(&work, &f);
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = evaluate(&work, &f);
            work.get_mut(id).data_mut()[i] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), i));
                }
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

/// [`grad_check`] over a plain list of tensors, named `p0, p1, ...`.
pub fn grad_check_tensors<F>(
    name: &str,
    params: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, p) in params.iter().enumerate() {
        store.push(format!("p{i}"), p.clone());
    }
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(
        name,
        &store,
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            f(g, &vars)
        },
        opts,
    )
}
