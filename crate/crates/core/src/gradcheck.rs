//! Central finite-difference verification of analytic gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{precision, Tensor};
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub max_abs_analytic: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn offenders(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_err < self.tolerance))
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{} param={} numel={} max_rel_err={:.3e} at={} analytic={:.6e} numeric={:.6e}",
                if p.max_rel_err < self.tolerance { "PASS" } else { "FAIL" },
                p.name,
                p.numel,
                p.max_rel_err,
                p.worst_index,
                p.analytic,
                p.numeric
            )?;
        }
        write!(
            f,
            "{} params={} tolerance={:e} max_rel_err={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.params.len(),
            self.tolerance,
            self.max_rel_err()
        )
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `analytic` (one tensor per parameter, in `ParamSet` order) against
/// central differences of `loss`. Frozen parameters are skipped.
///
/// `loss` must be deterministic; it is evaluated twice at the base point and
/// any difference is reported as a contract error.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    analytic: &[Tensor],
    mut loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if precision() != Precision::F64 {
        return Err(Error::Contract("finite-difference checks require 64-bit mode".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "expected {} analytic gradients, got {}",
            params.len(),
            analytic.len()
        )));
    }
    let first = loss(params)?;
    let second = loss(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "loss is not deterministic: {first:?} vs {second:?}"
        )));
    }

    let ids: Vec<ParamId> = params.ids().collect();
    let mut report = Vec::new();
    for id in ids {
        if !params.is_trainable(id) {
            continue;
        }
        let grad = &analytic[id.index()];
        if grad.shape() != params.get(id).shape() {
            return Err(Error::dim("finite_diff_check", params.get(id).shape(), grad.shape()));
        }
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            numel: grad.numel(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_abs_analytic: grad.data().iter().fold(0.0, |m, v| m.max(v.abs())),
        };
        for k in 0..grad.numel() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + opts.step;
            let plus = loss(params);
            params.get_mut(id).data_mut()[k] = orig - opts.step;
            let minus = loss(params);
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = grad.data()[k];
            let err = relative_error(a, numeric);
            if err > check.max_rel_err || err.is_nan() {
                check.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        params: report,
    })
}
