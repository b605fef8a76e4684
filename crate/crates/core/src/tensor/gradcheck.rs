//! Central finite-difference verification of tape gradients.
//!
//! The relative error of one entry is `|a − n| / max(|a| + |n|, floor)`, where
//! `a` is the analytic and `n` the numerical derivative. The floor keeps
//! entries whose true derivative is zero from dividing by rounding noise.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-6,
            tol: 1e-5,
            floor: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<5} {:<40} entries={:<6} max_rel_err={:.3e}",
                if p.passed { "ok" } else { "FAIL" },
                p.name,
                p.checked,
                p.max_rel_err
            )?;
        }
        Ok(())
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

fn checked_indices(len: usize, max_entries: Option<usize>) -> Vec<usize> {
    match max_entries {
        Some(k) if k < len => {
            let stride = len as f64 / k as f64;
            (0..k).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Central-difference gradient of `f` at `params`, restricted to the entries
/// selected by `max_entries` (others are left at zero).
pub fn numerical_gradient<F>(
    f: F,
    params: &[(String, Tensor)],
    h: f64,
    max_entries: Option<usize>,
) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = params.iter().map(|p| p.1.clone()).collect();
    let mut out = Vec::with_capacity(params.len());
    for (pi, (name, t)) in params.iter().enumerate() {
        let mut g = Tensor::zeros(t.shape());
        for idx in checked_indices(t.numel(), max_entries) {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let up = f(&work)?;
            work[pi].data_mut()[idx] = orig - h;
            let down = f(&work)?;
            work[pi].data_mut()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite forward value while perturbing {name}[{idx}]"
                )));
            }
            g.data_mut()[idx] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares two gradient sets entry by entry.
pub fn compare_gradients(
    names: &[String],
    analytic: &[Tensor],
    numeric: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() || names.len() != analytic.len() {
        return Err(Error::Contract("gradient sets differ in length".into()));
    }
    let mut params = Vec::with_capacity(names.len());
    for ((name, a), n) in names.iter().zip(analytic).zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::dim("compare_gradients", a.shape(), n.shape()));
        }
        let mut worst = 0.0;
        let mut worst_index = 0;
        let idx = checked_indices(a.numel(), cfg.max_entries);
        for &i in &idx {
            let (av, nv) = (a.data()[i], n.data()[i]);
            if !av.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite analytic gradient at {name}[{i}]"
                )));
            }
            let e = relative_error(av, nv, cfg.floor);
            if e > worst {
                worst = e;
                worst_index = i;
            }
        }
        params.push(ParamReport {
            name: name.clone(),
            checked: idx.len(),
            max_rel_err: worst,
            worst_index,
            passed: worst <= cfg.tol,
        });
    }
    Ok(GradCheckReport {
        params,
        tol: cfg.tol,
    })
}

/// Builds `f` on a fresh tape with every parameter as a grad-enabled leaf,
/// backpropagates, and compares against central differences.
pub fn finite_diff_check<F>(
    f: F,
    params: &[(String, Tensor)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.1.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite loss at the base point".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.1.shape()))
        })
        .collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let numeric = numerical_gradient(eval, params, cfg.h, cfg.max_entries)?;
    let names: Vec<String> = params.iter().map(|p| p.0.clone()).collect();
    compare_gradients(&names, &analytic, &numeric, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
        ts.into_iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }

    #[test]
    fn quadratic_passes_tightly() {
        // f = 3a² + ab + 0.5c², gradient (6a + b, a, c)
        let params = named(vec![
            Tensor::scalar(0.7),
            Tensor::scalar(-1.3),
            Tensor::scalar(2.1),
        ]);
        let report = finite_diff_check(
            |t, v| {
                let a2 = t.mul(v[0], v[0])?;
                let a2 = t.scale(a2, 3.0);
                let ab = t.mul(v[0], v[1])?;
                let c2 = t.mul(v[2], v[2])?;
                let c2 = t.scale(c2, 0.5);
                let s = t.add(a2, ab)?;
                t.add(s, c2)
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err() < 1e-8, "{report}");
    }

    #[test]
    fn zero_function_passes_by_floor() {
        let params = named(vec![Tensor::vector(&[1.0, -2.0, 3.0])]);
        let report = finite_diff_check(
            |t, v| {
                let z = t.scale(v[0], 0.0);
                Ok(t.sum(z))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn corrupted_gradient_fails_at_one_third() {
        let names = vec!["w".to_string()];
        let good = Tensor::vector(&[0.4, -1.5, 2.0]);
        let bad = Tensor::vector(&[0.8, -3.0, 4.0]);
        let report =
            compare_gradients(&names, &[bad], &[good], &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_err() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nan_forward_names_the_parameter() {
        let params = named(vec![Tensor::vector(&[1.0, 0.0])]);
        let err = numerical_gradient(
            |ts| {
                let x = ts[0].data()[1];
                Ok(if x < 0.0 { f64::NAN } else { x })
            },
            &params,
            1e-6,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("p0[1]"), "{err}");
    }

    #[test]
    fn strided_sampling_covers_requested_count() {
        assert_eq!(checked_indices(10, Some(3)), vec![0, 3, 6]);
        assert_eq!(checked_indices(2, Some(5)), vec![0, 1]);
    }
}
