use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::engine::FeatureMap;
use crate::error::{Error, Result};

pub const FINITE_DIFF_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Largest per-tensor `max |a - n| / max(max |n|, tiny)`.
    pub max_relative_error: f64,
    pub per_tensor: Vec<f64>,
    pub evaluations: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares analytic gradients of a scalar loss against central differences
/// for every entry of every tensor in `params`.
pub fn finite_diff_check<F>(
    params: &[FeatureMap<f64>],
    loss: F,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[FeatureMap<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.shape().len() != 1 {
            return Err(Error::structural("gradient check needs a scalar loss"));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.param(v.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut evaluations = 1;
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.dense(*var, params[t].shape());
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for k in 0..params[t].data().len() {
            let orig = params[t].data()[k];
            work[t].data_mut()[k] = orig + FINITE_DIFF_STEP;
            let plus = eval(&work)?;
            work[t].data_mut()[k] = orig - FINITE_DIFF_STEP;
            let minus = eval(&work)?;
            work[t].data_mut()[k] = orig;
            evaluations += 2;
            let numeric = (plus - minus) / (2.0 * FINITE_DIFF_STEP);
            max_diff = max_diff.max((analytic.data()[k] - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        per_tensor.push(max_diff / max_num.max(f64::MIN_POSITIVE));
    }
    let max_relative_error = per_tensor.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_tensor,
        evaluations,
        tolerance,
        pass: max_relative_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape;
    use crate::train::tape::column;

    #[test]
    fn quadratic_gradient_checks() {
        let x = column(vec![0.3, -1.2, 2.0]).unwrap();
        let report = finite_diff_check(&[x], |t, v| t.half_squared_norm(v[0]), 1e-8).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.evaluations, 7);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // A relu exactly at its kink has a one-sided derivative the
        // central difference halves.
        let x = FeatureMap::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
        let report = finite_diff_check(
            &[x],
            |t, v| {
                let r = t.relu(v[0]);
                let probe = column(vec![1.0])?;
                t.dot(r, &probe)
            },
            1e-6,
        )
        .unwrap();
        assert!(!report.pass);
    }
}
