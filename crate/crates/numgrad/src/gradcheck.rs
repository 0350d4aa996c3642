//! Finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NumError, Result};
use crate::param::ParamSet;
use crate::tape::{Tape, Var};

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_SAMPLES: usize = 128;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// on up to `samples` coordinates drawn uniformly over all parameter values
/// (every coordinate when there are fewer).
///
/// `loss_fn` receives a fresh tape and the parameter vars in slot order and
/// must return a scalar. It is called once per perturbation, so any noise it
/// uses has to be fixed outside the closure.
pub fn gradient_check<F>(params: &mut ParamSet, samples: usize, seed: u64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = loss_fn(&mut tape, &vars)?;
    let base = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| grads.wrt(v, p.value.shape()).into_data())
        .collect();
    drop(tape);

    let mut eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let loss = loss_fn(&mut tape, &vars)?;
        if let Some(what) = tape.non_finite() {
            return Err(NumError::NonFinite(what.to_string()));
        }
        Ok(tape.scalar(loss))
    };

    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(NumError::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.value.len();
            Some(start)
        })
        .collect();
    let total = params.num_values();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        let mut v = index::sample(&mut rng, total, samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in picks {
        let slot = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[slot];
        let orig = params.get(slot).value.data()[idx];

        params.get_mut(slot).value.data_mut()[idx] = orig + FD_STEP;
        let plus = eval(params)?;
        params.get_mut(slot).value.data_mut()[idx] = orig - FD_STEP;
        let minus = eval(params)?;
        params.get_mut(slot).value.data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[slot][idx];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((params.get(slot).name.clone(), idx, a, numeric));
        }
    }
    Ok(report)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParamSet::new();
        ps.push("x", Tensor::row(&[1.0, 2.0, 3.0]));
        let report = gradient_check(&mut ps, DEFAULT_SAMPLES, 0, |tape, v| {
            let sq = tape.square(v[0]);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_relative_error <= 1e-6, "{report:?}");
        assert_eq!(ps.get(0).value.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_deterministic_loss_is_rejected() {
        let mut ps = ParamSet::new();
        ps.push("x", Tensor::row(&[1.0]));
        let mut calls = 0.0;
        let err = gradient_check(&mut ps, 4, 0, |tape, v| {
            calls += 1.0;
            let c = tape.constant(Tensor::row(&[calls]));
            let prod = tape.mul(v[0], c);
            Ok(tape.sum(prod))
        })
        .unwrap_err();
        assert!(matches!(err, NumError::NonDeterministic { .. }));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at an exact kink: forward differences straddle it.
        let mut ps = ParamSet::new();
        ps.push("x", Tensor::row(&[0.0]));
        let report = gradient_check(&mut ps, 4, 0, |tape, v| {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert!(report.max_relative_error > 0.1);
    }
}
