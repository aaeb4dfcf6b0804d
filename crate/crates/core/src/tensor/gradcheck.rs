//! Finite-difference verification of autodiff gradients.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::ParamStore;

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

/// Coordinates below this analytic magnitude sit under the central-difference
/// roundoff floor (about 1e-12..1e-11 absolute for a deep f64 forward pass at
/// h = 1e-4); comparing them measures noise, not the backward rule.
pub const FD_SIGNAL_CUTOFF: f64 = 1e-6;

/// Compare autodiff gradients of a scalar-valued `f` against central
/// finite differences on sampled coordinates of every parameter.
///
/// `f` must be deterministic (run dropout in eval mode); two forward
/// evaluations that disagree are a contract error. The relative error per
/// coordinate is |a - n| / max(|a|, |n|, 1e-8).
///
/// Per tensor, coordinates are sampled uniformly among those whose
/// analytic gradient clears [`FD_SIGNAL_CUTOFF`]; when too few clear it,
/// the largest-magnitude entries are taken instead. A backward rule that
/// drops a gradient entirely still fails: the zero analytic entries get
/// compared against a clearly nonzero difference quotient.
pub fn grad_check<S, F>(
    f: &F,
    params: &ParamStore<S>,
    h: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&ParamStore<S>, &mut Graph<S>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Param(format!(
            "grad_check step h={h} outside [1e-6, 1e-4]"
        )));
    }
    if coords_per_param == 0 {
        return Err(Error::Param("coords_per_param must be positive".into()));
    }

    let eval = |store: &ParamStore<S>| -> Result<f64> {
        let mut graph = Graph::new();
        let loss = f(store, &mut graph)?;
        let value = graph.value(loss);
        if value.numel() != 1 {
            return Err(Error::contract(format!(
                "grad_check objective must be scalar, got shape {:?}",
                value.shape()
            )));
        }
        Ok(value.item().as_f64())
    };

    // Determinism gate: a stochastic objective (fresh RNG per call) would
    // corrupt the finite differences silently.
    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "objective is not deterministic: {first} vs {second}"
        )));
    }

    // Analytic gradients, collected by parameter name.
    let mut analytic_store = params.clone();
    analytic_store.zero_grads();
    {
        let mut graph = Graph::new();
        let loss = f(&analytic_store, &mut graph)?;
        let cloned = analytic_store.clone();
        let _ = graph.backward_params(loss, &mut analytic_store)?;
        drop(cloned);
    }

    let mut rng = StreamRng::new(seed, "grad_check");
    let mut working = params.clone();
    working.zero_grads();

    let mut max_rel_err: f64 = 0.0;
    let mut coords_checked = 0;
    let mut worst: Option<WorstCoord> = None;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let tensor = params.get(name)?;
        let n = tensor.numel();
        let analytic_grad = analytic_store.get(name)?.grad().map(<[S]>::to_vec);
        let abs = |i: usize| -> f64 {
            analytic_grad.as_ref().map_or(0.0, |g| g[i].as_f64().abs())
        };

        let picks = coords_per_param.min(n);
        let mut eligible: Vec<usize> = (0..n).filter(|&i| abs(i) >= FD_SIGNAL_CUTOFF).collect();
        let chosen: Vec<usize> = if eligible.len() >= picks {
            rng.shuffle(&mut eligible);
            eligible.truncate(picks);
            eligible
        } else {
            let mut by_magnitude: Vec<usize> = (0..n).collect();
            by_magnitude.sort_by(|&i, &j| {
                abs(j).partial_cmp(&abs(i)).expect("finite grads").then(i.cmp(&j))
            });
            by_magnitude.truncate(picks);
            by_magnitude
        };

        for index in chosen {
            let original = tensor.data()[index];

            working.nudge(name, index, original + S::from_f64(h));
            let plus = eval(&working)?;
            working.nudge(name, index, original - S::from_f64(h));
            let minus = eval(&working)?;
            working.nudge(name, index, original);

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = analytic_grad
                .as_ref()
                .map_or(0.0, |g| g[index].as_f64());

            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            coords_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some(WorstCoord {
                    name: name.clone(),
                    index,
                    analytic,
                    numeric,
                });
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        coords_checked,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn quadratic_store() -> ParamStore<f64> {
        let mut s = ParamStore::new(4);
        s.init_normal("w", vec![3, 3], 1.0).unwrap();
        s.init_normal("b", vec![3], 1.0).unwrap();
        s
    }

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let store = quadratic_store();
        // f = sum(w (.) w) + sum(b (.) b): central differences are exact.
        let f = |store: &ParamStore<f64>, g: &mut Graph<f64>| {
            let w = g.param(store, "w")?;
            let b = g.param(store, "b")?;
            let w2 = g.mul(w, w)?;
            let b2 = g.mul(b, b)?;
            let sw = g.sum_all(w2)?;
            let sb = g.sum_all(b2)?;
            g.add(sw, sb)
        };
        let report = grad_check(&f, &store, 1e-5, 16, 0).unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.coords_checked, 9 + 3);
    }

    #[test]
    fn nondeterministic_objective_rejected() {
        let store = quadratic_store();
        let calls = AtomicU64::new(0);
        let f = move |store: &ParamStore<f64>, g: &mut Graph<f64>| {
            let w = g.param(store, "w")?;
            let jitter = calls.fetch_add(1, Ordering::SeqCst) as f64 * 0.1;
            let s = g.sum_all(w)?;
            let noisy = g.scale(s, 1.0 + jitter)?;
            Ok(noisy)
        };
        let err = grad_check(&f, &store, 1e-5, 4, 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
        assert!(err.to_string().contains("deterministic"));
    }

    #[test]
    fn step_outside_range_rejected() {
        let store = quadratic_store();
        let f = |store: &ParamStore<f64>, g: &mut Graph<f64>| {
            let w = g.param(store, "w")?;
            g.sum_all(w)
        };
        assert!(matches!(
            grad_check(&f, &store, 1e-2, 4, 0),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            grad_check(&f, &store, 1e-8, 4, 0),
            Err(Error::Param(_))
        ));
    }
}
