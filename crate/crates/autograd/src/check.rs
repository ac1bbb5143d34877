//! Central finite-difference gradient checking.

use crate::error::EngineError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Max over checked coordinates of
    /// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Location of the worst coordinate as `(input, flat index)`.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose ±h probes changed a max-pool winner.
    pub nondifferentiable: Vec<(usize, usize)>,
}

/// Relative error used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `h`, for every coordinate of every input.
///
/// Coordinates where a ±h probe flips any max-pool winner are skipped and
/// reported in [`FdReport::nondifferentiable`].
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<FdReport, EngineError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, EngineError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<Option<usize>>), EngineError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if !g.value(out).is_scalar() {
            return Err(EngineError::NotScalar { shape: g.value(out).shape().to_vec() });
        }
        Ok((g.value(out).item(), g.pool_routing()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let routing = g.pool_routing();

    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0, nondifferentiable: Vec::new() };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(v, input);
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[i].data_mut()[k] = orig + h;
            let (plus, route_plus) = eval(&probe)?;
            probe[i].data_mut()[k] = orig - h;
            let (minus, route_minus) = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            if route_plus != routing || route_minus != routing {
                report.nondifferentiable.push((i, k));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap();
        let x = Tensor::vector(vec![0.5, -0.25]);
        for h in [1e-3, 1e-4, 1e-5] {
            let report = finite_diff_check(
                |g, v| {
                    let y = g.matvec(v[0], v[1])?;
                    g.sum(y)
                },
                &[w.clone(), x.clone()],
                h,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-9, "h={h}: {report:?}");
            assert_eq!(report.checked, 6);
        }
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let logits = Tensor::vector(vec![0.2, -1.3, 0.8, 0.05]);
        let report = finite_diff_check(
            |g, v| {
                let lp = g.log_softmax(v[0])?;
                let pick = g.pick(lp, 2)?;
                g.scale(pick, -1.0)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn pool_tie_is_reported_not_checked() {
        let c = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let p = g.segment_max_pool(v[0], &[0..2])?;
                g.sum(p)
            },
            &[c],
            1e-5,
        )
        .unwrap();
        assert!(!report.nondifferentiable.is_empty());
        assert!(report.nondifferentiable.contains(&(0, 0)));
    }
}
