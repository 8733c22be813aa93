//! Central finite-difference gradient checking.

use ndarray::Array2;

use super::tape::{Graph, Var};
use crate::error::{Error, Result};

/// Compare analytic gradients against central differences
/// (f(x+h) - f(x-h)) / 2h, coordinate by coordinate, over every entry of
/// every point. Returns the worst relative error, with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(
    f: F,
    points: &[Array2<f64>],
    analytic: &[Array2<f64>],
    h: f64,
) -> Result<f64>
where
    F: Fn(&[Array2<f64>]) -> f64,
{
    assert_eq!(points.len(), analytic.len(), "grad_check: point/gradient count mismatch");
    let mut worst = 0.0f64;
    let mut work: Vec<Array2<f64>> = points.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(work[pi].dim(), grad.dim(), "grad_check: gradient shape mismatch");
        let (r, c) = work[pi].dim();
        for i in 0..r {
            for j in 0..c {
                let orig = work[pi][(i, j)];
                work[pi][(i, j)] = orig + h;
                let fp = f(&work);
                work[pi][(i, j)] = orig - h;
                let fm = f(&work);
                work[pi][(i, j)] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "objective at perturbed point {pi}[{i},{j}]"
                    )));
                }
                let numeric = (fp - fm) / (2.0 * h);
                let exact = grad[(i, j)];
                let denom = exact.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((numeric - exact).abs() / denom);
            }
        }
    }
    Ok(worst)
}

/// Gradient-check a graph builder: `build` receives leaf vars created from
/// `points` (in order) and must return a scalar node. Analytic gradients come
/// from one reverse pass; the numeric side re-runs the forward pass at
/// perturbed points.
pub fn grad_check_graph<B>(build: B, points: &[Array2<f64>], h: f64) -> Result<f64>
where
    B: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars);
    let loss_value = g.scalar(out);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    let grads = g.backward(out);
    let analytic: Vec<Array2<f64>> =
        vars.iter().map(|&v| grads.get_or_zeros(v, g.shape(v))).collect();

    grad_check(
        |pts| {
            let mut g = Graph::new();
            let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        },
        points,
        &analytic,
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_matches_central_difference() {
        // f(x) = x^2 at x = 3: analytic gradient 6.
        let err = grad_check(
            |p| p[0][(0, 0)] * p[0][(0, 0)],
            &[array![[3.0]]],
            &[array![[6.0]]],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn linear_is_exact_to_machine_precision() {
        let err = grad_check(
            |p| 4.0 * p[0][(0, 0)] - 2.0 * p[0][(0, 1)],
            &[array![[1.0, 2.0]]],
            &[array![[4.0, -2.0]]],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn wrong_gradient_detected() {
        let err = grad_check(
            |p| p[0][(0, 0)] * p[0][(0, 0)],
            &[array![[3.0]]],
            &[array![[5.0]]],
            1e-6,
        )
        .unwrap();
        assert!(err > 0.1, "err {err}");
    }

    #[test]
    fn non_finite_objective_rejected() {
        let res = grad_check(|p| (-p[0][(0, 0)]).sqrt(), &[array![[1.0]]], &[array![[0.0]]], 1e-6);
        assert!(res.is_err());
    }

    #[test]
    fn graph_builder_roundtrip() {
        // f = sum((x*x) . w): both leaves get checked.
        let err = grad_check_graph(
            |g, vars| {
                let sq = g.mul(vars[0], vars[0]);
                let prod = g.mul(sq, vars[1]);
                g.sum_all(prod)
            },
            &[array![[1.0, -2.0]], array![[0.5, 2.0]]],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }
}
