use crate::diffcore::matrix::Matrix;
use crate::diffcore::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Compare an analytic gradient against central finite differences of a
/// black-box scalar function. Returns the maximum relative error
/// max |a−n| / max(1, |a|, |n|) over all parameter entries.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Matrix],
    analytic: &[Matrix],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "{} parameter tensors against {} gradient tensors",
            params.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Matrix> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (p, pmat) in params.iter().enumerate() {
        for k in 0..pmat.data().len() {
            let orig = pmat.data()[k];
            work[p].data_mut()[k] = orig + h;
            let up = f(&work)?;
            work[p].data_mut()[k] = orig - h;
            let down = f(&work)?;
            work[p].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite evaluation while perturbing parameter {p} entry {k}"
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p].data()[k];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Build a scalar loss on a fresh tape, run backward, and compare every
/// parameter gradient to finite differences in one call.
pub fn grad_check<B>(build: B, params: &[Matrix], h: f64) -> Result<f64>
where
    B: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.param(p))
        .collect::<Result<_>>()?;
    let root = build(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Matrix> = vars.iter().map(|v| grads.wrt(*v)).collect();

    finite_difference_check(
        |ps: &[Matrix]| {
            let t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p)).collect::<Result<_>>()?;
            build(&t, &vs)?.scalar()
        },
        params,
        &analytic,
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let theta = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let err = grad_check(|_, vs| vs[0].square().sum(), &[theta], 1e-5).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = Matrix::from_vec(1, 1, vec![0.7]).unwrap();
        let err = grad_check(
            |t, _| t.scalar_constant(4.0),
            &[theta],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn tanh_matmul_chain_matches() {
        let w = Matrix::from_vec(2, 2, vec![0.4, -0.3, 0.8, 0.1]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![0.05, -0.2]).unwrap();
        let err = grad_check(
            |t, vs| {
                let x = t.constant(&Matrix::from_vec(3, 2, vec![0.3, 1.2, -0.4, 0.9, 2.0, -1.5]).unwrap())?;
                x.matmul(vs[0])?.add_bias(vs[1])?.tanh().square().mean()
            },
            &[w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let theta = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let r = finite_difference_check(
            |_| Ok(f64::NAN),
            &[theta.clone()],
            &[Matrix::zeros(1, 1)],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
