use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference check of `f`'s gradient at `x`.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over every
/// coordinate of `x`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_difference_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps, None)
}

/// Same as [`finite_difference_check`] over several inputs at once.
///
/// `coords`, when given, restricts the numeric side to `(input, flat index)`
/// pairs; large parameter tables are usually spot-checked this way.
pub fn finite_difference_check_many<T, F>(
    f: F,
    xs: &[Tensor<T>],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid("finite_difference_check", format!("eps {eps} outside (0, 1e-2]")));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("finite_difference_check: loss".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| vec![T::zero(); x.numel()], <[T]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item().to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_difference_check: perturbed loss".into()));
        }
        Ok(v)
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = xs.iter().enumerate().flat_map(|(i, x)| (0..x.numel()).map(move |j| (i, j))).collect();
            &all
        }
    };

    let mut work: Vec<Tensor<T>> = xs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = work[i].values()[j];
        work[i].values_mut()[j] = orig + T::from_f64_lossy(eps);
        let plus = eval(&work)?;
        work[i].values_mut()[j] = orig - T::from_f64_lossy(eps);
        let minus = eval(&work)?;
        work[i].values_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i][j].to_f64_lossy();
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("finite_difference_check: gradient of input {i}")));
        }
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
