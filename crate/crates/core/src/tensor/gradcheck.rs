//! Central-difference verification of recorded gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Compare reverse-mode gradients of a scalar-valued recorded computation
/// against central finite differences over every entry of every parameter.
///
/// Returns the maximum of |analytic − numeric| / max(1, |analytic|).
/// The closure must rebuild the same computation from the leaves it is given.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::shape(
                "grad_check",
                "computation must be scalar".to_string(),
            ));
        }
        if !v[0].is_finite() {
            return Err(Error::Evaluation(
                "non-finite value in grad_check".to_string(),
            ));
        }
        Ok(v[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| {
            let mut owned = t.clone();
            owned.requires_grad = true;
            tape.leaf(&owned)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::shape(
            "grad_check",
            "computation must be scalar".to_string(),
        ));
    }
    if !tape.value(loss)[0].is_finite() {
        return Err(Error::Evaluation(
            "non-finite value in grad_check".to_string(),
        ));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| grads.wrt_or_zero(v, t.numel()))
        .collect();

    // Numeric pass, one entry at a time.
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for k in 0..param.numel() {
            let orig = param.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][k];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_matches_central_difference() {
        // f(θ) = θ² at θ = 3: analytic gradient 6.
        let theta = Tensor::vector(&[3.0]);
        let err = grad_check(&[theta], 1e-5, |tape, vars| {
            let x = vars[0];
            let x2 = tape.reshape(x, vec![1, 1])?;
            let sq = tape.mul(x2, x2)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = Tensor::vector(&[2.0, -1.0]);
        let err = grad_check(&[theta], 1e-5, |tape, vars| {
            let c = tape.constant(vec![5.0], vec![1]);
            let _ = vars[0];
            tape.sum(c)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let theta = Tensor::vector(&[1.0]);
        assert!(grad_check(&[theta], 0.0, |tape, vars| tape.sum(vars[0])).is_err());
    }
}
