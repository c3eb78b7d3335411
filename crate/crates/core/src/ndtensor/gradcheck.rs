use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Denominator floor for relative errors.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients with central differences.
///
/// `build` receives one node per entry of `leaves` and must return a scalar
/// root. It is invoked once with gradient-tracking leaves, then twice per
/// perturbed entry. Returns the worst relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<T, F>(leaves: &[Tensor<T>], build: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|l| tape.variable(l.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let base = tape.value(root).item().ok_or_else(|| {
        Error::Contract("gradient check needs a scalar root".into())
    })?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("root evaluated to {base}")));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<T>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, l)| match tape.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![T::zero(); l.len()],
        })
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|l| t.constant(l.clone())).collect();
        let r = build(&mut t, &ids)?;
        let v = t.value(r).item().map(Scalar::as_f64).unwrap_or(f64::NAN);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("perturbed root evaluated to {v}")))
        }
    };

    let h = GRADCHECK_STEP;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for (j, &orig) in leaf.data().iter().enumerate() {
            work[li].data_mut()[j] = orig + T::lit(h);
            let plus = eval(&work)?;
            work[li].data_mut()[j] = orig - T::lit(h);
            let minus = eval(&work)?;
            work[li].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[li][j].as_f64();
            let denom = a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
