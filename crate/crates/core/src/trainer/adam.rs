use serde::{Deserialize, Serialize};

use crate::backbones::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fixed Adam moment decay rates and denominator guard.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of every parameter, index-aligned with the
/// parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        AdamState {
            hyper: AdamHyper::default(),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }
}

/// Bias-corrected Adam update in place. `grads[i]` is `None` for a
/// parameter that is not updated this step; its moments are left alone.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    learning_rate: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.value.len() {
                return Err(Error::dim("adam_step", p.value.dims(), &[g.len()]));
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of parameter {} is {} at entry {bad}",
                    p.name, g[bad]
                )));
            }
        }
    }
    state.step += 1;
    let h = state.hyper;
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let c1 = T::lit(1.0 - h.beta1.powi(state.step as i32));
    let c2 = T::lit(1.0 - h.beta2.powi(state.step as i32));
    let (lr, eps) = (T::lit(learning_rate), T::lit(h.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(&[0.5, -2.0, 3.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(vec![1.0; 3])], &mut st, 0.01).unwrap();
        let want = [0.49, -2.01, 2.99];
        for (a, b) in p.at(0).value.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[0.5, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(vec![0.0; 2])], &mut st, 0.1).unwrap();
        assert_eq!(p.at(0).value.data(), &[0.5, -2.0]);
        adam_step(&mut p, &[None], &mut st, 0.1).unwrap();
        assert_eq!(p.at(0).value.data(), &[0.5, -2.0]);
    }

    #[test]
    fn two_steps_on_a_parabola() {
        // hand-rolled oracle for f(θ) = θ², θ₀ = 1, η = 0.1
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut th, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut expect = Vec::new();
        for k in 1..=2 {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
            expect.push(th);
        }
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        let mut prev = 1.0;
        for want in expect {
            let g = 2.0 * p.at(0).value.data()[0];
            adam_step(&mut p, &[Some(vec![g])], &mut st, lr).unwrap();
            let now = p.at(0).value.data()[0];
            assert_eq!(now, want);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Some(vec![f64::NAN])], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.at(0).value.data(), &[1.0]);
        assert!(adam_step(&mut p, &[Some(vec![1.0, 2.0])], &mut st, 0.1).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Some(vec![0.1f64])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.1);
    }
}
