//! Central-difference verification of tape gradients.

use super::array::Real;
use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Compare the tape gradient of a scalar function against central
/// finite differences over every parameter element.
///
/// Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic: it is evaluated twice up front and the
/// two values must agree bit for bit.
pub fn grad_check<F>(f: F, params: &mut ParamStore, eps: Real) -> Real
where
    F: Fn(&Tape, &ParamStore) -> Var,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "grad_check eps {eps} outside [1e-7, 1e-3]"
    );
    let eval = |params: &ParamStore| -> Real {
        let tape = Tape::new();
        let loss = f(&tape, params);
        assert_eq!(loss.shape().iter().product::<usize>(), 1, "loss must be scalar");
        loss.item()
    };

    let v1 = eval(params);
    let v2 = eval(params);
    assert!(
        v1.to_bits() == v2.to_bits(),
        "grad_check requires a deterministic function: {v1} != {v2}"
    );

    params.zero_grads();
    {
        let tape = Tape::new();
        let loss = f(&tape, params);
        tape.backward(&loss, params);
    }
    let analytic: Vec<(String, Vec<Real>)> = params
        .names()
        .map(|n| (n.to_string(), params.grad(n).data().to_vec()))
        .collect();

    let mut max_rel = 0.0;
    for (name, grads) in &analytic {
        for (idx, &a) in grads.iter().enumerate() {
            let orig = params.value(name).data()[idx];
            params.value_mut(name).data_mut()[idx] = orig + eps;
            let plus = eval(params);
            params.value_mut(name).data_mut()[idx] = orig - eps;
            let minus = eval(params);
            params.value_mut(name).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamStore::new();
        params.insert_glorot("w", vec![3, 4], &mut rng);
        params.insert_glorot("b", vec![3], &mut rng);
        // loss = sum((W x + b)^2) for a fixed x
        let x = Array::from_rows(&[vec![0.3, -0.7, 1.1, 0.2]]);
        let err = grad_check(
            move |tape, p| {
                let xv = tape.constant(x.clone());
                let w = tape.leaf(p, "w");
                let b = tape.leaf(p, "b");
                let y = xv.linear(&w, &b);
                y.mul(&y).sum_all()
            },
            &mut params,
            1e-5,
        );
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn zero_parameter_function_has_zero_error() {
        let mut params = ParamStore::new();
        let err = grad_check(|tape, _| tape.scalar(4.0).mul(&tape.scalar(0.5)), &mut params, 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    #[should_panic(expected = "deterministic")]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let mut params = ParamStore::new();
        params.insert("p", Array::scalar(1.0));
        let counter = Cell::new(0.0);
        grad_check(
            move |tape, p| {
                counter.set(counter.get() + 1.0);
                tape.leaf(p, "p").scale(counter.get()).sum_all()
            },
            &mut params,
            1e-5,
        );
    }

    #[test]
    #[should_panic(expected = "eps")]
    fn eps_out_of_range_is_rejected() {
        let mut params = ParamStore::new();
        grad_check(|tape, _| tape.scalar(1.0), &mut params, 0.1);
    }
}
