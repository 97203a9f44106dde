use super::params::ParamStore;
use crate::error::{Error, Result};

/// Compares the analytic gradients already stored in `store` against central
/// differences of `forward`, returning the maximum relative error.
///
/// Each scalar is perturbed in place and restored afterwards.
pub fn finite_diff_check<F>(forward: F, store: &mut ParamStore, epsilon: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> f64,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidInput(format!(
            "epsilon {epsilon:e} outside [1e-7, 1e-3]"
        )));
    }
    let base = forward(store);
    if forward(store).to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "forward pass is not deterministic for a fixed store".into(),
        ));
    }

    let mut worst = 0.0f64;
    for pi in 0..store.len() {
        for k in 0..store.params()[pi].value.data().len() {
            let orig = store.params()[pi].value.data()[k];
            store.params_mut()[pi].value.data_mut()[k] = orig + epsilon;
            let plus = forward(store);
            store.params_mut()[pi].value.data_mut()[k] = orig - epsilon;
            let minus = forward(store);
            store.params_mut()[pi].value.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = store.params()[pi].grad.data()[k];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::numkit::Matrix;

    #[test]
    fn sum_loss_has_unit_gradient() {
        let mut s = ParamStore::new();
        let id = s
            .add("p", Matrix::from_vec(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap())
            .unwrap();
        s.grad_mut(id).fill(1.0);
        let err = finite_diff_check(|st| st.value(id).data().iter().sum(), &mut s, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn quadratic_gradient_at_three() {
        let mut s = ParamStore::new();
        let id = s.add("p", Matrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
        s.grad_mut(id).set(0, 0, 6.0);
        let err = finite_diff_check(|st| st.value(id).get(0, 0).powi(2), &mut s, 1e-5).unwrap();
        assert!(err * 6.0 < 1e-6);
    }

    #[test]
    fn detects_nondeterministic_forward() {
        let mut s = ParamStore::new();
        let id = s.add("p", Matrix::zeros(1, 1)).unwrap();
        let calls = Cell::new(0.0);
        let res = finite_diff_check(
            |st| {
                calls.set(calls.get() + 1.0);
                st.value(id).get(0, 0) + calls.get()
            },
            &mut s,
            1e-5,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let mut s = ParamStore::new();
        s.add("p", Matrix::zeros(1, 1)).unwrap();
        assert!(finite_diff_check(|_| 0.0, &mut s, 1e-2).is_err());
    }
}
