//! Finite-difference gradient checking.

use crate::graph::Tensor;
use crate::raw::RawTensor;

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` maps freshly created vars (one per entry of `inputs`) to a scalar.
/// Every coordinate of every input is perturbed, so keep inputs small.
/// Panics with the offending coordinate when the relative error exceeds
/// `tol`; an absolute floor of `1e-8` absorbs coordinates where both
/// values are ~0.
pub fn assert_gradients_match<F>(f: F, inputs: &[RawTensor], eps: f64, tol: f64)
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let vars: Vec<Tensor> = inputs.iter().map(|r| Tensor::var(r.clone())).collect();
    let out = f(&vars);
    assert_eq!(out.value().len(), 1, "gradient check target must be scalar");
    let grads = out.backward();

    let eval = |perturbed: &[RawTensor]| -> f64 {
        let vars: Vec<Tensor> = perturbed.iter().map(|r| Tensor::leaf(r.clone())).collect();
        f(&vars).value().as_scalar()
    };

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&vars[i]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = bump(input, j, eps);
            minus[i] = bump(input, j, -eps);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            assert!(
                err <= tol * scale + 1e-8,
                "grad mismatch at input {i} coord {j}: analytic {a}, numeric {numeric}, err {err}"
            );
        }
    }
}

fn bump(t: &RawTensor, j: usize, delta: f64) -> RawTensor {
    let mut data = t.to_vec();
    data[j] += delta;
    RawTensor::new(t.shape().to_vec(), data)
}
