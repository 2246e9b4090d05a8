//! Shared helpers for the oracle test suites.

use mlda_core::autodiff::{Scalar, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [lo, hi], nudged away from zero by `kink_margin` so
/// relu/maxpool/clamp subgradient kinks never coincide with test points.
pub fn random_values(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kink_margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v: f64 = r.gen_range(lo..hi);
            if v.abs() < kink_margin {
                v = if v >= 0.0 { kink_margin } else { -kink_margin };
            }
            v
        })
        .collect()
}

pub fn tensor_of<T: Scalar>(shape: Vec<usize>, values: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, values.iter().map(|&v| T::of(v)).collect()).unwrap()
}

pub const FD_EPSILON: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = (a.abs() + b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Central finite-difference gradient check in double precision.
///
/// `build` must construct the graph from the given leaf tensors on the given
/// tape and return a scalar loss. The analytic gradient of each watched leaf
/// is compared element-wise against (f(x+eps) - f(x-eps)) / (2 eps). For
/// leaves listed in `negated`, the analytic gradient is compared against the
/// NEGATED finite difference: that is the defining property of paths through
/// a gradient-reversal node of strength 1.
pub fn check_gradients_full(
    name: &str,
    leaf_values: &[(Vec<usize>, Vec<f64>)],
    negated: &[usize],
    build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
) {
    let eval = |values: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor<f64>> = values
            .iter()
            .map(|(shape, vals)| tensor_of(shape.clone(), vals))
            .collect();
        build(&mut tape, &leaves).item()
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = leaf_values
        .iter()
        .map(|(shape, vals)| {
            let t = tensor_of(shape.clone(), vals);
            tape.watch(&t)
        })
        .collect();
    let loss = build(&mut tape, &leaves);
    assert!(loss.is_scalar(), "{name}: loss must be scalar");
    let grads = tape.backward(&loss).unwrap();

    let mut max_rel = 0.0f64;
    for (li, (shape, vals)) in leaf_values.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(&leaves[li]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; vals.len()],
        };
        let sign = if negated.contains(&li) { -1.0 } else { 1.0 };
        for i in 0..vals.len() {
            let mut plus = leaf_values.to_vec();
            plus[li].1[i] += FD_EPSILON;
            let mut minus = leaf_values.to_vec();
            minus[li].1[i] -= FD_EPSILON;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPSILON);
            let rel = relative_error(analytic[i], sign * numeric);
            max_rel = max_rel.max(rel);
            assert!(
                rel < FD_TOLERANCE,
                "{name}: leaf {li} elem {i} (shape {shape:?}): analytic {} vs numeric {} (rel {rel:.3e})",
                analytic[i],
                sign * numeric,
            );
        }
    }
    let _ = max_rel;
}

pub fn check_gradients(
    name: &str,
    leaf_values: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
) {
    check_gradients_full(name, leaf_values, &[], build)
}
