//! Central-difference gradient oracle.
//!
//! Deliberately independent of the autodiff path: it only ever evaluates the
//! scalar function at perturbed inputs.

use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central differences `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` at the given indices
/// (all indices when `indices` is `None`).
pub fn central_difference(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    step: f64,
    indices: Option<&[usize]>,
) -> Vec<f64> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    idx.iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
