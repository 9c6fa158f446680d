//! Central finite-difference utilities for checking analytic gradients.

use crate::real::Real;
use crate::tensor::Tensor;

/// Central-difference estimate of `d f / d x` at every coordinate listed in
/// `coords` (all coordinates when `None`).
pub fn numeric_gradient<T: Real>(
    x: &Tensor<T>,
    step: T,
    coords: Option<&[usize]>,
    mut f: impl FnMut(&Tensor<T>) -> T,
) -> Vec<(usize, T)> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let two = T::of(2.0);
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (i, (plus - minus) / (two * step))
        })
        .collect()
}

/// `||a - n|| / max(||a||, ||n||, tiny)` over the probed coordinates, where
/// `a` is the analytic gradient and `n` the numeric estimate.
pub fn relative_error<T: Real>(analytic: &Tensor<T>, numeric: &[(usize, T)]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for &(i, n) in numeric {
        let a = analytic.data()[i].as_f64();
        let n = n.as_f64();
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}
