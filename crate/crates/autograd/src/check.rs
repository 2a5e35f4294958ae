//! Finite-difference utilities shared by gradient tests.

/// Central-difference gradient of a scalar function of a flat parameter
/// vector. All evaluation happens in f64 regardless of the model scalar.
pub fn finite_diff_scalar_fn(f: &impl Fn(&[f64]) -> f64, p: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len());
    let mut work = p.to_vec();
    for i in 0..p.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error with an absolute floor so tiny values do not explode.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest elementwise [`rel_err`] between two equally long slices.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in max_rel_err");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}
