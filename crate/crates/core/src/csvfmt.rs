//! Lossless float rendering for CSV output.

/// Shortest decimal that parses back to the same `f64` (at most 17
/// significant digits). Integral values print without a fraction (`1`, not
/// `1.0`); very large or small magnitudes use exponent notation.
pub fn fmt_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}
