//! Text formatting of floats for CSV artifacts.

/// Shortest decimal text that parses back to exactly `v`.
///
/// Plain notation is used in the usual range and scientific notation outside
/// it, so tiny concentrations do not expand into hundreds of zeros.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}
