use crate::mask::Mask;
use crate::DataError;

/// Default Chebyshev proximity radius, in pixels.
pub const DEFAULT_TAU: usize = 2;

/// Fraction of `a`'s boundary pixels lying within Chebyshev distance `tau`
/// of any foreground pixel of `b`.
pub fn overlap_rate(a: &Mask, b: &Mask, tau: usize) -> Result<f64, DataError> {
    if !a.same_shape(b) {
        return Err(DataError::Shape("overlap_rate masks differ in shape".into()));
    }
    let boundary = a.boundary();
    if boundary.is_empty() {
        return Err(DataError::EmptyMask);
    }
    let near = b.dilate(tau);
    let hits = boundary.iter().filter(|&&(y, x)| near.get(y, x)).count();
    Ok(hits as f64 / boundary.len() as f64)
}
