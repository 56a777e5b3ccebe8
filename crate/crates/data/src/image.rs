use crate::DataError;

/// Single-channel image with intensities in [0, 255], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageSample {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Affine min-max rescale of raw intensities to [0, 255]. A constant image
/// maps to all zeros.
pub fn normalize_intensity(id: &str, height: usize, width: usize, raw: &[f64]) -> Result<ImageSample, DataError> {
    if raw.len() != height * width {
        return Err(DataError::Shape(format!("image of {height}x{width} given {} values", raw.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinite("image intensities".into()));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        let s = 255.0 / (hi - lo);
        raw.iter().map(|v| (v - lo) * s).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(ImageSample { id: id.to_string(), height, width, pixels })
}
