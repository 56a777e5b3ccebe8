use crate::MetricsError;

struct Moments {
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn moments(xs: &[f64], ys: &[f64]) -> Result<Moments, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::Length(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(MetricsError::TooFew(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut m = Moments { sxx: 0.0, syy: 0.0, sxy: 0.0 };
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        m.sxx += dx * dx;
        m.syy += dy * dy;
        m.sxy += dx * dy;
    }
    if m.sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("xs"));
    }
    Ok(m)
}

/// Sample Pearson correlation, clamped to [-1, 1] against rounding.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    let m = moments(xs, ys)?;
    if m.syy == 0.0 {
        return Err(MetricsError::ZeroVariance("ys"));
    }
    Ok((m.sxy / (m.sxx * m.syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    let m = moments(xs, ys)?;
    Ok(m.sxy / m.sxx)
}
