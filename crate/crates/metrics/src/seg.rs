use medseg_data::Mask;

use crate::MetricsError;

/// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, MetricsError> {
    if !pred.same_shape(gt) {
        return Err(MetricsError::Shape);
    }
    let (p, g) = (pred.count(), gt.count());
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection_count(gt) as f64 / (p + g) as f64)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// 1-D squared Euclidean distance transform of a sampled function
/// (lower envelope of parabolas).
#[allow(clippy::needless_range_loop)]
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = start;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Euclidean distance from every pixel to the nearest pixel of `sites`.
pub fn distance_transform(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid.iter_mut().for_each(|d| *d = d.sqrt());
    grid
}

fn directed(from: &[(usize, usize)], to_field: &[f64], w: usize) -> Vec<f64> {
    from.iter().map(|&(y, x)| to_field[y * w + x]).collect()
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries,
/// in pixels. `None` when either mask is empty.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<Option<f64>, MetricsError> {
    if !pred.same_shape(gt) {
        return Err(MetricsError::Shape);
    }
    let bp = pred.boundary();
    let bg = gt.boundary();
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let (h, w) = (pred.height(), pred.width());
    let to_g = distance_transform(h, w, &bg);
    let to_p = distance_transform(h, w, &bp);
    let d_pg = directed(&bp, &to_g, w);
    let d_gp = directed(&bg, &to_p, w);
    Ok(Some(percentile(&d_pg, 95.0).max(percentile(&d_gp, 95.0))))
}
