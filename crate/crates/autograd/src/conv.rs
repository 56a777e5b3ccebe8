//! Spatial ops on feature maps stored as `C × (H·W)` matrices (row-major
//! spatial index `y * W + x`).

use crate::tape::{Mat, Tape, Var};

/// Spatial extent of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The four bilinear taps of a fractional position: `(y, x, weight)`.
/// Taps outside the grid are dropped (zero padding).
fn bilinear_taps(grid: Grid, sy: f64, sx: f64) -> [(isize, isize, f64); 4] {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ly = sy - y0;
    let lx = sx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let taps = [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x0 + 1, (1.0 - ly) * lx),
        (y0 + 1, x0, ly * (1.0 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ];
    taps.map(
        |(y, x, wt)| {
            if y >= 0 && x >= 0 && (y as usize) < grid.h && (x as usize) < grid.w {
                (y, x, wt)
            } else {
                (y, x, 0.0)
            }
        },
    )
}

/// Shifted copy accumulation: `dst[c, p] += wt * src[c, p + (dy, dx)]`, zero outside.
fn accumulate_shift(dst: &mut Mat, src: &Mat, grid: Grid, dy: isize, dx: isize, wt: f64) {
    if wt == 0.0 {
        return;
    }
    let (h, w) = (grid.h as isize, grid.w as isize);
    let y_lo = 0.max(-dy);
    let y_hi = h.min(h - dy);
    let x_lo = 0.max(-dx);
    let x_hi = w.min(w - dx);
    if y_lo >= y_hi || x_lo >= x_hi {
        return;
    }
    let channels = src.nrows();
    let src_s = src.as_slice().expect("standard layout");
    let dst_s = dst.as_slice_mut().expect("standard layout");
    let hw = grid.len();
    for c in 0..channels {
        let base = c * hw;
        for y in y_lo..y_hi {
            let drow = base + (y * w) as usize;
            let srow = base + ((y + dy) * w) as usize;
            for x in x_lo..x_hi {
                dst_s[drow + x as usize] += wt * src_s[(srow as isize + x + dx) as usize];
            }
        }
    }
}

/// `Σ_{c,p} a[c,p] * b[c, p + (dy,dx)]`, zero outside.
fn shifted_dot(a: &Mat, b: &Mat, grid: Grid, dy: isize, dx: isize) -> f64 {
    let (h, w) = (grid.h as isize, grid.w as isize);
    let y_lo = 0.max(-dy);
    let y_hi = h.min(h - dy);
    let x_lo = 0.max(-dx);
    let x_hi = w.min(w - dx);
    if y_lo >= y_hi || x_lo >= x_hi {
        return 0.0;
    }
    let a_s = a.as_slice().expect("standard layout");
    let b_s = b.as_slice().expect("standard layout");
    let hw = grid.len();
    let mut acc = 0.0;
    for c in 0..a.nrows() {
        let base = c * hw;
        for y in y_lo..y_hi {
            let arow = base + (y * w) as usize;
            let brow = base + ((y + dy) * w) as usize;
            for x in x_lo..x_hi {
                acc += a_s[arow + x as usize] * b_s[(brow as isize + x + dx) as usize];
            }
        }
    }
    acc
}

/// Sample positions of a depthwise deformable tap set: for tap `k`, the
/// displacement `(g_k + Δ_k)` relative to the output pixel.
fn deform_displacements(ksize: usize, offsets: &[f64], clamp: f64) -> Vec<(f64, f64)> {
    let half = (ksize / 2) as f64;
    (0..ksize * ksize)
        .map(|k| {
            let gy = (k / ksize) as f64 - half;
            let gx = (k % ksize) as f64 - half;
            let dy = offsets[2 * k].clamp(-clamp, clamp);
            let dx = offsets[2 * k + 1].clamp(-clamp, clamp);
            (gy + dy, gx + dx)
        })
        .collect()
}

impl Tape {
    /// Depthwise convolution of every channel of `x` (C×HW) with one shared
    /// k×k kernel (1×k², row-major taps), stride 1, zero padding k/2.
    pub fn depthwise_conv_shared(&mut self, x: Var, kernel: Var, grid: Grid) -> Var {
        let (_, hw) = self.shape(x);
        assert_eq!(hw, grid.len(), "depthwise_conv grid mismatch");
        let (one, kk) = self.shape(kernel);
        let ksize = (kk as f64).sqrt() as usize;
        assert!(one == 1 && ksize * ksize == kk && ksize % 2 == 1, "kernel must be 1×k² with odd k");
        let half = (ksize / 2) as isize;
        let xs = self.value(x).as_standard_layout().to_owned();
        let ks = self.value(kernel).clone();
        let mut out = Mat::zeros(xs.dim());
        for k in 0..kk {
            let dy = (k / ksize) as isize - half;
            let dx = (k % ksize) as isize - half;
            accumulate_shift(&mut out, &xs, grid, dy, dx, ks[[0, k]]);
        }
        self.push_op(
            out,
            &[x, kernel],
            Box::new(move |c| {
                let xs = c.inputs[0].as_standard_layout().to_owned();
                let g = c.grad.as_standard_layout().to_owned();
                let gx = c.needs[0].then(|| {
                    let mut gx = Mat::zeros(xs.dim());
                    for k in 0..kk {
                        let dy = (k / ksize) as isize - half;
                        let dx = (k % ksize) as isize - half;
                        accumulate_shift(&mut gx, &g, grid, -dy, -dx, c.inputs[1][[0, k]]);
                    }
                    gx
                });
                let gk = c.needs[1].then(|| {
                    let mut gk = Mat::zeros((1, kk));
                    for k in 0..kk {
                        let dy = (k / ksize) as isize - half;
                        let dx = (k % ksize) as isize - half;
                        gk[[0, k]] = shifted_dot(&g, &xs, grid, dy, dx);
                    }
                    gk
                });
                vec![gx, gk]
            }),
        )
    }

    /// Depthwise deformable convolution with one K×K kernel (1×K²) and one
    /// offset set (1×2K², `(Δy, Δx)` per tap) shared by every channel and
    /// position: `out[c,p] = Σ_k w_k · bilinear(x_c, p + g_k + Δ_k)`.
    /// Offsets are clamped to `±clamp`; taps outside the map read zero.
    pub fn deform_conv_shared(&mut self, x: Var, kernel: Var, offsets: Var, grid: Grid, clamp: f64) -> Var {
        let (_, hw) = self.shape(x);
        assert_eq!(hw, grid.len(), "deform_conv grid mismatch");
        let (one, kk) = self.shape(kernel);
        let ksize = (kk as f64).sqrt() as usize;
        assert!(one == 1 && ksize * ksize == kk, "kernel must be 1×K²");
        assert_eq!(self.shape(offsets), (1, 2 * kk), "offsets must be 1×2K²");
        let xs = self.value(x).as_standard_layout().to_owned();
        let off: Vec<f64> = self.value(offsets).iter().copied().collect();
        let disp = deform_displacements(ksize, &off, clamp);
        let mut out = Mat::zeros(xs.dim());
        for (k, &(sy, sx)) in disp.iter().enumerate() {
            let wk = self.value(kernel)[[0, k]];
            // Shared fractional part: every output pixel uses the same four
            // integer shifts with the same weights.
            for (ty, tx, wt) in shift_taps(sy, sx) {
                accumulate_shift(&mut out, &xs, grid, ty, tx, wk * wt);
            }
        }
        self.push_op(
            out,
            &[x, kernel, offsets],
            Box::new(move |c| {
                let xs = c.inputs[0].as_standard_layout().to_owned();
                let kern = c.inputs[1];
                let off: Vec<f64> = c.inputs[2].iter().copied().collect();
                let disp = deform_displacements(ksize, &off, clamp);
                let g = c.grad.as_standard_layout().to_owned();
                let mut gx = c.needs[0].then(|| Mat::zeros(xs.dim()));
                let mut gk = c.needs[1].then(|| Mat::zeros((1, kk)));
                let mut go = c.needs[2].then(|| Mat::zeros((1, 2 * kk)));
                for (k, &(sy, sx)) in disp.iter().enumerate() {
                    let wk = kern[[0, k]];
                    let taps = shift_taps(sy, sx);
                    if let Some(gx) = gx.as_mut() {
                        for &(ty, tx, wt) in &taps {
                            accumulate_shift(gx, &g, grid, -ty, -tx, wk * wt);
                        }
                    }
                    if gk.is_none() && go.is_none() {
                        continue;
                    }
                    // Correlation of the output grad with each integer shift.
                    let y0 = sy.floor() as isize;
                    let x0 = sx.floor() as isize;
                    let ly = sy - sy.floor();
                    let lx = sx - sx.floor();
                    let s00 = shifted_dot(&g, &xs, grid, y0, x0);
                    let s01 = shifted_dot(&g, &xs, grid, y0, x0 + 1);
                    let s10 = shifted_dot(&g, &xs, grid, y0 + 1, x0);
                    let s11 = shifted_dot(&g, &xs, grid, y0 + 1, x0 + 1);
                    if let Some(gk) = gk.as_mut() {
                        gk[[0, k]] = (1.0 - ly) * (1.0 - lx) * s00
                            + (1.0 - ly) * lx * s01
                            + ly * (1.0 - lx) * s10
                            + ly * lx * s11;
                    }
                    if let Some(go) = go.as_mut() {
                        let raw_dy = off[2 * k];
                        let raw_dx = off[2 * k + 1];
                        let d_sy = (1.0 - lx) * (s10 - s00) + lx * (s11 - s01);
                        let d_sx = (1.0 - ly) * (s01 - s00) + ly * (s11 - s10);
                        if raw_dy.abs() < clamp {
                            go[[0, 2 * k]] = wk * d_sy;
                        }
                        if raw_dx.abs() < clamp {
                            go[[0, 2 * k + 1]] = wk * d_sx;
                        }
                    }
                }
                vec![gx, gk, go]
            }),
        )
    }

    /// Bilinear resize of a C×(h·w) map to C×(H·W), half-pixel centres,
    /// edge-clamped source coordinates.
    pub fn upsample_bilinear(&mut self, x: Var, from: Grid, to: Grid) -> Var {
        let (channels, hw) = self.shape(x);
        assert_eq!(hw, from.len(), "upsample source grid mismatch");
        let ty = axis_taps(from.h, to.h);
        let tx = axis_taps(from.w, to.w);
        let xs = self.value(x);
        let mut out = Mat::zeros((channels, to.len()));
        for c in 0..channels {
            for (oy, &(ya, yb, wy)) in ty.iter().enumerate() {
                for (ox, &(xa, xb, wx)) in tx.iter().enumerate() {
                    let v = (1.0 - wy) * ((1.0 - wx) * xs[[c, ya * from.w + xa]] + wx * xs[[c, ya * from.w + xb]])
                        + wy * ((1.0 - wx) * xs[[c, yb * from.w + xa]] + wx * xs[[c, yb * from.w + xb]]);
                    out[[c, oy * to.w + ox]] = v;
                }
            }
        }
        self.push_op(
            out,
            &[x],
            Box::new(move |c| {
                let mut gx = Mat::zeros((channels, from.len()));
                for ch in 0..channels {
                    for (oy, &(ya, yb, wy)) in ty.iter().enumerate() {
                        for (ox, &(xa, xb, wx)) in tx.iter().enumerate() {
                            let g = c.grad[[ch, oy * to.w + ox]];
                            gx[[ch, ya * from.w + xa]] += g * (1.0 - wy) * (1.0 - wx);
                            gx[[ch, ya * from.w + xb]] += g * (1.0 - wy) * wx;
                            gx[[ch, yb * from.w + xa]] += g * wy * (1.0 - wx);
                            gx[[ch, yb * from.w + xb]] += g * wy * wx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Unfolds k×k zero-padded neighbourhoods: C×HW → (C·k²)×HW, row
    /// `c·k² + tap`. A matmul with a Cout×(C·k²) weight then gives a
    /// standard stride-1 "same" convolution.
    pub fn im2col(&mut self, x: Var, grid: Grid, ksize: usize) -> Var {
        let (channels, hw) = self.shape(x);
        assert_eq!(hw, grid.len(), "im2col grid mismatch");
        assert!(ksize % 2 == 1, "im2col kernel must be odd");
        let kk = ksize * ksize;
        let half = (ksize / 2) as isize;
        let xs = self.value(x).as_standard_layout().to_owned();
        let mut cols = Mat::zeros((channels * kk, hw));
        for k in 0..kk {
            let dy = (k / ksize) as isize - half;
            let dx = (k % ksize) as isize - half;
            for c in 0..channels {
                let row = c * kk + k;
                for y in 0..grid.h as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= grid.h as isize {
                        continue;
                    }
                    for xx in 0..grid.w as isize {
                        let sx = xx + dx;
                        if sx < 0 || sx >= grid.w as isize {
                            continue;
                        }
                        cols[[row, (y as usize) * grid.w + xx as usize]] = xs[[c, sy as usize * grid.w + sx as usize]];
                    }
                }
            }
        }
        self.push_op(
            cols,
            &[x],
            Box::new(move |c| {
                let mut gx = Mat::zeros((channels, hw));
                for k in 0..kk {
                    let dy = (k / ksize) as isize - half;
                    let dx = (k % ksize) as isize - half;
                    for ch in 0..channels {
                        let row = ch * kk + k;
                        for y in 0..grid.h as isize {
                            let sy = y + dy;
                            if sy < 0 || sy >= grid.h as isize {
                                continue;
                            }
                            for xx in 0..grid.w as isize {
                                let sx = xx + dx;
                                if sx < 0 || sx >= grid.w as isize {
                                    continue;
                                }
                                gx[[ch, sy as usize * grid.w + sx as usize]] +=
                                    c.grad[[row, y as usize * grid.w + xx as usize]];
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Integer shifts and weights of one fractional displacement.
fn shift_taps(sy: f64, sx: f64) -> [(isize, isize, f64); 4] {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ly = sy - y0;
    let lx = sx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x0 + 1, (1.0 - ly) * lx),
        (y0 + 1, x0, ly * (1.0 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ]
}

/// Per output index: (lower source, upper source, upper weight).
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let w = if hi == lo { 0.0 } else { s - lo as f64 };
            (lo, hi, w)
        })
        .collect()
}

/// Bilinear sample of a single H×W plane at a fractional position, zero
/// outside. Exposed for reference checks.
pub fn bilinear_sample(plane: &[f64], grid: Grid, sy: f64, sx: f64) -> f64 {
    bilinear_taps(grid, sy, sx)
        .iter()
        .filter(|t| t.2 != 0.0)
        .map(|&(y, x, wt)| wt * plane[y as usize * grid.w + x as usize])
        .sum()
}

/// Dense bilinear resize of a plane, same convention as
/// [`Tape::upsample_bilinear`], outside any tape.
pub fn resize_bilinear(x: &Mat, from: Grid, to: Grid) -> Mat {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let u = t.upsample_bilinear(v, from, to);
    t.value(u).clone()
}
