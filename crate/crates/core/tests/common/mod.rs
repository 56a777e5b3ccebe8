//! Straight-line reference implementations used as test oracles. They work
//! on `Vec<Vec<f64>>` rows and share no code with the library kernels.

#![allow(dead_code)]

use medseg_autograd::Mat;
use medseg_core::nn::{Attention, LayerNorm, Linear, Mlp, TransformerLayer, LN_EPS};
use medseg_core::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| std * Distribution::<f64>::sample(&StandardNormal, rng))
}

pub fn rows(m: &Mat) -> Rows {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn mat(r: &Rows) -> Mat {
    let cols = r.first().map_or(0, Vec::len);
    Mat::from_shape_fn((r.len(), cols), |(i, j)| r[i][j])
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn assert_close(a: &Mat, b: &Mat, tol: f64) {
    let d = max_abs_diff(a, b);
    assert!(d <= tol, "max abs diff {d:e} exceeds {tol:e}");
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x·W + b` row by row.
pub fn linear(store: &ParamStore, l: &Linear, x: &Rows) -> Rows {
    let w = store.get(l.w);
    let b = l.b.map(|b| store.get(b).clone());
    x.iter()
        .map(|row| {
            (0..w.ncols())
                .map(|j| {
                    let mut acc = 0.0;
                    for (i, xi) in row.iter().enumerate() {
                        acc += xi * w[[i, j]];
                    }
                    acc + b.as_ref().map_or(0.0, |b| b[[0, j]])
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Rows) -> Rows {
    let g = store.get(ln.gamma);
    let b = store.get(ln.beta);
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g[[0, j]] + b[[0, j]]).collect()
        })
        .collect()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Multi-head attention of every query row over every key row.
pub fn attention(store: &ParamStore, a: &Attention, q_in: &Rows, k_in: &Rows, v_in: &Rows) -> Rows {
    let q = linear(store, &a.wq, q_in);
    let k = linear(store, &a.wk, k_in);
    let v = linear(store, &a.wv, v_in);
    let d = q[0].len();
    let dh = d / a.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..a.heads {
        let r = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k.iter().map(|kj| dot(&qi[r.clone()], &kj[r.clone()]) * scale).collect();
            let p = softmax(&scores);
            for (j, vj) in v.iter().enumerate() {
                for c in r.clone() {
                    out[i][c] += p[j] * vj[c];
                }
            }
        }
    }
    linear(store, &a.wo, &out)
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &Rows) -> Rows {
    let h: Rows = linear(store, &m.fc1, x).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(store, &m.fc2, &h)
}

/// Pre-norm encoder layer over one sequence.
pub fn transformer_layer(store: &ParamStore, l: &TransformerLayer, x: &Rows) -> Rows {
    let h = layer_norm(store, &l.ln1, x);
    let x = add(x, &attention(store, &l.attn, &h, &h, &h));
    let h = layer_norm(store, &l.ln2, &x);
    add(&x, &mlp(store, &l.ffn, &h))
}

/// Bilinear sample of an H×W plane (row-major) at a fractional position,
/// zero outside the extent.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Zero-padded "same" convolution of every channel with one k×k kernel.
pub fn depthwise_conv(f: &Mat, h: usize, w: usize, kernel: &[f64], k: usize) -> Mat {
    let half = (k / 2) as isize;
    let mut out = Mat::zeros(f.dim());
    for c in 0..f.nrows() {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for ky in 0..k as isize {
                    for kx in 0..k as isize {
                        let (sy, sx) = (y + ky - half, x + kx - half);
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            acc += kernel[(ky * k as isize + kx) as usize] * f[[c, (sy * w as isize + sx) as usize]];
                        }
                    }
                }
                out[[c, (y * w as isize + x) as usize]] = acc;
            }
        }
    }
    out
}

/// Half-pixel-centre bilinear resize with edge clamping, one plane.
pub fn upsample(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, n: usize, on: usize| -> f64 {
        ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, x) = (src(oy, h, oh), src(ox, w, ow));
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let p = |yy: usize, xx: usize| plane[yy * w + xx];
            out.push(
                (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1)),
            );
        }
    }
    out
}

/// Zeroes the output projections of a layer, making it the identity map.
pub fn make_identity(store: &mut ParamStore, l: &TransformerLayer) {
    for pid in l.output_params() {
        store.get_mut(pid).fill(0.0);
    }
}

/// A small model and run that train in well under a second per epoch.
pub fn tiny_config() -> medseg_core::TrainConfig {
    medseg_core::TrainConfig::parse(
        "input_size=32\npatch_size=8\nd_model=16\nencoder_layers=1\nheads=2\ntext_dim=8\ntext_layers=1\ntext_heads=2\n\
         channel_heads=2\npixel_channels=4\nepochs=1\nbatch_size=4\nlearning_rate=1e-3\n",
    )
    .expect("tiny config parses")
}

pub fn tiny_data(count: usize, seed: u64) -> Vec<medseg_data::SegSample> {
    tiny_data_with(count, seed, 3)
}

pub fn tiny_data_with(count: usize, seed: u64, classes: usize) -> Vec<medseg_data::SegSample> {
    let cfg = medseg_data::DatasetConfig { image_size: 32, num_classes: classes, ..Default::default() };
    medseg_data::generate_split(&cfg, seed, count, false).expect("generation succeeds")
}
