//! Small stand-ins for the image encoder, prompt encoder and mask decoder.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use medseg_autograd::{AttnBlock, Grid, Mat, Tape, Var};
use medseg_data::{ImageSample, Mask};

use crate::nn::{Attention, LayerNorm, Linear, Mlp, TransformerLayer};
use crate::params::{Binding, Builder, ParamStore, Pid};
use crate::prior_modulation::{FeatureMap, FeatureRole};
use crate::{CoreError, Result};

/// Highest frequency of the Fourier position encoding, in cycles per image.
pub const MAX_FREQUENCY: f64 = 8.0;

/// Sin/cos encoding of a point given in [0,1]² image coordinates:
/// `[sin 2πf_i y, cos 2πf_i y]_i` then the same for `x`, with `dim/4`
/// geometric frequencies from 1 to [`MAX_FREQUENCY`].
pub fn fourier_encoding(y: f64, x: f64, dim: usize) -> Vec<f64> {
    assert!(dim.is_multiple_of(4) && dim > 0, "encoding width must be a positive multiple of 4");
    let n = dim / 4;
    let freq = |i: usize| if n == 1 { 1.0 } else { MAX_FREQUENCY.powf(i as f64 / (n - 1) as f64) };
    let mut out = Vec::with_capacity(dim);
    for v in [y, x] {
        for i in 0..n {
            let a = 2.0 * PI * freq(i) * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Encoding of every cell centre of `grid`, one row per cell.
pub fn grid_encoding(grid: Grid, dim: usize) -> Mat {
    let mut m = Mat::zeros((grid.len(), dim));
    for y in 0..grid.h {
        for x in 0..grid.w {
            let e = fourier_encoding((y as f64 + 0.5) / grid.h as f64, (x as f64 + 0.5) / grid.w as f64, dim);
            m.row_mut(y * grid.w + x).assign(&ndarray::Array1::from(e));
        }
    }
    m
}

/// Patch embedding plus encoder layers; outputs a C×(H/P·W/P) map.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub position_embedding: Pid,
    pub layers: Vec<TransformerLayer>,
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
}

impl ImageEncoder {
    pub fn new(
        b: &mut Builder,
        name: &str,
        image_size: usize,
        patch_size: usize,
        dim: usize,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        if patch_size == 0 || !image_size.is_multiple_of(patch_size) {
            return Err(CoreError::Config(format!(
                "image size {image_size} is not divisible by patch size {patch_size}"
            )));
        }
        let n = (image_size / patch_size).pow(2);
        Ok(Self {
            patch_embed: Linear::new(b, &format!("{name}.patch_embed"), patch_size * patch_size, dim),
            position_embedding: b.normal(&format!("{name}.position_embedding"), n, dim, 0.5),
            layers: (0..layers).map(|i| TransformerLayer::new(b, &format!("{name}.layer{i}"), dim, heads)).collect(),
            image_size,
            patch_size,
            dim,
        })
    }

    pub fn grid(&self) -> Grid {
        let g = self.image_size / self.patch_size;
        Grid::new(g, g)
    }

    pub fn check_image(&self, img: &ImageSample) -> Result<()> {
        if img.height != self.image_size || img.width != self.image_size {
            return Err(CoreError::Config(format!(
                "image {} is {}×{}, the encoder expects {}×{}",
                img.id, img.height, img.width, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    /// Patch rows of an image with intensities mapped to [-0.5, 0.5].
    pub fn patchify(&self, img: &ImageSample) -> Mat {
        let (s, p) = (self.image_size, self.patch_size);
        let g = s / p;
        Mat::from_shape_fn((g * g, p * p), |(n, k)| {
            let (gy, gx) = (n / g, n % g);
            let (py, px) = (k / p, k % p);
            img.pixels[(gy * p + py) * s + gx * p + px] / 255.0 - 0.5
        })
    }

    pub fn forward_batch(&self, t: &mut Tape, p: &Binding, images: &[&ImageSample]) -> Vec<Var> {
        let n = self.grid().len();
        let mut patches = Mat::zeros((n * images.len(), self.patch_size * self.patch_size));
        for (i, img) in images.iter().enumerate() {
            patches.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]).assign(&self.patchify(img));
        }
        let x = t.constant(patches);
        let x = self.patch_embed.forward(t, p, x);
        let pe = p.get(self.position_embedding);
        let pe = t.concat_rows(&vec![pe; images.len()]);
        let mut x = t.add(x, pe);
        let seqs: Vec<_> = (0..images.len()).map(|i| i * n..(i + 1) * n).collect();
        for layer in &self.layers {
            x = layer.forward(t, p, x, &seqs);
        }
        seqs.into_iter()
            .map(|r| {
                let rows = t.slice_rows(x, r.start, r.end);
                t.transpose(rows)
            })
            .collect()
    }

    pub fn encode(&self, store: &ParamStore, img: &ImageSample) -> Result<FeatureMap> {
        self.check_image(img)?;
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let f = self.forward_batch(&mut t, &p, &[img])[0];
        FeatureMap::new(t.value(f).clone(), self.grid(), FeatureRole::FSam)
    }
}

/// Three 3×3 convolutions at full image resolution (ReLU between), giving
/// the per-pixel features the decoder head combines with the upsampled
/// coarse map.
#[derive(Clone, Debug)]
pub struct PixelEncoder {
    pub conv1: Pid,
    pub bias1: Pid,
    pub conv2: Pid,
    pub bias2: Pid,
    pub conv3: Pid,
    pub bias3: Pid,
    pub channels: usize,
}

impl PixelEncoder {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            conv1: b.normal(&format!("{name}.conv1"), channels, 9, (2.0 / 9.0f64).sqrt() * 2.0),
            bias1: b.zeros(&format!("{name}.bias1"), channels, 1),
            conv2: b.glorot(&format!("{name}.conv2"), channels, 9 * channels),
            bias2: b.zeros(&format!("{name}.bias2"), channels, 1),
            conv3: b.glorot(&format!("{name}.conv3"), channels, 9 * channels),
            bias3: b.zeros(&format!("{name}.bias3"), channels, 1),
            channels,
        }
    }

    /// `image` is 1×(H·W) with intensities in [-0.5, 0.5].
    pub fn forward(&self, t: &mut Tape, p: &Binding, image: Var, grid: Grid) -> Var {
        let cols = t.im2col(image, grid, 3);
        let h = t.matmul(p.get(self.conv1), cols);
        let h = t.add_col(h, p.get(self.bias1));
        let h = t.relu(h);
        let cols = t.im2col(h, grid, 3);
        let h = t.matmul(p.get(self.conv2), cols);
        let h = t.add_col(h, p.get(self.bias2));
        let h = t.relu(h);
        let cols = t.im2col(h, grid, 3);
        let h = t.matmul(p.get(self.conv3), cols);
        t.add_col(h, p.get(self.bias3))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointPrompt {
    pub y: f64,
    pub x: f64,
    pub foreground: bool,
}

/// Spatial hint for one class, in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    None,
    Points(Vec<PointPrompt>),
    Box { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Prompt {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (hm, wm) = ((height - 1) as f64, (width - 1) as f64);
        let inside = |y: f64, x: f64| (0.0..=hm).contains(&y) && (0.0..=wm).contains(&x);
        match self {
            Prompt::None => Ok(()),
            Prompt::Points(ps) if ps.is_empty() => Err(CoreError::InvalidInput("point prompt without points".into())),
            Prompt::Points(ps) => match ps.iter().find(|p| !inside(p.y, p.x)) {
                Some(p) => Err(CoreError::InvalidInput(format!("point ({}, {}) lies outside the image", p.y, p.x))),
                None => Ok(()),
            },
            &Prompt::Box { y0, x0, y1, x1 } => {
                if !(inside(y0, x0) && inside(y1, x1)) {
                    Err(CoreError::InvalidInput("box corner lies outside the image".into()))
                } else if y0 > y1 || x0 > x1 {
                    Err(CoreError::InvalidInput("box corners are not ordered".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Corner or point positions with their embedding row.
    fn anchors(&self) -> (Vec<(f64, f64)>, Vec<usize>) {
        match self {
            Prompt::None => (Vec::new(), Vec::new()),
            Prompt::Points(ps) => {
                (ps.iter().map(|p| (p.y, p.x)).collect(), ps.iter().map(|p| p.foreground as usize).collect())
            }
            &Prompt::Box { y0, x0, y1, x1 } => (vec![(y0, x0), (y1, x1)], vec![0, 1]),
        }
    }
}

/// How prompts are drawn for a whole evaluation or training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptMode {
    None,
    Points(usize),
    Box,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptMode::None => f.write_str("none"),
            PromptMode::Points(k) => write!(f, "points:{k}"),
            PromptMode::Box => f.write_str("box"),
        }
    }
}

impl FromStr for PromptMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PromptMode::None),
            "box" => Ok(PromptMode::Box),
            _ => {
                let k =
                    s.strip_prefix("points:").and_then(|k| k.parse::<usize>().ok()).filter(|&k| k > 0).ok_or_else(
                        || CoreError::Config(format!("prompt mode '{s}' is not none, points:<k> or box")),
                    )?;
                Ok(PromptMode::Points(k))
            }
        }
    }
}

/// Prompt tokens: a learned label embedding plus the Fourier encoding of
/// the location.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    /// Rows: background point, foreground point.
    pub point_labels: Pid,
    /// Rows: top-left corner, bottom-right corner.
    pub box_corners: Pid,
    pub dim: usize,
}

impl PromptEncoder {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            point_labels: b.normal(&format!("{name}.point_labels"), 2, dim, 0.5),
            box_corners: b.normal(&format!("{name}.box_corners"), 2, dim, 0.5),
            dim,
        }
    }

    /// M×C tokens, or `None` when the prompt is empty.
    pub fn forward(&self, t: &mut Tape, p: &Binding, prompt: &Prompt, height: usize, width: usize) -> Option<Var> {
        let (anchors, rows) = prompt.anchors();
        if anchors.is_empty() {
            return None;
        }
        let table = match prompt {
            Prompt::Box { .. } => self.box_corners,
            _ => self.point_labels,
        };
        let learned = t.gather_rows(p.get(table), &rows);
        let mut pe = Mat::zeros((anchors.len(), self.dim));
        for (i, &(y, x)) in anchors.iter().enumerate() {
            let e = fourier_encoding((y + 0.5) / height as f64, (x + 0.5) / width as f64, self.dim);
            pe.row_mut(i).assign(&ndarray::Array1::from(e));
        }
        let pe = t.constant(pe);
        Some(t.add(learned, pe))
    }

    pub fn encode(&self, store: &ParamStore, prompt: &Prompt, height: usize, width: usize) -> Result<Mat> {
        prompt.validate(height, width)?;
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        Ok(match self.forward(&mut t, &p, prompt, height, width) {
            Some(v) => t.value(v).clone(),
            None => Mat::zeros((0, self.dim)),
        })
    }
}

/// Logits (classes×H·W) and the masks `σ(logit) > 0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    pub logits: Mat,
    pub masks: Vec<Mask>,
}

impl SegPrediction {
    pub fn from_logits(logits: Mat, height: usize, width: usize) -> Self {
        assert_eq!(logits.ncols(), height * width, "logit planes do not match the image");
        // σ(z) > 0.5 exactly when z > 0.
        let masks = logits
            .rows()
            .into_iter()
            .map(|row| Mask::from_fn(height, width, |y, x| row[y * width + x] > 0.0))
            .collect();
        Self { logits, masks }
    }
}

/// Two-way Transformer decoder with a hypernetwork head per query.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub class_queries: Pid,
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_t2i: LayerNorm,
    pub token_to_image: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub ln_i2t: LayerNorm,
    pub image_to_token: Attention,
    pub hyper: Mlp,
    pub pixel: PixelEncoder,
    pub image_pe: Mat,
    pub feature_grid: Grid,
    pub image_grid: Grid,
    pub dim: usize,
}

impl MaskDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        classes: usize,
        dim: usize,
        heads: usize,
        pixel_channels: usize,
        feature_grid: Grid,
        image_grid: Grid,
    ) -> Self {
        let out = dim + pixel_channels + 1;
        let hyper = Mlp::new(b, &format!("{name}.hyper"), dim, dim, out);
        // Foreground is rare: start the per-query bias negative.
        let bias = b.store.get_mut(hyper.fc2.b.unwrap());
        bias[[0, out - 1]] = -2.0;
        let fc2 = b.store.get_mut(hyper.fc2.w);
        fc2.mapv_inplace(|v| v * 0.5);
        Self {
            class_queries: b.normal(&format!("{name}.class_queries"), classes, dim, 1.0),
            ln_self: LayerNorm::new(b, &format!("{name}.ln_self"), dim),
            self_attn: Attention::new(b, &format!("{name}.self_attn"), dim, heads),
            ln_t2i: LayerNorm::new(b, &format!("{name}.ln_t2i"), dim),
            token_to_image: Attention::new(b, &format!("{name}.token_to_image"), dim, heads),
            ln_mlp: LayerNorm::new(b, &format!("{name}.ln_mlp"), dim),
            mlp: Mlp::new(b, &format!("{name}.mlp"), dim, 2 * dim, dim),
            ln_i2t: LayerNorm::new(b, &format!("{name}.ln_i2t"), dim),
            image_to_token: Attention::new(b, &format!("{name}.image_to_token"), dim, heads),
            hyper,
            pixel: PixelEncoder::new(b, &format!("{name}.pixel"), pixel_channels),
            image_pe: grid_encoding(feature_grid, dim),
            feature_grid,
            image_grid,
            dim,
        }
    }

    /// One logit plane (1×H_img·W_img) for class query `class`.
    /// `f_out` is C×HW, `prompt` M×C, `f_pix` the pixel features of the image.
    pub fn decode(&self, t: &mut Tape, p: &Binding, f_out: Var, class: usize, prompt: Option<Var>, f_pix: Var) -> Var {
        let query = t.slice_rows(p.get(self.class_queries), class, class + 1);
        let mut tokens = match prompt {
            Some(pt) => t.concat_rows(&[query, pt]),
            None => query,
        };
        let m = t.shape(tokens).0;
        let hw = self.feature_grid.len();
        let pe = t.constant(self.image_pe.clone());
        let mut x = t.transpose(f_out);

        let h = self.ln_self.forward(t, p, tokens);
        let a = self.self_attn.forward(t, p, h, h, h, vec![AttnBlock::square(0..m)]);
        tokens = t.add(tokens, a);

        let h = self.ln_t2i.forward(t, p, tokens);
        let keys = t.add(x, pe);
        let a = self.token_to_image.forward(t, p, h, keys, x, vec![AttnBlock::new(0..m, 0..hw)]);
        tokens = t.add(tokens, a);

        let h = self.ln_mlp.forward(t, p, tokens);
        let f = self.mlp.forward(t, p, h);
        tokens = t.add(tokens, f);

        let h = self.ln_i2t.forward(t, p, x);
        let q = t.add(h, pe);
        let a = self.image_to_token.forward(t, p, q, tokens, tokens, vec![AttnBlock::new(0..hw, 0..m)]);
        x = t.add(x, a);

        let out_token = t.slice_rows(tokens, 0, 1);
        let w = self.hyper.forward(t, p, out_token);
        let c = self.dim;
        let cp = self.pixel.channels;
        let wc = t.slice_cols(w, 0, c);
        let wf = t.slice_cols(w, c, c + cp);
        let bias = t.slice_cols(w, c + cp, c + cp + 1);
        // w·Up(X) = Up(w·X): project first, upsample one plane.
        let coarse = t.matmul_nt(wc, x);
        let up = t.upsample_bilinear(coarse, self.feature_grid, self.image_grid);
        let fine = t.matmul(wf, f_pix);
        let bias = t.broadcast_col(bias, self.image_grid.len());
        t.add_n(&[up, fine, bias])
    }
}
