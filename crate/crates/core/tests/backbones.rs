mod common;

use std::f64::consts::PI;

use common::*;
use medseg_autograd::{Grid, Mat, Tape};
use medseg_core::backbones::{fourier_encoding, ImageEncoder, MaskDecoder, PointPrompt, PromptEncoder, MAX_FREQUENCY};
use medseg_core::params::{Builder, ParamStore};
use medseg_core::prior_modulation::FeatureRole;
use medseg_core::{CoreError, Prompt, PromptMode, SegPrediction};
use medseg_data::ImageSample;
use rand::Rng;

fn image(size: usize, pixels: Vec<f64>) -> ImageSample {
    ImageSample { id: "img".into(), height: size, width: size, pixels }
}

fn random_image(size: usize, seed: u64) -> ImageSample {
    let mut r = rng(seed);
    image(size, (0..size * size).map(|_| r.random_range(0.0..=255.0f64).round()).collect())
}

#[test]
fn zero_embedding_and_identity_layers_give_zero_features() {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut Builder::new(&mut store, 0), "image", 32, 8, 16, 2, 2).unwrap();
    for pid in [enc.patch_embed.w, enc.patch_embed.b.unwrap(), enc.position_embedding] {
        store.get_mut(pid).fill(0.0);
    }
    for l in &enc.layers {
        make_identity(&mut store, l);
    }
    let f = enc.encode(&store, &image(32, vec![127.5; 32 * 32])).unwrap();
    assert_eq!(f.role, FeatureRole::FSam);
    assert_eq!(f.data.dim(), (16, 16));
    assert!(f.data.iter().all(|&v| v == 0.0));
}

#[test]
fn image_encoding_is_deterministic() {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut Builder::new(&mut store, 1), "image", 32, 8, 16, 2, 2).unwrap();
    let img = random_image(32, 2);
    assert_eq!(enc.encode(&store, &img).unwrap(), enc.encode(&store, &img).unwrap());
}

#[test]
fn image_encoder_matches_layerwise_reference() {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut Builder::new(&mut store, 0), "image", 64, 8, 64, 4, 4).unwrap();
    let img = random_image(64, 0);
    let got = enc.encode(&store, &img).unwrap();
    assert_eq!(got.data.dim(), (64, 64));
    assert_eq!(got.grid, Grid::new(8, 8));

    let mut patches: Rows = Vec::new();
    for gy in 0..8 {
        for gx in 0..8 {
            let mut row = Vec::new();
            for py in 0..8 {
                for px in 0..8 {
                    row.push(img.pixels[(gy * 8 + py) * 64 + gx * 8 + px] / 255.0 - 0.5);
                }
            }
            patches.push(row);
        }
    }
    let pe = rows(store.get(enc.position_embedding));
    let mut x = add(&linear(&store, &enc.patch_embed, &patches), &pe);
    for l in &enc.layers {
        x = transformer_layer(&store, l, &x);
    }
    assert_close(&got.data, &mat(&x).t().to_owned(), 1e-10);
}

#[test]
fn image_size_must_divide_into_patches() {
    let mut store = ParamStore::new();
    let err = ImageEncoder::new(&mut Builder::new(&mut store, 0), "image", 30, 8, 16, 1, 2).unwrap_err();
    assert!(matches!(err, CoreError::Config(_)));
    let enc = ImageEncoder::new(&mut Builder::new(&mut store, 0), "image", 32, 8, 16, 1, 2).unwrap();
    assert!(enc.encode(&store, &random_image(16, 0)).is_err());
}

fn prompt_encoder(dim: usize) -> (ParamStore, PromptEncoder) {
    let mut store = ParamStore::new();
    let enc = PromptEncoder::new(&mut Builder::new(&mut store, 0), "prompt", dim);
    (store, enc)
}

fn point(y: f64, x: f64) -> PointPrompt {
    PointPrompt { y, x, foreground: true }
}

#[test]
fn empty_prompt_has_no_tokens() {
    let (store, enc) = prompt_encoder(16);
    assert_eq!(enc.encode(&store, &Prompt::None, 64, 64).unwrap().dim(), (0, 16));
}

#[test]
fn identical_points_give_identical_tokens() {
    let (store, enc) = prompt_encoder(16);
    let m = enc.encode(&store, &Prompt::Points(vec![point(10.0, 20.0), point(10.0, 20.0)]), 64, 64).unwrap();
    assert_eq!(m.dim(), (2, 16));
    assert_eq!(m.row(0), m.row(1));
}

/// `[sin, cos]` pairs at frequencies `8^(i/(n−1))`, first for y then x.
fn encoding_reference(y: f64, x: f64, dim: usize) -> Vec<f64> {
    let n = dim / 4;
    let mut out = Vec::new();
    for v in [y, x] {
        for i in 0..n {
            let f = MAX_FREQUENCY.powf(i as f64 / (n - 1) as f64);
            out.push((2.0 * PI * f * v).sin());
            out.push((2.0 * PI * f * v).cos());
        }
    }
    out
}

#[test]
fn point_tokens_match_positional_encoding_reference() {
    let (store, enc) = prompt_encoder(16);
    let (h, w) = (64, 64);
    let pts = vec![point(31.5, 31.5), point(0.0, 0.0), PointPrompt { y: 63.0, x: 5.0, foreground: false }];
    let m = enc.encode(&store, &Prompt::Points(pts.clone()), h, w).unwrap();
    let labels = store.get(enc.point_labels);
    for (i, p) in pts.iter().enumerate() {
        let e = encoding_reference((p.y + 0.5) / h as f64, (p.x + 0.5) / w as f64, 16);
        let row = p.foreground as usize;
        for j in 0..16 {
            assert!((m[[i, j]] - (labels[[row, j]] + e[j])).abs() < 1e-12);
        }
    }
    // The centre sits at one half in both axes: sin 2πf·½ = sin πf.
    let centre = fourier_encoding(0.5, 0.5, 16);
    assert!((centre[0] - 0.0).abs() < 1e-12 && (centre[1] + 1.0).abs() < 1e-12);
}

#[test]
fn box_gives_two_corner_tokens() {
    let (store, enc) = prompt_encoder(8);
    let m = enc.encode(&store, &Prompt::Box { y0: 2.0, x0: 3.0, y1: 40.0, x1: 50.0 }, 64, 64).unwrap();
    let corners = store.get(enc.box_corners);
    let e0 = encoding_reference(2.5 / 64.0, 3.5 / 64.0, 8);
    let e1 = encoding_reference(40.5 / 64.0, 50.5 / 64.0, 8);
    for j in 0..8 {
        assert!((m[[0, j]] - (corners[[0, j]] + e0[j])).abs() < 1e-12);
        assert!((m[[1, j]] - (corners[[1, j]] + e1[j])).abs() < 1e-12);
    }
}

#[test]
fn invalid_prompts_are_rejected() {
    let (store, enc) = prompt_encoder(8);
    let bad = [
        Prompt::Points(vec![]),
        Prompt::Points(vec![point(64.0, 3.0)]),
        Prompt::Points(vec![point(-1.0, 3.0)]),
        Prompt::Box { y0: 5.0, x0: 5.0, y1: 4.0, x1: 9.0 },
        Prompt::Box { y0: 0.0, x0: 0.0, y1: 10.0, x1: 70.0 },
    ];
    for p in bad {
        assert!(matches!(enc.encode(&store, &p, 64, 64), Err(CoreError::InvalidInput(_))), "{p:?}");
    }
}

#[test]
fn prompt_modes_parse_and_print() {
    for m in [PromptMode::None, PromptMode::Points(1), PromptMode::Points(5), PromptMode::Box] {
        assert_eq!(m.to_string().parse::<PromptMode>().unwrap(), m);
    }
    for bad in ["points:0", "points:", "boxes", ""] {
        assert!(bad.parse::<PromptMode>().is_err());
    }
}

struct Dec {
    store: ParamStore,
    dec: MaskDecoder,
}

fn decoder(classes: usize) -> Dec {
    let mut store = ParamStore::new();
    let dec = MaskDecoder::new(
        &mut Builder::new(&mut store, 0),
        "decoder",
        classes,
        8,
        2,
        3,
        Grid::new(4, 4),
        Grid::new(16, 16),
    );
    Dec { store, dec }
}

impl Dec {
    fn decode(&self, f_out: &Mat, class: usize, f_pix: &Mat) -> Mat {
        let mut t = Tape::new();
        let p = self.store.bind_frozen(&mut t);
        let f = t.constant(f_out.clone());
        let px = t.constant(f_pix.clone());
        let out = self.dec.decode(&mut t, &p, f, class, None, px);
        t.value(out).clone()
    }
}

#[test]
fn zero_heads_give_zero_logits_and_background() {
    let mut d = decoder(2);
    let fc2 = &d.dec.hyper.fc2;
    d.store.get_mut(fc2.w).fill(0.0);
    d.store.get_mut(fc2.b.unwrap()).fill(0.0);
    let logits = d.decode(&Mat::zeros((8, 16)), 1, &Mat::zeros((3, 256)));
    assert!(logits.iter().all(|&v| v == 0.0));
    let pred = SegPrediction::from_logits(logits, 16, 16);
    assert_eq!(pred.masks.len(), 1);
    assert_eq!(pred.masks[0].count(), 0);
}

#[test]
fn identity_decoder_upsamples_the_projected_features() {
    let mut d = decoder(1);
    let dec = &d.dec;
    let lins = [&dec.self_attn.wo, &dec.token_to_image.wo, &dec.mlp.fc2, &dec.image_to_token.wo];
    let pids: Vec<_> = lins.iter().flat_map(|l| [l.w, l.b.unwrap()]).collect();
    for pid in pids {
        d.store.get_mut(pid).fill(0.0);
    }
    let mut r = rng(3);
    let f_out = normal(&mut r, 8, 16, 1.0);
    let f_pix = normal(&mut r, 3, 256, 1.0);
    let got = d.decode(&f_out, 0, &f_pix);

    let query = rows(&d.store.get(d.dec.class_queries).clone());
    let w = mlp(&d.store, &d.dec.hyper, &query)[0].clone();
    let coarse: Vec<f64> = (0..16).map(|s| (0..8).map(|c| w[c] * f_out[[c, s]]).sum()).collect();
    let up = upsample(&coarse, 4, 4, 16, 16);
    for i in 0..256 {
        let fine: f64 = (0..3).map(|k| w[8 + k] * f_pix[[k, i]]).sum();
        let want = up[i] + fine + w[11];
        assert!((got[[0, i]] - want).abs() < 1e-12, "pixel {i}");
    }
}

#[test]
fn eight_class_queries_give_eight_planes() {
    let d = decoder(8);
    let mut r = rng(4);
    let f_out = normal(&mut r, 8, 16, 1.0);
    let f_pix = normal(&mut r, 3, 256, 1.0);
    let planes: Vec<Mat> = (0..8).map(|c| d.decode(&f_out, c, &f_pix)).collect();
    assert!(planes.iter().all(|p| p.dim() == (1, 256)));
    assert_ne!(planes[0], planes[7]);
}

#[test]
fn masks_threshold_strictly_above_one_half() {
    let logits = Mat::from_shape_vec((1, 4), vec![0.0, 1e-9, -3.0, 5.0]).unwrap();
    let pred = SegPrediction::from_logits(logits, 2, 2);
    assert_eq!(pred.masks[0].bits(), &[0, 1, 0, 1]);
}
