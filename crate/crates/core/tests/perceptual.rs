mod common;

use common::*;
use medseg_autograd::{attention_probs, AttnBlock, Grid, Mat};
use medseg_core::attribute_prior::{AttributeKind, AttributeTokens, SemanticPrior};
use medseg_core::params::{Builder, ParamStore};
use medseg_core::prior_modulation::{
    ChannelCrossAttention, FeatureMap, FeatureRole, PerceptualStage, PositionalAttention, PriorProjection,
    PriorToggles, ShapeDeformableConv, TextureDynamicConv, TEXTURE_KERNEL,
};
use medseg_core::CoreError;
use rand::Rng;

fn fmap(data: Mat, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(data, Grid::new(h, w), FeatureRole::FSam).unwrap()
}

fn toks(kind: AttributeKind, m: Mat) -> AttributeTokens {
    AttributeTokens { kind, embedding: m }
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().copied().collect()
}

/// `flat(tokens)·W + b` with explicit loops.
fn project(store: &ParamStore, w: medseg_core::params::Pid, b: medseg_core::params::Pid, tokens: &Mat) -> Vec<f64> {
    let (w, b) = (store.get(w), store.get(b));
    let x = flat(tokens);
    (0..w.ncols()).map(|j| x.iter().enumerate().map(|(i, v)| v * w[[i, j]]).sum::<f64>() + b[[0, j]]).collect()
}

fn set_generated(store: &mut ParamStore, w: medseg_core::params::Pid, b: medseg_core::params::Pid, values: &[f64]) {
    store.get_mut(w).fill(0.0);
    store.get_mut(b).iter_mut().zip(values).for_each(|(s, v)| *s = *v);
}

#[test]
fn zero_positional_projection_halves_the_features() {
    let grid = Grid::new(4, 5);
    let mut store = ParamStore::new();
    let op = PositionalAttention::new(&mut Builder::new(&mut store, 0), "pos", 6, grid);
    store.get_mut(op.proj.w).fill(0.0);
    let mut r = rng(1);
    let f = fmap(normal(&mut r, 3, 20, 1.0), 4, 5);
    let (out, a) = op.apply(&store, &f, &toks(AttributeKind::Position, normal(&mut r, 2, 3, 1.0))).unwrap();
    assert!(a.data.iter().all(|&v| v == 0.5));
    assert_eq!(out.role, FeatureRole::FAttn);
    assert_close(&out.data, &f.data.mapv(|v| 0.5 * v), 0.0);
}

#[test]
fn saturated_positional_gate_passes_features_through() {
    let grid = Grid::new(3, 3);
    let mut store = ParamStore::new();
    let op = PositionalAttention::new(&mut Builder::new(&mut store, 2), "pos", 4, grid);
    set_generated(&mut store, op.proj.w, op.proj.b.unwrap(), &[30.0; 9]);
    let mut r = rng(3);
    let f = fmap(normal(&mut r, 2, 9, 1.0), 3, 3);
    let (out, a) = op.apply(&store, &f, &toks(AttributeKind::Position, normal(&mut r, 1, 4, 1.0))).unwrap();
    assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v) && v > 1.0 - 1e-12));
    assert_close(&out.data, &f.data, 1e-9);
}

#[test]
fn positional_attention_matches_elementwise_reference() {
    let grid = Grid::new(8, 8);
    let mut store = ParamStore::new();
    let op = PositionalAttention::new(&mut Builder::new(&mut store, 0), "pos", 3 * 4, grid);
    let mut r = rng(0);
    store.get_mut(op.proj.w).assign(&normal(&mut r, 12, 64, 0.5));
    let f = fmap(normal(&mut r, 4, 64, 1.0), 8, 8);
    let pos = normal(&mut r, 3, 4, 1.0);
    let (out, a) = op.apply(&store, &f, &toks(AttributeKind::Position, pos.clone())).unwrap();
    let logits = project(&store, op.proj.w, op.proj.b.unwrap(), &pos);
    for c in 0..4 {
        for y in 0..8 {
            for x in 0..8 {
                let ap = sigmoid(logits[y * 8 + x]);
                assert!((a.data[[0, y * 8 + x]] - ap).abs() < 1e-12);
                assert!((out.get(c, y, x) - ap * f.get(c, y, x)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn positional_projection_must_cover_the_grid() {
    let mut store = ParamStore::new();
    let op = PositionalAttention::new(&mut Builder::new(&mut store, 0), "pos", 4, Grid::new(3, 3));
    let f = fmap(Mat::zeros((2, 16)), 4, 4);
    let err = op.apply(&store, &f, &toks(AttributeKind::Position, Mat::zeros((1, 4)))).unwrap_err();
    assert!(matches!(err, CoreError::Dimension(_)));
    let err = op
        .apply(&store, &fmap(Mat::zeros((2, 9)), 3, 3), &toks(AttributeKind::Position, Mat::zeros((1, 5))))
        .unwrap_err();
    assert!(matches!(err, CoreError::Dimension(_)));
}

fn texture_op(store: &mut ParamStore, seed: u64, prior_len: usize) -> TextureDynamicConv {
    TextureDynamicConv::new(&mut Builder::new(store, seed), "tex", prior_len)
}

#[test]
fn delta_texture_kernel_is_the_identity() {
    let mut store = ParamStore::new();
    let op = texture_op(&mut store, 0, 4);
    let mut delta = vec![0.0; 49];
    delta[24] = 1.0;
    set_generated(&mut store, op.proj.w, op.proj.b.unwrap(), &delta);
    let mut r = rng(1);
    let f = fmap(normal(&mut r, 3, 11 * 9, 1.0), 11, 9);
    let tex = toks(AttributeKind::Texture, normal(&mut r, 2, 2, 1.0));
    let k = op.kernel(&store, &tex).unwrap();
    assert_eq!(k.weights.dim(), (1, TEXTURE_KERNEL * TEXTURE_KERNEL));
    let out = op.apply(&store, &f, &tex).unwrap();
    assert_eq!(out.role, FeatureRole::FPrime);
    assert_eq!(out.data, f.data);
}

#[test]
fn zero_texture_kernel_gives_zeros() {
    let mut store = ParamStore::new();
    let op = texture_op(&mut store, 0, 4);
    set_generated(&mut store, op.proj.w, op.proj.b.unwrap(), &[0.0; 49]);
    let mut r = rng(2);
    let f = fmap(normal(&mut r, 2, 36, 1.0), 6, 6);
    let out = op.apply(&store, &f, &toks(AttributeKind::Texture, normal(&mut r, 1, 4, 1.0))).unwrap();
    assert!(out.data.iter().all(|&v| v == 0.0));
}

#[test]
fn texture_conv_matches_direct_convolution() {
    let mut store = ParamStore::new();
    let op = texture_op(&mut store, 0, 6);
    let mut r = rng(0);
    store.get_mut(op.proj.w).assign(&normal(&mut r, 6, 49, 0.3));
    let f = fmap(normal(&mut r, 2, 81, 1.0), 9, 9);
    let tex = normal(&mut r, 2, 3, 1.0);
    let out = op.apply(&store, &f, &toks(AttributeKind::Texture, tex.clone())).unwrap();
    let kernel = project(&store, op.proj.w, op.proj.b.unwrap(), &tex);
    assert_close(&out.data, &depthwise_conv(&f.data, 9, 9, &kernel, 7), 1e-12);
}

fn deform_op(store: &mut ParamStore, seed: u64) -> ShapeDeformableConv {
    ShapeDeformableConv::new(&mut Builder::new(store, seed), "shape", 4, 3)
}

#[test]
fn zero_offsets_reduce_to_depthwise_convolution() {
    let mut r = rng(0);
    for trial in 0..100 {
        let mut store = ParamStore::new();
        let op = deform_op(&mut store, trial);
        let kernel: Vec<f64> = (0..9).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut g = kernel.clone();
        g.extend([0.0; 18]);
        set_generated(&mut store, op.proj.w, op.proj.b.unwrap(), &g);
        let (h, w) = (r.random_range(3..9), r.random_range(3..9));
        let f = fmap(normal(&mut r, 3, h * w, 1.0), h, w);
        let out = op.apply(&store, &f, &toks(AttributeKind::Shape, normal(&mut r, 2, 2, 1.0))).unwrap();
        assert_eq!(out.role, FeatureRole::FFused);
        assert_close(&out.data, &depthwise_conv(&f.data, h, w, &kernel, 3), 1e-6);
    }
}

fn centre_delta_with_offset(dy: f64, dx: f64) -> Vec<f64> {
    let mut g = vec![0.0; 27];
    g[4] = 1.0;
    g[9 + 2 * 4] = dy;
    g[9 + 2 * 4 + 1] = dx;
    g
}

#[test]
fn integer_offset_shifts_by_one_row() {
    let mut store = ParamStore::new();
    let op = deform_op(&mut store, 0);
    set_generated(&mut store, op.proj.w, op.proj.b.unwrap(), &centre_delta_with_offset(1.0, 0.0));
    let (h, w) = (6, 5);
    let f = fmap(normal(&mut rng(1), 2, h * w, 1.0), h, w);
    let out = op.apply(&store, &f, &toks(AttributeKind::Shape, Mat::zeros((1, 4)))).unwrap();
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let want = if y + 1 < h { f.get(c, y + 1, x) } else { 0.0 };
                assert!((out.get(c, y, x) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn half_offset_on_a_ramp_adds_one_half() {
    let mut store = ParamStore::new();
    let op = deform_op(&mut store, 0);
    set_generated(&mut store, op.proj.w, op.proj.b.unwrap(), &centre_delta_with_offset(0.5, 0.0));
    let (h, w) = (7, 4);
    let f = fmap(Mat::from_shape_fn((2, h * w), |(_, i)| (i / w) as f64), h, w);
    let out = op.apply(&store, &f, &toks(AttributeKind::Shape, Mat::zeros((1, 4)))).unwrap();
    for y in 0..h - 1 {
        for x in 0..w {
            assert!((out.get(1, y, x) - (y as f64 + 0.5)).abs() < 1e-12);
        }
    }
}

#[test]
fn fractional_offsets_match_bilinear_reference() {
    let mut store = ParamStore::new();
    let op = deform_op(&mut store, 3);
    let mut r = rng(4);
    store.get_mut(op.proj.w).assign(&normal(&mut r, 4, 27, 0.4));
    let (h, w) = (6, 7);
    let f = fmap(normal(&mut r, 2, h * w, 1.0), h, w);
    let shape = normal(&mut r, 1, 4, 1.0);
    let out = op.apply(&store, &f, &toks(AttributeKind::Shape, shape.clone())).unwrap();
    let g = project(&store, op.proj.w, op.proj.b.unwrap(), &shape);
    for c in 0..2 {
        let plane: Vec<f64> = f.data.row(c).to_vec();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for k in 0..9 {
                    let sy = y as f64 + (k / 3) as f64 - 1.0 + g[9 + 2 * k];
                    let sx = x as f64 + (k % 3) as f64 - 1.0 + g[9 + 2 * k + 1];
                    acc += g[k] * bilinear(&plane, h, w, sy, sx);
                }
                assert!((out.get(c, y, x) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn deformable_errors() {
    let mut store = ParamStore::new();
    let op = deform_op(&mut store, 0);
    let mut g = centre_delta_with_offset(0.0, 0.0);
    g[10] = f64::NAN;
    set_generated(&mut store, op.proj.w, op.proj.b.unwrap(), &g);
    let f = fmap(Mat::zeros((1, 16)), 4, 4);
    let err = op.apply(&store, &f, &toks(AttributeKind::Shape, Mat::zeros((1, 4)))).unwrap_err();
    assert!(matches!(err, CoreError::Numeric(_)));
    let small = fmap(Mat::zeros((1, 4)), 2, 2);
    assert!(matches!(
        op.apply(&store, &small, &toks(AttributeKind::Shape, Mat::zeros((1, 4)))),
        Err(CoreError::Dimension(_))
    ));
}

fn channel_op(
    store: &mut ParamStore,
    seed: u64,
    d: usize,
    c: usize,
    grid: Grid,
    heads: usize,
) -> ChannelCrossAttention {
    ChannelCrossAttention::new(&mut Builder::new(store, seed), "chan", d, c, grid, heads, false).unwrap()
}

fn prior(pooled: Mat, fused: Mat) -> SemanticPrior {
    SemanticPrior { pooled, fused_tokens: fused }
}

#[test]
fn zero_prior_leaves_only_the_residual() {
    let grid = Grid::new(3, 4);
    let mut store = ParamStore::new();
    let op = channel_op(&mut store, 0, 6, 4, grid, 2);
    let f = fmap(normal(&mut rng(1), 4, 12, 1.0), 3, 4);
    let out = op.apply(&store, &f, &prior(Mat::zeros((1, 6)), Mat::zeros((2, 6)))).unwrap();
    assert_eq!(out.role, FeatureRole::FSem);
    assert_eq!(out.data, f.data);
}

fn pooled_map(store: &ParamStore, op: &ChannelCrossAttention, pooled: &Mat, hw: usize) -> Mat {
    let PriorProjection::Pooled(proj) = &op.projection else { panic!("pooled projection expected") };
    let p = linear(store, proj, &rows(pooled));
    Mat::from_shape_fn((p[0].len(), hw), |(c, _)| p[0][c])
}

/// Scalar reference of the channel attention with `Wq·F`, `Wk·P`,
/// `Wv·P + bv`, per-head softmax over `√HW`-scaled scores.
fn channel_reference(store: &ParamStore, op: &ChannelCrossAttention, f: &Mat, pmap: &Mat) -> Mat {
    let (c, hw) = f.dim();
    let mm = |w: &Mat, x: &Mat| -> Mat {
        Mat::from_shape_fn((w.nrows(), x.ncols()), |(i, j)| (0..w.ncols()).map(|k| w[[i, k]] * x[[k, j]]).sum())
    };
    let q = mm(store.get(op.wq), f);
    let k = mm(store.get(op.wk), pmap);
    let bv = store.get(op.bv);
    let v = mm(store.get(op.wv), pmap) + &Mat::from_shape_fn((c, hw), |(i, _)| bv[[i, 0]]);
    let g = c / op.heads;
    let mut av = Mat::zeros((c, hw));
    for h in 0..op.heads {
        for i in h * g..(h + 1) * g {
            let scores: Vec<f64> = (h * g..(h + 1) * g)
                .map(|j| dot(&q.row(i).to_vec(), &k.row(j).to_vec()) / (hw as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for (jj, j) in (h * g..(h + 1) * g).enumerate() {
                for s in 0..hw {
                    av[[i, s]] += p[jj] * v[[j, s]];
                }
            }
        }
    }
    f + &mm(store.get(op.wo), &av)
}

#[test]
fn uniform_channel_attention_averages_value_channels() {
    let grid = Grid::new(3, 3);
    let mut store = ParamStore::new();
    let op = channel_op(&mut store, 5, 4, 4, grid, 2);
    store.get_mut(op.wq).fill(0.0);
    let mut r = rng(6);
    let f = fmap(normal(&mut r, 4, 9, 1.0), 3, 3);
    let pooled = normal(&mut r, 1, 4, 1.0);
    let out = op.apply(&store, &f, &prior(pooled.clone(), pooled.clone())).unwrap();
    let pmap = pooled_map(&store, &op, &pooled, 9);
    let wv = store.get(op.wv);
    let v = Mat::from_shape_fn((4, 9), |(i, s)| (0..4).map(|k| wv[[i, k]] * pmap[[k, s]]).sum());
    let wo = store.get(op.wo);
    let group_mean = |ch: usize, s: usize| {
        let g = (ch / 2) * 2;
        (v[[g, s]] + v[[g + 1, s]]) / 2.0
    };
    for i in 0..4 {
        for s in 0..9 {
            let want = f.data[[i, s]] + (0..4).map(|ch| wo[[i, ch]] * group_mean(ch, s)).sum::<f64>();
            assert!((out.data[[i, s]] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn channel_attention_matches_softmax_reference() {
    let grid = Grid::new(3, 3);
    let mut store = ParamStore::new();
    let op = channel_op(&mut store, 0, 5, 4, grid, 2);
    let mut r = rng(0);
    store.get_mut(op.bv).assign(&normal(&mut r, 4, 1, 0.5));
    store.get_mut(op.wo).assign(&normal(&mut r, 4, 4, 0.5));
    let f = fmap(normal(&mut r, 4, 9, 1.0), 3, 3);
    let pooled = normal(&mut r, 1, 5, 1.0);
    let out = op.apply(&store, &f, &prior(pooled.clone(), pooled.clone())).unwrap();
    let pmap = pooled_map(&store, &op, &pooled, 9);
    assert_close(&out.data, &channel_reference(&store, &op, &f.data, &pmap), 1e-12);

    let q = store.get(op.wq).dot(&f.data);
    let k = store.get(op.wk).dot(&pmap);
    let blocks = [AttnBlock::square(0..2), AttnBlock::square(2..4)];
    for probs in attention_probs(&q, &k, 1, &blocks, 1.0 / 3.0) {
        for row in probs.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn channel_heads_must_divide_channels() {
    let mut store = ParamStore::new();
    let err = ChannelCrossAttention::new(&mut Builder::new(&mut store, 0), "chan", 4, 4, Grid::new(2, 2), 3, false)
        .unwrap_err();
    assert!(matches!(err, CoreError::Config(_)));
}

struct Stage {
    store: ParamStore,
    stage: PerceptualStage,
    f: FeatureMap,
    pos: AttributeTokens,
    tex: AttributeTokens,
    shape: AttributeTokens,
    prior: SemanticPrior,
}

fn stage(seed: u64) -> Stage {
    let (c, d, grid) = (4, 4, Grid::new(5, 5));
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, seed);
    let stage = PerceptualStage {
        positional: PositionalAttention::new(&mut b, "pos", 2 * d, grid),
        texture: TextureDynamicConv::new(&mut b, "tex", d),
        deformable: ShapeDeformableConv::new(&mut b, "shape", 2 * d, 3),
        channel: ChannelCrossAttention::new(&mut b, "chan", d, c, grid, 2, false).unwrap(),
    };
    let mut r = rng(seed + 100);
    store.get_mut(stage.texture.proj.w).assign(&normal(&mut r, d, 49, 0.2));
    store.get_mut(stage.deformable.proj.w).assign(&normal(&mut r, 2 * d, 27, 0.3));
    let pooled = normal(&mut r, 1, d, 1.0);
    Stage {
        f: fmap(normal(&mut r, c, 25, 1.0), 5, 5),
        pos: toks(AttributeKind::Position, normal(&mut r, 2, d, 1.0)),
        tex: toks(AttributeKind::Texture, normal(&mut r, 1, d, 1.0)),
        shape: toks(AttributeKind::Shape, normal(&mut r, 2, d, 1.0)),
        prior: prior(pooled.clone(), pooled),
        store,
        stage,
    }
}

#[test]
fn all_priors_off_passes_features_to_the_channel_step() {
    let s = stage(0);
    let (fused, sem) = s.stage.apply(&s.store, &s.f, &s.pos, &s.tex, &s.shape, &s.prior, PriorToggles::NONE).unwrap();
    assert_eq!(fused.data, s.f.data);
    let want = s.stage.channel.apply(&s.store, &s.f, &s.prior).unwrap();
    assert_eq!(sem.data, want.data);
}

#[test]
fn texture_only_with_delta_kernel_is_the_identity() {
    let mut s = stage(1);
    let mut delta = vec![0.0; 49];
    delta[24] = 1.0;
    set_generated(&mut s.store, s.stage.texture.proj.w, s.stage.texture.proj.b.unwrap(), &delta);
    let only_tex = PriorToggles { position: false, texture: true, shape: false };
    let (fused, _) = s.stage.apply(&s.store, &s.f, &s.pos, &s.tex, &s.shape, &s.prior, only_tex).unwrap();
    assert_eq!(fused.data, s.f.data);
}

#[test]
fn full_stage_equals_the_composed_operators() {
    let s = stage(2);
    let (fused, sem) = s.stage.apply(&s.store, &s.f, &s.pos, &s.tex, &s.shape, &s.prior, PriorToggles::ALL).unwrap();
    let (a, _) = s.stage.positional.apply(&s.store, &s.f, &s.pos).unwrap();
    let b = s.stage.texture.apply(&s.store, &a, &s.tex).unwrap();
    let c = s.stage.deformable.apply(&s.store, &b, &s.shape).unwrap();
    let d = s.stage.channel.apply(&s.store, &c, &s.prior).unwrap();
    assert_close(&fused.data, &c.data, 1e-12);
    assert_close(&sem.data, &d.data, 1e-12);
    assert_eq!(fused.data.dim(), s.f.data.dim());
}

#[test]
fn disabled_prior_ignores_its_tokens() {
    let s = stage(3);
    let mut r = rng(7);
    for (i, off) in [
        PriorToggles { position: false, ..PriorToggles::ALL },
        PriorToggles { texture: false, ..PriorToggles::ALL },
        PriorToggles { shape: false, ..PriorToggles::ALL },
    ]
    .into_iter()
    .enumerate()
    {
        let base = s.stage.apply(&s.store, &s.f, &s.pos, &s.tex, &s.shape, &s.prior, off).unwrap();
        let mut toks3 = [s.pos.clone(), s.tex.clone(), s.shape.clone()];
        let (n, d) = toks3[i].embedding.dim();
        toks3[i].embedding = normal(&mut r, n, d, 3.0);
        let other = s.stage.apply(&s.store, &s.f, &toks3[0], &toks3[1], &toks3[2], &s.prior, off).unwrap();
        assert_eq!(base, other);
    }
}

#[test]
fn feature_maps_reject_bad_shapes_and_values() {
    assert!(matches!(
        FeatureMap::new(Mat::zeros((2, 5)), Grid::new(2, 2), FeatureRole::FSam),
        Err(CoreError::Dimension(_))
    ));
    let mut m = Mat::zeros((1, 4));
    m[[0, 1]] = f64::INFINITY;
    assert!(matches!(FeatureMap::new(m, Grid::new(2, 2), FeatureRole::FSam), Err(CoreError::Numeric(_))));
}
