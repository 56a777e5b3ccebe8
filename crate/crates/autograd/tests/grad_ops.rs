use medseg_autograd::{check_gradients, AttnBlock, Grid, Mat, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Random projection of a tape value to a scalar so that no output
/// symmetry hides a wrong gradient.
fn project(t: &mut Tape, v: Var, seed: u64) -> Var {
    let (r, c) = t.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_mat(&mut rng, r, c);
    t.weighted_sum(v, &w)
}

fn assert_grad(inputs: &[Mat], f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let report = check_gradients(inputs, STEP, f);
    assert!(report.passes(TOL), "gradient mismatch: {report:?}");
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_mat(&mut rng, 3, 4);
    let b = rand_mat(&mut rng, 3, 4);
    let row = rand_mat(&mut rng, 1, 4);
    let col = rand_mat(&mut rng, 3, 1);
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        let sc = t.scale(m, 1.7);
        project(t, sc, 9)
    });
    assert_grad(&[a.clone(), row.clone(), col.clone()], |t, v| {
        let x = t.add_row(v[0], v[1]);
        let x = t.mul_row(x, v[1]);
        let x = t.add_col(x, v[2]);
        let x = t.mul_col(x, v[2]);
        project(t, x, 10)
    });
    assert_grad(&[row.clone(), col.clone()], |t, v| {
        let r = t.broadcast_row(v[0], 3);
        let c = t.broadcast_col(v[1], 4);
        let s = t.add_n(&[r, c, r]);
        project(t, s, 11)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let s = t.sigmoid(v[0]);
        let g = t.gelu(v[0]);
        let m = t.mul(s, g);
        project(t, m, 12)
    });
}

#[test]
fn matmul_shape_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_mat(&mut rng, 3, 5);
    let b = rand_mat(&mut rng, 5, 2);
    let c = rand_mat(&mut rng, 4, 5);
    assert_grad(&[a.clone(), b.clone(), c.clone()], |t, v| {
        let ab = t.matmul(v[0], v[1]);
        let act = t.matmul_nt(v[0], v[2]);
        let tr = t.transpose(act);
        let rs = t.reshape(tr, 2, 6);
        let p1 = project(t, ab, 3);
        let p2 = project(t, rs, 4);
        t.add(p1, p2)
    });
    assert_grad(&[a.clone(), c.clone()], |t, v| {
        let cat = t.concat_rows(&[v[0], v[1]]);
        let sl = t.slice_rows(cat, 1, 6);
        let sc = t.slice_cols(sl, 1, 4);
        let cc = t.concat_cols(&[sc, sc]);
        let m = t.mean_rows(cc);
        let p = project(t, m, 5);
        let s = t.sum_all(v[0]);
        let ma = t.mean_all(v[1]);
        t.add_n(&[p, s, ma])
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let g = t.gather_rows(v[0], &[2, 0, 2, 1]);
        project(t, g, 6)
    });
}

#[test]
fn softmax_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_mat(&mut rng, 4, 6);
    let gamma = rand_mat(&mut rng, 1, 6);
    let beta = rand_mat(&mut rng, 1, 6);
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let s = t.softmax_rows(v[0]);
        let c = t.softmax_cols(v[0]);
        let m = t.mul(s, c);
        project(t, m, 7)
    });
    assert_grad(&[a.clone(), gamma, beta], |t, v| {
        let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-5);
        project(t, y, 8)
    });
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = rand_mat(&mut rng, 1, 20).mapv(|v| 3.0 * v);
    let target = Mat::from_shape_fn((1, 20), |(_, j)| if j % 3 == 0 { 1.0 } else { 0.0 });
    let t1 = target.clone();
    assert_grad(std::slice::from_ref(&z), move |t, v| t.bce_with_logits(v[0], &t1));
    assert_grad(&[z], move |t, v| t.dice_loss(v[0], &target, 1.0));
}

#[test]
fn attention_gradients_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_mat(&mut rng, 5, 4);
    let k = rand_mat(&mut rng, 7, 4);
    let v = rand_mat(&mut rng, 7, 4);
    let blocks = vec![AttnBlock::new(0..2, 0..3), AttnBlock::new(2..5, 3..7)];
    let b2 = blocks.clone();
    assert_grad(&[q.clone(), k.clone(), v.clone()], move |t, x| {
        let o = t.attention(x[0], x[1], x[2], 2, b2.clone(), 0.8);
        project(t, o, 13)
    });

    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.attention(qv, kv, vv, 2, blocks.clone(), 0.8);
    let got = tape.value(out);
    // Straight-line scalar attention.
    for b in &blocks {
        for h in 0..2 {
            for i in b.queries.clone() {
                let logits: Vec<f64> = b
                    .keys
                    .clone()
                    .map(|j| (0..2).map(|c| q[[i, 2 * h + c]] * k[[j, 2 * h + c]]).sum::<f64>() * 0.8)
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..2 {
                    let want: f64 = b.keys.clone().zip(&e).map(|(j, ej)| ej / z * v[[j, 2 * h + c]]).sum();
                    assert!((got[[i, 2 * h + c]] - want).abs() < 1e-12);
                }
            }
        }
    }
}

fn direct_conv(x: &Mat, kernel: &[f64], grid: Grid) -> Mat {
    let k = (kernel.len() as f64).sqrt() as isize;
    let half = k / 2;
    let mut out = Mat::zeros(x.dim());
    for c in 0..x.nrows() {
        for y in 0..grid.h as isize {
            for xx in 0..grid.w as isize {
                let mut acc = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        let sy = y + i - half;
                        let sx = xx + j - half;
                        if sy >= 0 && sx >= 0 && sy < grid.h as isize && sx < grid.w as isize {
                            acc += kernel[(i * k + j) as usize] * x[[c, (sy as usize) * grid.w + sx as usize]];
                        }
                    }
                }
                out[[c, y as usize * grid.w + xx as usize]] = acc;
            }
        }
    }
    out
}

#[test]
fn depthwise_conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = Grid::new(5, 6);
    let x = rand_mat(&mut rng, 2, 30);
    let kern = rand_mat(&mut rng, 1, 49);
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(kern.clone()));
    let o = t.depthwise_conv_shared(xv, kv, grid);
    let want = direct_conv(&x, kern.as_slice().unwrap(), grid);
    assert!((t.value(o) - &want).iter().all(|d| d.abs() < 1e-12));

    let k3 = rand_mat(&mut rng, 1, 9);
    assert_grad(&[x, k3], move |t, v| {
        let o = t.depthwise_conv_shared(v[0], v[1], grid);
        project(t, o, 14)
    });
}

#[test]
fn deform_conv_gradients_off_lattice() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = Grid::new(6, 5);
    let x = rand_mat(&mut rng, 2, 30);
    let kern = rand_mat(&mut rng, 1, 9);
    // Fractional parts kept well away from 0 and 1.
    let offsets = Mat::from_shape_fn((1, 18), |_| {
        let whole: f64 = rng.random_range(-2..=2) as f64;
        whole + rng.random_range(0.1..0.9)
    });
    assert_grad(&[x, kern, offsets], move |t, v| {
        let o = t.deform_conv_shared(v[0], v[1], v[2], grid, 6.0);
        project(t, o, 15)
    });
}

#[test]
fn upsample_and_im2col() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let from = Grid::new(3, 4);
    let to = Grid::new(7, 9);
    let x = rand_mat(&mut rng, 2, 12);
    assert_grad(std::slice::from_ref(&x), move |t, v| {
        let u = t.upsample_bilinear(v[0], from, to);
        project(t, u, 16)
    });
    let w = rand_mat(&mut rng, 3, 18);
    assert_grad(&[x, w], move |t, v| {
        let cols = t.im2col(v[0], from, 3);
        let y = t.matmul(v[1], cols);
        project(t, y, 17)
    });
}

#[test]
fn upsample_constant_is_constant_and_identity_at_same_size() {
    let g = Grid::new(4, 4);
    let x = Mat::from_shape_fn((1, 16), |(_, j)| j as f64);
    let same = medseg_autograd::resize_bilinear(&x, g, g);
    assert_eq!(same, x);
    let c = Mat::from_elem((1, 16), 2.5);
    let up = medseg_autograd::resize_bilinear(&c, g, Grid::new(32, 32));
    assert!(up.iter().all(|v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let a = t.constant(Mat::from_elem((2, 2), 1.0));
    let b = t.leaf(Mat::from_elem((2, 2), 2.0));
    let m = t.mul(a, b);
    let s = t.sum_all(m);
    let g = t.backward(s);
    assert!(g.get(a).is_none());
    assert_eq!(g.get(b).unwrap(), &Mat::from_elem((2, 2), 1.0));
}
