//! Finite-difference checks of the prior operators, the gate and the
//! attribute fusion on random small instances. Each instance reduces the
//! operator output with fixed random weights and checks every input and
//! parameter.

use std::ops::Range;

use medseg_autograd::{check_gradients, Grid, Mat, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attribute_prior::{AttributeFusion, AttributeKind};
use crate::fusion_gate::{gated_fuse_op, BranchMask};
use crate::params::{Binding, Builder, ParamStore};
use crate::prior_modulation::{
    channel_attention_op, deformable_op, positional_attention_op, texture_conv_op, TEXTURE_KERNEL,
};

pub const OPERATORS: [&str; 6] = [
    "positional_attention",
    "texture_dynamic_conv",
    "shape_deformable_conv",
    "channel_cross_attention",
    "gated_fuse",
    "fuse_attributes",
];

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorCheck {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl OperatorCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| std * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn size(rng: &mut ChaCha8Rng, r: Range<usize>) -> usize {
    rng.random_range(r)
}

/// Scalar `Σ out ⊙ R` for a fixed random `R`.
fn reduce(t: &mut Tape, out: Var, weights: &Mat) -> Var {
    t.weighted_sum(out, weights)
}

fn check_one(name: &str, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let c = size(rng, 2..4);
    let grid = Grid::new(size(rng, 3..6), size(rng, 3..6));
    let hw = grid.len();
    let flat_len = size(rng, 2..6);
    let report = match name {
        "positional_attention" => {
            let r = normal(rng, c, hw, 1.0);
            let inputs = [
                normal(rng, c, hw, 1.0),
                normal(rng, 1, flat_len, 1.0),
                normal(rng, flat_len, hw, 0.5),
                normal(rng, 1, hw, 0.5),
            ];
            check_gradients(&inputs, STEP, |t, v| {
                let (out, _) = positional_attention_op(t, v[0], v[1], v[2], v[3]);
                reduce(t, out, &r)
            })
        }
        "texture_dynamic_conv" => {
            let kk = TEXTURE_KERNEL * TEXTURE_KERNEL;
            let r = normal(rng, c, hw, 1.0);
            let inputs = [
                normal(rng, c, hw, 1.0),
                normal(rng, 1, flat_len, 1.0),
                normal(rng, flat_len, kk, 0.5),
                normal(rng, 1, kk, 0.5),
            ];
            check_gradients(&inputs, STEP, |t, v| {
                let out = texture_conv_op(t, v[0], v[1], v[2], v[3], grid);
                reduce(t, out, &r)
            })
        }
        "shape_deformable_conv" => {
            let k = 3;
            let r = normal(rng, c, hw, 1.0);
            let inputs = [
                normal(rng, c, hw, 1.0),
                normal(rng, 1, flat_len, 1.0),
                normal(rng, flat_len, 3 * k * k, 0.4),
                normal(rng, 1, 3 * k * k, 0.6),
            ];
            check_gradients(&inputs, STEP, |t, v| {
                let out = deformable_op(t, v[0], v[1], v[2], v[3], grid, k);
                reduce(t, out, &r)
            })
        }
        "channel_cross_attention" => {
            let c = [2, 4, 6][size(rng, 0..3)];
            let heads = if c % 2 == 0 && rng.random_bool(0.5) { 2 } else { 1 };
            let r = normal(rng, c, hw, 1.0);
            let inputs = [
                normal(rng, c, hw, 1.0),
                normal(rng, c, hw, 1.0),
                normal(rng, c, c, 0.7),
                normal(rng, c, c, 0.7),
                normal(rng, c, c, 0.7),
                normal(rng, c, 1, 0.5),
                normal(rng, c, c, 0.7),
            ];
            check_gradients(&inputs, STEP, |t, v| {
                let out = channel_attention_op(t, v[0], v[1], v[2], v[3], v[4], v[5], v[6], heads);
                reduce(t, out, &r)
            })
        }
        "gated_fuse" => {
            let bits = size(rng, 1..8) as u8;
            let mask = BranchMask([bits & 1 != 0, bits & 2 != 0, bits & 4 != 0]);
            let r = normal(rng, c, hw, 1.0);
            let inputs = [
                normal(rng, c, hw, 1.0),
                normal(rng, c, hw, 1.0),
                normal(rng, c, hw, 1.0),
                normal(rng, 3, 3 * c, 0.5),
                normal(rng, 3, 1, 0.5),
            ];
            check_gradients(&inputs, STEP, |t, v| {
                let (out, _) = gated_fuse_op(t, [v[0], v[1], v[2]], mask, v[3], v[4]);
                reduce(t, out, &r)
            })
        }
        "fuse_attributes" => {
            let dim = [4, 6, 8][size(rng, 0..3)];
            let mut store = ParamStore::new();
            let fusion = AttributeFusion::new(&mut Builder::new(&mut store, rng.random()), "fusion", dim, 2);
            let lens = [size(rng, 1..4), size(rng, 1..3), size(rng, 1..3)];
            let n: usize = lens.iter().sum();
            let r_fused = normal(rng, n, dim, 1.0);
            let r_pooled = normal(rng, 1, dim, 1.0);
            let mut inputs: Vec<Mat> = lens.iter().map(|&l| normal(rng, l, dim, 1.0)).collect();
            let params: Vec<Mat> = store.iter().map(|(_, m)| normal(rng, m.nrows(), m.ncols(), 0.5)).collect();
            let ln_gains: Vec<bool> = store.iter().map(|(name, _)| name.ends_with(".gamma")).collect();
            for (m, gain) in params.into_iter().zip(ln_gains) {
                inputs.push(if gain { m.mapv(|x| 1.0 + 0.3 * x) } else { m });
            }
            check_gradients(&inputs, STEP, |t, v| {
                let parts: Vec<(AttributeKind, Var)> =
                    AttributeKind::ALL.iter().zip(v).map(|(&k, &x)| (k, x)).collect();
                let p = Binding::from_vars(v[3..].to_vec());
                let (fused, pooled) = fusion.forward(t, &p, &parts, true);
                let a = reduce(t, fused, &r_fused);
                let b = reduce(t, pooled, &r_pooled);
                t.add(a, b)
            })
        }
        _ => panic!("unknown operator '{name}'"),
    };
    (report.checked, report.max_rel_err)
}

/// Checks `instances` random instances of one operator.
pub fn check_operator(name: &'static str, instances: usize, seed: u64) -> OperatorCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OperatorCheck { name, instances, checked: 0, max_rel_err: 0.0 };
    for _ in 0..instances {
        let (checked, err) = check_one(name, &mut rng);
        out.checked += checked;
        out.max_rel_err = out.max_rel_err.max(err);
    }
    out
}

pub fn run_suite(instances: usize, seed: u64) -> Vec<OperatorCheck> {
    OPERATORS.iter().enumerate().map(|(i, &name)| check_operator(name, instances, seed + i as u64)).collect()
}
