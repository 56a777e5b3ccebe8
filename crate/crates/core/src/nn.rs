//! Dense layers and pre-norm Transformer blocks over token rows.

use std::ops::Range;

use medseg_autograd::{AttnBlock, Mat, Tape, Var};

use crate::params::{Binding, Builder, Pid};

pub const LN_EPS: f64 = 1e-5;

/// `x·W + b` with `W` in×out and `b` 1×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Pid,
    pub b: Option<Pid>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self { w: b.glorot(&format!("{name}.w"), fan_in, fan_out), b: Some(b.zeros(&format!("{name}.b"), 1, fan_out)) }
    }

    pub fn no_bias(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self { w: b.glorot(&format!("{name}.w"), fan_in, fan_out), b: None }
    }

    /// Small-weight projection whose bias starts at `bias`.
    pub fn with_bias(b: &mut Builder, name: &str, fan_in: usize, std: f64, bias: Mat) -> Self {
        let fan_out = bias.ncols();
        Self { w: b.normal(&format!("{name}.w"), fan_in, fan_out, std), b: Some(b.filled(&format!("{name}.b"), bias)) }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let y = t.matmul(x, p.get(self.w));
        match self.b {
            Some(b) => t.add_row(y, p.get(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Pid,
    pub beta: Pid,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.filled(&format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: b.zeros(&format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        t.layer_norm_rows(x, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{name}: {heads} heads do not divide {dim}");
        Self {
            wq: Linear::new(b, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(b, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(b, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(b, &format!("{name}.wo"), dim, dim),
            heads,
        }
    }

    /// Queries from `q_in`, keys from `k_in`, values from `v_in`.
    pub fn forward(&self, t: &mut Tape, p: &Binding, q_in: Var, k_in: Var, v_in: Var, blocks: Vec<AttnBlock>) -> Var {
        let q = self.wq.forward(t, p, q_in);
        let k = self.wk.forward(t, p, k_in);
        let v = self.wv.forward(t, p, v_in);
        let dh = t.shape(q).1 / self.heads;
        let a = t.attention(q, k, v, self.heads, blocks, 1.0 / (dh as f64).sqrt());
        self.wo.forward(t, p, a)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, dim_in: usize, hidden: usize, dim_out: usize) -> Self {
        Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim_in, hidden),
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, dim_out),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let h = self.fc1.forward(t, p, x);
        let h = t.gelu(h);
        self.fc2.forward(t, p, h)
    }
}

/// Pre-norm encoder layer: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
/// With zero output projections it is the identity map.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim),
            attn: Attention::new(b, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(b, &format!("{name}.ffn"), dim, 2 * dim, dim),
        }
    }

    /// Rows of `x` are tokens; each range in `seqs` is one independent
    /// sequence.
    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var, seqs: &[Range<usize>]) -> Var {
        let h = self.ln1.forward(t, p, x);
        let blocks = seqs.iter().cloned().map(AttnBlock::square).collect();
        let a = self.attn.forward(t, p, h, h, h, blocks);
        let x = t.add(x, a);
        let h = self.ln2.forward(t, p, x);
        let f = self.ffn.forward(t, p, h);
        t.add(x, f)
    }

    /// Parameters whose zeroing turns the layer into the identity.
    pub fn output_params(&self) -> Vec<Pid> {
        let mut v = vec![self.attn.wo.w, self.ffn.fc2.w];
        v.extend(self.attn.wo.b);
        v.extend(self.ffn.fc2.b);
        v
    }
}

/// Consecutive ranges of the given lengths.
pub fn ranges(lengths: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}
