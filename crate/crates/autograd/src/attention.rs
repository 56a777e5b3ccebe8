//! Fused scaled dot-product attention over row blocks.
//!
//! Rows of `q` are tokens; each [`AttnBlock`] lets one contiguous range of
//! query rows attend to one contiguous range of key/value rows, so a whole
//! batch of independent sequences can share one tape node.

use std::ops::Range;

use ndarray::s;

use crate::ops::softmax_inplace;
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

impl AttnBlock {
    pub fn new(queries: Range<usize>, keys: Range<usize>) -> Self {
        Self { queries, keys }
    }

    /// Self-attention block over `range`.
    pub fn square(range: Range<usize>) -> Self {
        Self { queries: range.clone(), keys: range }
    }
}

fn head_probs(q: &Mat, k: &Mat, block: &AttnBlock, cols: Range<usize>, scale: f64) -> Mat {
    let qh = q.slice(s![block.queries.clone(), cols.clone()]);
    let kh = k.slice(s![block.keys.clone(), cols]);
    let mut p = qh.dot(&kh.t()) * scale;
    for mut row in p.rows_mut() {
        softmax_inplace(row.as_slice_mut().unwrap());
    }
    p
}

/// Attention probabilities of every (block, head), in block-major order.
/// Not recorded on the tape; used for inspection and tests.
pub fn attention_probs(q: &Mat, k: &Mat, heads: usize, blocks: &[AttnBlock], scale: f64) -> Vec<Mat> {
    let d = q.ncols();
    let dh = d / heads;
    let mut out = Vec::new();
    for b in blocks {
        for h in 0..heads {
            out.push(head_probs(q, k, b, h * dh..(h + 1) * dh, scale));
        }
    }
    out
}

impl Tape {
    /// Multi-head attention. `q` is Nq×D, `k` and `v` are Nk×D, heads split
    /// the D columns evenly. Query rows outside every block produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocks: Vec<AttnBlock>, scale: f64) -> Var {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        assert_eq!(d, dk, "attention q/k width");
        assert_eq!(self.shape(v), (nk, d), "attention v shape");
        assert!(heads > 0 && d % heads == 0, "attention heads {heads} must divide {d}");
        for b in &blocks {
            assert!(b.queries.end <= nq && b.keys.end <= nk, "attention block out of range");
        }
        let dh = d / heads;
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = Mat::zeros((nq, d));
        for b in &blocks {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = head_probs(qv, kv, b, cols.clone(), scale);
                let o = p.dot(&vv.slice(s![b.keys.clone(), cols.clone()]));
                out.slice_mut(s![b.queries.clone(), cols]).assign(&o);
            }
        }
        self.push_op(
            out,
            &[q, k, v],
            Box::new(move |c| {
                let (qv, kv, vv) = (c.inputs[0], c.inputs[1], c.inputs[2]);
                let mut gq = c.needs[0].then(|| Mat::zeros(qv.dim()));
                let mut gk = c.needs[1].then(|| Mat::zeros(kv.dim()));
                let mut gv = c.needs[2].then(|| Mat::zeros(vv.dim()));
                for b in &blocks {
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = head_probs(qv, kv, b, cols.clone(), scale);
                        let go = c.grad.slice(s![b.queries.clone(), cols.clone()]);
                        let vh = vv.slice(s![b.keys.clone(), cols.clone()]);
                        if let Some(gv) = gv.as_mut() {
                            let mut dst = gv.slice_mut(s![b.keys.clone(), cols.clone()]);
                            dst += &p.t().dot(&go);
                        }
                        if gq.is_none() && gk.is_none() {
                            continue;
                        }
                        let dp = go.dot(&vh.t());
                        let mut ds = &p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = row.sum();
                            row.zip_mut_with(&prow, |x, &pp| *x -= pp * dot);
                        }
                        ds *= scale;
                        if let Some(gq) = gq.as_mut() {
                            let kh = kv.slice(s![b.keys.clone(), cols.clone()]);
                            let mut dst = gq.slice_mut(s![b.queries.clone(), cols.clone()]);
                            dst += &ds.dot(&kh);
                        }
                        if let Some(gk) = gk.as_mut() {
                            let qh = qv.slice(s![b.queries.clone(), cols.clone()]);
                            let mut dst = gk.slice_mut(s![b.keys.clone(), cols.clone()]);
                            dst += &ds.t().dot(&qh);
                        }
                    }
                }
                vec![gq, gk, gv]
            }),
        )
    }
}
