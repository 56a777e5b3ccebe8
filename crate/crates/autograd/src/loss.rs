//! Segmentation losses on logit rows.

use crate::ops::sigmoid_scalar;
use crate::tape::{Mat, Tape, Var};

impl Tape {
    /// Mean binary cross-entropy of `logits` against constant 0/1 `target`,
    /// computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Mat) -> Var {
        assert_eq!(self.shape(logits), target.dim(), "bce shape");
        let n = target.len() as f64;
        let z = self.value(logits);
        let total: f64 =
            z.iter().zip(target.iter()).map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()).sum();
        let t = target.clone();
        self.push_op(
            Mat::from_elem((1, 1), total / n),
            &[logits],
            Box::new(move |c| {
                let s = c.grad[[0, 0]] / n;
                let mut g = c.inputs[0].mapv(sigmoid_scalar);
                g.zip_mut_with(&t, |p, &t| *p = (*p - t) * s);
                vec![Some(g)]
            }),
        )
    }

    /// Soft Dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)` with `p = σ(logits)`.
    pub fn dice_loss(&mut self, logits: Var, target: &Mat, smooth: f64) -> Var {
        assert_eq!(self.shape(logits), target.dim(), "dice shape");
        let p = self.value(logits).mapv(sigmoid_scalar);
        let inter: f64 = (&p * target).sum();
        let denom = p.sum() + target.sum() + smooth;
        let loss = 1.0 - (2.0 * inter + smooth) / denom;
        let t = target.clone();
        self.push_op(
            Mat::from_elem((1, 1), loss),
            &[logits],
            Box::new(move |c| {
                let g0 = c.grad[[0, 0]];
                let num = 2.0 * inter + smooth;
                let mut g = p.clone();
                g.zip_mut_with(&t, |pv, &tv| {
                    let dl_dp = -(2.0 * tv * denom - num) / (denom * denom);
                    *pv = g0 * dl_dp * *pv * (1.0 - *pv);
                });
                vec![Some(g)]
            }),
        )
    }
}
