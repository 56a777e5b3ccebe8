//! Per-pixel softmax gate over the `f_fused`, `f_sem` and `f_sam` streams.

use std::fmt;
use std::str::FromStr;

use medseg_autograd::{Mat, Tape, Var};

use crate::params::{Binding, Builder, ParamStore, Pid};
use crate::prior_modulation::{FeatureMap, FeatureRole};
use crate::{CoreError, Result};

pub const BRANCH_NAMES: [&str; 3] = ["fused", "sem", "sam"];

/// Enabled branches in the order `f_fused`, `f_sem`, `f_sam`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BranchMask(pub [bool; 3]);

impl BranchMask {
    pub const ALL: BranchMask = BranchMask([true; 3]);

    pub fn enabled(self) -> Vec<usize> {
        (0..3).filter(|&i| self.0[i]).collect()
    }

    pub fn validate(self) -> Result<()> {
        if self.0.iter().any(|&b| b) {
            Ok(())
        } else {
            Err(CoreError::Config("at least one gate branch must be enabled".into()))
        }
    }
}

impl fmt::Display for BranchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.enabled().into_iter().map(|i| BRANCH_NAMES[i]).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for BranchMask {
    type Err = CoreError;

    /// `fused+sem+sam`, any non-empty subset, `+` or `,` separated.
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = [false; 3];
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            let i = BRANCH_NAMES
                .iter()
                .position(|&n| n == part)
                .ok_or_else(|| CoreError::Config(format!("unknown gate branch '{part}'")))?;
            mask[i] = true;
        }
        let m = BranchMask(mask);
        m.validate()?;
        Ok(m)
    }
}

/// Gate planes, 3×HW; rows of disabled branches are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    pub data: Mat,
}

/// Gate core: logits of enabled branch `i` are `Σ_j W[i, block j]·F_j + b_i`
/// over enabled `j` (a 1×1 convolution of the concatenated enabled
/// branches), softmax across branches per pixel, output `Σ_i g_i ⊙ F_i`.
/// Returns the output and the enabled gates (n_enabled×HW).
pub fn gated_fuse_op(t: &mut Tape, branches: [Var; 3], mask: BranchMask, w: Var, b: Var) -> (Var, Var) {
    let on = mask.enabled();
    assert!(!on.is_empty(), "gate needs an enabled branch");
    let c = t.shape(branches[0]).0;
    let mut logit_rows = Vec::with_capacity(on.len());
    for &i in &on {
        let wi = t.slice_rows(w, i, i + 1);
        let terms: Vec<Var> = on
            .iter()
            .map(|&j| {
                let wij = t.slice_cols(wi, j * c, (j + 1) * c);
                t.matmul(wij, branches[j])
            })
            .collect();
        let s = t.add_n(&terms);
        let bi = t.slice_rows(b, i, i + 1);
        let hw = t.shape(s).1;
        let bb = t.broadcast_col(bi, hw);
        logit_rows.push(t.add(s, bb));
    }
    let logits = t.concat_rows(&logit_rows);
    let gates = t.softmax_cols(logits);
    let parts: Vec<Var> = on
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let g = t.slice_rows(gates, r, r + 1);
            t.mul_row(branches[i], g)
        })
        .collect();
    (t.add_n(&parts), gates)
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub w: Pid,
    pub b: Pid,
}

impl Gate {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self { w: b.normal(&format!("{name}.w"), 3, 3 * channels, 0.02), b: b.zeros(&format!("{name}.b"), 3, 1) }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, branches: [Var; 3], mask: BranchMask) -> (Var, Var) {
        gated_fuse_op(t, branches, mask, p.get(self.w), p.get(self.b))
    }

    pub fn apply(
        &self,
        store: &ParamStore,
        f_fused: &FeatureMap,
        f_sem: &FeatureMap,
        f_sam: &FeatureMap,
        mask: BranchMask,
    ) -> Result<(FeatureMap, GateWeights)> {
        mask.validate()?;
        for f in [f_sem, f_sam] {
            if f.data.dim() != f_fused.data.dim() || f.grid != f_fused.grid {
                return Err(CoreError::Dimension("gate branches differ in shape".into()));
            }
        }
        if store.get(self.w).ncols() != 3 * f_fused.channels() {
            return Err(CoreError::Dimension("gate weights do not match the channel count".into()));
        }
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let vs = [f_fused, f_sem, f_sam].map(|f| t.constant(f.data.clone()));
        let (out, gates) = self.forward(&mut t, &p, vs, mask);
        let g = t.value(gates);
        let mut data = Mat::zeros((3, f_fused.grid.len()));
        for (r, i) in mask.enabled().into_iter().enumerate() {
            data.row_mut(i).assign(&g.row(r));
        }
        Ok((
            FeatureMap { data: t.value(out).clone(), grid: f_fused.grid, role: FeatureRole::FOut },
            GateWeights { data },
        ))
    }
}
