//! Perceptual stage: the position, texture and shape priors modulate the
//! encoder feature map, then channel cross-attention with the semantic
//! prior refines it.
//!
//! Feature maps are stored channel-major as C×(H·W) matrices.

use medseg_autograd::{AttnBlock, Grid, Mat, Tape, Var};

use crate::attribute_prior::{AttributeTokens, SemanticPrior};
use crate::nn::Linear;
use crate::params::{Binding, Builder, ParamStore, Pid};
use crate::{CoreError, Result};

pub const TEXTURE_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureRole {
    FSam,
    FAttn,
    FPrime,
    FFused,
    FSem,
    FOut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Mat,
    pub grid: Grid,
    pub role: FeatureRole,
}

impl FeatureMap {
    pub fn new(data: Mat, grid: Grid, role: FeatureRole) -> Result<Self> {
        if data.ncols() != grid.len() || data.nrows() == 0 || grid.is_empty() {
            return Err(CoreError::Dimension(format!(
                "feature data {:?} does not fit a {}×{} grid",
                data.dim(),
                grid.h,
                grid.w
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite feature values".into()));
        }
        Ok(Self { data, grid, role })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[[c, y * self.grid.w + x]]
    }
}

/// `A_pos`: an H×W gate with entries in [0, 1], stored row-major as 1×HW.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionMap {
    pub data: Mat,
    pub grid: Grid,
}

/// 7×7 filter generated from the texture prior, row-major 1×49.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernel {
    pub weights: Mat,
}

/// Deformable kernel (1×K²) and per-tap `(Δy, Δx)` offsets (1×2K²).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableParams {
    pub kernel: Mat,
    pub offsets: Mat,
}

/// Which attribute priors are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PriorToggles {
    pub position: bool,
    pub texture: bool,
    pub shape: bool,
}

impl PriorToggles {
    pub const ALL: PriorToggles = PriorToggles { position: true, texture: true, shape: true };
    pub const NONE: PriorToggles = PriorToggles { position: false, texture: false, shape: false };

    pub fn any(self) -> bool {
        self.position || self.texture || self.shape
    }
}

fn flatten(t: &mut Tape, tokens: Var) -> Var {
    let (l, d) = t.shape(tokens);
    t.reshape(tokens, 1, l * d)
}

fn check_input(store: &ParamStore, proj: &Linear, tokens: &AttributeTokens) -> Result<()> {
    let want = store.get(proj.w).nrows();
    let got = tokens.len() * tokens.dim();
    if want != got {
        return Err(CoreError::Dimension(format!("{} prior has {got} values, projection expects {want}", tokens.kind)));
    }
    Ok(())
}

fn delta(k: usize) -> Mat {
    let mut m = Mat::zeros((1, k * k));
    m[[0, k * k / 2]] = 1.0;
    m
}

/// `A = σ(flat·W + b)` reshaped to the grid; every channel is multiplied by
/// `A`. Returns `(f_attn, A)`.
pub fn positional_attention_op(t: &mut Tape, f: Var, pos_flat: Var, w: Var, b: Var) -> (Var, Var) {
    let logits = t.matmul(pos_flat, w);
    let logits = t.add(logits, b);
    let a = t.sigmoid(logits);
    (t.mul_row(f, a), a)
}

/// Generated kernel `flat·W + b` (1×49) applied depthwise with zero padding.
pub fn texture_conv_op(t: &mut Tape, f: Var, tex_flat: Var, w: Var, b: Var, grid: Grid) -> Var {
    let k = t.matmul(tex_flat, w);
    let k = t.add(k, b);
    t.depthwise_conv_shared(f, k, grid)
}

/// `flat·W + b` gives K² kernel weights followed by 2K² offsets.
pub fn deformable_op(t: &mut Tape, f: Var, shape_flat: Var, w: Var, b: Var, grid: Grid, ksize: usize) -> Var {
    let kk = ksize * ksize;
    let g = t.matmul(shape_flat, w);
    let g = t.add(g, b);
    let kernel = t.slice_cols(g, 0, kk);
    let offsets = t.slice_cols(g, kk, 3 * kk);
    t.deform_conv_shared(f, kernel, offsets, grid, grid.h.max(grid.w) as f64)
}

/// Channel attention: `Q = Wq·F`, `K = Wk·P`, `V = Wv·P + bv`; per head
/// group of channels `softmax(Q Kᵀ/√HW) V`; output `F + Wo·(A V)`.
#[allow(clippy::too_many_arguments)]
pub fn channel_attention_op(
    t: &mut Tape,
    f: Var,
    prior_map: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    heads: usize,
) -> Var {
    let (c, hw) = t.shape(f);
    assert_eq!(c % heads, 0, "channel heads must divide channels");
    let g = c / heads;
    let q = t.matmul(wq, f);
    let k = t.matmul(wk, prior_map);
    let v = t.matmul(wv, prior_map);
    let v = t.add_col(v, bv);
    let blocks = (0..heads).map(|h| AttnBlock::square(h * g..(h + 1) * g)).collect();
    let a = t.attention(q, k, v, 1, blocks, 1.0 / (hw as f64).sqrt());
    let o = t.matmul(wo, a);
    t.add(f, o)
}

#[derive(Clone, Debug)]
pub struct PositionalAttention {
    pub proj: Linear,
}

impl PositionalAttention {
    pub fn new(b: &mut Builder, name: &str, prior_len: usize, grid: Grid) -> Self {
        Self { proj: Linear::with_bias(b, name, prior_len, 0.02, Mat::zeros((1, grid.len()))) }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, f: Var, tokens: Var) -> (Var, Var) {
        let flat = flatten(t, tokens);
        positional_attention_op(t, f, flat, p.get(self.proj.w), p.get(self.proj.b.unwrap()))
    }

    pub fn apply(
        &self,
        store: &ParamStore,
        f: &FeatureMap,
        pos: &AttributeTokens,
    ) -> Result<(FeatureMap, SpatialAttentionMap)> {
        check_input(store, &self.proj, pos)?;
        let out = store.get(self.proj.w).ncols();
        if out != f.grid.len() {
            return Err(CoreError::Dimension(format!(
                "projection gives {out} logits for a {}-cell grid",
                f.grid.len()
            )));
        }
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let fv = t.constant(f.data.clone());
        let tv = t.constant(pos.embedding.clone());
        let (o, a) = self.forward(&mut t, &p, fv, tv);
        Ok((
            FeatureMap { data: t.value(o).clone(), grid: f.grid, role: FeatureRole::FAttn },
            SpatialAttentionMap { data: t.value(a).clone(), grid: f.grid },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TextureDynamicConv {
    pub proj: Linear,
}

impl TextureDynamicConv {
    /// Starts close to the identity filter.
    pub fn new(b: &mut Builder, name: &str, prior_len: usize) -> Self {
        Self { proj: Linear::with_bias(b, name, prior_len, 0.02, delta(TEXTURE_KERNEL)) }
    }

    pub fn kernel(&self, store: &ParamStore, tex: &AttributeTokens) -> Result<DynamicKernel> {
        check_input(store, &self.proj, tex)?;
        let flat = tex.embedding.to_shape((1, tex.len() * tex.dim())).unwrap().to_owned();
        Ok(DynamicKernel { weights: flat.dot(store.get(self.proj.w)) + store.get(self.proj.b.unwrap()) })
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, f: Var, tokens: Var, grid: Grid) -> Var {
        let flat = flatten(t, tokens);
        texture_conv_op(t, f, flat, p.get(self.proj.w), p.get(self.proj.b.unwrap()), grid)
    }

    pub fn apply(&self, store: &ParamStore, f: &FeatureMap, tex: &AttributeTokens) -> Result<FeatureMap> {
        check_input(store, &self.proj, tex)?;
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let fv = t.constant(f.data.clone());
        let tv = t.constant(tex.embedding.clone());
        let o = self.forward(&mut t, &p, fv, tv, f.grid);
        Ok(FeatureMap { data: t.value(o).clone(), grid: f.grid, role: FeatureRole::FPrime })
    }
}

#[derive(Clone, Debug)]
pub struct ShapeDeformableConv {
    pub proj: Linear,
    pub ksize: usize,
}

impl ShapeDeformableConv {
    /// Starts at the centre-delta kernel with zero offsets.
    pub fn new(b: &mut Builder, name: &str, prior_len: usize, ksize: usize) -> Self {
        let kk = ksize * ksize;
        let mut bias = Mat::zeros((1, 3 * kk));
        bias[[0, kk / 2]] = 1.0;
        Self { proj: Linear::with_bias(b, name, prior_len, 0.02, bias), ksize }
    }

    pub fn params(&self, store: &ParamStore, shape: &AttributeTokens) -> Result<DeformableParams> {
        check_input(store, &self.proj, shape)?;
        let flat = shape.embedding.to_shape((1, shape.len() * shape.dim())).unwrap().to_owned();
        let g = flat.dot(store.get(self.proj.w)) + store.get(self.proj.b.unwrap());
        let kk = self.ksize * self.ksize;
        Ok(DeformableParams {
            kernel: g.slice(ndarray::s![.., ..kk]).to_owned(),
            offsets: g.slice(ndarray::s![.., kk..]).to_owned(),
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, f: Var, tokens: Var, grid: Grid) -> Var {
        let flat = flatten(t, tokens);
        deformable_op(t, f, flat, p.get(self.proj.w), p.get(self.proj.b.unwrap()), grid, self.ksize)
    }

    pub fn apply(&self, store: &ParamStore, f: &FeatureMap, shape: &AttributeTokens) -> Result<FeatureMap> {
        if f.grid.h < self.ksize || f.grid.w < self.ksize {
            return Err(CoreError::Dimension(format!("{}×{} map is smaller than the kernel", f.grid.h, f.grid.w)));
        }
        let dp = self.params(store, shape)?;
        if dp.offsets.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite deformable offsets".into()));
        }
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let fv = t.constant(f.data.clone());
        let tv = t.constant(shape.embedding.clone());
        let o = self.forward(&mut t, &p, fv, tv, f.grid);
        Ok(FeatureMap { data: t.value(o).clone(), grid: f.grid, role: FeatureRole::FFused })
    }
}

/// How the semantic prior becomes a C×HW map.
#[derive(Clone, Debug)]
pub enum PriorProjection {
    /// One scalar per channel from `pooled·Wp`, broadcast over the grid.
    Pooled(Linear),
    /// `mean_j a_j s_jᵀ` over the fused tokens, with `a_j = t_j·Wa`
    /// (channels) and `s_j = t_j·Ws` (positions).
    Rich { channel: Linear, spatial: Linear },
}

/// Channel cross-attention parameters.
#[derive(Clone, Debug)]
pub struct ChannelCrossAttention {
    pub projection: PriorProjection,
    pub wq: Pid,
    pub wk: Pid,
    pub wv: Pid,
    pub bv: Pid,
    pub wo: Pid,
    pub heads: usize,
}

impl ChannelCrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        prior_dim: usize,
        channels: usize,
        grid: Grid,
        heads: usize,
        rich: bool,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(CoreError::Config(format!(
                "{heads} channel-attention heads do not divide {channels} channels"
            )));
        }
        let projection = if rich {
            PriorProjection::Rich {
                channel: Linear::no_bias(b, &format!("{name}.rich_channel"), prior_dim, channels),
                spatial: Linear::no_bias(b, &format!("{name}.rich_spatial"), prior_dim, grid.len()),
            }
        } else {
            PriorProjection::Pooled(Linear::no_bias(b, &format!("{name}.prior_proj"), prior_dim, channels))
        };
        Ok(Self {
            projection,
            wq: b.glorot(&format!("{name}.wq"), channels, channels),
            wk: b.glorot(&format!("{name}.wk"), channels, channels),
            wv: b.glorot(&format!("{name}.wv"), channels, channels),
            bv: b.zeros(&format!("{name}.bv"), channels, 1),
            wo: b.normal(&format!("{name}.wo"), channels, channels, 0.1 / (channels as f64).sqrt()),
            heads,
        })
    }

    /// C×HW prior map from the pooled vector (1×d) or the fused tokens (L×d).
    pub fn prior_map(&self, t: &mut Tape, p: &Binding, pooled: Var, fused: Var, hw: usize) -> Var {
        match &self.projection {
            PriorProjection::Rich { channel, spatial } => {
                let a = channel.forward(t, p, fused);
                let s = spatial.forward(t, p, fused);
                let n = t.shape(fused).0;
                let at = t.transpose(a);
                let m = t.matmul(at, s);
                t.scale(m, 1.0 / n as f64)
            }
            PriorProjection::Pooled(proj) => {
                let row = proj.forward(t, p, pooled);
                let col = t.transpose(row);
                t.broadcast_col(col, hw)
            }
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, f: Var, prior_map: Var) -> Var {
        channel_attention_op(
            t,
            f,
            prior_map,
            p.get(self.wq),
            p.get(self.wk),
            p.get(self.wv),
            p.get(self.bv),
            p.get(self.wo),
            self.heads,
        )
    }

    pub fn apply(&self, store: &ParamStore, f: &FeatureMap, prior: &SemanticPrior) -> Result<FeatureMap> {
        let c = f.channels();
        if !c.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!("{} heads do not divide {c} channels", self.heads)));
        }
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let fv = t.constant(f.data.clone());
        let pooled = t.constant(prior.pooled.clone());
        let fused = t.constant(prior.fused_tokens.clone());
        let pm = self.prior_map(&mut t, &p, pooled, fused, f.grid.len());
        let o = self.forward(&mut t, &p, fv, pm);
        Ok(FeatureMap { data: t.value(o).clone(), grid: f.grid, role: FeatureRole::FSem })
    }
}

/// The three prior operators and the channel refinement.
#[derive(Clone, Debug)]
pub struct PerceptualStage {
    pub positional: PositionalAttention,
    pub texture: TextureDynamicConv,
    pub deformable: ShapeDeformableConv,
    pub channel: ChannelCrossAttention,
}

impl PerceptualStage {
    /// `None` tokens skip that operator; a `None` prior map skips the
    /// channel refinement (`f_sem = f_fused`). Returns `(f_fused, f_sem)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Binding,
        f_sam: Var,
        grid: Grid,
        pos: Option<Var>,
        tex: Option<Var>,
        shape: Option<Var>,
        prior_map: Option<Var>,
    ) -> (Var, Var) {
        let mut f = f_sam;
        if let Some(pos) = pos {
            f = self.positional.forward(t, p, f, pos).0;
        }
        if let Some(tex) = tex {
            f = self.texture.forward(t, p, f, tex, grid);
        }
        if let Some(shape) = shape {
            f = self.deformable.forward(t, p, f, shape, grid);
        }
        let f_sem = match prior_map {
            Some(m) => self.channel.forward(t, p, f, m),
            None => f,
        };
        (f, f_sem)
    }

    /// Runs the stage with the given toggles on concrete values.
    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        store: &ParamStore,
        f_sam: &FeatureMap,
        pos: &AttributeTokens,
        tex: &AttributeTokens,
        shape: &AttributeTokens,
        prior: &SemanticPrior,
        toggles: PriorToggles,
    ) -> Result<(FeatureMap, FeatureMap)> {
        check_input(store, &self.positional.proj, pos)?;
        check_input(store, &self.texture.proj, tex)?;
        check_input(store, &self.deformable.proj, shape)?;
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let f = t.constant(f_sam.data.clone());
        let mut on = |flag: bool, a: &AttributeTokens| flag.then(|| t.constant(a.embedding.clone()));
        let (pv, tv, sv) = (on(toggles.position, pos), on(toggles.texture, tex), on(toggles.shape, shape));
        let pooled = t.constant(prior.pooled.clone());
        let fused = t.constant(prior.fused_tokens.clone());
        let pm = self.channel.prior_map(&mut t, &p, pooled, fused, f_sam.grid.len());
        let (ff, fs) = self.forward(&mut t, &p, f, f_sam.grid, pv, tv, sv, Some(pm));
        Ok((
            FeatureMap { data: t.value(ff).clone(), grid: f_sam.grid, role: FeatureRole::FFused },
            FeatureMap { data: t.value(fs).clone(), grid: f_sam.grid, role: FeatureRole::FSem },
        ))
    }
}
