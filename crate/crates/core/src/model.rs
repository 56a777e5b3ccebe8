//! Model assembly: encoders, both stages, gate and decoder, evaluated per
//! (sample, class) item.

use std::collections::HashMap;

use medseg_autograd::{Grid, Mat, Tape, Var};
use medseg_data::{AttributeRecord, ImageSample, Position, SegSample, Shape, Texture};
use sha2::{Digest, Sha256};

use crate::attribute_prior::{AttributeFusion, AttributeKind, AttributeText, TextEncoder, Vocab};
use crate::backbones::{ImageEncoder, MaskDecoder, Prompt, PromptEncoder, SegPrediction};
use crate::fusion_gate::{BranchMask, Gate};
use crate::params::{Binding, Builder, ParamStore};
use crate::prior_modulation::{
    ChannelCrossAttention, PerceptualStage, PositionalAttention, PriorToggles, ShapeDeformableConv, TextureDynamicConv,
};
use crate::{CoreError, Result};

/// Ablation switches. `cognitive` controls the semantic prior and the
/// channel refinement; `perceptual` the three prior operators; `caa` the
/// cross-attribute Transformer block inside the cognitive stage. A
/// disabled prior is left out of both stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub priors: PriorToggles,
    pub cognitive: bool,
    pub perceptual: bool,
    pub caa: bool,
    pub branches: BranchMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub num_classes: usize,
    pub deform_kernel: usize,
    pub channel_heads: usize,
    pub pixel_channels: usize,
    pub rich_prior: bool,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            encoder_layers: 4,
            heads: 4,
            vocab_size: 64,
            text_dim: 32,
            text_layers: 2,
            text_heads: 2,
            num_classes: 3,
            deform_kernel: 3,
            channel_heads: 4,
            pixel_channels: 8,
            rich_prior: false,
            toggles: Toggles::full(),
        }
    }
}

/// One class of one sample to segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// Index into the image list passed alongside.
    pub sample: usize,
    pub class: usize,
    pub attributes: AttributeRecord,
    pub prompt: Prompt,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub fusion: AttributeFusion,
    pub image: ImageEncoder,
    pub perceptual: PerceptualStage,
    pub gate: Gate,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    /// Token count of each attribute template, by `AttributeKind::index`.
    pub prior_lens: [usize; 3],
}

fn template_len(vocab: &Vocab, kind: AttributeKind) -> Result<usize> {
    let mut lens = Vec::new();
    for p in Position::ALL {
        for t in Texture::ALL {
            for s in Shape::ALL {
                let r = AttributeRecord { position: p, texture: t, shape: s };
                lens.push(vocab.attribute_text(kind, &r)?.tokens.len());
            }
        }
    }
    lens.dedup();
    match lens.as_slice() {
        [n] => Ok(*n),
        _ => Err(CoreError::Config(format!("{kind} templates differ in length"))),
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_vocab(config, Vocab::default(), seed)
    }

    pub fn with_vocab(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.min_size() > config.vocab_size {
            return Err(CoreError::Config(format!(
                "vocabulary needs {} ids, vocab_size is {}",
                vocab.min_size(),
                config.vocab_size
            )));
        }
        let prior_lens = [
            template_len(&vocab, AttributeKind::Position)?,
            template_len(&vocab, AttributeKind::Texture)?,
            template_len(&vocab, AttributeKind::Shape)?,
        ];
        let c = &config;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let max_len = *prior_lens.iter().max().unwrap();
        let text = TextEncoder::new(&mut b, "text", c.vocab_size, c.text_dim, c.text_layers, c.text_heads, max_len);
        let fusion = AttributeFusion::new(&mut b, "fusion", c.text_dim, c.text_heads);
        let image = ImageEncoder::new(&mut b, "image", c.image_size, c.patch_size, c.dim, c.encoder_layers, c.heads)?;
        let grid = image.grid();
        let perceptual = PerceptualStage {
            positional: PositionalAttention::new(&mut b, "perceptual.positional", prior_lens[0] * c.text_dim, grid),
            texture: TextureDynamicConv::new(&mut b, "perceptual.texture", prior_lens[1] * c.text_dim),
            deformable: ShapeDeformableConv::new(
                &mut b,
                "perceptual.deformable",
                prior_lens[2] * c.text_dim,
                c.deform_kernel,
            ),
            channel: ChannelCrossAttention::new(
                &mut b,
                "perceptual.channel",
                c.text_dim,
                c.dim,
                grid,
                c.channel_heads,
                c.rich_prior,
            )?,
        };
        let gate = Gate::new(&mut b, "gate", c.dim);
        let prompt = PromptEncoder::new(&mut b, "prompt", c.dim);
        let image_grid = Grid::new(c.image_size, c.image_size);
        let decoder =
            MaskDecoder::new(&mut b, "decoder", c.num_classes, c.dim, c.heads, c.pixel_channels, grid, image_grid);
        Ok(Self { config, vocab, store, text, fusion, image, perceptual, gate, prompt, decoder, prior_lens })
    }

    /// SHA-256 of the canonical model config and the parameter layout.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_kv().as_bytes());
        h.update(self.vocab.to_tsv().as_bytes());
        for (name, m) in self.store.iter() {
            h.update(format!("{name}:{}x{}\n", m.nrows(), m.ncols()).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn enabled_kinds(&self) -> Vec<AttributeKind> {
        let p = self.config.toggles.priors;
        [(p.position, AttributeKind::Position), (p.texture, AttributeKind::Texture), (p.shape, AttributeKind::Shape)]
            .into_iter()
            .filter_map(|(on, k)| on.then_some(k))
            .collect()
    }

    /// Checks images and prompts of a batch against the configuration.
    pub fn validate_batch(&self, images: &[&ImageSample], items: &[Item]) -> Result<()> {
        for img in images {
            self.image.check_image(img)?;
        }
        for it in items {
            if it.sample >= images.len() {
                return Err(CoreError::InvalidInput(format!(
                    "item refers to sample {} of {}",
                    it.sample,
                    images.len()
                )));
            }
            if it.class >= self.config.num_classes {
                return Err(CoreError::InvalidInput(format!(
                    "class {} exceeds the {} class queries",
                    it.class, self.config.num_classes
                )));
            }
            it.prompt.validate(self.config.image_size, self.config.image_size)?;
        }
        Ok(())
    }

    /// Logit plane (1×H·W) of every item. Inputs must pass
    /// [`Model::validate_batch`].
    pub fn forward(&self, t: &mut Tape, p: &Binding, images: &[&ImageSample], items: &[Item]) -> Result<Vec<Var>> {
        let tg = self.config.toggles;
        let grid = self.image.grid();
        let image_grid = self.decoder.image_grid;
        let f_sams = self.image.forward_batch(t, p, images);
        let f_pix: Vec<Var> = images
            .iter()
            .map(|img| {
                let row = Mat::from_shape_fn((1, img.pixels.len()), |(_, i)| img.pixels[i] / 255.0 - 0.5);
                let row = t.constant(row);
                self.decoder.pixel.forward(t, p, row, image_grid)
            })
            .collect();

        // Unique attribute texts of the enabled kinds, encoded once.
        let kinds = if tg.cognitive || tg.perceptual { self.enabled_kinds() } else { Vec::new() };
        let mut texts: Vec<AttributeText> = Vec::new();
        let mut item_texts: Vec<Vec<usize>> = Vec::with_capacity(items.len());
        for it in items {
            let mut idx = Vec::with_capacity(kinds.len());
            for &k in &kinds {
                let txt = self.vocab.attribute_text(k, &it.attributes)?;
                self.text.validate(&txt)?;
                let i = match texts.iter().position(|x| *x == txt) {
                    Some(i) => i,
                    None => {
                        texts.push(txt);
                        texts.len() - 1
                    }
                };
                idx.push(i);
            }
            item_texts.push(idx);
        }
        let encoded = if texts.is_empty() {
            Vec::new()
        } else {
            self.text.forward_batch(t, p, &texts.iter().collect::<Vec<_>>())
        };

        let hw = grid.len();
        let mut prior_cache: HashMap<Vec<usize>, Var> = HashMap::new();
        let mut out = Vec::with_capacity(items.len());
        for (it, idx) in items.iter().zip(&item_texts) {
            let prior_map = if tg.cognitive {
                let m = match prior_cache.get(idx) {
                    Some(&m) => m,
                    None => {
                        let (fused, pooled) = if idx.is_empty() {
                            let z = t.constant(Mat::zeros((1, self.config.text_dim)));
                            (z, z)
                        } else {
                            let parts: Vec<_> = idx.iter().map(|&i| (texts[i].kind, encoded[i])).collect();
                            self.fusion.forward(t, p, &parts, tg.caa)
                        };
                        let m = self.perceptual.channel.prior_map(t, p, pooled, fused, hw);
                        prior_cache.insert(idx.clone(), m);
                        m
                    }
                };
                Some(m)
            } else {
                None
            };
            let tokens_of = |kind: AttributeKind| -> Option<Var> {
                if !tg.perceptual {
                    return None;
                }
                kinds.iter().position(|&k| k == kind).map(|j| encoded[idx[j]])
            };
            let f_sam = f_sams[it.sample];
            let (f_fused, f_sem) = self.perceptual.forward(
                t,
                p,
                f_sam,
                grid,
                tokens_of(AttributeKind::Position),
                tokens_of(AttributeKind::Texture),
                tokens_of(AttributeKind::Shape),
                prior_map,
            );
            let (f_out, _) = self.gate.forward(t, p, [f_fused, f_sem, f_sam], tg.branches);
            let prompt = self.prompt.forward(t, p, &it.prompt, self.config.image_size, self.config.image_size);
            out.push(self.decoder.decode(t, p, f_out, it.class, prompt, f_pix[it.sample]));
        }
        Ok(out)
    }

    /// Segments every annotated class of `sample` with the given prompts
    /// (one per class, in the sample's class order). Logit rows follow the
    /// same order.
    pub fn predict(&self, sample: &SegSample, prompts: &[Prompt]) -> Result<SegPrediction> {
        if prompts.len() != sample.classes.len() {
            return Err(CoreError::InvalidInput(format!(
                "{} prompts for {} classes",
                prompts.len(),
                sample.classes.len()
            )));
        }
        let items: Vec<Item> = sample
            .classes
            .iter()
            .zip(prompts)
            .map(|(c, pr)| Item { sample: 0, class: c.class, attributes: c.attributes, prompt: pr.clone() })
            .collect();
        let images = [&sample.image];
        self.validate_batch(&images, &items)?;
        let mut t = Tape::new();
        let p = self.store.bind_frozen(&mut t);
        let planes = self.forward(&mut t, &p, &images, &items)?;
        let n = self.config.image_size;
        let mut logits = Mat::zeros((planes.len(), n * n));
        for (r, v) in planes.iter().enumerate() {
            logits.row_mut(r).assign(&t.value(*v).row(0));
        }
        Ok(SegPrediction::from_logits(logits, n, n))
    }
}
