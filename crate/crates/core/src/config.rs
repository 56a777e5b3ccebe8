//! `key=value` configuration of the model and the training run. Unknown
//! keys are errors.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use medseg_data::kv::KeyValues;

use crate::backbones::PromptMode;
use crate::fusion_gate::BranchMask;
use crate::model::{ModelConfig, Toggles};
use crate::prior_modulation::PriorToggles;
use crate::{CoreError, Result};

/// Training config of the standard benchmark.
pub const BENCHMARK_CONFIG: &str = include_str!("../assets/benchmark.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(CoreError::Config(format!("unknown lr_schedule '{s}'"))),
        }
    }
}

/// Prompts drawn for each class during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPrompt {
    Fixed(PromptMode),
    /// Per class and step, uniformly one of: no prompt, 1–5 points, box.
    Mixed,
}

impl fmt::Display for TrainPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainPrompt::Fixed(m) => m.fmt(f),
            TrainPrompt::Mixed => f.write_str("mixed"),
        }
    }
}

impl FromStr for TrainPrompt {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mixed" {
            Ok(TrainPrompt::Mixed)
        } else {
            s.parse().map(TrainPrompt::Fixed)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub prompt: TrainPrompt,
    pub dice_weight: f64,
    pub bce_weight: f64,
    /// Keep the text encoder at its initial weights.
    pub freeze_text: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Use only the first n training samples when set.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 50,
            learning_rate: 3e-4,
            lr_schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            batch_size: 16,
            seed: 0,
            prompt: TrainPrompt::Fixed(PromptMode::None),
            dice_weight: 1.0,
            bce_weight: 1.0,
            freeze_text: false,
            grad_clip: 0.0,
            train_limit: None,
            val_limit: None,
        }
    }
}

fn parse_bool(s: &str, key: &str) -> Result<bool> {
    match s {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CoreError::Config(format!("bad boolean '{s}' for key '{key}'"))),
    }
}

fn take_bool(kv: &mut KeyValues, key: &str, slot: &mut bool) -> Result<()> {
    if let Some(v) = kv.take(key) {
        *slot = parse_bool(&v, key)?;
    }
    Ok(())
}

fn take_limit(kv: &mut KeyValues, key: &str, slot: &mut Option<usize>) -> Result<()> {
    if let Some(v) = kv.take(key) {
        *slot = match v.as_str() {
            "all" => None,
            _ => Some(v.parse().map_err(|_| CoreError::Config(format!("bad value '{v}' for key '{key}'")))?),
        };
    }
    Ok(())
}

fn take_from_str<T: FromStr<Err = CoreError>>(kv: &mut KeyValues, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = kv.take(key) {
        *slot = v.parse()?;
    }
    Ok(())
}

impl ModelConfig {
    /// Applies the model keys present in `kv`, leaving others in place.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take_parsed("input_size", &mut self.image_size)?;
        kv.take_parsed("patch_size", &mut self.patch_size)?;
        kv.take_parsed("d_model", &mut self.dim)?;
        kv.take_parsed("encoder_layers", &mut self.encoder_layers)?;
        kv.take_parsed("heads", &mut self.heads)?;
        kv.take_parsed("vocab_size", &mut self.vocab_size)?;
        kv.take_parsed("text_dim", &mut self.text_dim)?;
        kv.take_parsed("text_layers", &mut self.text_layers)?;
        kv.take_parsed("text_heads", &mut self.text_heads)?;
        kv.take_parsed("num_classes", &mut self.num_classes)?;
        kv.take_parsed("deform_kernel", &mut self.deform_kernel)?;
        kv.take_parsed("channel_heads", &mut self.channel_heads)?;
        kv.take_parsed("pixel_channels", &mut self.pixel_channels)?;
        take_bool(kv, "rich_prior", &mut self.rich_prior)?;
        let t = &mut self.toggles;
        take_bool(kv, "prior_position", &mut t.priors.position)?;
        take_bool(kv, "prior_texture", &mut t.priors.texture)?;
        take_bool(kv, "prior_shape", &mut t.priors.shape)?;
        take_bool(kv, "cognitive", &mut t.cognitive)?;
        take_bool(kv, "perceptual", &mut t.perceptual)?;
        take_bool(kv, "caa", &mut t.caa)?;
        take_from_str(kv, "gate_branches", &mut t.branches)?;
        Ok(())
    }

    /// Canonical text; the checkpoint fingerprint hashes this.
    pub fn to_kv(&self) -> String {
        let t = &self.toggles;
        let mut s = String::new();
        let _ = write!(
            s,
            "input_size={}\npatch_size={}\nd_model={}\nencoder_layers={}\nheads={}\nvocab_size={}\ntext_dim={}\n\
             text_layers={}\ntext_heads={}\nnum_classes={}\ndeform_kernel={}\nchannel_heads={}\npixel_channels={}\n\
             rich_prior={}\nprior_position={}\nprior_texture={}\nprior_shape={}\ncognitive={}\nperceptual={}\ncaa={}\n\
             gate_branches={}\n",
            self.image_size,
            self.patch_size,
            self.dim,
            self.encoder_layers,
            self.heads,
            self.vocab_size,
            self.text_dim,
            self.text_layers,
            self.text_heads,
            self.num_classes,
            self.deform_kernel,
            self.channel_heads,
            self.pixel_channels,
            self.rich_prior,
            t.priors.position,
            t.priors.texture,
            t.priors.shape,
            t.cognitive,
            t.perceptual,
            t.caa,
            t.branches,
        );
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        c.apply(&mut kv)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("input_size {} is not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if !self.dim.is_multiple_of(4) || !self.dim.is_multiple_of(self.heads.max(1)) || self.heads == 0 {
            return bad(format!("d_model {} must be a multiple of 4 and of heads {}", self.dim, self.heads));
        }
        if self.channel_heads == 0 || !self.dim.is_multiple_of(self.channel_heads) {
            return bad(format!("channel_heads {} must divide d_model {}", self.channel_heads, self.dim));
        }
        if self.text_heads == 0 || !self.text_dim.is_multiple_of(self.text_heads) {
            return bad(format!("text_heads {} must divide text_dim {}", self.text_heads, self.text_dim));
        }
        if self.num_classes == 0 || self.deform_kernel.is_multiple_of(2) || self.pixel_channels == 0 {
            return bad("num_classes and pixel_channels must be positive, deform_kernel odd".into());
        }
        self.toggles.branches.validate()
    }
}

impl TrainConfig {
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        self.model.apply(kv)?;
        kv.take_parsed("epochs", &mut self.epochs)?;
        kv.take_parsed("learning_rate", &mut self.learning_rate)?;
        take_from_str(kv, "lr_schedule", &mut self.lr_schedule)?;
        kv.take_parsed("beta1", &mut self.beta1)?;
        kv.take_parsed("beta2", &mut self.beta2)?;
        kv.take_parsed("adam_eps", &mut self.adam_eps)?;
        kv.take_parsed("weight_decay", &mut self.weight_decay)?;
        kv.take_parsed("batch_size", &mut self.batch_size)?;
        kv.take_parsed("seed", &mut self.seed)?;
        take_from_str(kv, "prompt", &mut self.prompt)?;
        kv.take_parsed("dice_weight", &mut self.dice_weight)?;
        kv.take_parsed("bce_weight", &mut self.bce_weight)?;
        take_bool(kv, "freeze_text", &mut self.freeze_text)?;
        kv.take_parsed("grad_clip", &mut self.grad_clip)?;
        take_limit(kv, "train_limit", &mut self.train_limit)?;
        take_limit(kv, "val_limit", &mut self.val_limit)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    /// Parses `text` as overrides of `base`.
    pub fn parse_over(mut base: Self, text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        base.apply(&mut kv)?;
        kv.finish()?;
        base.validate()?;
        Ok(base)
    }

    /// The standard benchmark config.
    pub fn benchmark() -> Self {
        Self::parse(BENCHMARK_CONFIG).expect("benchmark config is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("learning_rate, weight_decay and grad_clip must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.dice_weight < 0.0 || self.bce_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let limit = |l: Option<usize>| l.map_or("all".to_string(), |n| n.to_string());
        let mut s = self.model.to_kv();
        let _ = write!(
            s,
            "epochs={}\nlearning_rate={}\nlr_schedule={}\nbeta1={}\nbeta2={}\nadam_eps={}\nweight_decay={}\n\
             batch_size={}\nseed={}\nprompt={}\ndice_weight={}\nbce_weight={}\nfreeze_text={}\ngrad_clip={}\n\
             train_limit={}\nval_limit={}\n",
            self.epochs,
            self.learning_rate,
            self.lr_schedule,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.weight_decay,
            self.batch_size,
            self.seed,
            self.prompt,
            self.dice_weight,
            self.bce_weight,
            self.freeze_text,
            self.grad_clip,
            limit(self.train_limit),
            limit(self.val_limit),
        );
        s
    }
}

impl Toggles {
    pub fn full() -> Self {
        Self { priors: PriorToggles::ALL, cognitive: true, perceptual: true, caa: true, branches: BranchMask::ALL }
    }
}
