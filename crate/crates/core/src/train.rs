//! Training loop: Dice + BCE per class query, AdamW with decoupled weight
//! decay, cosine or constant learning rate.

use std::fmt::Write as _;
use std::time::Instant;

use medseg_autograd::{Gradients, Mat, Tape};
use medseg_data::{filter_small_masks, SegSample, SMALL_MASK_THRESHOLD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbones::{Prompt, PromptMode};
use crate::config::{LrSchedule, TrainConfig, TrainPrompt};
use crate::eval::{evaluate_records, gt_prompt};
use crate::model::{Item, Model};
use crate::params::ParamStore;
use crate::{CoreError, Result};

const DICE_SMOOTH: f64 = 1.0;
/// Largest point count drawn by mixed-prompt training.
pub const MIXED_MAX_POINTS: usize = 5;

/// Adam moments with weight decay applied to the parameters directly,
/// outside the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, m)| Mat::zeros(m.dim())).collect();
        Self { beta1, beta2, eps, weight_decay, m: zeros.clone(), v: zeros, steps: 0 }
    }

    /// One update; `grads[i]` is the gradient of parameter `i`, `None` for
    /// frozen parameters, which are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let pids: Vec<_> = store.pids().collect();
        for (i, pid) in pids.into_iter().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let decay = 1.0 - lr * self.weight_decay;
            let w = store.get_mut(pid);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w = *w * decay - lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

pub fn learning_rate(config: &TrainConfig, step: usize, total: usize) -> f64 {
    match config.lr_schedule {
        LrSchedule::Constant => config.learning_rate,
        LrSchedule::Cosine => {
            let t = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
            0.5 * config.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// Prompt-free mean Dice on the validation split, if one was given.
    pub val_dice: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,learning_rate,train_loss,val_dice,seconds\n");
        for e in &self.epochs {
            let val = e.val_dice.map_or("nan".to_string(), |d| d.to_string());
            let _ = writeln!(s, "{},{},{},{},{:.3}", e.epoch, e.learning_rate, e.train_loss, val, e.seconds);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub log: TrainLog,
}

fn training_prompt(mode: TrainPrompt, sample: &SegSample, class: usize, rng: &mut ChaCha8Rng) -> Prompt {
    let mode = match mode {
        TrainPrompt::Fixed(m) => m,
        TrainPrompt::Mixed => match rng.random_range(0..3) {
            0 => PromptMode::None,
            1 => PromptMode::Points(rng.random_range(1..=MIXED_MAX_POINTS)),
            _ => PromptMode::Box,
        },
    };
    let mask = &sample.class(class).expect("class present").mask;
    gt_prompt(mask, mode, rng)
}

/// Mean loss of one batch and the gradients of every parameter.
fn batch_step(
    model: &Model,
    config: &TrainConfig,
    batch: &[&SegSample],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Option<Mat>>)> {
    let mut items = Vec::new();
    let mut targets = Vec::new();
    for (si, s) in batch.iter().enumerate() {
        for c in &s.classes {
            let prompt = training_prompt(config.prompt, s, c.class, rng);
            items.push(Item { sample: si, class: c.class, attributes: c.attributes, prompt });
            let hw = c.mask.bits().len();
            targets.push(Mat::from_shape_fn((1, hw), |(_, i)| f64::from(c.mask.bits()[i])));
        }
    }
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let pids: Vec<_> = model.store.pids().collect();
    if items.is_empty() {
        return Ok((0.0, vec![None; pids.len()]));
    }
    model.validate_batch(&images, &items)?;
    let mut t = Tape::new();
    let freeze = config.freeze_text;
    let p = model.store.bind(&mut t, |name| !(freeze && name.starts_with("text.")));
    let planes = model.forward(&mut t, &p, &images, &items)?;
    let mut terms = Vec::with_capacity(planes.len() * 2);
    for (plane, target) in planes.iter().zip(&targets) {
        if config.dice_weight > 0.0 {
            let d = t.dice_loss(*plane, target, DICE_SMOOTH);
            terms.push(t.scale(d, config.dice_weight));
        }
        if config.bce_weight > 0.0 {
            let b = t.bce_with_logits(*plane, target);
            terms.push(t.scale(b, config.bce_weight));
        }
    }
    let total = if terms.is_empty() { t.constant(Mat::zeros((1, 1))) } else { t.add_n(&terms) };
    let loss = t.scale(total, 1.0 / planes.len() as f64);
    let value = t.scalar(loss);
    let mut grads: Gradients = t.backward(loss);
    let out = pids.iter().map(|&pid| grads.take(p.get(pid))).collect();
    Ok((value, out))
}

fn clip_gradients(grads: &mut [Option<Mat>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
}

/// Trains a fresh model. `on_epoch` sees each epoch row as it is logged.
pub fn train_with(
    config: &TrainConfig,
    train: &[SegSample],
    val: &[SegSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    config.validate()?;
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let limit = config.train_limit.unwrap_or(train.len()).min(train.len());
    let samples: Vec<SegSample> = train[..limit].iter().map(|s| filter_small_masks(s, SMALL_MASK_THRESHOLD)).collect();
    if samples.is_empty() {
        return Err(CoreError::InvalidInput("empty training set".into()));
    }
    let val_limit = config.val_limit.unwrap_or(val.len()).min(val.len());
    let val = &val[..val_limit];
    let mut opt = AdamW::new(&model.store, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);
    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let lr_epoch = learning_rate(config, step, total_steps);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, mut grads) = batch_step(&model, config, &batch, &mut rng)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(CoreError::Divergence { epoch, step: bi, loss });
            }
            if config.grad_clip > 0.0 {
                clip_gradients(&mut grads, config.grad_clip);
            }
            let lr = learning_rate(config, step, total_steps);
            opt.step(&mut model.store, &grads, lr);
            loss_sum += loss;
            step += 1;
        }
        let val_dice = if val.is_empty() {
            None
        } else {
            let records = evaluate_records(&model, val, PromptMode::None, config.seed)?;
            medseg_metrics::mean_dice(&records)
        };
        let row = EpochLog {
            epoch,
            learning_rate: lr_epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_dice,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.epochs.push(row);
    }
    Ok(TrainOutput { model, log })
}

pub fn train(config: &TrainConfig, train: &[SegSample], val: &[SegSample]) -> Result<TrainOutput> {
    train_with(config, train, val, |_| {})
}
