//! Evaluation: prompts drawn from ground truth, per-class records and the
//! metric reports.

use std::path::Path;

use medseg_data::{filter_small_masks, Mask, SegSample, SMALL_MASK_THRESHOLD};
use medseg_metrics::{dice, hd95, write_reports, EvalRecord, Summary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbones::{PointPrompt, Prompt, PromptMode, SegPrediction};
use crate::model::Model;
use crate::{CoreError, Result};

/// Anything that maps a sample and one prompt per annotated class to
/// logit planes in the sample's class order.
pub trait Predictor: Sync {
    fn predict(&self, sample: &SegSample, prompts: &[Prompt]) -> Result<SegPrediction>;

    /// Rejects data the predictor cannot handle.
    fn check_compatible(&self, _sample: &SegSample) -> Result<()> {
        Ok(())
    }
}

impl Predictor for Model {
    fn predict(&self, sample: &SegSample, prompts: &[Prompt]) -> Result<SegPrediction> {
        Model::predict(self, sample, prompts)
    }

    fn check_compatible(&self, sample: &SegSample) -> Result<()> {
        let n = self.config.image_size;
        if sample.image.height != n || sample.image.width != n {
            return Err(CoreError::InvalidInput(format!(
                "sample {} is {}x{}, the model takes {n}x{n}",
                sample.id(),
                sample.image.height,
                sample.image.width
            )));
        }
        if let Some(c) = sample.classes.iter().find(|c| c.class >= self.config.num_classes) {
            return Err(CoreError::InvalidInput(format!(
                "sample {} has class {}, the model has {} class queries",
                sample.id(),
                c.class,
                self.config.num_classes
            )));
        }
        Ok(())
    }
}

/// Prompt for one class: `k` foreground points drawn uniformly with
/// replacement, or the tight bounding box. Point draws are sequential, so
/// the first `k` points of a stream are shared by every larger `k`.
pub fn gt_prompt(mask: &Mask, mode: PromptMode, rng: &mut impl Rng) -> Prompt {
    let fg = mask.foreground();
    if fg.is_empty() {
        return Prompt::None;
    }
    match mode {
        PromptMode::None => Prompt::None,
        PromptMode::Points(k) => Prompt::Points(
            (0..k)
                .map(|_| {
                    let (y, x) = fg[rng.random_range(0..fg.len())];
                    PointPrompt { y: y as f64, x: x as f64, foreground: true }
                })
                .collect(),
        ),
        PromptMode::Box => {
            let (y0, x0, y1, x1) = mask.bbox().expect("non-empty mask");
            Prompt::Box { y0: y0 as f64, x0: x0 as f64, y1: y1 as f64, x1: x1 as f64 }
        }
    }
}

/// Seeded prompt stream of one (sample, class) pair, independent of
/// evaluation order.
fn prompt_rng(seed: u64, sample: usize, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sample as u64) << 16) | class as u64);
    rng
}

fn sample_records(
    predictor: &impl Predictor,
    index: usize,
    sample: &SegSample,
    mode: PromptMode,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    let sample = filter_small_masks(sample, SMALL_MASK_THRESHOLD);
    let prompts: Vec<Prompt> =
        sample.classes.iter().map(|c| gt_prompt(&c.mask, mode, &mut prompt_rng(seed, index, c.class))).collect();
    let pred = predictor.predict(&sample, &prompts)?;
    if pred.masks.len() != sample.classes.len() {
        return Err(CoreError::Dimension(format!("{} masks for {} classes", pred.masks.len(), sample.classes.len())));
    }
    sample
        .classes
        .iter()
        .zip(&pred.masks)
        .map(|(c, m)| {
            Ok(EvalRecord {
                id: sample.id().to_string(),
                class: c.class,
                dice: dice(m, &c.mask)?,
                hd95: hd95(m, &c.mask)?,
                area_fraction: c.area_fraction,
                overlap_rate: sample.overlap_rate,
                domain: sample.domain,
            })
        })
        .collect()
}

/// One record per annotated class of every sample, in sample order.
/// Samples are predicted in parallel; prompts depend only on `seed` and
/// the sample position.
pub fn evaluate_records(
    predictor: &impl Predictor,
    samples: &[SegSample],
    mode: PromptMode,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    for s in samples {
        predictor.check_compatible(s)?;
    }
    let per_sample: Vec<Result<Vec<EvalRecord>>> =
        samples.par_iter().enumerate().map(|(i, s)| sample_records(predictor, i, s, mode, seed)).collect();
    let mut out = Vec::new();
    for r in per_sample {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    pub summary: Summary,
}

/// Evaluates and, when `report_dir` is given, writes the metric reports
/// there.
pub fn evaluate(
    predictor: &impl Predictor,
    samples: &[SegSample],
    mode: PromptMode,
    seed: u64,
    report_dir: Option<&Path>,
) -> Result<EvalOutput> {
    let records = evaluate_records(predictor, samples, mode, seed)?;
    let summary = match report_dir {
        Some(dir) => write_reports(dir, &records)?,
        None => Summary::new(&records)?,
    };
    Ok(EvalOutput { records, summary })
}
