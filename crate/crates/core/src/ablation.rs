//! Ablation grids: named cells, each a complete training config plus an
//! evaluation prompt mode. Cells with identical training configs share
//! one trained model.

use std::fmt::Write as _;
use std::path::Path;

use medseg_data::SegSample;
use medseg_metrics::Summary;

use crate::backbones::PromptMode;
use crate::config::TrainConfig;
use crate::eval::evaluate;
use crate::fusion_gate::BranchMask;
use crate::model::Model;
use crate::prior_modulation::PriorToggles;
use crate::train::{train_with, EpochLog};
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub config: TrainConfig,
    pub eval_prompt: PromptMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub cells: Vec<AblationCell>,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: String,
    pub eval_prompt: PromptMode,
    pub summary: Summary,
    /// Mean Dice of the small-object stratum, if populated.
    pub small_dice: Option<f64>,
    /// OLS slope of Dice against overlap rate, if defined.
    pub overlap_slope: Option<f64>,
    pub train_seconds: f64,
}

const EVAL_PROMPT_KEY: &str = "eval_prompt";

fn split_prompt(text: &str) -> Result<(String, Option<PromptMode>)> {
    let mut rest = String::new();
    let mut prompt = None;
    for line in text.lines() {
        let key = line.split('=').next().unwrap_or("").trim();
        if key == EVAL_PROMPT_KEY {
            let v = line.split_once('=').map(|(_, v)| v.trim()).unwrap_or("");
            prompt = Some(v.parse()?);
        } else {
            rest.push_str(line);
            rest.push('\n');
        }
    }
    Ok((rest, prompt))
}

impl AblationSpec {
    /// Base `key=value` lines, then one `[cell name]` section per cell
    /// holding overrides. `eval_prompt` may appear in either place.
    pub fn parse(text: &str) -> Result<Self> {
        let mut base_text = String::new();
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() || sections.iter().any(|(n, _)| n == name) {
                    return Err(CoreError::Config(format!("empty or duplicate cell name '{name}'")));
                }
                sections.push((name.to_string(), String::new()));
            } else {
                let target = match sections.last_mut() {
                    Some((_, body)) => body,
                    None => &mut base_text,
                };
                target.push_str(line);
                target.push('\n');
            }
        }
        if sections.is_empty() {
            return Err(CoreError::Config("ablation spec has no cells".into()));
        }
        let (base_text, base_prompt) = split_prompt(&base_text)?;
        let base = TrainConfig::parse(&base_text)?;
        let cells = sections
            .into_iter()
            .map(|(name, body)| {
                let (body, prompt) = split_prompt(&body)?;
                let config = TrainConfig::parse_over(base.clone(), &body)
                    .map_err(|e| CoreError::Config(format!("cell '{name}': {e}")))?;
                Ok(AblationCell { name, config, eval_prompt: prompt.or(base_prompt).unwrap_or(PromptMode::None) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cells })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
    }

    fn from_configs(cells: Vec<(String, TrainConfig)>) -> Self {
        Self {
            cells: cells
                .into_iter()
                .map(|(name, config)| AblationCell { name, config, eval_prompt: PromptMode::None })
                .collect(),
        }
    }

    /// Every subset of the three priors, both stages on.
    pub fn priors(base: &TrainConfig) -> Self {
        let cells = prior_subsets()
            .into_iter()
            .map(|(name, priors)| {
                let mut c = base.clone();
                c.model.toggles.priors = priors;
                (name, c)
            })
            .collect();
        Self::from_configs(cells)
    }

    /// Cognitive and perceptual stage on/off, with and without
    /// cross-attribute attention.
    pub fn stages(base: &TrainConfig) -> Self {
        let grid = [
            ("neither", false, false, false),
            ("cognitive", true, false, true),
            ("cognitive-no-caa", true, false, false),
            ("perceptual", false, true, true),
            ("both", true, true, true),
            ("both-no-caa", true, true, false),
        ];
        let cells = grid
            .into_iter()
            .map(|(name, cog, per, caa)| {
                let mut c = base.clone();
                let t = &mut c.model.toggles;
                (t.cognitive, t.perceptual, t.caa) = (cog, per, caa);
                (name.to_string(), c)
            })
            .collect();
        Self::from_configs(cells)
    }

    /// Every non-empty subset of gate branches.
    pub fn gate_branches(base: &TrainConfig) -> Self {
        let cells = (1u8..8)
            .map(|bits| {
                let mask = BranchMask([bits & 1 != 0, bits & 2 != 0, bits & 4 != 0]);
                let mut c = base.clone();
                c.model.toggles.branches = mask;
                (mask.to_string(), c)
            })
            .collect();
        Self::from_configs(cells)
    }

    /// One model evaluated prompt-free, with 1, 3 and 5 points and with a
    /// box.
    pub fn prompts(base: &TrainConfig) -> Self {
        let modes =
            [PromptMode::None, PromptMode::Points(1), PromptMode::Points(3), PromptMode::Points(5), PromptMode::Box];
        Self {
            cells: modes
                .into_iter()
                .map(|m| AblationCell { name: m.to_string(), config: base.clone(), eval_prompt: m })
                .collect(),
        }
    }
}

/// `(name, toggles)` for all eight prior subsets, full set first.
pub fn prior_subsets() -> Vec<(String, PriorToggles)> {
    let mut out = Vec::new();
    for bits in (0u8..8).rev() {
        let t = PriorToggles { position: bits & 4 != 0, texture: bits & 2 != 0, shape: bits & 1 != 0 };
        let mut names = Vec::new();
        if t.position {
            names.push("position");
        }
        if t.texture {
            names.push("texture");
        }
        if t.shape {
            names.push("shape");
        }
        let name = match names.len() {
            3 => "all".to_string(),
            0 => "none".to_string(),
            _ => names.join("+"),
        };
        out.push((name, t));
    }
    out
}

/// Data for an ablation run.
pub struct AblationData<'a> {
    pub train: &'a [SegSample],
    pub val: &'a [SegSample],
    pub test: &'a [SegSample],
}

/// Trains and evaluates every cell with the cell's seed; the test prompts
/// use the same seed for every cell.
pub fn run_ablation(
    spec: &AblationSpec,
    data: &AblationData,
    mut progress: impl FnMut(&str, &EpochLog),
) -> Result<Vec<AblationRow>> {
    let mut trained: Vec<(String, Model, f64)> = Vec::new();
    let mut rows = Vec::with_capacity(spec.cells.len());
    for cell in &spec.cells {
        let key = cell.config.to_kv();
        let idx = match trained.iter().position(|(k, _, _)| *k == key) {
            Some(i) => i,
            None => {
                let start = std::time::Instant::now();
                let out = train_with(&cell.config, data.train, data.val, |e| progress(&cell.name, e))?;
                trained.push((key, out.model, start.elapsed().as_secs_f64()));
                trained.len() - 1
            }
        };
        let (_, model, secs) = &trained[idx];
        let eval = evaluate(model, data.test, cell.eval_prompt, cell.config.seed, None)?;
        let small_dice = eval.summary.small_object.iter().find(|r| r.label == "small").and_then(|r| r.mean_dice);
        let overlap_slope = eval.summary.overlap_fit.slope;
        rows.push(AblationRow {
            cell: cell.name.clone(),
            eval_prompt: cell.eval_prompt,
            summary: eval.summary,
            small_dice,
            overlap_slope,
            train_seconds: *secs,
        });
    }
    Ok(rows)
}

pub fn table_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
    let mut s =
        String::from("cell,eval_prompt,records,mean_dice,mdice,mean_hd95,small_dice,overlap_slope,train_seconds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{},{},{},{:.1}",
            r.cell,
            r.eval_prompt,
            r.summary.records,
            r.summary.mean_dice,
            r.summary.mdice,
            opt(r.summary.mean_hd95),
            opt(r.small_dice),
            opt(r.overlap_slope),
            r.train_seconds
        );
    }
    s
}

pub fn write_table(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let path = dir.join("ablation.csv");
    std::fs::write(&path, table_csv(rows)).map_err(|e| CoreError::io(&path, e))
}
