//! `metrics.csv`, `summary.json` and `overlap_fit.csv` in a report directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::stats::{ols_slope, pearson_r};
use crate::stratify::{mean_dice, mean_dice_over_classes, stratify, EvalRecord, StratumKey, StratumRow};
use crate::MetricsError;

pub const METRICS_HEADER: &str = "id,class,dice,hd95,area_fraction,overlap_rate,domain";

/// Linear fit of Dice against overlap rate over all records. `r` and `slope`
/// are absent when the data has no spread.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapFit {
    pub n: usize,
    pub r: Option<f64>,
    pub slope: Option<f64>,
}

pub fn overlap_fit(records: &[EvalRecord]) -> OverlapFit {
    let xs: Vec<f64> = records.iter().map(|r| r.overlap_rate).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.dice).collect();
    OverlapFit { n: records.len(), r: pearson_r(&xs, &ys).ok(), slope: ols_slope(&xs, &ys).ok() }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub records: usize,
    pub mean_dice: f64,
    pub mdice: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
    pub small_object: Vec<StratumRow>,
    pub overlap_bin: Vec<StratumRow>,
    pub domain: Vec<StratumRow>,
    pub overlap_fit: OverlapFit,
}

impl Summary {
    pub fn new(records: &[EvalRecord]) -> Result<Self, MetricsError> {
        let small_object = stratify(records, StratumKey::SmallObject)?;
        let defined: Vec<f64> = records.iter().filter_map(|r| r.hd95).collect();
        let total_hd95 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(Self {
            records: records.len(),
            mean_dice: mean_dice(records).ok_or(MetricsError::Empty)?,
            mdice: mean_dice_over_classes(records).ok_or(MetricsError::Empty)?,
            mean_hd95: total_hd95,
            hd95_undefined: records.len() - defined.len(),
            small_object,
            overlap_bin: stratify(records, StratumKey::OverlapBin)?,
            domain: stratify(records, StratumKey::Domain)?,
            overlap_fit: overlap_fit(records),
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

fn write(path: &Path, text: &str) -> Result<(), MetricsError> {
    fs::write(path, text).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

/// Writes the three report files into `dir`, creating it if needed.
/// Undefined HD95 values are written as `nan`.
pub fn write_reports(dir: &Path, records: &[EvalRecord]) -> Result<Summary, MetricsError> {
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io { path: dir.to_path_buf(), source })?;
    let summary = Summary::new(records)?;

    let mut csv = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.id,
            r.class,
            r.dice,
            fmt_opt(r.hd95),
            r.area_fraction,
            r.overlap_rate,
            r.domain
        )
        .unwrap();
    }
    write(&dir.join("metrics.csv"), &csv)?;

    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write(&dir.join("summary.json"), &(json + "\n"))?;

    let fit = &summary.overlap_fit;
    let mut pairs = format!("# r={}\n# slope={}\noverlap_rate,dice\n", fmt_opt(fit.r), fmt_opt(fit.slope));
    for r in records {
        writeln!(pairs, "{},{}", r.overlap_rate, r.dice).unwrap();
    }
    write(&dir.join("overlap_fit.csv"), &pairs)?;
    Ok(summary)
}
