use std::collections::BTreeMap;

use medseg_data::Domain;
use serde::Serialize;

use crate::MetricsError;

/// Area fraction below which a structure counts as a small object.
pub const SMALL_OBJECT_AREA: f64 = 0.05;

/// Score of one class of one evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub class: usize,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub area_fraction: f64,
    pub overlap_rate: f64,
    pub domain: Domain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StratumKey {
    SmallObject,
    OverlapBin,
    Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StratumRow {
    pub label: String,
    pub count: usize,
    pub mean_dice: Option<f64>,
    pub mean_hd95: Option<f64>,
    /// Records whose HD95 was undefined and left out of `mean_hd95`.
    pub hd95_undefined: usize,
}

impl StratumRow {
    fn from_records(label: String, records: &[&EvalRecord]) -> Self {
        let defined: Vec<f64> = records.iter().filter_map(|r| r.hd95).collect();
        Self {
            label,
            count: records.len(),
            mean_dice: mean(records.iter().map(|r| r.dice)),
            mean_hd95: mean(defined.iter().copied()),
            hd95_undefined: records.len() - defined.len(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn overlap_decile(rate: f64) -> usize {
    ((rate * 10.0).floor() as usize).min(9)
}

/// Aggregates records into strata. Every stratum of the key is listed, empty
/// ones with count 0 and no means.
pub fn stratify(records: &[EvalRecord], key: StratumKey) -> Result<Vec<StratumRow>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let groups: Vec<(String, Vec<&EvalRecord>)> = match key {
        StratumKey::SmallObject => {
            let (small, rest): (Vec<&EvalRecord>, Vec<&EvalRecord>) =
                records.iter().partition(|r| r.area_fraction < SMALL_OBJECT_AREA);
            vec![("small".to_string(), small), ("large".to_string(), rest)]
        }
        StratumKey::OverlapBin => (0..10)
            .map(|b| {
                let label = format!("{:.1}-{:.1}", b as f64 / 10.0, (b + 1) as f64 / 10.0);
                (label, records.iter().filter(|r| overlap_decile(r.overlap_rate) == b).collect())
            })
            .collect(),
        StratumKey::Domain => {
            Domain::all().map(|d| (d.to_string(), records.iter().filter(|r| r.domain == d).collect())).collect()
        }
    };
    Ok(groups.into_iter().map(|(label, rs)| StratumRow::from_records(label, &rs)).collect())
}

/// Mean Dice over all records.
pub fn mean_dice(records: &[EvalRecord]) -> Option<f64> {
    mean(records.iter().map(|r| r.dice))
}

/// Unweighted mean over classes of each class's mean Dice.
pub fn mean_dice_over_classes(records: &[EvalRecord]) -> Option<f64> {
    let mut by_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = by_class.entry(r.class).or_default();
        e.0 += r.dice;
        e.1 += 1;
    }
    mean(by_class.values().map(|&(s, n)| s / n as f64))
}
