use std::fmt;
use std::str::FromStr;

use crate::attributes::AttributeRecord;
use crate::image::ImageSample;
use crate::mask::Mask;
use crate::DataError;

/// Number of synthetic acquisition styles.
pub const DOMAIN_COUNT: u8 = 8;

/// Synthetic "modality": a background/contrast/noise style. Only an
/// aggregation key downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Domain(u8);

impl Domain {
    pub fn new(index: u8) -> Result<Self, DataError> {
        if index < DOMAIN_COUNT {
            Ok(Self(index))
        } else {
            Err(DataError::Parse(format!("domain index {index} out of range")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Domain> {
        (0..DOMAIN_COUNT).map(Domain)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "style{}", self.0)
    }
}

impl FromStr for Domain {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let idx = s
            .strip_prefix("style")
            .and_then(|n| n.parse::<u8>().ok())
            .ok_or_else(|| DataError::Parse(format!("bad domain tag '{s}'")))?;
        Domain::new(idx)
    }
}

/// Ground truth of one class present in a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAnnotation {
    pub class: usize,
    pub mask: Mask,
    pub attributes: AttributeRecord,
    pub area_fraction: f64,
}

/// One image with its per-class ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: ImageSample,
    /// Sorted by class id; classes removed by filtering are absent.
    pub classes: Vec<ClassAnnotation>,
    pub domain: Domain,
    /// Boundary-proximity overlap of class 0 against the union of the
    /// other classes, measured at generation time.
    pub overlap_rate: f64,
}

impl SegSample {
    pub fn id(&self) -> &str {
        &self.image.id
    }

    pub fn class(&self, class: usize) -> Option<&ClassAnnotation> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Default area fraction below which ground-truth masks are discarded.
pub const SMALL_MASK_THRESHOLD: f64 = 0.00153;

/// Drops ground-truth masks whose area fraction is below `threshold`.
pub fn filter_small_masks(sample: &SegSample, threshold: f64) -> SegSample {
    let area = (sample.image.height * sample.image.width) as f64;
    let mut out = sample.clone();
    out.classes.retain(|c| (c.mask.count() as f64) / area >= threshold);
    out
}
