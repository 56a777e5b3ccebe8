//! Dataset-level sampling of scene specs and split generation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attributes::{Position, Shape, Texture};
use crate::kv::KeyValues;
use crate::sample::{Domain, SegSample, DOMAIN_COUNT};
use crate::scene::{generate_scene, ObjectSpec, SceneSpec};
use crate::DataError;

/// Typical cell, texture and shape of each class; a class shows its
/// typical value with probability `canonical_prob`, otherwise a random one.
const CANONICAL_CELL: [usize; 8] = [4, 0, 8, 2, 6, 1, 7, 3];
const CANONICAL_TEXTURE: [Texture; 8] = [
    Texture::Smooth,
    Texture::Stripes,
    Texture::Checker,
    Texture::Speckle,
    Texture::Stripes,
    Texture::Smooth,
    Texture::Speckle,
    Texture::Checker,
];
const CANONICAL_SHAPE: [Shape; 8] = [
    Shape::Circle,
    Shape::Ellipse,
    Shape::Rectangle,
    Shape::Blob,
    Shape::Circle,
    Shape::Blob,
    Shape::Ellipse,
    Shape::Rectangle,
];

/// Seed offsets separating the splits of one base seed.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;
pub const TEST_SEED_OFFSET: u64 = 2_000_000;

const SPEC_RETRIES: u64 = 16;

/// Generator settings; read from `key=value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub area_min: f64,
    pub area_max: f64,
    pub overlap_min: f64,
    pub overlap_max: f64,
    /// Probability that a sample is generated with no overlap at all.
    pub zero_overlap_prob: f64,
    pub canonical_prob: f64,
    /// Fixed domain style, or every style uniformly when `None`.
    pub domain: Option<Domain>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            train: 2000,
            val: 100,
            test: 500,
            area_min: 0.01,
            area_max: 0.10,
            overlap_min: 0.0,
            overlap_max: 0.6,
            zero_overlap_prob: 0.3,
            canonical_prob: 0.6,
            domain: None,
        }
    }
}

impl DatasetConfig {
    /// Small-object preset: every area fraction in [0.005, 0.05].
    pub fn small_objects() -> Self {
        Self { area_min: 0.005, area_max: 0.05, ..Self::default() }
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        kv.take_parsed("image_size", &mut c.image_size)?;
        kv.take_parsed("num_classes", &mut c.num_classes)?;
        kv.take_parsed("train", &mut c.train)?;
        kv.take_parsed("val", &mut c.val)?;
        kv.take_parsed("test", &mut c.test)?;
        kv.take_parsed("area_min", &mut c.area_min)?;
        kv.take_parsed("area_max", &mut c.area_max)?;
        kv.take_parsed("overlap_min", &mut c.overlap_min)?;
        kv.take_parsed("overlap_max", &mut c.overlap_max)?;
        kv.take_parsed("zero_overlap_prob", &mut c.zero_overlap_prob)?;
        kv.take_parsed("canonical_prob", &mut c.canonical_prob)?;
        if let Some(d) = kv.take("domain") {
            c.domain = if d == "all" { None } else { Some(d.parse()?) };
        }
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if !(1..=8).contains(&self.num_classes) {
            return bad("num_classes must be in 1..=8");
        }
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max < 1.0) {
            return bad("need 0 < area_min <= area_max < 1");
        }
        if !(0.0 <= self.overlap_min && self.overlap_min <= self.overlap_max && self.overlap_max <= 1.0) {
            return bad("need 0 <= overlap_min <= overlap_max <= 1");
        }
        if !(0.0..=1.0).contains(&self.zero_overlap_prob) || !(0.0..=1.0).contains(&self.canonical_prob) {
            return bad("probabilities must lie in [0,1]");
        }
        if !self.image_size.is_multiple_of(8) || self.image_size == 0 {
            return bad("image_size must be a positive multiple of 8");
        }
        Ok(())
    }

    /// Draws the scene request of one sample.
    pub fn sample_spec(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        let n = self.num_classes;
        let mut used = [false; 9];
        let mut objects = Vec::with_capacity(n);
        for k in 0..n {
            let canonical = rng.random_bool(self.canonical_prob);
            let mut cell = if canonical { CANONICAL_CELL[k] } else { rng.random_range(0..9) };
            while used[cell] {
                cell = rng.random_range(0..9);
            }
            used[cell] = true;
            let texture = if rng.random_bool(self.canonical_prob) {
                CANONICAL_TEXTURE[k]
            } else {
                Texture::ALL[rng.random_range(0..4)]
            };
            let shape = if rng.random_bool(self.canonical_prob) {
                CANONICAL_SHAPE[k]
            } else {
                Shape::ALL[rng.random_range(0..4)]
            };
            let area = (rng.random_range(self.area_min.ln()..=self.area_max.ln())).exp();
            objects.push(ObjectSpec { position: Position::ALL[cell], texture, shape, area_fraction: area });
        }
        let target_overlap = if n < 2 || rng.random_bool(self.zero_overlap_prob) {
            0.0
        } else {
            rng.random_range(self.overlap_min..=self.overlap_max)
        };
        if target_overlap > 0.0 {
            // The overlapped class sits on top of a larger partner.
            let partner =
                (1..n).max_by(|&a, &b| objects[a].area_fraction.total_cmp(&objects[b].area_fraction)).unwrap();
            if objects[partner].area_fraction < objects[0].area_fraction {
                let a0 = objects[0].area_fraction;
                objects[0].area_fraction = objects[partner].area_fraction;
                objects[partner].area_fraction = a0;
            }
        }
        let domain = match self.domain {
            Some(d) => d,
            None => Domain::new(rng.random_range(0..DOMAIN_COUNT)).unwrap(),
        };
        SceneSpec { image_size: self.image_size, objects, target_overlap, domain }
    }

    /// Same as [`DatasetConfig::sample_spec`] but with a fixed overlap target.
    pub fn sample_spec_with_overlap(&self, rng: &mut ChaCha8Rng, overlap: f64) -> SceneSpec {
        let mut c = self.clone();
        c.zero_overlap_prob = if overlap == 0.0 { 1.0 } else { 0.0 };
        c.overlap_min = overlap;
        c.overlap_max = overlap;
        c.sample_spec(rng)
    }
}

/// Generates the sample with derived seed `seed`; the id is its zero-padded
/// index within the split.
pub fn generate_sample(config: &DatasetConfig, seed: u64, index: usize) -> Result<SegSample, DataError> {
    generate_with(seed, index, |rng| config.sample_spec(rng))
}

fn generate_with(seed: u64, index: usize, draw: impl Fn(&mut ChaCha8Rng) -> SceneSpec) -> Result<SegSample, DataError> {
    let mut last = None;
    for retry in 0..SPEC_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(retry);
        let spec = draw(&mut rng);
        match generate_scene(&spec, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(retry)) {
            Ok(mut s) => {
                s.image.id = format!("{index:05}");
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

/// `count` samples with seeds `base_seed + i`. Parallel and serial runs
/// produce identical output.
pub fn generate_split(
    config: &DatasetConfig,
    base_seed: u64,
    count: usize,
    parallel: bool,
) -> Result<Vec<SegSample>, DataError> {
    let one = |i: usize| generate_sample(config, base_seed + i as u64, i);
    if parallel {
        (0..count).into_par_iter().map(one).collect()
    } else {
        (0..count).map(one).collect()
    }
}

/// Test set whose overlap targets sweep `levels` evenly, `per_level`
/// samples each.
pub fn generate_overlap_sweep(
    config: &DatasetConfig,
    base_seed: u64,
    levels: &[f64],
    per_level: usize,
) -> Result<Vec<SegSample>, DataError> {
    let jobs: Vec<(usize, f64)> = levels.iter().flat_map(|&l| std::iter::repeat_n(l, per_level)).enumerate().collect();
    jobs.into_par_iter()
        .map(|(i, level)| generate_with(base_seed + i as u64, i, |rng| config.sample_spec_with_overlap(rng, level)))
        .collect()
}
