//! Rendering of multi-object scenes with controlled attributes, object
//! areas and boundary overlap.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attributes::{AttributeRecord, Position, Shape, Texture};
use crate::image::normalize_intensity;
use crate::mask::Mask;
use crate::overlap::{overlap_rate, DEFAULT_TAU};
use crate::sample::{ClassAnnotation, Domain, SegSample};
use crate::DataError;

/// Achieved overlap must land within this distance of the request.
pub const OVERLAP_TOLERANCE: f64 = 0.05;
/// Achieved area fractions must land within this relative error.
pub const AREA_TOLERANCE: f64 = 0.20;
/// Largest admissible sum of requested area fractions.
pub const MAX_TOTAL_AREA: f64 = 0.9;

const MAX_ATTEMPTS: usize = 48;
const SIZE_ROUNDS: usize = 8;
const BISECTION_STEPS: usize = 22;

/// Requested appearance of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectSpec {
    pub position: Position,
    pub texture: Texture,
    pub shape: Shape,
    pub area_fraction: f64,
}

/// Everything [`generate_scene`] needs to render one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    /// One entry per class; index = class id.
    pub objects: Vec<ObjectSpec>,
    pub target_overlap: f64,
    pub domain: Domain,
}

/// Background and contrast statistics of a domain style.
#[derive(Clone, Copy, Debug)]
struct Style {
    background: f64,
    gradient: f64,
    noise: f64,
    contrast: f64,
    texture_amp: f64,
}

const STYLES: [Style; 8] = [
    Style { background: 50.0, gradient: 10.0, noise: 5.0, contrast: 80.0, texture_amp: 25.0 },
    Style { background: 70.0, gradient: 25.0, noise: 8.0, contrast: 70.0, texture_amp: 25.0 },
    Style { background: 90.0, gradient: 0.0, noise: 6.0, contrast: 90.0, texture_amp: 30.0 },
    Style { background: 110.0, gradient: 15.0, noise: 10.0, contrast: 60.0, texture_amp: 20.0 },
    Style { background: 140.0, gradient: 20.0, noise: 7.0, contrast: -70.0, texture_amp: 25.0 },
    Style { background: 160.0, gradient: 5.0, noise: 12.0, contrast: -60.0, texture_amp: 20.0 },
    Style { background: 190.0, gradient: 30.0, noise: 6.0, contrast: -80.0, texture_amp: 30.0 },
    Style { background: 210.0, gradient: 10.0, noise: 9.0, contrast: -90.0, texture_amp: 25.0 },
];

/// Geometry of one placed object, in pixel units.
#[derive(Clone, Debug)]
struct Placed {
    shape: Shape,
    area: f64,
    cy: f64,
    cx: f64,
    scale: f64,
    angle: f64,
    phases: [f64; 2],
}

const ELLIPSE_ASPECT: f64 = 1.8;
const RECT_ASPECT: f64 = 1.5;
const BLOB_A3: f64 = 0.25;
const BLOB_A5: f64 = 0.12;

impl Placed {
    fn radius(&self) -> f64 {
        (self.area / PI).sqrt() * self.scale
    }

    /// Radius of a disc enclosing the shape.
    fn extent(&self) -> f64 {
        let r = self.radius();
        match self.shape {
            Shape::Circle => r,
            Shape::Ellipse => r * ELLIPSE_ASPECT.sqrt(),
            Shape::Rectangle => {
                let a = self.area * self.scale * self.scale;
                0.5 * ((a * RECT_ASPECT) + (a / RECT_ASPECT)).sqrt()
            }
            Shape::Blob => r * (1.0 + BLOB_A3 + BLOB_A5),
        }
    }

    fn contains(&self, py: f64, px: f64) -> bool {
        let dy = py - self.cy;
        let dx = px - self.cx;
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.radius();
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Ellipse => {
                let a = r * ELLIPSE_ASPECT.sqrt();
                let b = r / ELLIPSE_ASPECT.sqrt();
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Rectangle => {
                let a = self.area * self.scale * self.scale;
                let hu = 0.5 * (a * RECT_ASPECT).sqrt();
                let hv = 0.5 * (a / RECT_ASPECT).sqrt();
                u.abs() <= hu && v.abs() <= hv
            }
            Shape::Blob => {
                let r0 = r / (1.0 + (BLOB_A3 * BLOB_A3 + BLOB_A5 * BLOB_A5) / 2.0).sqrt();
                let theta = v.atan2(u);
                let edge = r0
                    * (1.0
                        + BLOB_A3 * (3.0 * theta + self.phases[0]).sin()
                        + BLOB_A5 * (5.0 * theta + self.phases[1]).sin());
                dx * dx + dy * dy <= edge * edge
            }
        }
    }
}

/// Paints objects in `order` (later wins) and returns per-object masks.
fn render_masks(size: usize, objects: &[Placed], order: &[usize]) -> Vec<Mask> {
    let mut owner: Vec<Option<usize>> = vec![None; size * size];
    for &i in order {
        let o = &objects[i];
        let e = o.extent() + 1.0;
        let y0 = ((o.cy - e).floor().max(0.0)) as usize;
        let y1 = ((o.cy + e).ceil().min(size as f64)) as usize;
        let x0 = ((o.cx - e).floor().max(0.0)) as usize;
        let x1 = ((o.cx + e).ceil().min(size as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if o.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    owner[y * size + x] = Some(i);
                }
            }
        }
    }
    (0..objects.len()).map(|i| Mask::from_fn(size, size, |y, x| owner[y * size + x] == Some(i))).collect()
}

fn measured_overlap(masks: &[Mask]) -> f64 {
    if masks.len() < 2 {
        return 0.0;
    }
    let others = masks[1..].iter().skip(1).fold(masks[1].clone(), |acc, m| acc.union(m));
    overlap_rate(&masks[0], &others, DEFAULT_TAU).unwrap_or(0.0)
}

fn cell_point(rng: &mut ChaCha8Rng, pos: Position, size: usize, margin: f64) -> (f64, f64) {
    let cell = size as f64 / 3.0;
    let pick = |rng: &mut ChaCha8Rng, idx: usize| {
        let lo = (idx as f64 * cell).max(margin);
        let hi = ((idx + 1) as f64 * cell).min(size as f64 - margin);
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            (idx as f64 + 0.5) * cell
        }
    };
    let y = pick(rng, pos.row());
    let x = pick(rng, pos.col());
    (y, x)
}

fn validate(spec: &SceneSpec) -> Result<(), DataError> {
    let n = spec.objects.len();
    if !(1..=8).contains(&n) {
        return Err(DataError::Infeasible(format!("class count {n} outside 1..=8")));
    }
    if spec.image_size < 8 {
        return Err(DataError::Infeasible("image size below 8".into()));
    }
    let total: f64 = spec.objects.iter().map(|o| o.area_fraction).sum();
    if total > MAX_TOTAL_AREA {
        return Err(DataError::Infeasible(format!("area fractions sum to {total:.3} > {MAX_TOTAL_AREA}")));
    }
    if spec.objects.iter().any(|o| !(o.area_fraction > 0.0 && o.area_fraction < 1.0)) {
        return Err(DataError::Infeasible("area fractions must lie in (0,1)".into()));
    }
    if !(0.0..=1.0).contains(&spec.target_overlap) {
        return Err(DataError::Infeasible("target overlap outside [0,1]".into()));
    }
    if spec.target_overlap > 0.0 && n < 2 {
        return Err(DataError::Infeasible("overlap requested with a single class".into()));
    }
    Ok(())
}

/// Renders a scene matching `spec`. The same `(spec, seed)` always gives
/// the same sample.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SegSample, DataError> {
    validate(spec)?;
    let size = spec.image_size;
    let pixels = (size * size) as f64;
    let n = spec.objects.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class 0 is painted last so it is never occluded; the partner that
    // sets its overlap is the largest other object.
    let partner = (spec.target_overlap > 0.0).then(|| {
        (1..n).max_by(|&a, &b| spec.objects[a].area_fraction.total_cmp(&spec.objects[b].area_fraction)).unwrap()
    });
    let mut order: Vec<usize> = (1..n).collect();
    order.push(0);

    for _attempt in 0..MAX_ATTEMPTS {
        let mut placed: Vec<Placed> = spec
            .objects
            .iter()
            .map(|o| {
                let area = o.area_fraction * pixels;
                let margin = (area / PI).sqrt() * 0.6;
                let (cy, cx) = cell_point(&mut rng, o.position, size, margin);
                Placed {
                    shape: o.shape,
                    area,
                    cy,
                    cx,
                    scale: 1.0,
                    angle: rng.random_range(0.0..PI),
                    phases: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
                }
            })
            .collect();
        let centre = size as f64 / 2.0;
        let towards = (centre - placed[0].cy).atan2(centre - placed[0].cx);
        let heading = if (placed[0].cy - centre).abs() + (placed[0].cx - centre).abs() < 1.0 {
            rng.random_range(-PI..PI)
        } else {
            towards + rng.random_range(-PI / 3.0..PI / 3.0)
        };

        for _round in 0..SIZE_ROUNDS {
            if let Some(j) = partner {
                place_partner(size, &mut placed, j, &order, heading, spec.target_overlap);
            }
            let masks = render_masks(size, &placed, &order);
            let overlap = measured_overlap(&masks);
            let mut ok = (overlap - spec.target_overlap).abs() <= OVERLAP_TOLERANCE;
            for (i, m) in masks.iter().enumerate() {
                let want = spec.objects[i].area_fraction;
                let got = m.area_fraction();
                if (got - want).abs() > AREA_TOLERANCE * want * 0.9 {
                    ok = false;
                    let factor = if got > 0.0 { (want / got).sqrt() } else { 1.5 };
                    placed[i].scale *= factor.clamp(0.5, 2.0);
                }
            }
            if ok {
                return Ok(finish(spec, seed, &mut rng, &placed, masks, overlap));
            }
        }
    }
    Err(DataError::Infeasible(format!(
        "no placement met overlap {:.2} and area targets after {MAX_ATTEMPTS} attempts",
        spec.target_overlap
    )))
}

/// Moves object `j` along `heading` from class 0's centre until the
/// overlap of class 0 is as close to `target` as bisection can get.
fn place_partner(size: usize, placed: &mut [Placed], j: usize, order: &[usize], heading: f64, target: f64) {
    let (c0y, c0x) = (placed[0].cy, placed[0].cx);
    let far = placed[0].extent() + placed[j].extent() + DEFAULT_TAU as f64 + 2.0;
    let eval = |placed: &mut [Placed], d: f64| {
        placed[j].cy = (c0y + d * heading.sin()).clamp(0.0, size as f64);
        placed[j].cx = (c0x + d * heading.cos()).clamp(0.0, size as f64);
        measured_overlap(&render_masks(size, placed, order))
    };
    let (mut lo, mut hi) = (0.0, far);
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let ov = eval(placed, mid);
        let err = (ov - target).abs();
        if err < best.0 {
            best = (err, mid);
        }
        if ov > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    eval(placed, best.1);
}

fn texture_value(tex: Texture, y: f64, x: f64, params: &[f64; 3], speckle: f64) -> f64 {
    match tex {
        Texture::Smooth => 0.0,
        Texture::Stripes => {
            let u = y * params[0].cos() + x * params[0].sin();
            if (2.0 * PI * u / 5.0 + params[1]).sin() >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Checker => {
            let a = ((y + params[1]) / 3.0).floor() as i64;
            let b = ((x + params[2]) / 3.0).floor() as i64;
            if (a + b).rem_euclid(2) == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Speckle => speckle,
    }
}

fn finish(
    spec: &SceneSpec,
    seed: u64,
    rng: &mut ChaCha8Rng,
    placed: &[Placed],
    masks: Vec<Mask>,
    overlap: f64,
) -> SegSample {
    let size = spec.image_size;
    let style = STYLES[spec.domain.index() as usize];
    let grad_dir = rng.random_range(0.0..2.0 * PI);
    let mut raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let t = ((y - size as f64 / 2.0) * grad_dir.sin() + (x - size as f64 / 2.0) * grad_dir.cos()) / size as f64;
            style.background + style.gradient * t
        })
        .collect();
    for (i, o) in spec.objects.iter().enumerate() {
        let base = style.background + style.contrast * rng.random_range(0.8..1.2);
        let params =
            [(rng.random_range(0..4) as f64) * PI / 4.0, rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
        for (p, v) in raw.iter_mut().enumerate() {
            // Always draw so the stream does not depend on mask contents.
            let speckle: f64 = rng.random_range(-1.0..1.0);
            if masks[i].bits()[p] == 1 {
                let (y, x) = ((p / size) as f64, (p % size) as f64);
                *v = base + style.texture_amp * texture_value(o.texture, y, x, &params, speckle);
            }
        }
    }
    let noise = Normal::new(0.0, style.noise).expect("positive sigma");
    for v in raw.iter_mut() {
        *v += noise.sample(rng);
    }
    let mut image = normalize_intensity(&seed.to_string(), size, size, &raw).expect("finite render");
    for v in image.pixels.iter_mut() {
        *v = v.round();
    }
    let classes = masks
        .into_iter()
        .enumerate()
        .map(|(i, mask)| {
            let (cy, cx) = mask.centroid().unwrap_or((placed[i].cy, placed[i].cx));
            ClassAnnotation {
                class: i,
                area_fraction: mask.area_fraction(),
                attributes: AttributeRecord {
                    position: Position::of_point(cy, cx, size),
                    texture: spec.objects[i].texture,
                    shape: spec.objects[i].shape,
                },
                mask,
            }
        })
        .collect();
    SegSample { image, classes, domain: spec.domain, overlap_rate: overlap }
}
