//! Procedural occlusion scenes with ground-truth amodal masks.
//!
//! Each scene holds one target object drawn from one of four shape families,
//! partially covered by up to three occluders. Generation is a pure function
//! of `(seed, index)`, so corpora can be produced in parallel.

mod format;
mod mask;
mod shapes;

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_dataset, write_dataset, write_manifest, DatasetManifest};
pub use mask::Mask;
pub use shapes::{Shape, ShapeFamily};

/// Scene-generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    /// Canvas side length (height = width).
    pub side: usize,
    pub min_occluders: usize,
    pub max_occluders: usize,
    pub min_visible_fraction: f64,
    pub max_visible_fraction: f64,
    pub unoccluded_prob: f64,
    pub noise_sigma: f64,
    /// Target circumradius range as a fraction of the side.
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 1000,
            side: 64,
            min_occluders: 1,
            max_occluders: 3,
            min_visible_fraction: 0.30,
            max_visible_fraction: 0.95,
            unoccluded_prob: 0.10,
            noise_sigma: 0.05,
            min_scale: 0.15,
            max_scale: 0.45,
        }
    }
}

pub const MAX_ATTEMPTS: u32 = 100;
const MIN_INTENSITY_GAP: f64 = 0.15;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 || !self.side.is_multiple_of(4) {
            return Err(Error::config(format!(
                "side must be a multiple of 4 and at least 8, got {}",
                self.side
            )));
        }
        if self.side > u16::MAX as usize {
            return Err(Error::config("side does not fit the dataset header"));
        }
        if self.min_occluders == 0 || self.min_occluders > self.max_occluders {
            return Err(Error::config("occluder range must satisfy 1 <= min <= max"));
        }
        let vis_ok = 0.30 <= self.min_visible_fraction
            && self.min_visible_fraction <= self.max_visible_fraction
            && self.max_visible_fraction <= 1.0;
        if !vis_ok {
            return Err(Error::config("visible-fraction range must lie in [0.30, 1.0] and be ordered"));
        }
        if !(0.0..=1.0).contains(&self.unoccluded_prob) {
            return Err(Error::config("unoccluded probability must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be a finite non-negative number"));
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 0.5) {
            return Err(Error::config("scale range must satisfy 0 < min <= max <= 0.5"));
        }
        Ok(())
    }
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub sample_id: u32,
    pub family: ShapeFamily,
    /// Grayscale raster in `[0, 1]`, row-major `H×W`.
    pub image: Vec<f32>,
    pub visible: Mask,
    pub amodal: Mask,
}

impl SceneRecord {
    pub fn height(&self) -> usize {
        self.amodal.height()
    }

    pub fn width(&self) -> usize {
        self.amodal.width()
    }

    /// `|M_v| / |M_a|`.
    pub fn visible_fraction(&self) -> f64 {
        self.visible.count() as f64 / self.amodal.count().max(1) as f64
    }

    /// Ground-truth occluded region `M_a ∧ ¬M_v`.
    pub fn occluded(&self) -> Mask {
        self.amodal.and_not(&self.visible)
    }

    /// Checks the record invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.visible.height() != h || self.visible.width() != w || self.image.len() != h * w {
            return Err(Error::dim(format!("sample {}: inconsistent raster sizes", self.sample_id)));
        }
        if !self.visible.is_subset_of(&self.amodal) {
            return Err(Error::config(format!(
                "sample {}: visible mask is not inside the amodal mask",
                self.sample_id
            )));
        }
        if self.amodal.count() == 0 {
            return Err(Error::config(format!("sample {}: empty amodal mask", self.sample_id)));
        }
        let f = self.visible_fraction();
        if !(0.30..=1.0).contains(&f) {
            return Err(Error::config(format!(
                "sample {}: visible fraction {f} out of range",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// A list of records sharing one canvas size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, records: Vec<SceneRecord>) -> Result<Self> {
        for r in &records {
            if r.height() != height || r.width() != width {
                return Err(Error::dim(format!(
                    "record {} is {}×{}, dataset is {height}×{width}",
                    r.sample_id,
                    r.height(),
                    r.width()
                )));
            }
        }
        Ok(Self {
            height,
            width,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of records per shape family.
    pub fn family_histogram(&self) -> [usize; ShapeFamily::COUNT] {
        let mut h = [0; ShapeFamily::COUNT];
        for r in &self.records {
            h[r.family.index()] += 1;
        }
        h
    }

    /// First `n` records (or all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            records: self.records.iter().take(n).cloned().collect(),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed: splitmix of the corpus seed mixed with the index.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

/// Background, target and occluder intensities, pairwise at least
/// `MIN_INTENSITY_GAP` apart.
fn draw_intensities(rng: &mut ChaCha8Rng) -> Option<[f64; 3]> {
    for _ in 0..1000 {
        let v: [f64; 3] = [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ];
        let sep = (v[0] - v[1]).abs().min((v[0] - v[2]).abs()).min((v[1] - v[2]).abs());
        if sep >= MIN_INTENSITY_GAP {
            return Some(v);
        }
    }
    None
}

/// Generates sample `index` of the corpus described by `cfg`.
pub fn generate_scene(cfg: &GenConfig, index: usize) -> Result<SceneRecord> {
    cfg.validate()?;
    if index >= cfg.count {
        return Err(Error::config(format!(
            "sample index {index} out of range for count {}",
            cfg.count
        )));
    }
    let side = cfg.side;
    let sidef = side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, index as u64));
    let family = ShapeFamily::ALL[rng.random_range(0..ShapeFamily::COUNT)];

    for _ in 0..MAX_ATTEMPTS {
        let radius = rng.random_range(cfg.min_scale..=cfg.max_scale) * sidef;
        let margin = 0.5 * radius;
        let center = (
            rng.random_range(margin..=sidef - margin),
            rng.random_range(margin..=sidef - margin),
        );
        let target = Shape::random(family, center, radius, &mut rng);
        let amodal = target.rasterize(side, side);
        if amodal.count() == 0 {
            continue;
        }

        let mut occluders = Mask::empty(side, side);
        if !rng.random_bool(cfg.unoccluded_prob) {
            let n = rng.random_range(cfg.min_occluders..=cfg.max_occluders);
            for _ in 0..n {
                let fam = ShapeFamily::ALL[rng.random_range(0..ShapeFamily::COUNT)];
                let dir = rng.random_range(0.0..TAU);
                let dist = rng.random_range(0.3..1.2) * radius;
                let c = (center.0 + dist * dir.cos(), center.1 + dist * dir.sin());
                let r = rng.random_range(0.5..1.0) * radius;
                Shape::random(fam, c, r, &mut rng).paint(&mut occluders);
            }
            let visible = amodal.and_not(&occluders);
            let frac = visible.count() as f64 / amodal.count() as f64;
            if !(cfg.min_visible_fraction..=cfg.max_visible_fraction).contains(&frac) {
                continue;
            }
        }
        let visible = amodal.and_not(&occluders);

        let Some([bg, fg, occ]) = draw_intensities(&mut rng) else {
            continue;
        };
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        let mut image = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let base = if occluders.get(y, x) {
                    occ
                } else if amodal.get(y, x) {
                    fg
                } else {
                    bg
                };
                let v = base + noise.sample(&mut rng);
                image.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        return Ok(SceneRecord {
            sample_id: index as u32,
            family,
            image,
            visible,
            amodal,
        });
    }
    Err(Error::Generation {
        index: index as u64,
        attempts: MAX_ATTEMPTS,
    })
}

/// Generates the whole corpus, in parallel over sample indices.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let records = (0..cfg.count)
        .into_par_iter()
        .map(|i| generate_scene(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.side, cfg.side, records)
}

/// Serial reference for [`generate_corpus`].
pub fn generate_corpus_serial(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let records = (0..cfg.count)
        .map(|i| generate_scene(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.side, cfg.side, records)
}
