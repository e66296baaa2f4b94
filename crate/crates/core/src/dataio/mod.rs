//! Dataset generation and persistence.
//!
//! A dataset is a pure function of (seed, config): every sample derives from
//! its own counter-mode RNG stream, so generation parallelizes without
//! affecting the result. Samples carry the rendered image plus all four
//! supervision targets; persisted datasets store the image (BSQT) and mask
//! (PGM) and regenerate the derived targets on load.

pub mod formats;
pub mod shapes;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::morphology::{target_set, BinaryMask, KernelSize, TargetSet};

pub use formats::{PolygonFile, PolygonObject};
pub use shapes::{rasterize_outline, rasterize_polygon, Distractor, ShapeKind, ShapeSpec};

/// Sampling distribution for synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square image side in pixels; targets share this grid.
    pub grid: usize,
    /// Dataset size used by training drivers.
    pub n_samples: usize,
    pub fg_level: f64,
    pub bg_level: f64,
    pub noise_sigma: f64,
    /// Probability of adding a background patch near foreground intensity.
    pub distractor_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid: 28,
            n_samples: 500,
            fg_level: 0.85,
            bg_level: 0.15,
            noise_sigma: 0.08,
            distractor_prob: 0.5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 || self.grid % 2 != 0 {
            return Err(Error::Config(format!("grid must be even and >= 8, got {}", self.grid)));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if !(self.fg_level.is_finite() && self.bg_level.is_finite()) {
            return Err(Error::Config("intensity levels must be finite".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config(format!("distractor_prob must be in [0,1], got {}", self.distractor_prob)));
        }
        Ok(())
    }
}

/// One training example: the image and its four supervision rasters.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: FeatureField,
    pub targets: TargetSet,
}

impl Sample {
    pub fn mask(&self) -> &BinaryMask {
        &self.targets.gs
    }
}

// A usable mask: visibly sized, not near-full-frame, and clear of the image
// border so window clamping never distorts its targets.
fn acceptable(mask: &BinaryMask) -> bool {
    let (h, w) = (mask.height(), mask.width());
    let n = mask.count_ones();
    if n < 12 || n > h * w * 3 / 4 {
        return false;
    }
    for x in 0..w {
        if mask.get(0, x) || mask.get(h - 1, x) {
            return false;
        }
    }
    for y in 0..h {
        if mask.get(y, 0) || mask.get(y, w - 1) {
            return false;
        }
    }
    true
}

/// Generate sample `index` of the dataset identified by `seed`. Each index
/// uses its own RNG stream, so any subset can be generated independently.
pub fn gen_sample(seed: u64, index: usize, cfg: &DataConfig, k: KernelSize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for _ in 0..100 {
        let spec = shapes::sample_spec(&mut rng, cfg);
        match shapes::render(&spec, cfg.grid, &mut rng) {
            Ok((image, mask)) if acceptable(&mask) => {
                return Ok(Sample { image, targets: target_set(&mask, k) });
            }
            Ok(_) => continue,
            // A degenerate outline is a bad draw, not a failure; redraw.
            Err(Error::DegeneratePolygon(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Config(format!("no acceptable mask for sample {index} after 100 draws")))
}

/// Generate `n` samples deterministically; parallel across samples.
pub fn gen_dataset(n: usize, seed: u64, cfg: &DataConfig, k: KernelSize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    cfg.validate()?;
    (0..n).into_par_iter().map(|i| gen_sample(seed, i, cfg, k)).collect()
}

/// Deterministic 80/20 split by index: every fifth sample validates.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % 5 != 4)
}

/// Union of all object outlines in an annotation document.
pub fn polygon_file_mask(doc: &PolygonFile) -> Result<BinaryMask> {
    let mut mask = BinaryMask::zeros(doc.height, doc.width);
    for obj in &doc.objects {
        mask = mask.union(&rasterize_outline(&obj.polygon, doc.height, doc.width)?);
    }
    Ok(mask)
}

const MANIFEST_FILE: &str = "manifest.json";

/// Files and provenance of a persisted dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub kernel_size: usize,
    pub config: DataConfig,
    /// FNV-1a over the JSON of (seed, kernel_size, config).
    pub config_hash: String,
    pub files: Vec<SampleFiles>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub image: String,
    pub mask: String,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn config_hash(seed: u64, k: KernelSize, cfg: &DataConfig) -> Result<String> {
    let doc = serde_json::to_vec(&(seed, k.get(), cfg))?;
    Ok(format!("{:016x}", fnv1a64(&doc)))
}

/// Write samples plus a manifest into `dir` (created if missing).
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], seed: u64, cfg: &DataConfig, k: KernelSize) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("sample_{i:05}.bsqt");
        let mask = format!("sample_{i:05}.pgm");
        formats::write_field_bsqt(dir.join(&image), &s.image)?;
        formats::write_pgm(dir.join(&mask), s.mask())?;
        files.push(SampleFiles { image, mask });
    }
    let manifest = DatasetManifest {
        seed,
        n: samples.len(),
        kernel_size: k.get(),
        config: cfg.clone(),
        config_hash: config_hash(seed, k, cfg)?,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), text).map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    Ok(manifest)
}

/// Load a persisted dataset, regenerating derived targets from each mask.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<Sample>, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    let k = KernelSize::new(manifest.kernel_size)?;
    let samples = manifest
        .files
        .iter()
        .map(|f| {
            let image = formats::read_field_bsqt(dir.join(&f.image))?;
            let mask = formats::read_pgm(dir.join(&f.mask))?;
            Ok(Sample { image, targets: target_set(&mask, k) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, manifest))
}
