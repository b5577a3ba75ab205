//! Seeded synthetic joint embeddings with class structure.
//!
//! Each class has a latent direction `c` (a normalized standard Gaussian).
//! Its text embedding is `normalize(c + sigma_text * g)` and each image is
//! `normalize(c + sigma_image * g)`, with `g` a fresh standard Gaussian
//! vector per draw. The text offset is a fixed per-class misalignment the
//! adapter can learn to undo.

use serde::{Deserialize, Serialize};

use crate::error::{LluError, Result};
use crate::rng::CounterRng;
use crate::vector::{normalize, ClassEmbeddingSet, FeatureRecord, FeatureSet, UnitVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub dim: usize,
    pub n_classes: usize,
    pub shots_train: usize,
    pub n_test_per_class: usize,
    pub sigma_image: f64,
    pub sigma_text_offset: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            dim: 64,
            n_classes: 8,
            shots_train: 16,
            n_test_per_class: 100,
            sigma_image: 0.4,
            sigma_text_offset: 0.6,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(LluError::InvalidConfig(format!("dim {} < 2", self.dim)));
        }
        if self.n_classes < 2 {
            return Err(LluError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if !(self.sigma_image >= 0.0 && self.sigma_image.is_finite())
            || !(self.sigma_text_offset >= 0.0 && self.sigma_text_offset.is_finite())
        {
            return Err(LluError::InvalidConfig("sigmas must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Fewer dimensions than classes makes the latent directions crowd.
    pub fn is_crowded(&self) -> bool {
        self.dim < self.n_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: FeatureSet,
    pub test: FeatureSet,
    pub classes: ClassEmbeddingSet,
}

// Stream ids under the dataset seed.
const STREAM_DIRECTIONS: u64 = 0;
const STREAM_TEXT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_SHIFT: u64 = 4;

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i:03}")).collect()
}

fn directions(p: &SynthParams) -> Vec<Vec<f64>> {
    let mut rng = CounterRng::new(p.seed).fork(STREAM_DIRECTIONS);
    (0..p.n_classes)
        .map(|_| loop {
            // a zero draw is practically impossible; retry keeps the stream total
            if let Ok(u) = normalize(&rng.gaussian_vec(p.dim)) {
                break u.into_inner();
            }
        })
        .collect()
}

fn noisy(center: &[f64], sigma: f64, shift: Option<&[f64]>, rng: &mut CounterRng) -> UnitVector {
    loop {
        let mut v: Vec<f64> = center.iter().map(|c| c + sigma * rng.gaussian()).collect();
        if let Some(s) = shift {
            for (x, d) in v.iter_mut().zip(s) {
                *x += d;
            }
        }
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

fn draw_images(
    p: &SynthParams,
    dirs: &[Vec<f64>],
    per_class: usize,
    shift: Option<&[f64]>,
    rng: &mut CounterRng,
) -> Result<FeatureSet> {
    let mut records = Vec::with_capacity(per_class * p.n_classes);
    for (label, dir) in dirs.iter().enumerate() {
        for _ in 0..per_class {
            records.push(FeatureRecord {
                vector: noisy(dir, p.sigma_image, shift, rng),
                label,
            });
        }
    }
    FeatureSet::new(p.dim, class_names(p.n_classes), records)
}

pub fn synth_dataset(p: &SynthParams) -> Result<SynthData> {
    p.validate()?;
    let root = CounterRng::new(p.seed);
    let dirs = directions(p);

    let mut text_rng = root.fork(STREAM_TEXT);
    let texts = dirs
        .iter()
        .map(|d| noisy(d, p.sigma_text_offset, None, &mut text_rng))
        .collect();
    let classes = ClassEmbeddingSet::new(p.dim, class_names(p.n_classes), texts)?;

    let train = draw_images(p, &dirs, p.shots_train, None, &mut root.fork(STREAM_TRAIN))?;
    let test = draw_images(p, &dirs, p.n_test_per_class, None, &mut root.fork(STREAM_TEST))?;
    Ok(SynthData {
        train,
        test,
        classes,
    })
}

/// A test draw around the same class directions as `synth_dataset(p)`, with
/// every image offset by one shared random vector of norm `shift_magnitude`.
/// With `shift_magnitude == 0` and `seed == p.seed` this is exactly the
/// standard test set.
pub fn synth_shifted(p: &SynthParams, shift_magnitude: f64, seed: u64) -> Result<FeatureSet> {
    p.validate()?;
    if !(shift_magnitude >= 0.0 && shift_magnitude.is_finite()) {
        return Err(LluError::InvalidConfig(format!(
            "shift magnitude {shift_magnitude} must be finite and >= 0"
        )));
    }
    let dirs = directions(p);
    let draws = CounterRng::new(seed);
    let shift_dir = noisy(&vec![0.0; p.dim], 1.0, None, &mut draws.fork(STREAM_SHIFT));
    let shift: Vec<f64> = shift_dir.as_slice().iter().map(|x| x * shift_magnitude).collect();
    draw_images(p, &dirs, p.n_test_per_class, Some(&shift), &mut draws.fork(STREAM_TEST))
}
