//! Randomized finite-difference verification of the hand-written gradients
//! over every mask mode.

use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::AffineAdapter;
use crate::error::{LluError, Result};
use crate::graph::{grad_check, Adapters, ForwardBatch, LossConfig, Temperature};
use crate::locality::{mask_weights_batch, masks, AnchorSet, MaskConfig};
use crate::rng::CounterRng;
use crate::vector::{normalize, stack_rows, UnitVector};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub dims: Vec<usize>,
    pub classes: usize,
    pub batch: usize,
    pub trials: usize,
    pub tolerance: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            dims: vec![4, 8, 32],
            classes: 5,
            batch: 8,
            trials: 10,
            tolerance: 1e-4,
            epsilon: 1e-4,
            seed: 0,
        }
    }
}

/// One randomized configuration and its worst relative error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub dim: usize,
    pub mode: String,
    pub trial: usize,
    pub shared: bool,
    pub renorm: bool,
    pub lambda: f64,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub perturbation: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    pub cases: Vec<GradcheckCase>,
    pub tolerance: f64,
}

impl GradcheckSummary {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    /// Cases at or above the tolerance (non-finite errors count as failures).
    pub fn failures(&self) -> Vec<&GradcheckCase> {
        self.cases
            .iter()
            .filter(|c| !(c.max_rel_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

fn random_unit(rng: &mut CounterRng, dim: usize) -> UnitVector {
    loop {
        if let Ok(u) = normalize(&rng.gaussian_vec(dim)) {
            return u;
        }
    }
}

fn perturbed(dim: usize, scale: f64, rng: &mut CounterRng) -> AffineAdapter {
    let mut a = AffineAdapter::identity(dim);
    for i in 0..a.num_params() {
        let v = a.param(i) + scale * rng.gaussian();
        a.set_param(i, v);
    }
    a
}

const LAMBDAS: [f64; 3] = [0.0, 1.0, 1e3];
const PERTURBATIONS: [f64; 3] = [0.01, 0.1, 0.3];

fn run_case(opts: &GradcheckOptions, dim: usize, mode: &str, trial: usize, id: u64) -> Result<GradcheckCase> {
    let mut rng = CounterRng::new(opts.seed).fork(id);
    let images: Vec<UnitVector> = (0..opts.batch).map(|_| random_unit(&mut rng, dim)).collect();
    let classes: Vec<UnitVector> = (0..opts.classes).map(|_| random_unit(&mut rng, dim)).collect();
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.below(opts.classes)).collect();

    // half the images and classes are anchors themselves, so dirac weights are mixed
    let mut image_anchors: Vec<UnitVector> = images.iter().step_by(2).cloned().collect();
    image_anchors.push(random_unit(&mut rng, dim));
    let text_anchors: Vec<UnitVector> = classes.iter().step_by(2).cloned().collect();

    let mask = MaskConfig {
        beta: 0.2 + 0.8 * rng.next_f64(),
        gamma: 1.0 + 39.0 * rng.next_f64(),
        ..MaskConfig::default()
    }
    .with_mode(mode);
    let image_alphas = mask_weights_batch(&images, &AnchorSet::new(dim, image_anchors)?, &mask)?;
    let class_alphas = mask_weights_batch(&classes, &AnchorSet::new(dim, text_anchors)?, &mask)?;
    let batch = ForwardBatch::new(
        stack_rows(dim, &images),
        labels,
        stack_rows(dim, &classes),
        image_alphas,
        class_alphas,
    )?;

    let shared = trial % 2 == 1;
    let renorm = trial % 4 != 3;
    let lambda = LAMBDAS[trial % 3];
    let perturbation = PERTURBATIONS[(trial / 3) % 3];
    let tau = if trial % 5 == 4 { 0.07 } else { 0.01 };
    let adapters = if shared {
        Adapters::Shared(perturbed(dim, perturbation, &mut rng))
    } else {
        Adapters::Separate {
            image: perturbed(dim, perturbation, &mut rng),
            text: perturbed(dim, perturbation, &mut rng),
        }
    };
    let cfg = LossConfig {
        tau: Temperature::new(tau)?,
        lambda,
        renorm,
    };
    let max_rel_error = grad_check(&batch, &adapters, &cfg, opts.epsilon, rng.next_u64())?;
    Ok(GradcheckCase {
        dim,
        mode: mode.to_string(),
        trial,
        shared,
        renorm,
        lambda,
        tau,
        beta: mask.beta,
        gamma: mask.gamma,
        perturbation,
        max_rel_error,
    })
}

/// Every combination of dimension, registered mask mode and trial.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckSummary> {
    if opts.dims.is_empty() || opts.dims.iter().any(|&d| d < 2) {
        return Err(LluError::InvalidConfig("dims must be non-empty and each >= 2".into()));
    }
    if opts.classes < 2 || opts.batch == 0 || opts.trials == 0 {
        return Err(LluError::InvalidConfig("need >= 2 classes, a positive batch and >= 1 trial".into()));
    }
    if !(opts.tolerance > 0.0) {
        return Err(LluError::InvalidConfig(format!("tolerance {} must be > 0", opts.tolerance)));
    }
    let modes = masks().names();
    let mut jobs = Vec::new();
    for &dim in &opts.dims {
        for mode in &modes {
            for trial in 0..opts.trials {
                jobs.push((dim, *mode, trial, jobs.len() as u64));
            }
        }
    }
    let cases = jobs
        .par_iter()
        .map(|&(dim, mode, trial, id)| run_case(opts, dim, mode, trial, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckSummary {
        cases,
        tolerance: opts.tolerance,
    })
}
