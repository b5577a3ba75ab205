//! Locality interpolation weights.
//!
//! The smooth mask weighs an input `u` against an anchor set `D` as
//! `beta * max_{d in D} exp(-gamma * (1 - u.d))`. The other masks are
//! ablations of it. Every mask is a [`LocalityMask`] registered by name in
//! a [`MaskRegistry`]; [`MaskConfig::mode`] selects one at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LluError, Result};
use crate::vector::{check_dim, dot, UnitVector};

/// Frozen feature vectors the update is localized around.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    dim: usize,
    anchors: Vec<UnitVector>,
}

impl AnchorSet {
    pub fn new(dim: usize, anchors: Vec<UnitVector>) -> Result<Self> {
        for a in &anchors {
            check_dim(dim, a.dim())?;
        }
        Ok(AnchorSet { dim, anchors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn anchors(&self) -> &[UnitVector] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Largest cosine similarity to any anchor, `None` when empty.
    pub fn max_similarity(&self, u: &UnitVector) -> Option<f64> {
        self.anchors
            .iter()
            .map(|d| dot(u.as_slice(), d.as_slice()))
            .fold(None, |best, s| Some(best.map_or(s, |b: f64| b.max(s))))
    }
}

/// What the dirac mask returns inside its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiracAlpha {
    #[default]
    Beta,
    One,
}

impl std::str::FromStr for DiracAlpha {
    type Err = LluError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(DiracAlpha::Beta),
            "one" => Ok(DiracAlpha::One),
            _ => Err(LluError::InvalidConfig(format!(
                "dirac alpha must be `beta` or `one`, got `{s}`"
            ))),
        }
    }
}

pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 20.0;
pub const DEFAULT_DIRAC_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub beta: f64,
    pub gamma: f64,
    pub mode: String,
    pub dirac_threshold: f64,
    #[serde(default)]
    pub dirac_alpha: DiracAlpha,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            mode: SmoothMask::NAME.to_string(),
            dirac_threshold: DEFAULT_DIRAC_THRESHOLD,
            dirac_alpha: DiracAlpha::Beta,
        }
    }
}

impl MaskConfig {
    pub fn with_mode(mut self, mode: &str) -> Self {
        self.mode = mode.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(LluError::InvalidConfig(format!("beta {} not in [0, 1]", self.beta)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(LluError::InvalidConfig(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if !(self.dirac_threshold >= 0.0) {
            return Err(LluError::InvalidConfig(format!(
                "dirac threshold {} must be >= 0",
                self.dirac_threshold
            )));
        }
        masks().get(&self.mode).map(|_| ())
    }

    pub fn strategy(&self) -> Result<Arc<dyn LocalityMask>> {
        masks().get(&self.mode)
    }
}

/// One way of turning an input and an anchor set into an interpolation weight.
pub trait LocalityMask: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn needs_anchors(&self) -> bool;

    /// Weight for `u`; `anchors` is non-empty whenever [`needs_anchors`](Self::needs_anchors).
    fn weight(&self, u: &UnitVector, anchors: &AnchorSet, cfg: &MaskConfig) -> f64;
}

/// `beta * exp(-gamma (1 - max_d u.d))`.
#[derive(Debug)]
pub struct SmoothMask;

impl SmoothMask {
    pub const NAME: &'static str = "smooth";
}

impl LocalityMask for SmoothMask {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn needs_anchors(&self) -> bool {
        true
    }

    fn weight(&self, u: &UnitVector, anchors: &AnchorSet, cfg: &MaskConfig) -> f64 {
        // exp is monotone, so the max can be taken over similarities.
        let best = anchors.max_similarity(u).unwrap_or(-1.0).min(1.0);
        cfg.beta * (-cfg.gamma * (1.0 - best)).exp()
    }
}

/// Global `beta`, ignoring position.
#[derive(Debug)]
pub struct ConstantMask;

impl ConstantMask {
    pub const NAME: &'static str = "constant";
}

impl LocalityMask for ConstantMask {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn needs_anchors(&self) -> bool {
        false
    }

    fn weight(&self, _u: &UnitVector, _anchors: &AnchorSet, cfg: &MaskConfig) -> f64 {
        cfg.beta
    }
}

/// Hard switch: on within `dirac_threshold` cosine distance of an anchor, off elsewhere.
#[derive(Debug)]
pub struct DiracMask;

impl DiracMask {
    pub const NAME: &'static str = "dirac";
}

impl LocalityMask for DiracMask {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn needs_anchors(&self) -> bool {
        true
    }

    fn weight(&self, u: &UnitVector, anchors: &AnchorSet, cfg: &MaskConfig) -> f64 {
        let best = anchors.max_similarity(u).unwrap_or(-1.0);
        if 1.0 - best < cfg.dirac_threshold {
            match cfg.dirac_alpha {
                DiracAlpha::Beta => cfg.beta,
                DiracAlpha::One => 1.0,
            }
        } else {
            0.0
        }
    }
}

/// Always 0: the frozen model.
#[derive(Debug)]
pub struct OffMask;

impl OffMask {
    pub const NAME: &'static str = "off";
}

impl LocalityMask for OffMask {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn needs_anchors(&self) -> bool {
        false
    }

    fn weight(&self, _u: &UnitVector, _anchors: &AnchorSet, _cfg: &MaskConfig) -> f64 {
        0.0
    }
}

#[derive(Debug, Default)]
pub struct MaskRegistry {
    masks: BTreeMap<&'static str, Arc<dyn LocalityMask>>,
}

impl MaskRegistry {
    pub fn with_builtins() -> Self {
        let mut reg = MaskRegistry::default();
        reg.register(Arc::new(SmoothMask));
        reg.register(Arc::new(ConstantMask));
        reg.register(Arc::new(DiracMask));
        reg.register(Arc::new(OffMask));
        reg
    }

    pub fn register(&mut self, mask: Arc<dyn LocalityMask>) {
        self.masks.insert(mask.name(), mask);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn LocalityMask>> {
        self.masks
            .get(name)
            .cloned()
            .ok_or_else(|| LluError::UnknownMaskMode(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.masks.keys().copied().collect()
    }
}

/// The built-in masks.
pub fn masks() -> &'static MaskRegistry {
    static REGISTRY: OnceLock<MaskRegistry> = OnceLock::new();
    REGISTRY.get_or_init(MaskRegistry::with_builtins)
}

fn resolve(anchors: &AnchorSet, cfg: &MaskConfig) -> Result<Arc<dyn LocalityMask>> {
    let mask = cfg.strategy()?;
    if mask.needs_anchors() && anchors.is_empty() {
        return Err(LluError::EmptyAnchorSet(cfg.mode.clone()));
    }
    Ok(mask)
}

pub fn mask_weight(u: &UnitVector, anchors: &AnchorSet, cfg: &MaskConfig) -> Result<f64> {
    let mask = resolve(anchors, cfg)?;
    check_dim(anchors.dim(), u.dim())?;
    Ok(mask.weight(u, anchors, cfg))
}

pub fn mask_weights_batch<'a, I>(us: I, anchors: &AnchorSet, cfg: &MaskConfig) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a UnitVector>,
{
    let mask = resolve(anchors, cfg)?;
    let us: Vec<&UnitVector> = us.into_iter().collect();
    for u in &us {
        check_dim(anchors.dim(), u.dim())?;
    }
    Ok(us.par_iter().map(|u| mask.weight(u, anchors, cfg)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::vector::normalize;
    use proptest::prelude::*;

    fn random_unit(rng: &mut CounterRng, dim: usize) -> UnitVector {
        normalize(&rng.gaussian_vec(dim)).unwrap()
    }

    fn random_anchors(rng: &mut CounterRng, dim: usize, n: usize) -> AnchorSet {
        AnchorSet::new(dim, (0..n).map(|_| random_unit(rng, dim)).collect()).unwrap()
    }

    fn cfg(mode: &str, beta: f64, gamma: f64) -> MaskConfig {
        MaskConfig {
            beta,
            gamma,
            ..MaskConfig::default()
        }
        .with_mode(mode)
    }

    #[test]
    fn anchor_member_gets_beta() {
        let mut rng = CounterRng::new(1);
        let anchors = random_anchors(&mut rng, 6, 5);
        let u = anchors.anchors()[2].clone();
        for gamma in [0.0, 1.0, 20.0, 1e6] {
            let a = mask_weight(&u, &anchors, &cfg("smooth", 0.5, gamma)).unwrap();
            assert!((a - 0.5).abs() < 1e-12, "gamma {gamma}: {a}");
        }
    }

    #[test]
    fn similarity_095_gives_beta_over_e() {
        let theta = 0.95f64.acos();
        let d = normalize(&[1.0, 0.0]).unwrap();
        let u = normalize(&[theta.cos(), theta.sin()]).unwrap();
        let anchors = AnchorSet::new(2, vec![d]).unwrap();
        let a = mask_weight(&u, &anchors, &cfg("smooth", 0.5, 20.0)).unwrap();
        // 0.5 * exp(-1) = 0.18393972058572117
        assert!((a - 0.183_939_720_585_721_17).abs() < 1e-12, "{a}");
    }

    #[test]
    fn dirac_outside_threshold_is_zero() {
        let theta = 0.8f64.acos();
        let anchors = AnchorSet::new(2, vec![UnitVector::basis(2, 0)]).unwrap();
        let u = normalize(&[theta.cos(), theta.sin()]).unwrap();
        assert_eq!(mask_weight(&u, &anchors, &cfg("dirac", 0.5, 20.0)).unwrap(), 0.0);
        let inside = UnitVector::basis(2, 0);
        assert_eq!(mask_weight(&inside, &anchors, &cfg("dirac", 0.5, 20.0)).unwrap(), 0.5);
        let mut one = cfg("dirac", 0.5, 20.0);
        one.dirac_alpha = DiracAlpha::One;
        assert_eq!(mask_weight(&inside, &anchors, &one).unwrap(), 1.0);
    }

    #[test]
    fn constant_and_off_ignore_position() {
        let empty = AnchorSet::new(3, vec![]).unwrap();
        let u = UnitVector::basis(3, 1);
        assert_eq!(mask_weight(&u, &empty, &cfg("constant", 0.3, 20.0)).unwrap(), 0.3);
        assert_eq!(mask_weight(&u, &empty, &cfg("off", 0.3, 20.0)).unwrap(), 0.0);
        assert!(matches!(
            mask_weight(&u, &empty, &cfg("smooth", 0.3, 20.0)),
            Err(LluError::EmptyAnchorSet(_))
        ));
        assert!(matches!(
            mask_weight(&u, &empty, &cfg("dirac", 0.3, 20.0)),
            Err(LluError::EmptyAnchorSet(_))
        ));
    }

    #[test]
    fn unknown_mode_and_bad_config() {
        assert!(matches!(
            cfg("gaussian", 0.5, 1.0).validate(),
            Err(LluError::UnknownMaskMode(_))
        ));
        assert!(cfg("smooth", 1.5, 1.0).validate().is_err());
        assert!(cfg("smooth", 0.5, f64::INFINITY).validate().is_err());
        assert_eq!(masks().names(), vec!["constant", "dirac", "off", "smooth"]);
    }

    #[test]
    fn batch_agrees_with_single_calls() {
        let mut rng = CounterRng::new(5);
        let anchors = random_anchors(&mut rng, 8, 10);
        let us: Vec<UnitVector> = (0..100).map(|_| random_unit(&mut rng, 8)).collect();
        for mode in ["smooth", "constant", "dirac", "off"] {
            let c = cfg(mode, 0.5, 20.0);
            let batch = mask_weights_batch(&us, &anchors, &c).unwrap();
            for (u, b) in us.iter().zip(&batch) {
                let single = mask_weight(u, &anchors, &c).unwrap();
                assert!((single - b).abs() <= 1e-12);
            }
        }
        let one = mask_weights_batch(&us[..1], &anchors, &cfg("smooth", 0.5, 20.0)).unwrap();
        assert_eq!(one, vec![mask_weight(&us[0], &anchors, &cfg("smooth", 0.5, 20.0)).unwrap()]);
        let reversed: Vec<UnitVector> = us.iter().rev().cloned().collect();
        let fwd = mask_weights_batch(&us, &anchors, &cfg("smooth", 0.5, 20.0)).unwrap();
        let mut back = mask_weights_batch(&reversed, &anchors, &cfg("smooth", 0.5, 20.0)).unwrap();
        back.reverse();
        assert_eq!(fwd, back);
    }

    #[test]
    fn global_limit_matches_constant() {
        let mut rng = CounterRng::new(8);
        let anchors = random_anchors(&mut rng, 16, 20);
        for _ in 0..200 {
            let u = random_unit(&mut rng, 16);
            let s = mask_weight(&u, &anchors, &cfg("smooth", 0.5, 1e-9)).unwrap();
            let c = mask_weight(&u, &anchors, &cfg("constant", 0.5, 1e-9)).unwrap();
            assert!((s - c).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn weights_are_bounded_and_monotone(seed in 0u64..500, beta in 0.0f64..=1.0, g1 in 0.0f64..50.0, g2 in 0.0f64..50.0) {
            let mut rng = CounterRng::new(seed);
            let anchors = random_anchors(&mut rng, 5, 4);
            let u = random_unit(&mut rng, 5);
            let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            let a_lo = mask_weight(&u, &anchors, &cfg("smooth", beta, lo)).unwrap();
            let a_hi = mask_weight(&u, &anchors, &cfg("smooth", beta, hi)).unwrap();
            prop_assert!(a_hi <= a_lo);
            for a in [a_lo, a_hi] {
                prop_assert!((0.0..=beta).contains(&a));
            }
        }

        #[test]
        fn adding_an_anchor_never_decreases_weight(seed in 0u64..500) {
            let mut rng = CounterRng::new(seed);
            let anchors = random_anchors(&mut rng, 5, 3);
            let extra = random_unit(&mut rng, 5);
            let u = random_unit(&mut rng, 5);
            let mut more = anchors.anchors().to_vec();
            more.push(extra);
            let bigger = AnchorSet::new(5, more).unwrap();
            for mode in ["smooth", "dirac"] {
                let c = cfg(mode, 0.5, 20.0);
                prop_assert!(mask_weight(&u, &bigger, &c).unwrap() >= mask_weight(&u, &anchors, &c).unwrap());
            }
        }
    }
}
