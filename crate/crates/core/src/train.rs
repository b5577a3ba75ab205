//! Training loop, ablation presets and the serialized model.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AffineAdapter;
use crate::cluster::agglomerate;
use crate::error::{LluError, Result};
use crate::featio::write_atomic;
use crate::graph::{loss_parts, Adapters, ForwardBatch, LossConfig, Temperature, DEFAULT_TAU};
use crate::locality::{mask_weights_batch, AnchorSet, ConstantMask, DiracMask, MaskConfig};
use crate::rng::CounterRng;
use crate::vector::{l2_norm, ClassEmbeddingSet, FeatureSet, UnitVector, UNIT_TOLERANCE};

pub const DEFAULT_LAMBDA: f64 = 1e3;
pub const DEFAULT_MAX_ANCHORS: usize = 512;
pub const DEFAULT_LEARNING_RATE: f64 = 0.002;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_WARMUP_LR: f64 = 1e-5;

/// Epoch count used for a given number of shots per class.
pub fn epochs_for_shots(shots: usize) -> usize {
    match shots {
        0 | 1 => 50,
        2..=4 => 100,
        _ => 200,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    #[default]
    Identity,
    Random,
}

impl std::str::FromStr for InitScheme {
    type Err = LluError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(InitScheme::Identity),
            "random" => Ok(InitScheme::Random),
            _ => Err(LluError::InvalidConfig(format!(
                "init must be `identity` or `random`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub mask: MaskConfig,
    /// `None` keeps every training image as an anchor.
    pub max_anchors: Option<usize>,
    pub shared_adapter: bool,
    pub tau: f64,
    pub seed: u64,
    pub init: InitScheme,
    pub renorm: bool,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            epochs: epochs_for_shots(16),
            batch_size: DEFAULT_BATCH_SIZE,
            lambda: DEFAULT_LAMBDA,
            mask: MaskConfig::default(),
            max_anchors: Some(DEFAULT_MAX_ANCHORS),
            shared_adapter: false,
            tau: DEFAULT_TAU,
            seed: 0,
            init: InitScheme::Identity,
            renorm: true,
            warmup_epochs: 1,
            warmup_lr: DEFAULT_WARMUP_LR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LluError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if self.max_anchors == Some(0) {
            return bad("max anchors must be positive".into());
        }
        if !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return bad(format!("warmup lr {} must be >= 0", self.warmup_lr));
        }
        Temperature::new(self.tau)?;
        self.mask.validate()
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            tau: Temperature::new(self.tau)?,
            lambda: self.lambda,
            renorm: self.renorm,
        })
    }

    /// Short content hash of the configuration.
    pub fn fingerprint(&self) -> String {
        short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Learning rate for `epoch`: `warmup_lr` during warmup, then cosine
    /// decay from `learning_rate` towards zero over the remaining epochs.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.warmup_lr;
        }
        let span = self.epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
        let t = (epoch - self.warmup_epochs) as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t / span).cos())
    }
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A named set of changes to the default configuration.
pub trait AblationPreset: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn summary(&self) -> &'static str;

    fn apply(&self, cfg: &mut TrainConfig);
}

#[derive(Debug)]
struct FnPreset {
    name: &'static str,
    summary: &'static str,
    apply: fn(&mut TrainConfig),
}

impl AblationPreset for FnPreset {
    fn name(&self) -> &'static str {
        self.name
    }

    fn summary(&self) -> &'static str {
        self.summary
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        (self.apply)(cfg)
    }
}

#[derive(Debug, Default)]
pub struct PresetRegistry {
    presets: BTreeMap<&'static str, Arc<dyn AblationPreset>>,
}

impl PresetRegistry {
    pub fn with_builtins() -> Self {
        let mut reg = PresetRegistry::default();
        let builtins: [(&'static str, &'static str, fn(&mut TrainConfig)); 8] = [
            ("default", "beta 0.5, gamma 20, lambda 1e3, 512 anchors, identity init", |_| {}),
            ("no-cluster", "keep every training image as an anchor", |c| c.max_anchors = None),
            ("no-damp", "beta = 1", |c| c.mask.beta = 1.0),
            ("no-mask", "global alpha = beta", |c| c.mask.mode = ConstantMask::NAME.into()),
            ("dirac-mask", "alpha on only at training points", |c| c.mask.mode = DiracMask::NAME.into()),
            ("no-reg", "lambda = 0", |c| c.lambda = 0.0),
            ("rand-init", "random adapter initialization", |c| c.init = InitScheme::Random),
            ("linear", "plain adapter: alpha = 1 everywhere, lambda 0, random init", |c| {
                c.mask.mode = ConstantMask::NAME.into();
                c.mask.beta = 1.0;
                c.lambda = 0.0;
                c.init = InitScheme::Random;
            }),
        ];
        for (name, summary, apply) in builtins {
            reg.register(Arc::new(FnPreset { name, summary, apply }));
        }
        reg
    }

    pub fn register(&mut self, preset: Arc<dyn AblationPreset>) {
        self.presets.insert(preset.name(), preset);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AblationPreset>> {
        self.presets
            .get(name)
            .cloned()
            .ok_or_else(|| LluError::UnknownPreset(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.presets.keys().copied().collect()
    }
}

pub fn presets() -> &'static PresetRegistry {
    static REGISTRY: OnceLock<PresetRegistry> = OnceLock::new();
    REGISTRY.get_or_init(PresetRegistry::with_builtins)
}

/// The default configuration with the named preset applied.
pub fn ablation_preset(name: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    presets().get(name)?.apply(&mut cfg);
    Ok(cfg)
}

/// Image anchors (clustered down to `max_anchors` when needed) and text anchors
/// (the training class embeddings, never clustered).
pub fn build_anchors(
    features: &FeatureSet,
    classes: &ClassEmbeddingSet,
    cfg: &TrainConfig,
) -> Result<(AnchorSet, AnchorSet)> {
    if features.is_empty() {
        return Err(LluError::EmptyInput);
    }
    let images: Vec<UnitVector> = features.vectors().cloned().collect();
    let anchors_image = match cfg.max_anchors {
        Some(k) if images.len() > k => agglomerate(&images, k)?.into_anchors(),
        _ => AnchorSet::new(features.dim(), images)?,
    };
    let anchors_text = AnchorSet::new(classes.dim(), classes.vectors().to_vec())?;
    Ok((anchors_image, anchors_text))
}

/// Everything needed to apply the trained update at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub adapters: Adapters,
    pub anchors_image: AnchorSet,
    pub anchors_text: AnchorSet,
    pub mask: MaskConfig,
    pub tau: Temperature,
    pub renorm: bool,
    pub class_names: Vec<String>,
    pub config: TrainConfig,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TextAdapterRepr {
    Ref {
        #[serde(rename = "ref")]
        target: String,
    },
    Own(AffineAdapter),
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    format_version: u32,
    dim: usize,
    tau: f64,
    renorm: bool,
    mask: MaskConfig,
    #[serde(rename = "adapter_I")]
    adapter_image: AffineAdapter,
    #[serde(rename = "adapter_T")]
    adapter_text: TextAdapterRepr,
    #[serde(rename = "anchors_I")]
    anchors_image: Vec<Vec<f64>>,
    #[serde(rename = "anchors_T")]
    anchors_text: Vec<Vec<f64>>,
    class_names: Vec<String>,
    config: TrainConfig,
    config_fingerprint: String,
}

fn anchor_rows(a: &AnchorSet) -> Vec<Vec<f64>> {
    a.anchors().iter().map(|v| v.as_slice().to_vec()).collect()
}

fn parse_anchors(dim: usize, rows: Vec<Vec<f64>>) -> Result<AnchorSet> {
    // stored anchors were normalized before writing; keep their bits as is
    let vectors = rows
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let norm = l2_norm(&r);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(LluError::UnnormalizedVector { index, norm });
            }
            Ok(UnitVector::from_normalized(r))
        })
        .collect::<Result<Vec<_>>>()?;
    AnchorSet::new(dim, vectors)
}

impl TrainedModel {
    /// Identity adapters around the given anchors; behaves like the frozen model.
    pub fn identity(
        features: &FeatureSet,
        classes: &ClassEmbeddingSet,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let (anchors_image, anchors_text) = build_anchors(features, classes, cfg)?;
        Ok(TrainedModel {
            adapters: Adapters::identity(features.dim(), cfg.shared_adapter),
            anchors_image,
            anchors_text,
            mask: cfg.mask.clone(),
            tau: Temperature::new(cfg.tau)?,
            renorm: cfg.renorm,
            class_names: classes.class_names().to_vec(),
            config: cfg.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.adapters.dim()
    }

    pub fn config_fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn to_json(&self) -> Result<String> {
        let repr = ModelRepr {
            format_version: MODEL_FORMAT_VERSION,
            dim: self.dim(),
            tau: self.tau.value(),
            renorm: self.renorm,
            mask: self.mask.clone(),
            adapter_image: self.adapters.image().clone(),
            adapter_text: match &self.adapters {
                Adapters::Shared(_) => TextAdapterRepr::Ref {
                    target: "adapter_I".into(),
                },
                Adapters::Separate { text, .. } => TextAdapterRepr::Own(text.clone()),
            },
            anchors_image: anchor_rows(&self.anchors_image),
            anchors_text: anchor_rows(&self.anchors_text),
            class_names: self.class_names.clone(),
            config: self.config.clone(),
            config_fingerprint: self.config_fingerprint(),
        };
        let mut s = serde_json::to_string_pretty(&repr)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let repr: ModelRepr = serde_json::from_str(s)?;
        if repr.format_version != MODEL_FORMAT_VERSION {
            return Err(LluError::UnsupportedVersion(repr.format_version));
        }
        let dim = repr.dim;
        if repr.adapter_image.dim() != dim {
            return Err(LluError::DimMismatch {
                expected: dim,
                found: repr.adapter_image.dim(),
            });
        }
        let adapters = match repr.adapter_text {
            TextAdapterRepr::Ref { target } if target == "adapter_I" => Adapters::Shared(repr.adapter_image),
            TextAdapterRepr::Ref { target } => {
                return Err(LluError::InvalidConfig(format!("unknown adapter reference `{target}`")))
            }
            TextAdapterRepr::Own(text) => {
                if text.dim() != dim {
                    return Err(LluError::DimMismatch {
                        expected: dim,
                        found: text.dim(),
                    });
                }
                Adapters::Separate {
                    image: repr.adapter_image,
                    text,
                }
            }
        };
        repr.mask.validate()?;
        Ok(TrainedModel {
            adapters,
            anchors_image: parse_anchors(dim, repr.anchors_image)?,
            anchors_text: parse_anchors(dim, repr.anchors_text)?,
            mask: repr.mask,
            tau: Temperature::new(repr.tau)?,
            renorm: repr.renorm,
            class_names: repr.class_names,
            config: repr.config,
        })
    }

    /// Short content hash of the serialized model.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(short_hash(self.to_json()?.as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainedModel::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Mean loss over each epoch's minibatches.
    pub epoch_losses: Vec<f64>,
}

// Stream ids under the training seed.
const STREAM_INIT_IMAGE: u64 = 0;
const STREAM_INIT_TEXT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

fn initial_adapters(dim: usize, cfg: &TrainConfig) -> Adapters {
    let root = CounterRng::new(cfg.seed);
    let make = |stream| match cfg.init {
        InitScheme::Identity => AffineAdapter::identity(dim),
        InitScheme::Random => AffineAdapter::random(dim, &mut root.fork(stream)),
    };
    if cfg.shared_adapter {
        Adapters::Shared(make(STREAM_INIT_IMAGE))
    } else {
        Adapters::Separate {
            image: make(STREAM_INIT_IMAGE),
            text: make(STREAM_INIT_TEXT),
        }
    }
}

/// Heavy-ball momentum on the classification gradient, with the quadratic
/// identity penalty `h/2 |theta - ref|^2` evaluated at the updated point:
///
/// ```text
/// d'  = (d - lr (mu v + g)) / (1 + lr h)      d = theta - ref
/// v'  = mu v + g + h d'
/// ```
///
/// With `h = 0` this is plain momentum SGD. Its fixed points are the
/// stationary points of the full loss, and the penalty part stays stable for
/// any step size.
#[derive(Debug, Clone)]
struct Momentum {
    velocity: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Momentum {
    fn new(adapters: &Adapters) -> Self {
        let d = adapters.dim();
        let blocks = if adapters.is_shared() { 1 } else { 2 };
        Momentum {
            velocity: vec![(Array2::zeros((d, d)), Array1::zeros(d)); blocks],
        }
    }

    fn step_block(
        adapter: &mut AffineAdapter,
        velocity: &mut (Array2<f64>, Array1<f64>),
        grad: (&Array2<f64>, &Array1<f64>),
        lr: f64,
        mu: f64,
        h: f64,
    ) {
        let (w, b) = adapter.parts_mut();
        let shrink = 1.0 / (1.0 + lr * h);
        for (((r, c), theta), (v, g)) in w
            .indexed_iter_mut()
            .zip(velocity.0.iter_mut().zip(grad.0.iter()))
        {
            let reference = if r == c { 1.0 } else { 0.0 };
            let d = (*theta - reference - lr * (mu * *v + g)) * shrink;
            *v = mu * *v + g + h * d;
            *theta = reference + d;
        }
        for (theta, (v, g)) in b.iter_mut().zip(velocity.1.iter_mut().zip(grad.1.iter())) {
            let d = (*theta - lr * (mu * *v + g)) * shrink;
            *v = mu * *v + g + h * d;
            *theta = d;
        }
    }

    fn step(&mut self, adapters: &mut Adapters, grads: &crate::graph::Gradients, lr: f64, mu: f64, lambda: f64) {
        match adapters {
            Adapters::Separate { image, text } => {
                Self::step_block(image, &mut self.velocity[0], (&grads.weight_image, &grads.bias_image), lr, mu, 2.0 * lambda);
                Self::step_block(text, &mut self.velocity[1], (&grads.weight_text, &grads.bias_text), lr, mu, 2.0 * lambda);
            }
            Adapters::Shared(a) => {
                let gw = &grads.weight_image + &grads.weight_text;
                let gb = &grads.bias_image + &grads.bias_text;
                // the shared map carries the penalty of both sides
                Self::step_block(a, &mut self.velocity[0], (&gw, &gb), lr, mu, 4.0 * lambda);
            }
        }
    }
}

fn check_labels(features: &FeatureSet, classes: &ClassEmbeddingSet) -> Result<()> {
    if features.dim() != classes.dim() {
        return Err(LluError::DimMismatch {
            expected: classes.dim(),
            found: features.dim(),
        });
    }
    for r in features.records() {
        if r.label >= classes.len() {
            return Err(LluError::LabelOutOfRange {
                label: r.label,
                n_classes: classes.len(),
            });
        }
    }
    Ok(())
}

pub fn train(features: &FeatureSet, classes: &ClassEmbeddingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(features, classes, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss)` after each epoch.
pub fn train_with(
    features: &FeatureSet,
    classes: &ClassEmbeddingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_labels(features, classes)?;
    let loss_cfg = cfg.loss_config()?;
    let (anchors_image, anchors_text) = build_anchors(features, classes, cfg)?;

    let images: Vec<UnitVector> = features.vectors().cloned().collect();
    let image_alphas = mask_weights_batch(&images, &anchors_image, &cfg.mask)?;
    let class_alphas = mask_weights_batch(classes.vectors(), &anchors_text, &cfg.mask)?;
    let full = ForwardBatch::from_vectors(&images, features.labels(), classes, image_alphas, class_alphas)?;

    let mut adapters = initial_adapters(features.dim(), cfg);
    let mut momentum = Momentum::new(&adapters);
    let mut shuffle_rng = CounterRng::new(cfg.seed).fork(STREAM_SHUFFLE);
    let n = full.len();
    let batch_size = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for rows in order.chunks(batch_size) {
            let batch = full.select(rows);
            let parts = loss_parts(&batch, &adapters, &loss_cfg).map_err(|e| match e {
                LluError::NonFiniteLoss { .. } => LluError::NonFiniteLoss { step },
                other => other,
            })?;
            if !parts.ce_gradients.is_finite() {
                return Err(LluError::NonFiniteLoss { step });
            }
            total += parts.loss() * rows.len() as f64;
            momentum.step(&mut adapters, &parts.ce_gradients, lr, cfg.momentum, cfg.lambda);
            if !adapters.is_finite() {
                return Err(LluError::NonFiniteLoss { step });
            }
            step += 1;
        }
        let mean = total / n as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }

    let mask = cfg.mask.clone();
    Ok(TrainOutcome {
        model: TrainedModel {
            adapters,
            anchors_image,
            anchors_text,
            mask,
            tau: loss_cfg.tau,
            renorm: cfg.renorm,
            class_names: classes.class_names().to_vec(),
            config: cfg.clone(),
        },
        epoch_losses,
    })
}
