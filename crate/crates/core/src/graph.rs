//! Differentiable classification objective and its analytic gradients.
//!
//! For every image `u_i` and class embedding `v_k`:
//!
//! ```text
//! z      = u + alpha * (W u + b - u)          per side, alpha fixed per vector
//! z_hat  = z / |z|                             (skipped when renorm is off)
//! s_ik   = z_hat_i . z_hat_k / tau
//! loss   = -(1/N) sum_i log softmax_k(s_i)[y_i] + reg(adapter_I) + reg(adapter_T)
//! ```
//!
//! The backward pass is written out by hand; [`grad_check`] compares it to
//! central finite differences.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::adapter::AffineAdapter;
use crate::error::{LluError, Result};
use crate::rng::CounterRng;
use crate::vector::{check_dim, normalize, stack_rows, ClassEmbeddingSet, UnitVector, MIN_NORM};

/// Softmax temperature; logits are similarities divided by it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

pub const DEFAULT_TAU: f64 = 0.01;

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(LluError::InvalidConfig(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(DEFAULT_TAU)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = LluError;

    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Image-side and text-side adapters, either distinct or one shared map.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapters {
    Separate {
        image: AffineAdapter,
        text: AffineAdapter,
    },
    Shared(AffineAdapter),
}

impl Adapters {
    pub fn identity(dim: usize, shared: bool) -> Self {
        if shared {
            Adapters::Shared(AffineAdapter::identity(dim))
        } else {
            Adapters::Separate {
                image: AffineAdapter::identity(dim),
                text: AffineAdapter::identity(dim),
            }
        }
    }

    pub fn image(&self) -> &AffineAdapter {
        match self {
            Adapters::Separate { image, .. } => image,
            Adapters::Shared(a) => a,
        }
    }

    pub fn text(&self) -> &AffineAdapter {
        match self {
            Adapters::Separate { text, .. } => text,
            Adapters::Shared(a) => a,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, Adapters::Shared(_))
    }

    pub fn dim(&self) -> usize {
        self.image().dim()
    }

    /// Identity penalty of the full objective; a shared map is counted on both sides.
    pub fn reg_penalty(&self, lambda: f64) -> f64 {
        self.image().reg_penalty(lambda) + self.text().reg_penalty(lambda)
    }

    pub fn is_finite(&self) -> bool {
        self.image().is_finite() && self.text().is_finite()
    }

    /// Free parameters: image then text, or the shared map once.
    pub fn num_params(&self) -> usize {
        match self {
            Adapters::Separate { image, text } => image.num_params() + text.num_params(),
            Adapters::Shared(a) => a.num_params(),
        }
    }

    pub fn param(&self, idx: usize) -> f64 {
        match self {
            Adapters::Separate { image, text } => {
                let n = image.num_params();
                if idx < n {
                    image.param(idx)
                } else {
                    text.param(idx - n)
                }
            }
            Adapters::Shared(a) => a.param(idx),
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        match self {
            Adapters::Separate { image, text } => {
                let n = image.num_params();
                if idx < n {
                    image.set_param(idx, value)
                } else {
                    text.set_param(idx - n, value)
                }
            }
            Adapters::Shared(a) => a.set_param(idx, value),
        }
    }
}

/// `loss` hyperparameters that stay fixed during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: Temperature,
    pub lambda: f64,
    pub renorm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: Temperature::default(),
            lambda: 1e3,
            renorm: true,
        }
    }
}

/// Images with labels, all class embeddings, and the precomputed mask weights.
#[derive(Debug, Clone)]
pub struct ForwardBatch {
    images: Array2<f64>,
    labels: Vec<usize>,
    classes: Array2<f64>,
    image_alphas: Vec<f64>,
    class_alphas: Vec<f64>,
}

impl ForwardBatch {
    /// Rows of `images` and `classes` are unit vectors of one dimension.
    pub fn new(
        images: Array2<f64>,
        labels: Vec<usize>,
        classes: Array2<f64>,
        image_alphas: Vec<f64>,
        class_alphas: Vec<f64>,
    ) -> Result<Self> {
        let (n, dim) = images.dim();
        let (k, class_dim) = classes.dim();
        check_dim(dim, class_dim)?;
        if n == 0 || k == 0 {
            return Err(LluError::InvalidSet("batch needs at least one image and one class".into()));
        }
        if labels.len() != n || image_alphas.len() != n || class_alphas.len() != k {
            return Err(LluError::InvalidSet(format!(
                "inconsistent batch: {n} images, {} labels, {} image alphas, {k} classes, {} class alphas",
                labels.len(),
                image_alphas.len(),
                class_alphas.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(LluError::LabelOutOfRange { label, n_classes: k });
        }
        if let Some(a) = image_alphas
            .iter()
            .chain(&class_alphas)
            .find(|a| !(0.0..=1.0).contains(*a))
        {
            return Err(LluError::InvalidSet(format!("alpha {a} outside [0, 1]")));
        }
        Ok(ForwardBatch {
            images,
            labels,
            classes,
            image_alphas,
            class_alphas,
        })
    }

    pub fn from_vectors(
        images: &[UnitVector],
        labels: Vec<usize>,
        classes: &ClassEmbeddingSet,
        image_alphas: Vec<f64>,
        class_alphas: Vec<f64>,
    ) -> Result<Self> {
        for u in images {
            check_dim(classes.dim(), u.dim())?;
        }
        ForwardBatch::new(
            stack_rows(classes.dim(), images),
            labels,
            classes.matrix(),
            image_alphas,
            class_alphas,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    /// Sub-batch of the given image rows; classes are kept whole.
    pub fn select(&self, rows: &[usize]) -> ForwardBatch {
        ForwardBatch {
            images: self.images.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes.clone(),
            image_alphas: rows.iter().map(|&r| self.image_alphas[r]).collect(),
            class_alphas: self.class_alphas.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight_image: Array2<f64>,
    pub bias_image: Array1<f64>,
    pub weight_text: Array2<f64>,
    pub bias_text: Array1<f64>,
}

impl Gradients {
    /// Gradient entry matching [`Adapters::param`] indexing. For a shared
    /// map the two sides are summed.
    pub fn param(&self, shared: bool, idx: usize) -> f64 {
        let d = self.bias_image.len();
        let per_side = d * d + d;
        let side = |w: &Array2<f64>, b: &Array1<f64>, i: usize| {
            if i < d * d {
                w[[i / d, i % d]]
            } else {
                b[i - d * d]
            }
        };
        if shared {
            side(&self.weight_image, &self.bias_image, idx) + side(&self.weight_text, &self.bias_text, idx)
        } else if idx < per_side {
            side(&self.weight_image, &self.bias_image, idx)
        } else {
            side(&self.weight_text, &self.bias_text, idx - per_side)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight_image
            .iter()
            .chain(&self.bias_image)
            .chain(&self.weight_text)
            .chain(&self.bias_text)
            .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Interpolates between frozen rows and their adapted images, then optionally
/// renormalizes. Returns the output rows and the pre-normalization norms.
fn adapt_rows(
    rows: &Array2<f64>,
    adapter: &AffineAdapter,
    alphas: &[f64],
    renorm: bool,
) -> Result<(Array2<f64>, Vec<f64>)> {
    check_dim(adapter.dim(), rows.ncols())?;
    let mut update = rows.dot(&adapter.weight().t());
    update += adapter.bias();
    update -= rows;
    let mut out = rows.clone();
    let mut norms = Vec::with_capacity(rows.nrows());
    for ((mut z, delta), &alpha) in out.outer_iter_mut().zip(update.outer_iter()).zip(alphas) {
        let moved = alpha != 0.0 && delta.iter().any(|&x| x != 0.0);
        if moved {
            z.scaled_add(alpha, &delta);
        }
        let norm = z.dot(&z).sqrt();
        if !norm.is_finite() {
            return Err(LluError::NonFiniteLoss { step: 0 });
        }
        if !(norm > MIN_NORM) {
            return Err(LluError::ZeroVector { norm });
        }
        // An unmoved row is already unit length.
        if renorm && moved {
            z /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// `normalize(u + alpha (W u + b - u))`; returns `u` itself when nothing moves.
pub fn adapt_embed(u: &UnitVector, adapter: &AffineAdapter, alpha: f64) -> Result<UnitVector> {
    check_dim(adapter.dim(), u.dim())?;
    if alpha == 0.0 {
        return Ok(u.clone());
    }
    let delta = adapter.apply(u.as_slice())? - ArrayView1::from(u.as_slice());
    if delta.iter().all(|&x| x == 0.0) {
        return Ok(u.clone());
    }
    let z: Vec<f64> = u
        .as_slice()
        .iter()
        .zip(delta.iter())
        .map(|(x, d)| x + alpha * d)
        .collect();
    normalize(&z)
}

/// Like [`adapt_embed`] but without the final renormalization when `renorm` is false.
pub fn adapt_vector(u: &UnitVector, adapter: &AffineAdapter, alpha: f64, renorm: bool) -> Result<Vec<f64>> {
    if renorm {
        return adapt_embed(u, adapter, alpha).map(UnitVector::into_inner);
    }
    check_dim(adapter.dim(), u.dim())?;
    let delta = adapter.apply(u.as_slice())? - ArrayView1::from(u.as_slice());
    Ok(u.as_slice()
        .iter()
        .zip(delta.iter())
        .map(|(x, d)| if alpha == 0.0 { *x } else { x + alpha * d })
        .collect())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    probs
}

/// `logsumexp(row) - row[label]`, written as `(max - row[label]) + ln(1 + rest)`
/// so its rounding error scales with the result rather than the logits.
fn nll_term(row: ArrayView1<f64>, label: usize) -> f64 {
    let (arg, max) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, m), (i, &x)| if x > m { (i, x) } else { (ai, m) });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, x)| (x - max).exp())
        .sum();
    (max - row[label]) + rest.ln_1p()
}

struct Activations {
    images: Array2<f64>,
    image_norms: Vec<f64>,
    classes: Array2<f64>,
    class_norms: Vec<f64>,
    logits: Array2<f64>,
    probs: Array2<f64>,
    cross_entropy: f64,
}

fn activations(batch: &ForwardBatch, adapters: &Adapters, cfg: &LossConfig) -> Result<Activations> {
    check_dim(batch.dim(), adapters.dim())?;
    let (images, image_norms) = adapt_rows(&batch.images, adapters.image(), &batch.image_alphas, cfg.renorm)?;
    let (classes, class_norms) = adapt_rows(&batch.classes, adapters.text(), &batch.class_alphas, cfg.renorm)?;
    let logits = images.dot(&classes.t()) / cfg.tau.value();
    let probs = softmax_rows(&logits);

    let mut nll = 0.0;
    for (row, &label) in logits.outer_iter().zip(&batch.labels) {
        nll += nll_term(row, label);
    }
    Ok(Activations {
        images,
        image_norms,
        classes,
        class_norms,
        logits,
        probs,
        cross_entropy: nll / batch.len() as f64,
    })
}

pub fn forward(batch: &ForwardBatch, adapters: &Adapters, cfg: &LossConfig) -> Result<ForwardOutput> {
    let act = activations(batch, adapters, cfg)?;
    let loss = act.cross_entropy + adapters.reg_penalty(cfg.lambda);
    if !loss.is_finite() {
        return Err(LluError::NonFiniteLoss { step: 0 });
    }
    Ok(ForwardOutput {
        loss,
        logits: act.logits,
        probs: act.probs,
    })
}

/// Loss split into its classification and regularization parts, with the
/// classification gradient only.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub cross_entropy: f64,
    pub penalty: f64,
    pub ce_gradients: Gradients,
}

impl LossParts {
    pub fn loss(&self) -> f64 {
        self.cross_entropy + self.penalty
    }
}

/// Pulls `d loss / d output` back through renormalization and the alpha
/// interpolation, returning `(dW, db)` for one side.
fn side_gradient(
    grad_out: Array2<f64>,
    outputs: &Array2<f64>,
    norms: &[f64],
    inputs: &Array2<f64>,
    alphas: &[f64],
    renorm: bool,
) -> (Array2<f64>, Array1<f64>) {
    let mut grad_z = grad_out;
    Zip::from(grad_z.rows_mut())
        .and(outputs.rows())
        .and(norms)
        .and(alphas)
        .for_each(|mut g, out, &norm, &alpha| {
            if renorm {
                // (I - z_hat z_hat^T) g / |z|
                let radial = out.dot(&g);
                g.scaled_add(-radial, &out);
                g /= norm;
            }
            g *= alpha;
        });
    let dw = grad_z.t().dot(inputs);
    let db = grad_z.sum_axis(Axis(0));
    (dw, db)
}

pub fn loss_parts(batch: &ForwardBatch, adapters: &Adapters, cfg: &LossConfig) -> Result<LossParts> {
    let act = activations(batch, adapters, cfg)?;
    let penalty = adapters.reg_penalty(cfg.lambda);
    if !(act.cross_entropy + penalty).is_finite() {
        return Err(LluError::NonFiniteLoss { step: 0 });
    }

    let n = batch.len() as f64;
    let inv_tau = 1.0 / cfg.tau.value();
    let mut grad_logits = act.probs;
    for (mut row, &label) in grad_logits.outer_iter_mut().zip(&batch.labels) {
        row[label] -= 1.0;
    }
    grad_logits /= n;

    let grad_images = grad_logits.dot(&act.classes) * inv_tau;
    let grad_classes = grad_logits.t().dot(&act.images) * inv_tau;
    let (weight_image, bias_image) = side_gradient(
        grad_images,
        &act.images,
        &act.image_norms,
        &batch.images,
        &batch.image_alphas,
        cfg.renorm,
    );
    let (weight_text, bias_text) = side_gradient(
        grad_classes,
        &act.classes,
        &act.class_norms,
        &batch.classes,
        &batch.class_alphas,
        cfg.renorm,
    );
    Ok(LossParts {
        cross_entropy: act.cross_entropy,
        penalty,
        ce_gradients: Gradients {
            weight_image,
            bias_image,
            weight_text,
            bias_text,
        },
    })
}

/// Loss and its full gradient, regularizer included.
pub fn backward(batch: &ForwardBatch, adapters: &Adapters, cfg: &LossConfig) -> Result<(f64, Gradients)> {
    let parts = loss_parts(batch, adapters, cfg)?;
    let mut grads = parts.ce_gradients;
    let (rw, rb) = adapters.image().reg_gradient(cfg.lambda);
    grads.weight_image += &rw;
    grads.bias_image += &rb;
    let (rw, rb) = adapters.text().reg_gradient(cfg.lambda);
    grads.weight_text += &rw;
    grads.bias_text += &rb;
    Ok((parts.cross_entropy + parts.penalty, grads))
}

/// Coordinates compared exhaustively up to this dimension; above it a
/// random subsample of [`GRAD_CHECK_SAMPLE`] coordinates is used.
pub const GRAD_CHECK_FULL_DIM: usize = 32;
pub const GRAD_CHECK_SAMPLE: usize = 256;

/// Value of parameter `idx` at the identity map.
fn identity_value(dim: usize, idx: usize) -> f64 {
    let local = idx % (dim * dim + dim);
    if local < dim * dim && local / dim == local % dim {
        1.0
    } else {
        0.0
    }
}

/// Central difference of `f` around 0. Below 1e-6 rounding dominates and the
/// two-point form is the least noisy; above it truncation dominates and the
/// fourth-order form `(8 (f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h` is used.
fn central_difference(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let d1 = f(h)? - f(-h)?;
    if h < 1e-6 {
        return Ok(d1 / (2.0 * h));
    }
    let d2 = f(2.0 * h)? - f(-2.0 * h)?;
    Ok((8.0 * d1 - d2) / (12.0 * h))
}

/// Largest relative disagreement `|a - f| / max(|a|, |f|, 1e-8)` between the
/// analytic gradient `a` and central differences `f` with step `epsilon`.
///
/// The penalty is a sum of one term per coordinate, so its difference is
/// taken on the moved term alone; differencing the whole sum would bury small
/// components under the rounding error of a large total.
pub fn grad_check(
    batch: &ForwardBatch,
    adapters: &Adapters,
    cfg: &LossConfig,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(LluError::InvalidConfig(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (_, grads) = backward(batch, adapters, cfg)?;
    let total = adapters.num_params();
    let coords: Vec<usize> = if adapters.dim() <= GRAD_CHECK_FULL_DIM {
        (0..total).collect()
    } else {
        let mut all: Vec<usize> = (0..total).collect();
        CounterRng::new(seed).shuffle(&mut all);
        all.truncate(GRAD_CHECK_SAMPLE.min(total));
        all
    };

    let ce_only = LossConfig { lambda: 0.0, ..*cfg };
    let sides = if adapters.is_shared() { 2.0 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for idx in coords {
        let original = adapters.param(idx);
        let ce = central_difference(
            |step| {
                let mut probe = adapters.clone();
                probe.set_param(idx, original + step);
                Ok(forward(batch, &probe, &ce_only)?.loss)
            },
            epsilon,
        )?;
        let offset = original - identity_value(adapters.dim(), idx);
        let penalty = central_difference(|step| Ok(sides * cfg.lambda * (offset + step).powi(2)), epsilon)?;

        let numeric = ce + penalty;
        let analytic = grads.param(adapters.is_shared(), idx);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_unit(rng: &mut CounterRng, dim: usize) -> UnitVector {
        normalize(&rng.gaussian_vec(dim)).unwrap()
    }

    fn perturbed(dim: usize, rng: &mut CounterRng, scale: f64) -> AffineAdapter {
        let mut a = AffineAdapter::identity(dim);
        for i in 0..a.num_params() {
            let v = a.param(i) + scale * rng.gaussian();
            a.set_param(i, v);
        }
        a
    }

    fn random_batch(rng: &mut CounterRng, dim: usize, k: usize, n: usize, alpha: impl Fn(&mut CounterRng) -> f64) -> ForwardBatch {
        let images: Vec<UnitVector> = (0..n).map(|_| random_unit(rng, dim)).collect();
        let classes: Vec<UnitVector> = (0..k).map(|_| random_unit(rng, dim)).collect();
        let labels = (0..n).map(|_| rng.below(k)).collect();
        let ia = (0..n).map(|_| alpha(rng)).collect();
        let ca = (0..k).map(|_| alpha(rng)).collect();
        ForwardBatch::new(stack_rows(dim, &images), labels, stack_rows(dim, &classes), ia, ca).unwrap()
    }

    fn cfg(lambda: f64, tau: f64) -> LossConfig {
        LossConfig {
            tau: Temperature::new(tau).unwrap(),
            lambda,
            renorm: true,
        }
    }

    #[test]
    fn adapt_embed_examples() {
        let u = normalize(&[0.3, -0.4, 0.5]).unwrap();
        let mut rng = CounterRng::new(1);
        let a = perturbed(3, &mut rng, 0.5);
        assert_eq!(adapt_embed(&u, &a, 0.0).unwrap(), u);
        assert_eq!(adapt_embed(&u, &AffineAdapter::identity(3), 0.7).unwrap(), u);
        let two = AffineAdapter::from_parts(Array2::eye(3) * 2.0, Array1::zeros(3)).unwrap();
        let out = adapt_embed(&u, &two, 1.0).unwrap();
        for (x, y) in out.as_slice().iter().zip(u.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn two_equal_logits_give_ln2() {
        let batch = ForwardBatch::new(
            stack_rows(2, &[normalize(&[1.0, 1.0]).unwrap()]),
            vec![0],
            stack_rows(2, &[UnitVector::basis(2, 0), UnitVector::basis(2, 1)]),
            vec![0.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        let out = forward(&batch, &Adapters::identity(2, false), &cfg(5.0, 0.01)).unwrap();
        assert!((out.probs[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softmax_reference_values() {
        // logits (2, 0): reference 1/(1+e^-2) = 0.8807970779778823
        let batch = ForwardBatch::new(
            stack_rows(2, &[UnitVector::basis(2, 0)]),
            vec![0],
            stack_rows(2, &[UnitVector::basis(2, 0), UnitVector::basis(2, 1)]),
            vec![0.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        let out = forward(&batch, &Adapters::identity(2, false), &cfg(0.0, 0.5)).unwrap();
        assert!((out.logits[[0, 0]] - 2.0).abs() < 1e-15);
        assert!((out.probs[[0, 0]] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((out.probs[[0, 1]] - 0.119_202_922_022_117_7).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_gradient_is_pure_regularizer() {
        let mut rng = CounterRng::new(2);
        let batch = random_batch(&mut rng, 5, 3, 4, |_| 0.0);
        let adapters = Adapters::Separate {
            image: perturbed(5, &mut rng, 0.2),
            text: perturbed(5, &mut rng, 0.2),
        };
        let lambda = 3.0;
        let (_, g) = backward(&batch, &adapters, &cfg(lambda, 0.01)).unwrap();
        let (rw, rb) = adapters.image().reg_gradient(lambda);
        assert_eq!(g.weight_image, rw);
        assert_eq!(g.bias_image, rb);
        let (rw, rb) = adapters.text().reg_gradient(lambda);
        assert_eq!(g.weight_text, rw);
        assert_eq!(g.bias_text, rb);
    }

    #[test]
    fn aligned_orthogonal_batch_still_has_gradient() {
        let dim = 4;
        let classes: Vec<UnitVector> = (0..3).map(|i| UnitVector::basis(dim, i)).collect();
        let batch = ForwardBatch::new(
            stack_rows(dim, &classes),
            vec![0, 1, 2],
            stack_rows(dim, &classes),
            vec![0.5; 3],
            vec![0.5; 3],
        )
        .unwrap();
        let adapters = Adapters::identity(dim, false);
        let c = cfg(0.0, 1.0);
        let (_, g) = backward(&batch, &adapters, &c).unwrap();
        let norm: f64 = g.weight_image.iter().chain(&g.weight_text).map(|x| x * x).sum();
        assert!(norm > 1e-6, "softmax pressure should persist");
        assert!(grad_check(&batch, &adapters, &c, 1e-5, 0).unwrap() < 1e-4);
    }

    #[test]
    fn grad_check_pure_quadratic() {
        let mut rng = CounterRng::new(3);
        let batch = random_batch(&mut rng, 4, 3, 5, |_| 0.0);
        let err = grad_check(&batch, &Adapters::identity(4, false), &cfg(1e3, 0.01), 1e-5, 0).unwrap();
        assert!(err < 1e-6, "{err}");
        let adapters = Adapters::Separate {
            image: perturbed(4, &mut rng, 0.1),
            text: perturbed(4, &mut rng, 0.1),
        };
        let err = grad_check(&batch, &adapters, &cfg(1e3, 0.01), 1e-5, 0).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_random_smooth_configuration() {
        let mut rng = CounterRng::new(4);
        for trial in 0..10 {
            let batch = random_batch(&mut rng, 8, 4, 6, |r| 0.5 * r.next_f64());
            let shared = trial % 2 == 1;
            let adapters = if shared {
                Adapters::Shared(perturbed(8, &mut rng, 0.05))
            } else {
                Adapters::Separate {
                    image: perturbed(8, &mut rng, 0.05),
                    text: perturbed(8, &mut rng, 0.05),
                }
            };
            for renorm in [true, false] {
                let c = LossConfig {
                    renorm,
                    ..cfg(1.0, 0.05)
                };
                for eps in [1e-7, 1e-5] {
                    let err = grad_check(&batch, &adapters, &c, eps, trial).unwrap();
                    assert!(err < 1e-4, "trial {trial} renorm {renorm} eps {eps}: {err}");
                }
            }
        }
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let mut rng = CounterRng::new(5);
        let batch = random_batch(&mut rng, 3, 2, 2, |_| 0.5);
        let a = Adapters::identity(3, false);
        assert!(grad_check(&batch, &a, &cfg(0.0, 0.1), 1e-2, 0).is_err());
        assert!(grad_check(&batch, &a, &cfg(0.0, 0.1), 1e-9, 0).is_err());
    }

    #[test]
    fn loss_decomposes_and_rows_sum_to_one() {
        let mut rng = CounterRng::new(6);
        let batch = random_batch(&mut rng, 6, 4, 7, |r| r.next_f64());
        let adapters = Adapters::Separate {
            image: perturbed(6, &mut rng, 0.1),
            text: perturbed(6, &mut rng, 0.1),
        };
        let with = forward(&batch, &adapters, &cfg(1e3, 0.01)).unwrap();
        let without = forward(&batch, &adapters, &cfg(0.0, 0.01)).unwrap();
        let reg = adapters.image().reg_penalty(1e3) + adapters.text().reg_penalty(1e3);
        assert!((with.loss - without.loss - reg).abs() < 1e-10 * reg.max(1.0));
        for row in with.probs.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_permutation_leaves_loss_unchanged() {
        let mut rng = CounterRng::new(7);
        let batch = random_batch(&mut rng, 6, 4, 9, |r| r.next_f64());
        let adapters = Adapters::Separate {
            image: perturbed(6, &mut rng, 0.1),
            text: perturbed(6, &mut rng, 0.1),
        };
        let mut order: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut order);
        let a = forward(&batch, &adapters, &cfg(1.0, 0.01)).unwrap().loss;
        let b = forward(&batch.select(&order), &adapters, &cfg(1.0, 0.01)).unwrap().loss;
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn identity_adapters_reproduce_frozen_logits() {
        let mut rng = CounterRng::new(8);
        let batch = random_batch(&mut rng, 8, 5, 20, |r| r.next_f64());
        let out = forward(&batch, &Adapters::identity(8, false), &cfg(0.0, 0.01)).unwrap();
        let frozen = batch.images.dot(&batch.classes.t()) / 0.01;
        assert_eq!(out.logits, frozen);
    }

    #[test]
    fn batch_validation() {
        let classes = stack_rows(2, &[UnitVector::basis(2, 0)]);
        let images = stack_rows(2, &[UnitVector::basis(2, 1)]);
        assert!(ForwardBatch::new(images.clone(), vec![1], classes.clone(), vec![0.0], vec![0.0]).is_err());
        assert!(ForwardBatch::new(images.clone(), vec![0], classes.clone(), vec![1.5], vec![0.0]).is_err());
        assert!(ForwardBatch::new(images, vec![0, 0], classes, vec![0.0], vec![0.0]).is_err());
        assert!(Temperature::new(0.0).is_err());
    }
}
