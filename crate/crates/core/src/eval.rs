//! Zero-shot classification with an optional trained model, and the
//! base-to-new evaluation protocol.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LluError, Result};
use crate::graph::{adapt_vector, DEFAULT_TAU};
use crate::locality::mask_weight;
use crate::rng::CounterRng;
use crate::train::TrainedModel;
use crate::vector::{check_dim, dot, harmonic_mean, ClassEmbeddingSet, FeatureSet, Metrics, UnitVector};

/// Class embeddings prepared once (adapted when a model is given) for
/// repeated classification.
#[derive(Debug, Clone)]
pub struct Classifier<'m> {
    model: Option<&'m TrainedModel>,
    classes: Vec<Vec<f64>>,
    tau: f64,
}

impl<'m> Classifier<'m> {
    pub fn new(model: Option<&'m TrainedModel>, classes: &ClassEmbeddingSet) -> Result<Self> {
        if classes.is_empty() {
            return Err(LluError::InvalidSet("no class embeddings".into()));
        }
        let (classes_out, tau) = match model {
            None => (
                classes.vectors().iter().map(|v| v.as_slice().to_vec()).collect(),
                DEFAULT_TAU,
            ),
            Some(m) => {
                check_dim(m.dim(), classes.dim())?;
                let text = m.adapters.text();
                let adapted = classes
                    .vectors()
                    .iter()
                    .map(|v| {
                        let alpha = mask_weight(v, &m.anchors_text, &m.mask)?;
                        adapt_vector(v, text, alpha, m.renorm)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (adapted, m.tau.value())
            }
        };
        Ok(Classifier {
            model,
            classes: classes_out,
            tau,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn similarities(&self, u: &UnitVector) -> Result<Vec<f64>> {
        check_dim(self.classes[0].len(), u.dim())?;
        let adapted;
        let query = match self.model {
            None => u.as_slice(),
            Some(m) => {
                let alpha = mask_weight(u, &m.anchors_image, &m.mask)?;
                adapted = adapt_vector(u, m.adapters.image(), alpha, m.renorm)?;
                &adapted[..]
            }
        };
        Ok(self.classes.iter().map(|v| dot(query, v)).collect())
    }

    /// Index of the most similar class; the first one wins ties.
    pub fn predict(&self, u: &UnitVector) -> Result<usize> {
        Ok(argmax(&self.similarities(u)?))
    }

    /// Predicted class and the softmax over similarities at the model's temperature.
    pub fn classify(&self, u: &UnitVector) -> Result<(usize, Vec<f64>)> {
        let sims = self.similarities(u)?;
        let best = argmax(&sims);
        let top = sims[best];
        let mut probs: Vec<f64> = sims.iter().map(|s| ((s - top) / self.tau).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Ok((best, probs))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn classify(u: &UnitVector, model: Option<&TrainedModel>, classes: &ClassEmbeddingSet) -> Result<(usize, Vec<f64>)> {
    Classifier::new(model, classes)?.classify(u)
}

/// Classes in stored order; the first `ceil(K/2)` are base, the rest new.
pub fn split_base_new(n_classes: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_classes < 2 {
        return Err(LluError::TooFewClasses(n_classes));
    }
    let n_base = n_classes.div_ceil(2);
    Ok(((0..n_base).collect(), (n_base..n_classes).collect()))
}

/// Integer counts of a closed-set evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    /// Global class indices that were candidates.
    pub classes: Vec<usize>,
    /// `(correct, total)` per entry of `classes`.
    pub per_class: Vec<(usize, usize)>,
}

impl Evaluation {
    pub fn correct(&self) -> usize {
        self.per_class.iter().map(|c| c.0).sum()
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(|c| c.1).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }

    pub fn per_class_accuracy(&self, names: &[String]) -> BTreeMap<String, f64> {
        self.classes
            .iter()
            .zip(&self.per_class)
            .filter(|(_, (_, total))| *total > 0)
            .map(|(&c, &(correct, total))| (names[c].clone(), correct as f64 / total as f64))
            .collect()
    }
}

fn check_compatible(features: &FeatureSet, classes: &ClassEmbeddingSet) -> Result<()> {
    check_dim(classes.dim(), features.dim())?;
    if features.n_classes() != classes.len() {
        return Err(LluError::InvalidSet(format!(
            "features name {} classes but {} class embeddings were given",
            features.n_classes(),
            classes.len()
        )));
    }
    Ok(())
}

/// Closed-set accuracy over `restrict` (all classes when `None`). Records
/// whose label is outside `restrict` are skipped.
pub fn evaluate(
    features: &FeatureSet,
    model: Option<&TrainedModel>,
    classes: &ClassEmbeddingSet,
    restrict: Option<&[usize]>,
) -> Result<Evaluation> {
    check_compatible(features, classes)?;
    let candidates: Vec<usize> = match restrict {
        Some(r) => r.to_vec(),
        None => (0..classes.len()).collect(),
    };
    let subset = classes.subset(&candidates)?;
    let mut local = vec![None; classes.len()];
    for (i, &c) in candidates.iter().enumerate() {
        local[c] = Some(i);
    }
    let records: Vec<_> = features
        .records()
        .iter()
        .filter_map(|r| local[r.label].map(|l| (&r.vector, l)))
        .collect();
    if records.is_empty() {
        return Err(LluError::EmptyEvaluationSet);
    }
    let clf = Classifier::new(model, &subset)?;
    let hits: Vec<(usize, bool)> = records
        .par_iter()
        .map(|(u, label)| clf.predict(u).map(|p| (*label, p == *label)))
        .collect::<Result<_>>()?;
    let mut per_class = vec![(0usize, 0usize); candidates.len()];
    for (label, hit) in hits {
        per_class[label].1 += 1;
        per_class[label].0 += usize::from(hit);
    }
    Ok(Evaluation {
        classes: candidates,
        per_class,
    })
}

/// Base and new halves evaluated as separate closed sets.
pub fn evaluate_base_new(
    features: &FeatureSet,
    model: Option<&TrainedModel>,
    classes: &ClassEmbeddingSet,
) -> Result<Metrics> {
    let (base, new) = split_base_new(classes.len())?;
    let eb = evaluate(features, model, classes, Some(&base))?;
    let en = evaluate(features, model, classes, Some(&new))?;
    let mut per_class = eb.per_class_accuracy(classes.class_names());
    per_class.extend(en.per_class_accuracy(classes.class_names()));
    let mut m = Metrics::new(eb.accuracy(), en.accuracy());
    m.per_class_accuracy = Some(per_class);
    Ok(m)
}

/// Up to `shots` records per class, drawn without replacement.
pub fn sample_shots(features: &FeatureSet, shots: usize, seed: u64) -> Result<FeatureSet> {
    if shots == 0 {
        return Err(LluError::InvalidConfig("shots must be positive".into()));
    }
    let mut by_class = vec![Vec::new(); features.n_classes()];
    for (i, r) in features.records().iter().enumerate() {
        by_class[r.label].push(i);
    }
    let rng = CounterRng::new(seed);
    let mut keep = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        rng.fork(c as u64).shuffle(&mut idx);
        idx.truncate(shots);
        idx.sort_unstable();
        keep.extend(idx);
    }
    let records = keep.into_iter().map(|i| features.records()[i].clone()).collect();
    FeatureSet::new(features.dim(), features.class_names().to_vec(), records)
}

/// What `eval --report` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub base: Option<f64>,
    pub new: Option<f64>,
    #[serde(rename = "H")]
    pub h: Option<f64>,
    pub accuracy: f64,
    pub per_class: BTreeMap<String, f64>,
    pub n_eval: usize,
    pub model_fingerprint: Option<String>,
}

impl Report {
    pub fn from_evaluation(e: &Evaluation, names: &[String], fingerprint: Option<String>) -> Self {
        Report {
            base: None,
            new: None,
            h: None,
            accuracy: e.accuracy(),
            per_class: e.per_class_accuracy(names),
            n_eval: e.total(),
            model_fingerprint: fingerprint,
        }
    }

    pub fn from_base_new(base: &Evaluation, new: &Evaluation, names: &[String], fingerprint: Option<String>) -> Self {
        let mut per_class = base.per_class_accuracy(names);
        per_class.extend(new.per_class_accuracy(names));
        let (b, n) = (base.accuracy(), new.accuracy());
        Report {
            base: Some(b),
            new: Some(n),
            h: Some(harmonic_mean(b, n)),
            accuracy: (base.correct() + new.correct()) as f64 / (base.total() + new.total()) as f64,
            per_class,
            n_eval: base.total() + new.total(),
            model_fingerprint: fingerprint,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthParams};
    use crate::train::TrainConfig;
    use crate::vector::FeatureRecord;
    use proptest::prelude::*;

    fn orthogonal(k: usize) -> ClassEmbeddingSet {
        let names = (0..k).map(|i| format!("c{i}")).collect();
        ClassEmbeddingSet::new(k, names, (0..k).map(|i| UnitVector::basis(k, i)).collect()).unwrap()
    }

    fn exact_records(k: usize, labels: impl Fn(usize) -> usize) -> FeatureSet {
        let names = (0..k).map(|i| format!("c{i}")).collect();
        let records = (0..k)
            .map(|i| FeatureRecord {
                vector: UnitVector::basis(k, i),
                label: labels(i),
            })
            .collect();
        FeatureSet::new(k, names, records).unwrap()
    }

    #[test]
    fn exact_match_is_top() {
        let classes = orthogonal(4);
        let (c, probs) = classify(&UnitVector::basis(4, 2), None, &classes).unwrap();
        assert_eq!(c, 2);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let clf = Classifier::new(None, &classes).unwrap();
        assert_eq!(clf.similarities(&UnitVector::basis(4, 2)).unwrap()[2], 1.0);
        assert!(matches!(
            classify(&UnitVector::basis(3, 0), None, &classes),
            Err(LluError::DimMismatch { .. })
        ));
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_base_new(4).unwrap(), (vec![0, 1], vec![2, 3]));
        assert_eq!(split_base_new(5).unwrap(), (vec![0, 1, 2], vec![3, 4]));
        assert!(matches!(split_base_new(1), Err(LluError::TooFewClasses(1))));
    }

    #[test]
    fn perfect_and_adversarial_accuracy() {
        let classes = orthogonal(4);
        assert_eq!(evaluate(&exact_records(4, |i| i), None, &classes, None).unwrap().accuracy(), 1.0);
        let wrong = exact_records(4, |i| (i + 1) % 4);
        assert_eq!(evaluate(&wrong, None, &classes, None).unwrap().accuracy(), 0.0);
    }

    #[test]
    fn restrict_is_a_closed_set() {
        let classes = orthogonal(4);
        // record 0 ties between 2 and 3, goes to 2, and is labeled 3
        let set = exact_records(4, |i| if i == 0 { 3 } else { i });
        let e = evaluate(&set, None, &classes, Some(&[2, 3])).unwrap();
        assert_eq!(e.total(), 3);
        assert_eq!(e.correct(), 2);
        let only0 = exact_records(4, |_| 0);
        assert!(matches!(
            evaluate(&only0, None, &classes, Some(&[2, 3])),
            Err(LluError::EmptyEvaluationSet)
        ));
    }

    #[test]
    fn harmonic_mean_table_value() {
        let m = Metrics::new(0.9817, 0.9393);
        assert!((m.harmonic_mean - 0.9600).abs() < 1e-4);
    }

    #[test]
    fn identity_model_matches_frozen_classifier() {
        let d = synth_dataset(&SynthParams {
            dim: 16,
            n_classes: 6,
            shots_train: 4,
            n_test_per_class: 30,
            ..SynthParams::default()
        })
        .unwrap();
        let model = TrainedModel::identity(&d.train, &d.classes, &TrainConfig::default()).unwrap();
        let plain = Classifier::new(None, &d.classes).unwrap();
        let ident = Classifier::new(Some(&model), &d.classes).unwrap();
        for u in d.test.vectors() {
            assert_eq!(plain.similarities(u).unwrap(), ident.similarities(u).unwrap());
        }
        assert_eq!(
            evaluate_base_new(&d.test, None, &d.classes).unwrap(),
            evaluate_base_new(&d.test, Some(&model), &d.classes).unwrap()
        );
    }

    #[test]
    fn sample_shots_counts() {
        let d = synth_dataset(&SynthParams {
            dim: 8,
            n_classes: 4,
            shots_train: 20,
            n_test_per_class: 3,
            ..SynthParams::default()
        })
        .unwrap();
        let s = sample_shots(&d.train, 16, 3).unwrap();
        assert_eq!(s.len(), 64);
        assert_eq!(s.class_counts(), vec![16; 4]);
        assert_eq!(s, sample_shots(&d.train, 16, 3).unwrap());
        assert_ne!(s, sample_shots(&d.train, 16, 4).unwrap());
        assert_eq!(sample_shots(&d.test, 5, 0).unwrap(), d.test);
    }

    #[test]
    fn report_h_is_consistent() {
        let classes = orthogonal(4);
        let set = exact_records(4, |i| if i == 3 { 2 } else { i });
        let (b, n) = split_base_new(4).unwrap();
        let eb = evaluate(&set, None, &classes, Some(&b)).unwrap();
        let en = evaluate(&set, None, &classes, Some(&n)).unwrap();
        let r = Report::from_base_new(&eb, &en, classes.class_names(), None);
        assert_eq!(r.base, Some(1.0));
        assert_eq!(r.new, Some(0.5));
        assert_eq!(r.h, Some(harmonic_mean(1.0, 0.5)));
        let json = r.to_json().unwrap();
        assert!(json.contains("\"H\""));
        assert_eq!(serde_json::from_str::<Report>(&json).unwrap(), r);
    }

    proptest! {
        #[test]
        fn metrics_ignore_record_order(seed in 0u64..200, rot in 0usize..40) {
            let d = synth_dataset(&SynthParams {
                dim: 6,
                n_classes: 4,
                shots_train: 1,
                n_test_per_class: 10,
                seed,
                ..SynthParams::default()
            })
            .unwrap();
            let mut recs = d.test.records().to_vec();
            recs.rotate_left(rot);
            recs.reverse();
            let shuffled = FeatureSet::new(6, d.test.class_names().to_vec(), recs).unwrap();
            prop_assert_eq!(
                evaluate_base_new(&d.test, None, &d.classes).unwrap(),
                evaluate_base_new(&shuffled, None, &d.classes).unwrap()
            );
        }
    }
}
