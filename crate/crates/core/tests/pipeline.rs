use std::sync::OnceLock;

use llu::eval::{evaluate, split_base_new, Classifier};
use llu::graph::adapt_embed;
use llu::locality::mask_weight;
use llu::rng::CounterRng;
use llu::synth::{synth_dataset, SynthData, SynthParams};
use llu::train::{ablation_preset, presets, train, InitScheme, TrainConfig, TrainOutcome, TrainedModel};
use llu::vector::{l2_norm, normalize, UnitVector};
use proptest::prelude::*;

fn synth(seed: u64) -> SynthData {
    synth_dataset(&SynthParams {
        seed,
        ..SynthParams::default()
    })
    .unwrap()
}

fn train_base(data: &SynthData, cfg: &TrainConfig) -> TrainOutcome {
    let (base, _) = split_base_new(data.classes.len()).unwrap();
    train(
        &data.train.restrict_to(&base).unwrap(),
        &data.classes.subset(&base).unwrap(),
        cfg,
    )
    .unwrap()
}

/// A model trained without the identity penalty, so its adapters move far.
fn free_model() -> &'static TrainedModel {
    static MODEL: OnceLock<TrainedModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = TrainConfig {
            epochs: 40,
            ..ablation_preset("no-reg").unwrap()
        };
        train_base(&synth(0), &cfg).model
    })
}

#[test]
fn final_epoch_loss_is_below_first_on_three_seeds() {
    for seed in 0..3 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let losses = train_base(&synth(seed), &cfg).epoch_losses;
        assert_eq!(losses.len(), 200);
        assert!(losses[199] < losses[0], "seed {seed}: {} vs {}", losses[199], losses[0]);
    }
}

#[test]
fn same_inputs_give_identical_models() {
    let data = synth(4);
    let cfg = TrainConfig {
        epochs: 15,
        init: InitScheme::Random,
        ..TrainConfig::default()
    };
    let a = train_base(&data, &cfg).model.to_json().unwrap();
    let b = train_base(&data, &cfg).model.to_json().unwrap();
    assert_eq!(a, b);
    let other = TrainConfig { seed: 1, ..cfg };
    assert_ne!(a, train_base(&data, &other).model.to_json().unwrap());
}

#[test]
fn far_probes_are_left_alone_after_training() {
    let model = free_model();
    assert!(model.adapters.image().distance_to_identity() > 0.5);
    let limit = 1.0 - 15.0 / model.mask.gamma;
    let mut rng = CounterRng::new(31);
    let mut checked = 0;
    for _ in 0..2000 {
        let u = normalize(&rng.gaussian_vec(model.dim())).unwrap();
        for (anchors, adapter) in [
            (&model.anchors_image, model.adapters.image()),
            (&model.anchors_text, model.adapters.text()),
        ] {
            if anchors.max_similarity(&u).unwrap() > limit {
                continue;
            }
            let alpha = mask_weight(&u, anchors, &model.mask).unwrap();
            assert!(alpha < 2e-7);
            let moved = adapt_embed(&u, adapter, alpha).unwrap();
            let diff: Vec<f64> = moved.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a - b).collect();
            assert!(l2_norm(&diff) < 1e-5);
            checked += 1;
        }
    }
    assert!(checked > 1000, "only {checked} probes qualified");
}

#[test]
fn dirac_model_keeps_new_classes_at_baseline() {
    let data = synth(1);
    let cfg = TrainConfig {
        lambda: 0.0,
        epochs: 40,
        ..ablation_preset("dirac-mask").unwrap()
    };
    let model = train_base(&data, &cfg).model;
    assert!(model.adapters.text().distance_to_identity() > 0.1);
    let (_, new) = split_base_new(data.classes.len()).unwrap();
    assert_eq!(
        evaluate(&data.test, None, &data.classes, Some(&new)).unwrap(),
        evaluate(&data.test, Some(&model), &data.classes, Some(&new)).unwrap()
    );
}

#[test]
fn shared_adapter_treats_both_sides_alike() {
    let data = synth(2);
    let cfg = TrainConfig {
        epochs: 10,
        lambda: 0.0,
        shared_adapter: true,
        ..TrainConfig::default()
    };
    let model = train_base(&data, &cfg).model;
    assert!(model.adapters.is_shared());
    assert_eq!(model.adapters.image(), model.adapters.text());
    for u in data.test.vectors().take(50) {
        let a = adapt_embed(u, model.adapters.image(), 0.5).unwrap();
        let b = adapt_embed(u, model.adapters.text(), 0.5).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn every_preset_trains() {
    let data = synth(0);
    for name in presets().names() {
        let cfg = TrainConfig {
            epochs: 2,
            ..ablation_preset(name).unwrap()
        };
        let out = train_base(&data, &cfg);
        assert!(out.epoch_losses.iter().all(|l| l.is_finite()), "{name}");
    }
    let linear = train_base(
        &data,
        &TrainConfig {
            epochs: 2,
            ..ablation_preset("linear").unwrap()
        },
    )
    .model;
    // alpha is 1 everywhere: the adapter applies in full even far from data
    let far = UnitVector::basis(64, 0);
    assert_eq!(mask_weight(&far, &linear.anchors_image, &linear.mask).unwrap(), 1.0);
}

#[test]
fn anchor_cap_and_no_cluster() {
    let data = synth(0);
    let capped = TrainConfig {
        epochs: 1,
        max_anchors: Some(10),
        ..TrainConfig::default()
    };
    assert_eq!(train_base(&data, &capped).model.anchors_image.len(), 10);
    let all = TrainConfig {
        epochs: 1,
        ..ablation_preset("no-cluster").unwrap()
    };
    let model = train_base(&data, &all).model;
    assert_eq!(model.anchors_image.len(), 64);
    assert_eq!(model.anchors_text.len(), 4);
}

#[test]
fn trained_model_survives_json() {
    let model = free_model();
    let back = TrainedModel::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(&back, model);
    let data = synth(0);
    let a = Classifier::new(Some(model), &data.classes).unwrap();
    let b = Classifier::new(Some(&back), &data.classes).unwrap();
    for u in data.test.vectors().take(100) {
        assert_eq!(a.similarities(u).unwrap(), b.similarities(u).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn locality_bound_holds_for_any_gamma(gamma in 15.0f64..200.0, beta in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut model = free_model().clone();
        model.mask.gamma = gamma;
        model.mask.beta = beta;
        let limit = 1.0 - 15.0 / gamma;
        let mut rng = CounterRng::new(seed);
        for _ in 0..50 {
            let u = normalize(&rng.gaussian_vec(model.dim())).unwrap();
            if model.anchors_image.max_similarity(&u).unwrap() > limit {
                continue;
            }
            let alpha = mask_weight(&u, &model.anchors_image, &model.mask).unwrap();
            prop_assert!(alpha <= beta * (-15.0f64).exp() * (1.0 + 1e-12));
            let moved = adapt_embed(&u, model.adapters.image(), alpha).unwrap();
            let diff: Vec<f64> = moved.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a - b).collect();
            prop_assert!(l2_norm(&diff) < 1e-5);
        }
    }
}
