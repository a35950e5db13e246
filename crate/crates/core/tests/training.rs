mod common;

use common::*;
use drq_core::train::{kmeans, CodebookInit, LabelEmbeddings, ScaleInit};
use drq_core::{synth_dataset, train, Error, FeatureMatrix, LossFlags, TrainConfig, TrainOutput};

fn small_config() -> TrainConfig {
    TrainConfig {
        k: 8,
        m: 3,
        seed: 5,
        batch_size: 64,
        epochs_stage2: 3,
        epochs_stage3: 4,
        ..TrainConfig::default()
    }
}

fn data() -> FeatureMatrix {
    synth_dataset(400, 8, 4, 0.15, 3).unwrap()
}

fn strip_time(out: &TrainOutput) -> Vec<String> {
    out.log
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.wall_ms = 0.0;
            serde_json::to_string(&e).unwrap()
        })
        .collect()
}

#[test]
fn same_seed_same_model_regardless_of_threads() {
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&data(), &small_config(), None).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.model, b.model);
    assert_eq!(strip_time(&a), strip_time(&b));
    let c = run(1);
    assert_eq!(a.model, c.model);
}

#[test]
fn logged_losses_are_nonnegative() {
    let cfg = TrainConfig {
        loss_flags: LossFlags::ALL,
        enable_stage1: true,
        epochs_stage1: 2,
        ..small_config()
    };
    let emb = LabelEmbeddings::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.6, 0.8, 0.0],
    ])
    .unwrap();
    let out = train(&data(), &cfg, Some(&emb)).unwrap();
    assert!(out.head.is_some());
    assert!(out.log.iter().any(|e| e.stage == 1));
    for e in &out.log {
        for v in [e.e_hard, e.e_soft, e.e_joint, e.triplet, e.adaptive_margin].into_iter().flatten() {
            assert!(v >= 0.0, "{e:?}");
        }
        assert!(e.total >= 0.0);
    }
}

#[test]
fn hard_only_training_never_regresses_from_kmeans() {
    let cfg = TrainConfig {
        m: 1,
        loss_flags: "hard".parse().unwrap(),
        ..small_config()
    };
    let out = train(&data(), &cfg, None).unwrap();
    assert!(out.final_e_hard <= out.init_e_hard);
}

#[test]
fn one_codeword_per_point_has_zero_distortion() {
    let mut r = rng(8);
    let x = random_features(&mut r, 8, 3);
    let cfg = TrainConfig {
        m: 1,
        ..small_config()
    };
    let out = train(&x, &cfg, None).unwrap();
    assert!(out.init_e_hard < 1e-12);
    assert!(out.final_e_hard <= out.init_e_hard);
}

#[test]
fn kmeans_recovers_separated_clusters() {
    let x = synth_dataset(300, 6, 3, 0.0, 1).unwrap();
    let km = kmeans(&x, 3, 50, 2).unwrap();
    let total: f64 = km.sse.iter().sum();
    assert!(total < 1e-20, "sse {total}");
}

#[test]
fn ablation_flags_change_the_log() {
    let run = |flags: &str| {
        let cfg = TrainConfig {
            loss_flags: flags.parse().unwrap(),
            keep_best: false,
            ..small_config()
        };
        strip_time(&train(&data(), &cfg, None).unwrap())
    };
    let full = run("hard,soft,joint");
    assert_ne!(full, run("soft"));
    assert_ne!(full, run("hard,soft"));
    assert_ne!(full, run("hard"));
}

#[test]
fn refinement_without_labels_is_a_config_error() {
    let unlabeled = FeatureMatrix::new(data().as_slice().to_vec(), 8).unwrap();
    let cfg = TrainConfig {
        loss_flags: "hard,soft,triplet".parse().unwrap(),
        enable_stage1: true,
        ..small_config()
    };
    assert!(matches!(train(&unlabeled, &cfg, None), Err(Error::Config(_))));
}

#[test]
fn margin_loss_without_embeddings_is_a_config_error() {
    let cfg = TrainConfig {
        loss_flags: "hard,margin".parse().unwrap(),
        enable_stage1: true,
        ..small_config()
    };
    assert!(matches!(train(&data(), &cfg, None), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig { k: 12, ..small_config() },
        TrainConfig { m: 0, ..small_config() },
        TrainConfig { gamma: 0.0, ..small_config() },
        TrainConfig { lr: -1.0, ..small_config() },
        TrainConfig { batch_size: 0, ..small_config() },
    ] {
        assert!(matches!(train(&data(), &cfg, None), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn alternative_inits_and_annealing_run() {
    for cfg in [
        TrainConfig { init: CodebookInit::Random, ..small_config() },
        TrainConfig { scale_init: ScaleInit::DataDriven, ..small_config() },
        TrainConfig { gamma_final: Some(200.0), ..small_config() },
    ] {
        let out = train(&data(), &cfg, None).unwrap();
        assert!(out.final_e_hard.is_finite());
        assert!(out.final_e_hard <= out.init_e_hard);
    }
}

#[test]
fn config_round_trips_through_json() {
    let cfg = TrainConfig {
        gamma_final: Some(50.0),
        head_widths: Some((4, 3)),
        ..small_config()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn loss_flags_parse_and_print() {
    let f: LossFlags = "soft, joint".parse().unwrap();
    assert!(f.soft_distortion && f.joint_central && !f.hard_distortion);
    assert_eq!(f.to_string().parse::<LossFlags>().unwrap(), f);
    assert!("soft,bogus".parse::<LossFlags>().is_err());
}
