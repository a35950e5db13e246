mod common;

use common::*;
use drq_core::io::{
    code_file_len, codes_from_bytes, codes_to_bytes, fvecs_from_bytes, head_from_bytes,
    head_to_bytes, label_sets, labels_from_bytes, labels_to_bytes, load_head, read_fvecs,
    save_head, write_fvecs, CODES_HEADER_LEN,
};
use drq_core::synth::synth_dataset_with_centers;
use drq_core::train::{hard_distortion, kmeans_init, LabelEmbeddings};
use drq_core::{
    encode_database, synth_dataset, train, Error, FeatureMatrix, RqModel,
    TrainConfig,
};

#[test]
fn nearest_center_accuracy_on_the_reference_mixture() {
    let s = synth_dataset_with_centers(10_000, 32, 10, 0.1, 7).unwrap();
    let centers: Vec<Vec<f64>> = s.centers.chunks(32).map(<[f64]>::to_vec).collect();
    let labels = s.features.labels().unwrap();
    let correct = s
        .features
        .iter_rows()
        .zip(labels)
        .filter(|(x, &l)| brute_nearest(x, &centers) as i64 == l)
        .count();
    // pinned for seed 7
    assert_eq!(correct, 10_000);
}

#[test]
fn zero_spread_mixture_quantizes_without_error() {
    let data = synth_dataset(40, 5, 4, 0.0, 9).unwrap();
    let cb = kmeans_init(&data, 4, 20, 1).unwrap();
    let model = RqModel::new(cb, 0.5, 20.0, 1).unwrap();
    assert!(hard_distortion(&data, &model).unwrap() < 1e-12);
}

#[test]
fn code_file_size_formula_holds() {
    let mut r = rng(3);
    for (k, m, n) in [(2, 1, 0), (2, 3, 5), (16, 4, 7), (256, 4, 9), (2048, 4, 3), (4096, 5, 4)] {
        let model = random_model(&mut r, k, 3, m);
        let db = encode_database(&random_features(&mut r, n, 3), &model).unwrap();
        let bytes = codes_to_bytes(&db).unwrap();
        let record = (m * k.trailing_zeros() as usize).div_ceil(8);
        assert_eq!(bytes.len(), CODES_HEADER_LEN + n * record + 4 * n + 4);
        assert_eq!(bytes.len(), code_file_len(n, m, k).unwrap());
        assert_eq!(codes_from_bytes(&bytes).unwrap().codes, db.codes());
    }
}

#[test]
fn k256_m4_records_are_eight_bytes() {
    let mut r = rng(4);
    let model = random_model(&mut r, 256, 3, 4);
    let db = encode_database(&random_features(&mut r, 10, 3), &model).unwrap();
    let bytes = codes_to_bytes(&db).unwrap();
    assert_eq!(bytes.len() - CODES_HEADER_LEN - 4, 10 * (4 + 4));
}

#[test]
fn truncated_and_mislabeled_files_are_rejected() {
    let mut r = rng(5);
    let model = random_model(&mut r, 4, 2, 2);
    let db = encode_database(&random_features(&mut r, 3, 2), &model).unwrap();
    let bytes = codes_to_bytes(&db).unwrap();
    assert!(matches!(codes_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    assert!(matches!(codes_from_bytes(&[]), Err(Error::Format(_))));
    let model_bytes = drq_core::io::model_to_bytes(&model).unwrap();
    assert!(codes_from_bytes(&model_bytes).is_err());
    assert!(drq_core::io::model_from_bytes(&bytes).is_err());
}

#[test]
fn head_file_round_trip_and_corruption() {
    let data = synth_dataset(120, 6, 3, 0.2, 1).unwrap();
    let emb = LabelEmbeddings::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]]).unwrap();
    let cfg = TrainConfig {
        k: 4,
        m: 2,
        enable_stage1: true,
        loss_flags: "hard,soft,joint,triplet,margin".parse().unwrap(),
        epochs_stage1: 2,
        epochs_stage2: 1,
        epochs_stage3: 1,
        ..TrainConfig::default()
    };
    let head = train(&data, &cfg, Some(&emb)).unwrap().head.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.drqh");
    save_head(&path, &head).unwrap();
    assert_eq!(load_head(&path).unwrap(), head);
    let bytes = head_to_bytes(&head).unwrap();
    for i in (0..bytes.len()).step_by(7) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x40;
        assert!(matches!(head_from_bytes(&bad), Err(Error::Format(_))));
    }
}

#[test]
fn vectors_and_labels_round_trip_through_files() {
    let data = synth_dataset(30, 4, 3, 0.2, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fvecs");
    write_fvecs(&path, &data).unwrap();
    let back = read_fvecs(&path, Some(4)).unwrap();
    for (a, b) in back.as_slice().iter().zip(data.as_slice()) {
        assert_eq!(*a, f64::from(*b as f32));
    }
    let sets = label_sets(&data).unwrap();
    assert_eq!(labels_from_bytes(&labels_to_bytes(&sets).unwrap()).unwrap(), sets);
}

#[test]
fn mixed_dimension_fvecs_are_rejected() {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&2i32.to_le_bytes());
    bytes.extend_from_slice(&1.0f32.to_le_bytes());
    bytes.extend_from_slice(&2.0f32.to_le_bytes());
    bytes.extend_from_slice(&1i32.to_le_bytes());
    bytes.extend_from_slice(&1.0f32.to_le_bytes());
    bytes.extend_from_slice(&0i32.to_le_bytes());
    assert!(fvecs_from_bytes(&bytes, None).is_err());
    assert!(fvecs_from_bytes(&[], None).is_err());
    let nan: Vec<u8> = [1i32.to_le_bytes(), f32::NAN.to_le_bytes()].concat();
    assert!(matches!(fvecs_from_bytes(&nan, None), Err(Error::Domain(_))));
    let empty = fvecs_from_bytes(&[], Some(7)).unwrap();
    assert_eq!((empty.rows(), empty.dim()), (0, 7));
    let _ = FeatureMatrix::empty(7).unwrap();
}
