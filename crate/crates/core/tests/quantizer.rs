mod common;

use common::*;
use drq_core::{
    encode, encode_codes, hard_quantize, pack_codes, packed_len, reconstruct_hard,
    reconstruct_soft, soft_quantize, unpack_codes, Codebook, CodeSequence, RqModel,
};
use proptest::prelude::*;

fn codebook_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=16, 1usize..=6).prop_flat_map(|(k, d)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), k),
            prop::collection::vec(-3.0f64..3.0, d),
        )
    })
}

fn model_strategy() -> impl Strategy<Value = (RqModel, Vec<f64>)> {
    (1u32..=5, 1usize..=6, 1usize..=5, 0.05f64..1.5, any::<u64>()).prop_map(|(bits, d, m, w, seed)| {
        let mut r = rng(seed);
        let k = 1usize << bits;
        let cb = random_codebook(&mut r, k, d);
        let x = gaussian_vec(&mut r, d);
        (RqModel::new(cb, w, 20.0, m).unwrap(), x)
    })
}

proptest! {
    #[test]
    fn hard_quantize_matches_exhaustive_scan((rows, x) in codebook_strategy()) {
        let cb = Codebook::from_rows(&rows).unwrap();
        let (idx, q) = hard_quantize(&x, &cb).unwrap();
        prop_assert_eq!(idx, brute_nearest(&x, &rows));
        prop_assert_eq!(q, rows[idx].clone());
    }

    #[test]
    fn soft_assignment_is_a_distribution(
        (rows, x) in codebook_strategy(),
        log_gamma in -3.0f64..6.0,
    ) {
        let cb = Codebook::from_rows(&rows).unwrap();
        let s = soft_quantize(&x, &cb, 10f64.powf(log_gamma)).unwrap();
        prop_assert!(s.probs.iter().all(|p| *p >= 0.0));
        prop_assert!((s.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn residuals_telescope((model, x) in model_strategy()) {
        let (codes, trace) = encode(&x, &model).unwrap();
        for m in 1..=model.levels() {
            let recon = reconstruct_hard(&codes, &model, m).unwrap();
            let scale = norm(&x).max(1.0);
            for ((xi, ri), hi) in x.iter().zip(&recon).zip(trace.state(m)) {
                prop_assert!((xi - ri - hi).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn prefixes_match_shorter_encodings((model, x) in model_strategy()) {
        let full = encode_codes(&x, &model).unwrap();
        for m in 1..=model.levels() {
            let short = encode_codes(&x, &model.with_levels(m).unwrap()).unwrap();
            prop_assert_eq!(full.slice_prefix(m).unwrap(), short);
        }
    }

    #[test]
    fn recurrence_matches_stacked_codebooks((model, x) in model_strategy()) {
        let (codes, trace) = encode(&x, &model).unwrap();
        let (expected, residual) = stacked_encode(&x, &stacked_codebooks(&model));
        prop_assert_eq!(codes.indices(), expected.as_slice());
        prop_assert_eq!(trace.state(model.levels()), residual.as_slice());
    }

    #[test]
    fn per_level_errors_match_partials((model, x) in model_strategy()) {
        let (codes, trace) = encode(&x, &model).unwrap();
        for m in 1..=model.levels() {
            let hard = reconstruct_hard(&codes, &model, m).unwrap();
            let soft = reconstruct_soft(&trace, m).unwrap();
            prop_assert!((trace.per_level_hard_err[m - 1] - sq_dist(&hard, &x).sqrt()).abs() < 1e-9);
            prop_assert!((trace.per_level_soft_err[m - 1] - sq_dist(&soft, &x).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn pack_round_trip(bits in 1u32..=16, raw in prop::collection::vec(any::<u32>(), 1..12)) {
        let k = 1usize << bits;
        let codes = CodeSequence::new(raw.iter().map(|v| v % k as u32).collect());
        let packed = pack_codes(&codes, k).unwrap();
        prop_assert_eq!(packed.len(), (codes.levels() * bits as usize).div_ceil(8));
        prop_assert_eq!(packed.len(), packed_len(codes.levels(), k).unwrap());
        prop_assert_eq!(unpack_codes(&packed, k, codes.levels()).unwrap(), codes);
    }

    #[test]
    fn parameter_count_ignores_depth(bits in 1u32..=8, d in 1usize..=64, m in 1usize..=8) {
        let k = 1usize << bits;
        let model = RqModel::new(Codebook::new(vec![0.5; k * d], d).unwrap(), 0.5, 1.0, m).unwrap();
        prop_assert_eq!(model.parameter_count(), k * d + 1);
    }
}

#[test]
fn sharp_softmax_picks_hard_index_on_unit_data() {
    let mut r = rng(21);
    let mut checked = 0;
    while checked < 200 {
        let rows: Vec<Vec<f64>> = (0..8).map(|_| unit_vec(&mut r, 5)).collect();
        let x = unit_vec(&mut r, 5);
        let mut d: Vec<f64> = rows.iter().map(|c| sq_dist(c, &x).sqrt()).collect();
        d.sort_by(f64::total_cmp);
        if d[1] - d[0] < 1e-3 {
            continue;
        }
        checked += 1;
        let cb = Codebook::from_rows(&rows).unwrap();
        let (hard, _) = hard_quantize(&x, &cb).unwrap();
        for gamma in [1e4, 1e5, 1e6] {
            let p = soft_quantize(&x, &cb, gamma).unwrap().probs;
            let argmax = (0..8).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            assert_eq!(argmax, hard);
        }
    }
}

#[test]
fn single_codeword_soft_equals_hard() {
    let mut r = rng(22);
    let model = RqModel::new_any_k(random_codebook(&mut r, 1, 4), 0.6, 3.0, 3).unwrap();
    let x = gaussian_vec(&mut r, 4);
    let (_, trace) = encode(&x, &model).unwrap();
    for m in 0..3 {
        assert!((trace.per_level_hard_err[m] - trace.per_level_soft_err[m]).abs() < 1e-12);
    }
}
