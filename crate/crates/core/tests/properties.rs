//! Randomized invariants checked against independent oracles.

use mateloc::autodiff::{AttentionMask, Tape};
use mateloc::baselines::{icl_forward_on_tape, init_icl, IclConfig};
use mateloc::channel::{angle_delay_transform, apply_csi_noise, CsiMatrix, Location};
use mateloc::checkpoint::{decode_params, encode_params};
use mateloc::dataset::{coarse_location, knn_search, NeighborIndex};
use mateloc::evaluation::{error_summary, localization_error};
use mateloc::mateformer::{init_params, predict, AnalogyBatch, MateformerConfig};
use mateloc::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use mateloc::training::{lr_at_step, Schedule};
use num_complex::Complex;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    c
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols * rows).map(|i| a[(i % rows) * cols + i / rows]).collect()
}

fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tiny_mateformer(depth: usize, heads: usize) -> MateformerConfig {
    MateformerConfig { depth, d_model: 8 * heads, d_ff: 16, heads, num_antennas: 2, num_subcarriers: 3, location_scale: 10.0 }
}

fn random_batch(cfg: &MateformerConfig, p: usize, q: usize, rng: &mut ChaCha8Rng) -> AnalogyBatch {
    let len = cfg.csi_len();
    let csi = |rng: &mut ChaCha8Rng| (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    AnalogyBatch::new(
        (0..p).map(|_| csi(rng)).collect(),
        (0..p).map(|_| Location::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect(),
        (0..q).map(|_| csi(rng)).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gemm_variants_match_naive(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_vec(m * k, &mut rng), random_vec(k * n, &mut rng));
        let want = naive_matmul(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm_acc(&a, &b, &mut c, m, k, n);
        let mut c_tn = vec![0.0; m * n];
        gemm_tn_acc(&transpose(&a, m, k), &b, &mut c_tn, k, m, n);
        let mut c_nt = vec![0.0; m * n];
        gemm_nt_acc(&a, &transpose(&b, k, n), &mut c_nt, m, k, n);
        for i in 0..m * n {
            prop_assert!((c[i] - want[i]).abs() < 1e-12);
            prop_assert!((c_tn[i] - want[i]).abs() < 1e-12);
            prop_assert!((c_nt[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut allowed: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.6)).collect();
        for r in 0..rows {
            allowed[r * cols] = true;
        }
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![rows, cols], random_vec(rows * cols, &mut rng)).unwrap());
        let s = tape.softmax_rows(a, Some(&allowed)).unwrap();
        let v = tape.value(s).data();
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..cols {
                if !allowed[r * cols + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..5, d in 2usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, d], random_vec(rows * d, &mut rng)).unwrap());
        let g = tape.constant(Tensor::filled(vec![d], 1.0));
        let b = tape.constant(Tensor::zeros(vec![d]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn localization_error_is_a_metric(ax in -50.0..50.0f64, ay in -50.0..50.0f64, bx in -50.0..50.0f64, by in -50.0..50.0f64) {
        let (a, b) = (Location::new(ax, ay), Location::new(bx, by));
        prop_assert_eq!(localization_error(a, b), localization_error(b, a));
        prop_assert!(localization_error(a, b) >= 0.0);
        prop_assert_eq!(localization_error(a, a), 0.0);
        prop_assert_eq!(localization_error(a, b) == 0.0, a == b);
    }

    #[test]
    fn summary_matches_sort_oracle(values in prop::collection::vec(0.0..100.0f64, 1..300)) {
        let s = error_summary(&values).unwrap();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len();
        let rank = |q: f64| sorted[((q * n as f64).ceil() as usize).max(1) - 1];
        prop_assert_eq!(s.p10, rank(0.1));
        prop_assert_eq!(s.p90, rank(0.9));
        prop_assert_eq!(s.count, n);
        prop_assert!(s.p10 <= s.p90);
        prop_assert!((s.mean - values.iter().sum::<f64>() / n as f64).abs() < 1e-9);
    }

    #[test]
    fn knn_matches_full_sort(n in 1usize..120, k_frac in 0.0..1.0f64, lattice in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Location> = (0..n)
            .map(|_| if lattice {
                Location::new(f64::from(rng.random_range(0..6u32)), f64::from(rng.random_range(0..6u32)))
            } else {
                Location::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))
            })
            .collect();
        let query = Location::new(f64::from(rng.random_range(0..12u32)) * 0.5, f64::from(rng.random_range(0..12u32)) * 0.5);
        let k = ((n as f64 * k_frac) as usize).min(n);
        let got = knn_search(&NeighborIndex::from_points(pts.clone()), query, k).unwrap();
        let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (p.distance(query), i)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        prop_assert_eq!(got, all[..k].iter().map(|e| e.1).collect::<Vec<_>>());
    }

    #[test]
    fn coarse_location_stays_in_box(x in -30.0..30.0f64, y in -30.0..30.0f64, l in 0.0..8.0f64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = coarse_location(Location::new(x, y), l, &mut rng).unwrap();
        prop_assert!((c.x - x).abs() <= l + 1e-12 && (c.y - y).abs() <= l + 1e-12);
    }

    #[test]
    fn zero_noise_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..12).map(|_| Complex::new(rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0))).collect();
        let h = CsiMatrix::new(3, 4, values).unwrap();
        prop_assert_eq!(apply_csi_noise(&h, 0.0, &mut rng).unwrap(), h);
    }

    #[test]
    fn angle_delay_transform_preserves_energy(nt in 1usize..6, nc in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..nt * nc).map(|_| Complex::new(rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0))).collect();
        let h = CsiMatrix::new(nt, nc, values).unwrap();
        let ad: f64 = angle_delay_transform(&h).iter().map(|v| f64::from(*v).powi(2)).sum();
        prop_assert!((ad - h.energy()).abs() <= 1e-4 * h.energy().max(1.0));
    }

    #[test]
    fn schedule_never_increases(a in 0u64..400_000, b in 0u64..400_000) {
        let s = Schedule::full_scale();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at_step(hi, 1e-4, &s) <= lr_at_step(lo, 1e-4, &s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mateformer_ignores_pair_order(p in 1usize..10, q in 1usize..5, depth in 1usize..4, seed in any::<u64>()) {
        let cfg = tiny_mateformer(depth, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng).unwrap();
        let b = random_batch(&cfg, p, q, &mut rng);
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut rng);
        let permuted = AnalogyBatch::new(
            order.iter().map(|&i| b.embedded_csi[i].clone()).collect(),
            order.iter().map(|&i| b.embedded_locations[i]).collect(),
            b.query_csi.clone(),
        ).unwrap();
        let x = predict(&params.cast::<f64>(), &cfg, &[b]).unwrap();
        let y = predict(&params.cast::<f64>(), &cfg, &[permuted]).unwrap();
        for (u, v) in x[0].iter().zip(&y[0]) {
            prop_assert!(u.distance(*v) < 1e-9);
        }
    }

    #[test]
    fn mateformer_queries_are_independent(p in 1usize..8, q in 2usize..6, seed in any::<u64>()) {
        let cfg = tiny_mateformer(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng).unwrap().cast::<f64>();
        let b = random_batch(&cfg, p, q, &mut rng);
        let full = predict(&params, &cfg, &[b.clone()]).unwrap();
        for j in 0..q {
            let single = AnalogyBatch { query_csi: vec![b.query_csi[j].clone()], ..b.clone() };
            let s = predict(&params, &cfg, &[single]).unwrap();
            prop_assert!(s[0][0].distance(full[0][j]) < 1e-9);
        }
        // Bit-identical when another query (a masked key) changes.
        let mut changed = b.clone();
        changed.query_csi[q - 1].iter_mut().for_each(|v| *v = 0.5 - *v);
        let other = predict(&params, &cfg, &[changed]).unwrap();
        for j in 0..q - 1 {
            prop_assert_eq!(other[0][j].x.to_bits(), full[0][j].x.to_bits());
            prop_assert_eq!(other[0][j].y.to_bits(), full[0][j].y.to_bits());
        }
    }

    #[test]
    fn mateformer_group_results_do_not_depend_on_batchmates(p in 1usize..6, q in 1usize..4, seed in any::<u64>()) {
        let cfg = tiny_mateformer(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng).unwrap().cast::<f64>();
        let groups: Vec<AnalogyBatch> = (0..3).map(|_| random_batch(&cfg, p, q, &mut rng)).collect();
        let together = predict(&params, &cfg, &groups).unwrap();
        for (g, t) in groups.iter().zip(&together) {
            let alone = predict(&params, &cfg, std::slice::from_ref(g)).unwrap();
            for (a, b) in alone[0].iter().zip(t) {
                prop_assert!(a.distance(*b) < 1e-9);
            }
        }
    }

    #[test]
    fn icl_is_causal(p in 1usize..6, seed in any::<u64>()) {
        let m = tiny_mateformer(2, 2);
        let cfg = IclConfig::matching(&m, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_icl(&cfg, &mut rng).unwrap().cast::<f64>();
        let b = random_batch(&m, p, 1, &mut rng);
        let pos = rng.random_range(0..p);
        let run = |batch: &AnalogyBatch| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape);
            let f = icl_forward_on_tape(&mut tape, &bound, &cfg, std::slice::from_ref(batch)).unwrap();
            tape.value(f.all).data().to_vec()
        };
        let before = run(&b);
        // Changing the location token of pair `pos` (sequence slot 2·pos+1)
        // may only affect that slot and later ones.
        let mut changed = b.clone();
        changed.embedded_locations[pos] = Location::new(99.0, -99.0);
        changed.x_init = b.x_init;
        let after = run(&changed);
        for slot in 0..=2 * pos {
            prop_assert_eq!(&before[2 * slot..2 * slot + 2], &after[2 * slot..2 * slot + 2]);
        }
    }

    #[test]
    fn checkpoint_params_round_trip(seed in any::<u64>(), depth in 1usize..3) {
        let cfg = tiny_mateformer(depth, 2);
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (entries, blob) = encode_params(&params);
        prop_assert_eq!(decode_params(&entries, &blob).unwrap(), params);
        prop_assert!(decode_params(&entries, &blob[..blob.len() - 4]).is_err());
    }
}

#[test]
fn attention_mask_prefix_semantics() {
    let m = AttentionMask::key_prefix(5, 2).unwrap();
    for qi in 0..5 {
        for k in 0..5 {
            assert_eq!(m.allowed(qi, k), k < 2);
        }
    }
    let c = AttentionMask::causal(4);
    assert!(c.allowed(3, 0) && c.allowed(2, 2) && !c.allowed(1, 2));
}
