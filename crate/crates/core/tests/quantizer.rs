mod common;

use aqpim_core::channel_sort::ChannelPermutation;
use aqpim_core::kv::{generate_synthetic_kv, heavy_token_weights, KvDump, SyntheticSpec};
use aqpim_core::quantizer::*;
use aqpim_core::rng::stream;
use aqpim_core::{Error, Matrix};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn ident(d: usize, m: usize) -> ChannelPermutation {
    ChannelPermutation::identity(d, m).unwrap()
}

fn causal_softmax(n: usize, seed: u64) -> Matrix<f64> {
    let logits = gaussian(n, n, seed);
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        let z: f64 = (0..=i).map(|j| logits[(i, j)].exp()).sum();
        for j in 0..=i {
            s[(i, j)] = logits[(i, j)].exp() / z;
        }
    }
    s
}

#[test]
fn importance_weights_match_double_loop() {
    let s = causal_softmax(16, 3);
    let w = compute_importance_weights(&s, 4).unwrap();
    for j in 0..16 {
        let mut acc = 0.0;
        for i in 12..16 {
            acc += s[(i, j)];
        }
        assert!((w[j] - acc).abs() < 1e-15);
    }
    assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-6);
}

#[test]
fn importance_from_causal_queries_sums_to_t() {
    let q = gaussian(20, 8, 1);
    let k = gaussian(20, 8, 2);
    let s = causal_scores(&q, &k, 0.3).unwrap();
    let w = compute_importance_weights(&s, 7).unwrap();
    assert!((w.iter().sum::<f64>() - 7.0).abs() < 1e-9);
}

/// Plain Lloyd: nearest centroid (lowest index on ties), member mean; an empty
/// cluster jumps to the farthest not-yet-used point.
fn reference_lloyd(points: &Matrix<f64>, init: &Matrix<f64>, iters: usize) -> (Matrix<f64>, Vec<u32>) {
    let (n, d) = points.shape();
    let k = init.rows();
    let mut c = init.clone();
    let mut a = vec![0u32; n];
    let mut dist = vec![0.0; n];
    for _ in 0..iters {
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for j in 0..k {
                let mut s = 0.0;
                for x in 0..d {
                    s += (points[(i, x)] - c[(j, x)]) * (points[(i, x)] - c[(j, x)]);
                }
                if s < best.0 {
                    best = (s, j);
                }
            }
            a[i] = best.1 as u32;
            dist[i] = best.0;
        }
        let mut used = vec![false; n];
        for j in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| a[i] as usize == j).collect();
            if members.is_empty() {
                let far = (0..n).filter(|&i| !used[i] && dist[i] > 0.0).fold(None, |b: Option<usize>, i| match b {
                    Some(bi) if dist[bi] >= dist[i] => Some(bi),
                    _ => Some(i),
                });
                if let Some(i) = far {
                    used[i] = true;
                    for x in 0..d {
                        c[(j, x)] = points[(i, x)];
                    }
                }
                continue;
            }
            for x in 0..d {
                let mut s = 0.0;
                for &i in &members {
                    s += 1.0 * points[(i, x)];
                }
                c[(j, x)] = s / members.len() as f64;
            }
        }
    }
    (c, a)
}

#[test]
fn uniform_weights_bit_match_plain_lloyd() {
    for seed in 0..20 {
        let p = gaussian(60, 3, seed);
        let w = vec![1.0; 60];
        let init = kmeans_pp_init(&p, &w, 6, &mut stream(seed, &[9]));
        let r = weighted_lloyd(&p, &w, init.clone(), 4);
        let (c, a) = reference_lloyd(&p, &init, 4);
        assert_eq!(r.assignments, a, "seed {seed}");
        for (x, y) in r.centroids.as_slice().iter().zip(c.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits(), "seed {seed}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn objective_never_increases(seed in any::<u64>(), n in 2usize..80, k in 1usize..10, d in 1usize..5) {
        let k = k.min(n);
        let p = gaussian(n, d, seed);
        let w = uniform_vec(n, 0.0, 5.0, seed);
        let r = weighted_kmeans(&p, &w, k, 6, seed).unwrap();
        for pair in r.objective_per_iter.windows(2) {
            prop_assert!(pair[1] <= pair[0], "{:?}", r.objective_per_iter);
        }
        prop_assert!(r.assignments.iter().all(|&a| (a as usize) < k));
    }

    #[test]
    fn recent_ring_holds_newest_tokens(n in 0usize..60, sink in 0usize..6, recent in 0usize..10, extra in 0usize..20) {
        let spec = SyntheticSpec::new(n.max(1), 4, 1, 0.5, n as u64);
        let d: KvDump<f64> = generate_synthetic_kv(&spec).unwrap();
        let cfg = PqConfig { m: 2, k: 4, sink_tokens: sink, recent_tokens: recent, ..Default::default() };
        let mut ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(4, 2), &ident(4, 2)).unwrap();
        for i in 0..extra {
            let v = gaussian_vec(4, 500 + i as u64);
            ckv.push_token(&v, &v).unwrap();
        }
        let total = n.max(1) + extra;
        prop_assert_eq!(ckv.n_tokens(), total);
        prop_assert_eq!(ckv.recent_len(), recent.min(total.saturating_sub(sink)));
        prop_assert_eq!(ckv.sink_len(), sink.min(total));
        for t in 0..total {
            prop_assert_eq!(ckv.key_indices().is_full_precision(t), ckv.full_precision_row(t).is_some());
            if !ckv.key_indices().is_full_precision(t) {
                prop_assert!(ckv.key_indices().codes(t).iter().all(|&c| (c as usize) < ckv.key_codebook().k()));
            }
        }
    }
}

#[test]
fn own_centroid_per_point_gives_zero_objective() {
    let p = gaussian(12, 3, 4);
    let r = weighted_kmeans(&p, &[1.0; 12], 12, 4, 1).unwrap();
    assert_eq!(*r.objective_per_iter.last().unwrap(), 0.0);
}

#[test]
fn heavy_pair_pulls_single_centroid() {
    let p = Matrix::<f64>::from_vec(4, 2, vec![0., 0., 0., 1., 50., 50., 50., 51.]).unwrap();
    let w = [1.0, 1.0, 1000.0, 1000.0];
    let r = weighted_kmeans(&p, &w, 1, 4, 3).unwrap();
    let heavy_mean = [50.0f64, 50.5];
    for x in 0..2 {
        let got = r.centroids[(0, x)];
        assert!((got - heavy_mean[x]).abs() / heavy_mean[x] < 1e-3);
        // Exact weighted mean of all four points.
        let exact = (0..4).map(|i| w[i] * p[(i, x)]).sum::<f64>() / w.iter().sum::<f64>();
        assert!((got - exact).abs() < 1e-12);
    }
}

#[test]
fn nothing_to_cluster_when_sequence_is_short() {
    let d: KvDump<f32> = generate_synthetic_kv(&SyntheticSpec::new(40, 64, 4, 0.1, 1)).unwrap();
    let cfg = PqConfig::default();
    let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(64, 32), &ident(64, 32)).unwrap();
    assert!(ckv.key_codebook().is_empty() && ckv.value_codebook().is_empty());
    assert_eq!(ckv.n_quantized(), 0);
    assert!(matches!(quantization_error(d.head(0, 0).unwrap(), &ckv), Err(Error::NothingQuantized)));
}

/// Every token picks one of `k` fixed patterns per subvector slot, independently.
fn patterned_dump(n: usize, d: usize, m: usize, k: usize, seed: u64) -> KvDump<f64> {
    let g = d / m;
    let patterns = gaussian(m * k, g, seed);
    let mut rng = stream(seed, &[11]);
    let mut make = || {
        let mut data = Vec::new();
        for t in 0..n {
            for s in 0..m {
                // First k tokens cover every pattern.
                let j = if t < k { t } else { rng.random_range(0..k) };
                data.extend_from_slice(patterns.row(s * k + j));
            }
        }
        Matrix::from_vec(n, d, data).unwrap()
    };
    let keys = make();
    let values = make();
    KvDump::new(1, 1, vec![keys], vec![values], None).unwrap()
}

#[test]
fn exact_patterns_give_zero_error() {
    let dump = patterned_dump(300, 16, 4, 8, 2);
    let cfg = PqConfig { m: 4, k: 8, sink_tokens: 0, recent_tokens: 0, ..Default::default() };
    let ckv = build_compressed_kv(&dump, 0, 0, &cfg, &ident(16, 4), &ident(16, 4)).unwrap();
    let e = quantization_error(dump.head(0, 0).unwrap(), &ckv).unwrap();
    assert!(e.mse <= 1e-6, "{e:?}");
}

#[test]
fn warm_started_window_does_not_regress() {
    let base = gaussian(200, 8, 5);
    let mut rows: Vec<Vec<f64>> = base.iter_rows().map(|r| r.to_vec()).collect();
    rows.extend(base.iter_rows().map(|r| r.to_vec()));
    let x = Matrix::from_rows(&rows).unwrap();
    let dump = KvDump::new(1, 1, vec![x.clone()], vec![x], None).unwrap();
    let cfg = PqConfig { m: 2, k: 16, window_len: 200, sink_tokens: 0, recent_tokens: 0, ..Default::default() };
    let ckv = build_compressed_kv(&dump, 0, 0, &cfg, &ident(8, 2), &ident(8, 2)).unwrap();
    let w = ckv.key_codebook().windows();
    assert_eq!(w.len(), 2);
    let first = *w[0].objective_per_iter.last().unwrap();
    let second = *w[1].objective_per_iter.last().unwrap();
    assert!(second <= first + 1e-6, "{second} > {first}");
}

#[test]
fn windows_cover_the_quantized_range() {
    let d: KvDump<f32> = generate_synthetic_kv(&SyntheticSpec::new(250, 8, 10, 0.3, 1)).unwrap();
    let cfg = PqConfig { m: 2, k: 8, window_len: 64, ..Default::default() };
    let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(8, 2), &ident(8, 2)).unwrap();
    let ranges: Vec<(usize, usize)> = ckv.key_codebook().windows().iter().map(|w| (w.start, w.end)).collect();
    assert_eq!(ranges, vec![(8, 72), (72, 136), (136, 200), (200, 218)]);
    for t in 8..218 {
        assert_eq!(ckv.key_indices().window(t), Some((t - 8) / 64));
    }
    for w in ckv.key_codebook().windows() {
        assert!(w.tables.iter().all(|t| t.rows() == 8));
    }
}

fn small_cache(seed: u64) -> (KvDump<f64>, CompressedKv<f64>, PqConfig) {
    let d: KvDump<f64> = generate_synthetic_kv(&SyntheticSpec::new(60, 8, 6, 0.4, seed)).unwrap();
    let cfg = PqConfig { m: 4, k: 8, sink_tokens: 2, recent_tokens: 5, ..Default::default() };
    let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(8, 4), &ident(8, 4)).unwrap();
    (d, ckv, cfg)
}

#[test]
fn append_without_eviction_only_grows_ring() {
    let d: KvDump<f64> = generate_synthetic_kv(&SyntheticSpec::new(5, 8, 2, 0.4, 1)).unwrap();
    let cfg = PqConfig { m: 4, k: 8, sink_tokens: 2, recent_tokens: 5, ..Default::default() };
    let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(8, 4), &ident(8, 4)).unwrap();
    assert_eq!(ckv.recent_len(), 3);
    let before = ckv.key_indices().clone();
    let v = gaussian_vec(8, 3);
    let after = append_decode_token(ckv, &v, &v).unwrap();
    assert_eq!(after.recent_len(), 4);
    assert_eq!(&after.key_indices().all_codes()[..before.all_codes().len()], before.all_codes());
}

#[test]
fn evicted_centroid_maps_to_itself() {
    let (_, mut ckv, _) = small_cache(4);
    let kc = ckv.key_codebook().clone();
    let vc = ckv.value_codebook().clone();
    let k7: Vec<f64> = (0..4).flat_map(|s| kc.centroid(0, s, 7).to_vec()).collect();
    let v7: Vec<f64> = (0..4).flat_map(|s| vc.centroid(0, s, 7).to_vec()).collect();
    ckv.push_token(&k7, &v7).unwrap();
    for _ in 0..5 {
        let z = gaussian_vec(8, 99);
        ckv.push_token(&z, &z).unwrap();
    }
    // Token 60 entered the ring first of the appended ones and is now evicted.
    assert_eq!(ckv.key_indices().codes(60), &[7, 7, 7, 7]);
    assert_eq!(ckv.value_indices().codes(60), &[7, 7, 7, 7]);
}

#[test]
fn evicted_token_uses_brute_force_nearest() {
    for seed in 0..10 {
        let (_, mut ckv, _) = small_cache(seed);
        let kc = ckv.key_codebook().clone();
        let oldest_recent = ckv.fp_recent_keys().row(0).to_vec();
        let z = gaussian_vec(8, seed + 100);
        let evicted = ckv.push_token(&z, &z).unwrap().unwrap();
        assert_eq!(evicted, 55);
        for s in 0..4 {
            let sub = &oldest_recent[s * 2..s * 2 + 2];
            let mut best = (f64::INFINITY, 0u16);
            for j in 0..kc.k() {
                let c = kc.centroid(0, s, j as u16);
                let dist = (sub[0] - c[0]).powi(2) + (sub[1] - c[1]).powi(2);
                if dist < best.0 {
                    best = (dist, j as u16);
                }
            }
            assert_eq!(ckv.key_indices().codes(55)[s], best.1);
        }
    }
}

#[test]
fn zero_codebook_error_is_mean_square_norm() {
    let n = 30;
    let d = 8;
    let zero = |k| WindowCodebook { start: 0, end: n, tables: vec![Matrix::zeros(k, 2); 4], objective_per_iter: vec![] };
    let cfg = PqConfig { m: 4, k: 3, ..Default::default() };
    let cb = Codebook::new(4, 3, 2, vec![zero(3)]);
    let idx = PqIndices::from_codes(4, vec![1; n * 4], vec![0; n]).unwrap();
    let ckv = CompressedKv::from_quantized(cfg, cb.clone(), cb, idx.clone(), idx).unwrap();
    let keys = gaussian(n, d, 1);
    let values = gaussian(n, d, 2);
    let e = quantization_error(HeadSlice { keys: &keys, values: &values, weights: None }, &ckv).unwrap();
    let sq = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
    assert!((e.key_mse - sq(&keys)).abs() < 1e-12);
    assert!((e.value_mse - sq(&values)).abs() < 1e-12);
}

#[test]
fn error_matches_brute_force_reconstruction() {
    let (d, ckv, _) = small_cache(8);
    let w: Vec<f64> = uniform_vec(60, 0.1, 3.0, 1);
    let slice = HeadSlice { weights: Some(&w), ..d.head(0, 0).unwrap() };
    let e = quantization_error(slice, &ckv).unwrap();
    let kh = ckv.reconstruct_keys();
    let vh = ckv.reconstruct_values();
    let (mut se, mut wse, mut ws, mut c) = (0.0, 0.0, 0.0, 0.0);
    for t in 2..55 {
        let mut ek = 0.0;
        let mut ev = 0.0;
        for x in 0..8 {
            ek += (slice.keys[(t, x)] - kh[(t, x)]).powi(2);
            ev += (slice.values[(t, x)] - vh[(t, x)]).powi(2);
        }
        se += (ek + ev) / 8.0;
        wse += w[t] * (ek + ev) / 16.0;
        ws += w[t];
        c += 2.0;
    }
    assert!((e.mse - se / c).abs() < 1e-12);
    assert!((e.weighted_mse - wse / ws).abs() < 1e-12);
}

#[test]
fn tighter_clusters_quantize_better() {
    let cfg = PqConfig { m: 4, k: 8, ..Default::default() };
    let err = |spread| {
        let d: KvDump<f32> = generate_synthetic_kv(&SyntheticSpec::new(400, 16, 8, spread, 3)).unwrap();
        let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(16, 4), &ident(16, 4)).unwrap();
        quantization_error(d.head(0, 0).unwrap(), &ckv).unwrap().mse
    };
    assert!(err(0.01) < err(10.0));
}

#[test]
fn heavy_tokens_benefit_from_weighting() {
    let (mut weighted, mut uniform) = (0.0, 0.0);
    for seed in 0..5 {
        let d: KvDump<f64> = generate_synthetic_kv(&SyntheticSpec::new(600, 16, 64, 0.5, seed)).unwrap();
        let (w, heavy) = heavy_token_weights::<f64>(600, 0.05, 100.0, seed);
        let cfg = PqConfig { m: 4, k: 16, ..Default::default() };
        let heavy_err = |weights: Option<&[f64]>| {
            let slice = HeadSlice { weights, ..d.head(0, 0).unwrap() };
            let ckv = compress_head(slice, &cfg, &ident(16, 4), &ident(16, 4), &[seed]).unwrap();
            let errs = token_errors(slice, &ckv).unwrap();
            heavy.iter().filter_map(|&t| errs[t]).map(|(k, v)| k + v).sum::<f64>()
        };
        weighted += heavy_err(Some(&w));
        uniform += heavy_err(None);
    }
    assert!(weighted < uniform, "{weighted} vs {uniform}");
}

#[test]
fn sidecar_round_trips() {
    let (_, mut ckv, _) = small_cache(2);
    for i in 0..7 {
        let v = gaussian_vec(8, i);
        ckv.push_token(&v, &v).unwrap();
    }
    let bytes = encode_sidecar(&ckv);
    assert_eq!(&bytes[..4], b"AQPQ");
    let back: CompressedKv<f64> = decode_sidecar(&bytes).unwrap();
    // Sidecar payloads are f32.
    let as32 = |c: &CompressedKv<f64>| encode_sidecar(c);
    assert_eq!(as32(&back), bytes);
    assert_eq!(back.key_indices(), ckv.key_indices());
    for cut in [3, 40, bytes.len() - 1] {
        assert!(decode_sidecar::<f32>(&bytes[..cut]).is_err());
    }
    let dir = tempfile::tempdir().unwrap();
    write_sidecar(&ckv, dir.path().join("c.aqpq")).unwrap();
    let again: CompressedKv<f64> = read_sidecar(dir.path().join("c.aqpq")).unwrap();
    assert_eq!(again, back);
}

#[test]
fn spill_when_nothing_was_clustered() {
    let d: KvDump<f64> = generate_synthetic_kv(&SyntheticSpec::new(6, 8, 2, 0.4, 1)).unwrap();
    let cfg = PqConfig { m: 4, k: 8, sink_tokens: 2, recent_tokens: 4, ..Default::default() };
    let mut ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(8, 4), &ident(8, 4)).unwrap();
    let v = gaussian_vec(8, 1);
    assert_eq!(ckv.push_token(&v, &v).unwrap(), Some(2));
    assert_eq!(ckv.spill_len(), 1);
    assert_eq!(ckv.reconstruct_keys().row(2), d.keys(0, 0).unwrap().row(2));
}

#[test]
fn build_is_deterministic_and_checks_config() {
    let (d, a, cfg) = small_cache(6);
    let b = build_compressed_kv(&d, 0, 0, &cfg, &ident(8, 4), &ident(8, 4)).unwrap();
    assert_eq!(a, b);
    let bad = PqConfig { m: 3, ..cfg.clone() };
    assert!(build_compressed_kv(&d, 0, 0, &bad, &ident(8, 4), &ident(8, 4)).is_err());
    let big = PqConfig { k: 600, ..cfg };
    assert!(matches!(
        build_compressed_kv(&d, 0, 0, &big, &ident(8, 4), &ident(8, 4)),
        Err(Error::PageResidency { .. })
    ));
}

#[test]
fn compression_accounting_at_long_context() {
    let a = PqConfig::default().compression(32 * 1024, 128);
    assert_eq!(a.raw_bytes, 2 * 32768 * 128 * 2);
    assert_eq!(a.index_bits, 9);
    assert_eq!(a.full_precision_bytes, 2 * 40 * 128 * 2);
    assert_eq!(a.codebook_bytes, 2 * 512 * 128 * 2);
    assert!((a.factor - 6.53).abs() / 6.53 <= 0.05, "{}", a.factor);
}
