mod common;

use aqpim_core::attention::*;
use aqpim_core::channel_sort::ChannelPermutation;
use aqpim_core::kv::{generate_synthetic_kv, KvDump, SyntheticSpec};
use aqpim_core::quantizer::*;
use aqpim_core::rng::stream;
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn ident(d: usize, m: usize) -> ChannelPermutation {
    ChannelPermutation::identity(d, m).unwrap()
}

/// Random codebooks and indices with every token quantized.
fn random_cache(n: usize, m: usize, k: usize, d: usize, seed: u64) -> CompressedKv<f64> {
    let g = d / m;
    let book = |s| {
        let tables = (0..m).map(|i| gaussian(k, g, s * 1000 + i as u64)).collect();
        Codebook::new(m, k, g, vec![WindowCodebook { start: 0, end: n, tables, objective_per_iter: vec![] }])
    };
    let mut rng = stream(seed, &[3]);
    let mut idx = || {
        let codes = (0..n * m).map(|_| rng.random_range(0..k as u16)).collect();
        PqIndices::from_codes(m, codes, vec![0; n]).unwrap()
    };
    let cfg = PqConfig { m, k, ..Default::default() };
    let (ki, vi) = (idx(), idx());
    CompressedKv::from_quantized(cfg, book(seed), book(seed + 1), ki, vi).unwrap()
}

#[test]
fn exact_matches_naive_implementation() {
    for seed in 0..10 {
        let k = gaussian(64, 32, seed);
        let v = gaussian(64, 32, seed + 50);
        let q = gaussian_vec(32, seed + 99);
        let scale = 1.0 / 32f64.sqrt();
        let got = exact_attention(&q, &k, &v, scale).unwrap();
        let (out, p) = naive_attention(&q, &k, &v, scale);
        assert!(max_rel(&got.out, &out) <= 1e-6);
        assert!(max_rel(got.scores.as_ref().unwrap(), &p) <= 1e-6);
    }
}

#[test]
fn exact_in_f32_tracks_f64() {
    let k = gaussian32(64, 32, 1);
    let v = gaussian32(64, 32, 2);
    let q: Vec<f32> = gaussian_vec(32, 3).iter().map(|&x| x as f32).collect();
    let got = exact_attention(&q, &k, &v, default_scale(32)).unwrap();
    let (out, _) = naive_attention(
        &q.iter().map(|&x| x as f64).collect::<Vec<_>>(),
        &k.map(|x| x as f64),
        &v.map(|x| x as f64),
        1.0 / 32f64.sqrt(),
    );
    let got64: Vec<f64> = got.out.iter().map(|&x| x as f64).collect();
    assert!(max_rel(&got64, &out) <= 1e-5);
}

#[test]
fn lookup_sum_equals_reconstructed_product() {
    for seed in 0..10 {
        let ckv = random_cache(256, 8, 16, 64, seed);
        let q = gaussian_vec(64, seed + 7);
        let logits = pq_logits(&q, &ckv, Rounding::Exact32).unwrap();
        // Explicit reconstruction, independent of the cache helpers.
        let mut expect = Vec::new();
        for t in 0..256 {
            let mut s = 0.0;
            for sub in 0..8 {
                let c = ckv.key_codebook().table(0, sub).row(ckv.key_indices().codes(t)[sub] as usize);
                for x in 0..8 {
                    s += q[sub * 8 + x] * c[x];
                }
            }
            expect.push(s);
        }
        assert!(max_rel(&logits, &expect) <= 1e-5);
    }
}

#[test]
fn identity_codebook_reproduces_exact_attention() {
    for seed in 0..5 {
        let n = 128;
        let keys = gaussian(n, 64, seed);
        let values = gaussian(n, 64, seed + 1);
        let cfg = PqConfig { m: 8, k: n, sink_tokens: 0, recent_tokens: 0, row_buffer_bytes: 4096, ..Default::default() };
        let slice = HeadSlice { keys: &keys, values: &values, weights: None };
        let ckv = compress_head(slice, &cfg, &ident(64, 8), &ident(64, 8), &[seed]).unwrap();
        assert_eq!(quantization_error(slice, &ckv).unwrap().mse, 0.0);
        let q = gaussian_vec(64, seed + 2);
        let scale = default_scale(64);
        let a = pq_attention(&q, &ckv, scale, Rounding::Exact32).unwrap();
        let e = exact_attention(&q, &keys, &values, scale).unwrap();
        assert!(rel_err(&a.out, &e.out) <= 1e-4);
    }
}

#[test]
fn full_precision_path_is_exact() {
    let d: KvDump<f64> = generate_synthetic_kv(&SyntheticSpec::new(30, 16, 3, 0.5, 2)).unwrap();
    let cfg = PqConfig { m: 4, k: 8, ..Default::default() };
    let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(16, 4), &ident(16, 4)).unwrap();
    let q = gaussian_vec(16, 1);
    let a = pq_attention(&q, &ckv, 0.25, Rounding::Exact32).unwrap();
    let e = exact_attention(&q, d.keys(0, 0).unwrap(), d.values(0, 0).unwrap(), 0.25).unwrap();
    assert!(rel_err(&a.out, &e.out) <= 1e-6);
}

#[test]
fn scores_normalize() {
    let ckv = random_cache(100, 4, 8, 16, 1);
    let q = gaussian_vec(16, 5);
    let s: f64 = pq_attention(&q, &ckv, 0.25, Rounding::Exact32).unwrap().scores.unwrap().iter().sum();
    assert!((s - 1.0).abs() <= 1e-5);
    let ckv32 = {
        let d: KvDump<f32> = generate_synthetic_kv(&SyntheticSpec::new(300, 16, 10, 0.5, 1)).unwrap();
        let cfg = PqConfig { m: 4, k: 16, ..Default::default() };
        build_compressed_kv(&d, 0, 0, &cfg, &ident(16, 4), &ident(16, 4)).unwrap()
    };
    let q32: Vec<f32> = q.iter().map(|&x| x as f32).collect();
    let r = pq_attention(&q32, &ckv32, 0.25, Rounding::Round16).unwrap();
    let s: f32 = r.scores.unwrap().iter().sum();
    assert!((s - 1.0).abs() <= 1e-2);
    assert!(r.out.iter().all(|v| *v == half::f16::from_f32(*v).to_f32()));
}

#[test]
fn wrong_query_length_is_rejected() {
    let ckv = random_cache(10, 2, 4, 8, 1);
    assert!(pq_attention(&[0.0; 7], &ckv, 1.0, Rounding::Exact32).is_err());
}

#[test]
fn fidelity_of_identity_codebook() {
    let d: KvDump<f64> = generate_synthetic_kv(&SyntheticSpec::new(96, 32, 96, 1.0, 4)).unwrap();
    let cfg = PqConfig { m: 4, k: 56, ..Default::default() };
    let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(32, 4), &ident(32, 4)).unwrap();
    let f = attention_fidelity(d.head(0, 0).unwrap(), &ckv, 8, 1).unwrap();
    assert!(f.score_l1 <= 1e-4 && f.output_cos >= 1.0 - 1e-6, "{f:?}");
}

#[test]
fn coarser_codebook_loses_fidelity() {
    let d: KvDump<f32> = generate_synthetic_kv(&SyntheticSpec::new(1200, 32, 64, 0.3, 9)).unwrap();
    let fid = |m, k| {
        let cfg = PqConfig { m, k, ..Default::default() };
        let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(32, m), &ident(32, m)).unwrap();
        attention_fidelity(d.head(0, 0).unwrap(), &ckv, 16, 2).unwrap().output_cos
    };
    assert!(fid(1, 1) < fid(32, 512));
}

#[test]
fn well_separated_clusters_are_nearly_exact() {
    let d: KvDump<f32> = generate_synthetic_kv(&SyntheticSpec::new(500, 32, 12, 1e-4, 5)).unwrap();
    let cfg = PqConfig { m: 8, k: 16, ..Default::default() };
    let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(32, 8), &ident(32, 8)).unwrap();
    let f = attention_fidelity(d.head(0, 0).unwrap(), &ckv, 16, 3).unwrap();
    assert!(f.output_cos >= 0.999, "{f:?}");
}

#[test]
fn sorted_and_unsorted_agree_under_identity_codebook() {
    let n = 80;
    let keys = gaussian(n, 32, 1);
    let values = gaussian(n, 32, 2);
    let slice = HeadSlice { keys: &keys, values: &values, weights: None };
    let cfg = PqConfig { m: 4, k: n, sink_tokens: 0, recent_tokens: 0, row_buffer_bytes: 4096, ..Default::default() };
    let mut order: Vec<usize> = (0..32).collect();
    order.shuffle(&mut stream(5, &[0]));
    let pk = ChannelPermutation::new(order.clone(), 4).unwrap();
    order.shuffle(&mut stream(6, &[0]));
    let pv = ChannelPermutation::new(order, 4).unwrap();
    let plain = compress_head(slice, &cfg, &ident(32, 4), &ident(32, 4), &[0]).unwrap();
    let sorted = compress_head(slice, &cfg, &pk, &pv, &[0]).unwrap();
    for s in 0..5 {
        let q = gaussian_vec(32, 100 + s);
        let a = pq_attention(&q, &plain, 0.2, Rounding::Exact32).unwrap().out;
        let b = pq_attention(&pk.apply(&q), &sorted, 0.2, Rounding::Exact32).unwrap().out;
        let b = unpermute_output(&sorted, &b);
        assert!(rel_err(&b, &a) <= 1e-5);
    }
}

#[test]
fn windowed_tables_use_each_tokens_window() {
    let d: KvDump<f64> = generate_synthetic_kv(&SyntheticSpec::new(200, 16, 20, 0.5, 3)).unwrap();
    let cfg = PqConfig { m: 4, k: 8, window_len: 50, ..Default::default() };
    let ckv = build_compressed_kv(&d, 0, 0, &cfg, &ident(16, 4), &ident(16, 4)).unwrap();
    assert!(ckv.key_codebook().n_windows() > 1);
    let q = gaussian_vec(16, 2);
    let logits = pq_logits(&q, &ckv, Rounding::Exact32).unwrap();
    let kh = ckv.reconstruct_keys();
    let expect: Vec<f64> = kh.iter_rows().map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
    assert!(max_rel(&logits, &expect) <= 1e-12);
}
