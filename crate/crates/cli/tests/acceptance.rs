//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints a PASS/FAIL line; exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use aqpim_core::attention::{attention_fidelity, default_scale, exact_attention, pq_attention, pq_logits, Rounding};
use aqpim_core::channel_sort::{sort_channels, ChannelPermutation};
use aqpim_core::kv::{
    generate_block_channels, generate_synthetic_kv, heavy_token_weights, BlockChannelSpec, KvDump, SyntheticSpec,
};
use aqpim_core::quantizer::{
    build_compressed_kv, compress_head, kmeans_pp_init, quantization_error, token_errors, weighted_kmeans,
    weighted_lloyd, Codebook, CompressedKv, HeadSlice, PqConfig, PqIndices, WindowCodebook,
};
use aqpim_core::rng::stream;
use aqpim_core::Matrix;
use aqpim_sim::command::TAG_KEY_LOOKUP;
use aqpim_sim::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Batch used for every simulator criterion.
const BATCH: usize = 16;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = stream(seed, &[0xACCE]);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn gaussian_vec(n: usize, seed: u64) -> Vec<f64> {
    gaussian(1, n, seed).into_vec()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
}

fn ident(d: usize, m: usize) -> ChannelPermutation {
    ChannelPermutation::identity(d, m).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Random codebooks and codes, all tokens quantized, single window.
fn random_cache(n: usize, m: usize, k: usize, d: usize, seed: u64) -> CompressedKv<f64> {
    let g = d / m;
    let book = |s: u64| {
        let tables = (0..m).map(|i| gaussian(k, g, s * 1000 + i as u64)).collect();
        Codebook::new(m, k, g, vec![WindowCodebook { start: 0, end: n, tables, objective_per_iter: vec![] }])
    };
    let mut rng = stream(seed, &[7]);
    let mut idx = || {
        let codes = (0..n * m).map(|_| rng.random_range(0..k as u16)).collect();
        PqIndices::from_codes(m, codes, vec![0; n]).unwrap()
    };
    let cfg = PqConfig { m, k, ..Default::default() };
    let (ki, vi) = (idx(), idx());
    CompressedKv::from_quantized(cfg, book(2 * seed), book(2 * seed + 1), ki, vi).unwrap()
}

fn lookup_sum_identity() -> Outcome {
    let (n, m, k, d) = (256, 8, 16, 64);
    let g = d / m;
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let ckv = random_cache(n, m, k, d, seed);
        let q = gaussian_vec(d, 10_000 + seed);
        let got = pq_logits(&q, &ckv, Rounding::Exact32).unwrap();
        // Reconstruct every key row, then a plain dot product.
        let expect: Vec<f64> = (0..n)
            .map(|t| {
                let mut khat = vec![0.0; d];
                for s in 0..m {
                    let c = ckv.key_codebook().table(0, s).row(ckv.key_indices().codes(t)[s] as usize);
                    khat[s * g..(s + 1) * g].copy_from_slice(c);
                }
                q.iter().zip(&khat).map(|(a, b)| a * b).sum()
            })
            .collect();
        worst = worst.max(max_rel(&got, &expect));
    }
    outcome(worst <= 1e-5, format!("max rel err {worst:.2e} over 50 instances (limit 1e-5)"))
}

fn identity_codebook_exactness() -> Outcome {
    let (n, d, m) = (128, 64, 8);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let keys = gaussian(n, d, 3 * seed);
        let values = gaussian(n, d, 3 * seed + 1);
        // k = n with page room for all n centroids: each token is its own centroid.
        let cfg = PqConfig { m, k: n, sink_tokens: 0, recent_tokens: 0, row_buffer_bytes: 4096, ..Default::default() };
        let slice = HeadSlice { keys: &keys, values: &values, weights: None };
        let ckv = compress_head(slice, &cfg, &ident(d, m), &ident(d, m), &[seed]).unwrap();
        let q = gaussian_vec(d, 3 * seed + 2);
        let scale = default_scale(d);
        let a = pq_attention(&q, &ckv, scale, Rounding::Exact32).unwrap();
        let e = exact_attention(&q, &keys, &values, scale).unwrap();
        worst = worst.max(rel_err(&a.out, &e.out));
    }
    outcome(worst <= 1e-4, format!("max rel err {worst:.2e} over 20 seeds (limit 1e-4)"))
}

/// Unweighted Lloyd: nearest centroid (lowest index on ties), member mean; an
/// empty cluster moves to the farthest not-yet-used point.
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

fn weighted_kmeans_monotone() -> Outcome {
    let mut rng = stream(0x5EED, &[1]);
    let (mut rising, mut mismatched) = (0, 0);
    for case in 0..100u64 {
        let n = rng.random_range(8..200);
        let d = rng.random_range(1..9);
        let k = rng.random_range(1..17).min(n);
        let p = gaussian(n, d, 100 + case);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let r = weighted_kmeans(&p, &w, k, 4, case).unwrap();
        if r.objective_per_iter.windows(2).any(|x| x[1] > x[0]) {
            rising += 1;
        }
        let ones = vec![1.0; n];
        let init = kmeans_pp_init(&p, &ones, k, &mut stream(case, &[9]));
        let got = weighted_lloyd(&p, &ones, init.clone(), 4);
        let (c, a) = reference_lloyd(&p, &init, 4);
        let same = got.assignments == a
            && got.centroids.as_slice().iter().zip(c.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            mismatched += 1;
        }
    }
    outcome(
        rising == 0 && mismatched == 0,
        format!("{rising}/100 runs with a rising objective, {mismatched}/100 uniform runs differing from plain Lloyd"),
    )
}

fn importance_weighting() -> Outcome {
    let (n, d, m, k) = (600, 16, 4, 16);
    let cfg = PqConfig { m, k, ..Default::default() };
    let (mut weighted, mut uniform) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let dump: KvDump<f64> = generate_synthetic_kv(&SyntheticSpec::new(n, d, 64, 0.5, seed)).unwrap();
        let (w, heavy) = heavy_token_weights::<f64>(n, 0.05, 100.0, seed);
        let head = dump.head(0, 0).unwrap();
        // Weighted MSE restricted to the heavy tokens.
        let heavy_wmse = |fit: Option<&[f64]>| {
            let ckv = compress_head(HeadSlice { weights: fit, ..head }, &cfg, &ident(d, m), &ident(d, m), &[seed]).unwrap();
            let errs = token_errors(head, &ckv).unwrap();
            let (mut num, mut den) = (0.0, 0.0);
            for &t in &heavy {
                if let Some((ke, ve)) = errs[t] {
                    num += w[t] * (ke + ve) / 2.0;
                    den += w[t];
                }
            }
            num / den
        };
        weighted.push(heavy_wmse(Some(&w)));
        uniform.push(heavy_wmse(None));
    }
    let (a, b) = (mean(&weighted), mean(&uniform));
    outcome(a <= 0.9 * b, format!("heavy-token weighted MSE {a:.4e} vs uniform {b:.4e}, ratio {:.3} (limit 0.9)", a / b))
}

fn presorting() -> Outcome {
    let (d, m) = (32, 8);
    let cfg = PqConfig { m, k: 16, sink_tokens: 0, recent_tokens: 0, ..Default::default() };
    let (mut sorted, mut contiguous) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let spec = BlockChannelSpec { n_tokens: 512, head_dim: d, block_size: 4, noise: 0.1, rng_seed: seed };
        let (x, _) = generate_block_channels::<f64>(&spec).unwrap();
        let slice = HeadSlice { keys: &x, values: &x, weights: None };
        let p = sort_channels(&x, m, seed).unwrap();
        let id = ident(d, m);
        sorted.push(quantization_error(slice, &compress_head(slice, &cfg, &p, &p, &[seed]).unwrap()).unwrap().mse);
        contiguous.push(quantization_error(slice, &compress_head(slice, &cfg, &id, &id, &[seed]).unwrap()).unwrap().mse);
    }
    let (a, b) = (mean(&sorted), mean(&contiguous));
    outcome(a <= b, format!("mean MSE sorted {a:.4e} vs contiguous {b:.4e}"))
}

fn saturation() -> Outcome {
    let (n, d) = (1024, 128);
    let seeds: Vec<u64> = (0..10).collect();
    let cos = |m: usize, k: usize| -> f64 {
        let per_seed: Vec<f64> = std::thread::scope(|s| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    s.spawn(move || {
                        let dump: KvDump<f64> =
                            generate_synthetic_kv(&SyntheticSpec::new(n, d, 64, 0.3, 500 + seed)).unwrap();
                        let cfg = PqConfig { m, k, rng_seed: seed, ..Default::default() };
                        let ckv = build_compressed_kv(&dump, 0, 0, &cfg, &ident(d, m), &ident(d, m)).unwrap();
                        attention_fidelity(dump.head(0, 0).unwrap(), &ckv, 16, seed).unwrap().output_cos
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        mean(&per_seed)
    };
    let by_k: Vec<f64> = [64, 128, 256, 512].iter().map(|&k| cos(32, k)).collect();
    let by_m: Vec<f64> = [2, 8, 32].iter().map(|&m| cos(m, 512)).collect();
    let monotone = |v: &[f64]| v.windows(2).all(|p| p[1] >= p[0]);
    let fmt = |v: &[f64]| v.iter().map(|c| format!("{c:.5}")).collect::<Vec<_>>().join(" ");
    outcome(
        monotone(&by_k) && monotone(&by_m),
        format!("output_cos over k 64..512: [{}]; over m 2,8,32: [{}]", fmt(&by_k), fmt(&by_m)),
    )
}

fn tiny_model(n_heads: usize, n_kv_heads: usize, head_dim: usize) -> ModelShape {
    ModelShape {
        n_layers: 2,
        n_heads,
        n_kv_heads,
        head_dim,
        hidden: n_heads * head_dim,
        ffn_dim: 2 * n_heads * head_dim,
        vocab: 100,
        gated_ffn: false,
    }
}

fn setup(w: &Workload, pq: &PqConfig, hw: &PimConfig) -> Option<(Placement, MemoryLayout)> {
    let placement = plan_placement(&w.model, pq, w.batch, hw).ok()?;
    let inputs = LayoutInputs {
        pq: pq.clone(),
        seq_len: w.seq_in,
        n_layers: w.model.n_layers,
        head_dim: w.model.head_dim,
        subvectors_per_bank: placement.max_subvectors_per_bank(),
        group: w.model.group(),
    };
    let layout = allocate(&inputs, hw).ok()?;
    Some((placement, layout))
}

/// Largest key-lookup ACT count per bank and query head, over windows × subvectors on that bank.
fn act_excess(w: &Workload, pq: &PqConfig, hw: &PimConfig, site: GatherSite) -> Option<f64> {
    let (p, l) = setup(w, pq, hw)?;
    let t = trace_decode_attention(w, pq, &p, &l, hw, site).unwrap();
    let mut on_bank = vec![0u64; hw.total_banks()];
    for u in &p.units {
        for &b in &u.subvector_bank {
            on_bank[u.hbm * hw.banks_per_hbm() + b] += 1;
        }
    }
    let g = w.model.group() as f64;
    let mut worst = 0.0f64;
    for c in 0..t.queues.len() {
        for b in 0..hw.banks_per_channel {
            let acts = t.count_per_bank(c, b, |cmd| cmd.opcode == Opcode::ActAb && cmd.meta.flags & TAG_KEY_LOOKUP != 0);
            let s = on_bank[c * hw.banks_per_channel + b];
            if acts > 0 {
                worst = worst.max(acts as f64 / g / (l.n_windows as u64 * s).max(1) as f64);
            }
        }
    }
    Some(worst)
}

fn act_bound() -> Outcome {
    let mut rng = stream(0xAC7, &[2]);
    let (mut checked, mut worst) = (0, 0.0f64);
    for _ in 0..64 {
        let kv = rng.random_range(1..4);
        let group = [1usize, 2, 4][rng.random_range(0..3)];
        let m = [2usize, 4, 8, 16][rng.random_range(0..4)];
        let k = [4usize, 16, 64, 512][rng.random_range(0..4)];
        let window = [0usize, 64, 300][rng.random_range(0..3)];
        let hw = PimConfig {
            n_hbms: 1,
            channels_per_hbm: rng.random_range(1..3),
            banks_per_channel: [4usize, 8, 16][rng.random_range(0..3)],
            banks_per_group: 4,
            ..Default::default()
        };
        let pq = PqConfig { m, k, window_len: window, iters: 1, ..Default::default() };
        let w = Workload::new(tiny_model(kv * group, kv, 32), rng.random_range(1..3), rng.random_range(0..1500), 0);
        let site = if rng.random_bool(0.5) { GatherSite::Bufferpe } else { GatherSite::Bankpe };
        if let Some(x) = act_excess(&w, &pq, &hw, site) {
            checked += 1;
            worst = worst.max(x);
        }
    }
    let hw = PimConfig::default();
    let pq = PqConfig { window_len: 1024, ..Default::default() };
    for model in [ModelShape::mistral_7b(), ModelShape::mha_7b()] {
        for site in [GatherSite::Bankpe, GatherSite::Bufferpe] {
            if let Some(x) = act_excess(&Workload::new(model.clone(), 2, 4096, 0), &pq, &hw, site) {
                checked += 1;
                worst = worst.max(x);
            }
        }
    }
    outcome(
        worst <= 1.0 && checked >= 40,
        format!("{checked} configs; max ACTs per query head / (windows × subvectors on bank) = {worst:.3}"),
    )
}

fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn constant_atnk() -> Outcome {
    let hw = PimConfig::default();
    let pq = PqConfig::default();
    let ns = [1024usize, 4096, 16384];
    let reports: Vec<SimReport> = ns
        .iter()
        .map(|&n| {
            let w = Workload::new(ModelShape::mistral_7b(), BATCH, n, 0);
            pim_attention_layer(ScenarioKind::Aqpim, &w, &pq, &hw, n).unwrap()
        })
        .collect();
    let atnk: Vec<f64> = reports.iter().map(|r| r.cycles_by_stage.atnk).collect();
    let ret: Vec<f64> = reports.iter().map(|r| r.cycles_by_stage.retrieval).collect();
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let r2 = r_squared(&x, &ret);
    let flat = atnk[0] > 0.0 && atnk.iter().all(|&a| a == atnk[0]);
    outcome(
        flat && r2 >= 0.99,
        format!("atnk {atnk:?} at 1K/4K/16K; retrieval {ret:?}, R² {r2:.5} (limit 0.99)"),
    )
}

fn indirection_site() -> Outcome {
    let hw = PimConfig::default();
    let pq = PqConfig::default();
    let w = Workload::new(ModelShape::mistral_7b(), BATCH, 4096, 0);
    let bank = pim_attention_layer(ScenarioKind::Aqpim, &w, &pq, &hw, 4096).unwrap().cycles_by_stage;
    let buf = pim_attention_layer(ScenarioKind::AqpimBufferpeGather, &w, &pq, &hw, 4096).unwrap().cycles_by_stage;
    let key = buf.retrieval / bank.retrieval;
    let value = buf.atnv / bank.atnv;
    outcome(
        value >= 5.0 && (1.0..=2.0).contains(&key),
        format!(
            "key {:.0} vs {:.0} cycles, ratio {key:.2} (limit [1, 2]); value {:.0} vs {:.0}, ratio {value:.2} (limit ≥ 5)",
            bank.retrieval, buf.retrieval, bank.atnv, buf.atnv
        ),
    )
}

fn compression_factor() -> Outcome {
    let f = PqConfig::default().compression(32768, 128).factor;
    let dev = f / 6.53 - 1.0;
    outcome(dev.abs() <= 0.05, format!("{f:.3}× at N=32K, d=128 ({:+.1}% from 6.53)", 100.0 * dev))
}

fn decode_steps(seq: usize) -> [f64; 4] {
    let hw = PimConfig::default();
    let pq = PqConfig::default();
    let kinds = [ScenarioKind::GpuCpuOffload, ScenarioKind::GpuInfinite, ScenarioKind::GpuPq, ScenarioKind::Aqpim];
    kinds.map(|kind| {
        let sc = Scenario { kind, workload: Workload::new(ModelShape::mistral_7b(), BATCH, seq, 1) };
        run_scenario(&sc, &pq, &hw).unwrap().decode_step_cycles
    })
}

fn scenario_orders() -> Outcome {
    let ratios = |s: [f64; 4]| (s[0] / s[1], s[1] / s[2], s[2] / s[3]);
    let (a, b, c) = ratios(decode_steps(98304));
    let (a64, b64, c64) = ratios(decode_steps(65536));
    outcome(
        (7.0..=18.0).contains(&a) && (3.5..=7.0).contains(&b) && (2.0..=6.0).contains(&c),
        format!(
            "96K: gpu∞/gpu+cpu {a:.2} (limit [7, 18]), gpu+pq/gpu∞ {b:.2} (limit [3.5, 7]), aqpim/gpu+pq {c:.2} (limit [2, 6]); \
             64K for reference: {a64:.2}, {b64:.2}, {c64:.2}"
        ),
    )
}

fn hideability() -> Outcome {
    let hw = PimConfig::default();
    let pq = PqConfig::default();
    let ratios: Vec<f64> = [2048usize, 8192, 32768]
        .iter()
        .map(|&n| {
            let w = Workload::new(ModelShape::mistral_7b(), BATCH, n, 0);
            cluster_layer_report(&w, &pq, &hw).unwrap().cycles_total / gpu_prefill_layer_cycles(&w, &hw)
        })
        .collect();
    outcome(
        ratios.iter().all(|&r| r < 1.0),
        format!("clustering / prefill cycles per layer at 2K, 8K, 32K: {ratios:.3?}"),
    )
}

fn legality_fuzz() -> Outcome {
    let mut rng = stream(0xF022, &[3]);
    let (mut cases, mut traces, mut failures) = (0, 0, Vec::new());
    while cases < 100 {
        let kv = rng.random_range(1..3);
        let group = [1usize, 2, 4][rng.random_range(0..3)];
        let fp = rng.random_range(0..3);
        let hw = PimConfig {
            n_hbms: rng.random_range(1..3),
            channels_per_hbm: rng.random_range(1..4),
            banks_per_channel: [4usize, 8, 16][rng.random_range(0..3)],
            banks_per_group: 4,
            ..Default::default()
        };
        let w = Workload::new(tiny_model(kv * group, kv, 32), rng.random_range(1..3), rng.random_range(0..2000), 4);
        let pq = PqConfig {
            m: [1usize, 2, 4, 8, 16][rng.random_range(0..5)],
            k: [2usize, 16, 100, 512][rng.random_range(0..4)],
            iters: rng.random_range(0..3),
            window_len: [0usize, 128, 500][rng.random_range(0..3)],
            sink_tokens: 4 * fp,
            recent_tokens: 8 * fp,
            ..Default::default()
        };
        // Configurations that do not fit are rejected up front, not fuzzed.
        let Some((p, l)) = setup(&w, &pq, &hw) else { continue };
        cases += 1;
        let generate = || {
            let mut v = vec![
                trace_codebook_generation(&w, &pq, &p, &l, &hw).unwrap(),
                trace_decode_attention(&w, &pq, &p, &l, &hw, GatherSite::Bankpe).unwrap(),
                trace_decode_attention(&w, &pq, &p, &l, &hw, GatherSite::Bufferpe).unwrap(),
            ];
            let dense = PqConfig { m: w.model.head_dim, ..pq.clone() };
            if let Ok(dp) = plan_placement(&w.model, &dense, w.batch, &hw) {
                v.push(trace_dense_decode(&w, &dp, &hw).unwrap());
            }
            v
        };
        let (first, second) = (generate(), generate());
        for (t, again) in first.iter().zip(&second) {
            traces += 1;
            let problem = if let Err(e) = t.check_legality(hw.banks_per_channel) {
                Some(e.to_string())
            } else if t.inter_hbm_bytes != 0 {
                Some(format!("{} inter-stack bytes", t.inter_hbm_bytes))
            } else {
                let a = simulate_detailed(t, &hw).unwrap();
                let b = simulate_detailed(again, &hw).unwrap();
                let same = t == again
                    && t.dump(&a.issue) == again.dump(&b.issue)
                    && a.report.to_json().unwrap() == b.report.to_json().unwrap();
                (!same).then(|| "repeated run differs".to_string())
            };
            if let Some(p) = problem {
                failures.push(p);
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{cases} configs, {traces} traces, {} failures {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 13] = [
        ("lookup-sum identity", Duration::from_secs(5), lookup_sum_identity),
        ("identity-codebook exactness", Duration::from_secs(5), identity_codebook_exactness),
        ("weighted k-means", Duration::from_secs(30), weighted_kmeans_monotone),
        ("importance weighting", Duration::from_secs(60), importance_weighting),
        ("channel pre-sorting", Duration::from_secs(60), presorting),
        ("hyperparameter saturation", Duration::from_secs(120), saturation),
        ("key-lookup ACT bound", Duration::from_secs(10), act_bound),
        ("constant lookup-table cost", Duration::from_secs(60), constant_atnk),
        ("indirection site", Duration::from_secs(60), indirection_site),
        ("compression factor", Duration::from_secs(1), compression_factor),
        ("scenario speedup orders", Duration::from_secs(120), scenario_orders),
        ("clustering hideability", Duration::from_secs(60), hideability),
        ("trace legality and determinism", Duration::from_secs(120), legality_fuzz),
    ];
    let mut failed = 0;
    for (name, limit, run) in criteria {
        let t0 = Instant::now();
        let o = run();
        let took = t0.elapsed();
        let pass = o.pass && took <= limit;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.2} s, limit {} s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
