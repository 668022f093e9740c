use std::path::{Path, PathBuf};

use aqpim_core::io_util::write_atomic;
use aqpim_core::kv::{generate_synthetic_kv, heavy_token_weights, load_kv_dump, write_kv_dump_to, DType, KvDump, SyntheticSpec};
use aqpim_core::quantizer::{encode_sidecar, PqConfig};
use aqpim_core::rng::mix;
use aqpim_sim::{
    allocate, plan_placement, run_scenario, simulate_detailed, sweep, trace_decode_attention, trace_dense_decode, GatherSite,
    LayoutInputs, PimConfig, Scenario, ScenarioKind, SimReport, SweepAxis,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{ModelSpec, RunConfig, ScenarioSpec};
use crate::error::{CliError, CliResult};
use crate::pipeline::{fidelity_rows, inspect, quantize_dump, Arm};

#[derive(Debug, Parser)]
#[command(name = "aqpim", version, about = "Importance-weighted PQ of KV caches and its PIM cost model")]
pub struct Cli {
    /// JSON run configuration (pq, pim, scenarios, sweep, fidelity sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root of every random stream; required by commands that draw random numbers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing). Defaults to the working directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a KV dump; writes one sidecar per head and a summary.
    Quantize {
        dump: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        head: Option<usize>,
        /// Split channels contiguously instead of grouping similar ones.
        #[arg(long)]
        no_presort: bool,
    },
    /// Ablation table: attention fidelity per arm and seed.
    Fidelity {
        dump: PathBuf,
        /// Comma-separated subset of standard, no-weighting, no-presort, full.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
    },
    /// One report per scenario.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Also write the command trace of one layer's decode step (PIM kinds).
        #[arg(long)]
        trace: bool,
    },
    /// Scenarios × points along one axis, in a single table.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// seq_in, seq_out or batch.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        points: Vec<usize>,
    },
    /// Write a clustered synthetic KV dump.
    GenSynthetic(SynthArgs),
    /// Print the shape and per-head statistics of a dump.
    InspectDump { dump: PathBuf },
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario kind; repeatable. Overrides the config's scenario list.
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    /// mistral-7b or mha-7b.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_in: Option<usize>,
    #[arg(long)]
    pub seq_out: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub tokens: usize,
    #[arg(long, default_value_t = 128)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 16)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub spread: f64,
    /// Attach importance weights with this fraction of heavy tokens.
    #[arg(long)]
    pub heavy_fraction: Option<f64>,
    #[arg(long, default_value_t = 100.0)]
    pub heavy_factor: f64,
    #[arg(long, value_enum, default_value_t = DumpType::F32)]
    pub dtype: DumpType,
    #[arg(long, default_value = "synthetic.kv")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpType {
    F32,
    F16,
    Bf16,
}

impl From<DumpType> for DType {
    fn from(t: DumpType) -> Self {
        match t {
            DumpType::F32 => DType::F32,
            DumpType::F16 => DType::F16,
            DumpType::Bf16 => DType::Bf16,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: Option<u64>,
    out: PathBuf,
    format: Format,
}

impl Ctx {
    fn seed(&self, command: &str) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Config(format!("{command} draws random numbers and needs --seed")))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Io(format!("{}: {e}", self.out.display())))?;
        let path = self.out.join(name);
        write_atomic(&path, bytes).map_err(|e| CliError::Io(e.to_string()))?;
        println!("{}", path.display());
        Ok(path)
    }
}

fn json<T: Serialize + ?Sized>(v: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn csv<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

fn existing(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::InputNotFound(path.to_path_buf()))
    }
}

fn load_dump(path: &Path) -> CliResult<KvDump<f32>> {
    existing(path)?;
    Ok(load_kv_dump(path)?)
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(c) = &cli.config {
        existing(c)?;
    }
    let ctx = Ctx {
        cfg: RunConfig::load(cli.config.as_deref())?,
        seed: cli.seed,
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from(".")),
        format: cli.format,
    };
    match cli.command {
        Command::Quantize {
            dump,
            layer,
            head,
            no_presort,
        } => cmd_quantize(&ctx, &dump, layer, head, !no_presort),
        Command::Fidelity {
            dump,
            arms,
            seeds,
            queries,
        } => cmd_fidelity(&ctx, &dump, arms, seeds, queries),
        Command::Simulate { scenario, trace } => cmd_simulate(&ctx, &scenario, trace),
        Command::Sweep { scenario, axis, points } => cmd_sweep(&ctx, &scenario, axis, points),
        Command::GenSynthetic(args) => cmd_gen_synthetic(&ctx, &args),
        Command::InspectDump { dump } => cmd_inspect(&ctx, &dump, cli.out.is_some()),
    }
}

#[derive(Serialize)]
struct HeadRow {
    layer: usize,
    head: usize,
    n_quantized: usize,
    n_windows: usize,
    mse: Option<f64>,
    weighted_mse: Option<f64>,
    key_mse: Option<f64>,
    value_mse: Option<f64>,
}

fn cmd_quantize(ctx: &Ctx, path: &Path, layer: Option<usize>, head: Option<usize>, presort: bool) -> CliResult<()> {
    let seed = ctx.seed("quantize")?;
    let dump = load_dump(path)?;
    let pick = |sel: Option<usize>, n: usize, what: &str| -> CliResult<Vec<usize>> {
        match sel {
            Some(i) if i >= n => Err(CliError::Config(format!("{what} {i} outside 0..{n}"))),
            Some(i) => Ok(vec![i]),
            None => Ok((0..n).collect()),
        }
    };
    let layers = pick(layer, dump.n_layers(), "layer")?;
    let heads_of = pick(head, dump.n_kv_heads(), "head")?;
    let heads: Vec<(usize, usize)> = layers.iter().flat_map(|&l| heads_of.iter().map(move |&h| (l, h))).collect();
    let cfg = PqConfig {
        rng_seed: seed,
        ..ctx.cfg.pq.clone()
    };
    let (summary, caches) = quantize_dump(&dump, &cfg, presort, &heads)?;
    for (&(l, h), ckv) in heads.iter().zip(&caches) {
        ctx.write(&format!("layer{l}_head{h}.aqpq"), &encode_sidecar(ckv))?;
    }
    match ctx.format {
        Format::Json => ctx.write("summary.json", &json(&summary)?)?,
        Format::Csv => {
            let rows: Vec<HeadRow> = summary
                .heads
                .iter()
                .map(|h| HeadRow {
                    layer: h.layer,
                    head: h.head,
                    n_quantized: h.n_quantized,
                    n_windows: h.n_windows,
                    mse: h.mse,
                    weighted_mse: h.weighted_mse,
                    key_mse: h.key_mse,
                    value_mse: h.value_mse,
                })
                .collect();
            ctx.write("summary.csv", &csv(&rows)?)?
        }
    };
    Ok(())
}

fn cmd_fidelity(ctx: &Ctx, path: &Path, arms: Vec<String>, seeds: Option<usize>, queries: Option<usize>) -> CliResult<()> {
    let seed = ctx.seed("fidelity")?;
    let spec = &ctx.cfg.fidelity;
    let names = if arms.is_empty() { spec.arms.clone() } else { arms };
    let arms = names.iter().map(|a| a.parse()).collect::<CliResult<Vec<Arm>>>()?;
    let seeds = seeds.unwrap_or(spec.seeds);
    let queries = queries.unwrap_or(spec.queries);
    if seeds == 0 || queries == 0 {
        return Err(CliError::Config("seeds and queries must be positive".into()));
    }
    let dump = load_dump(path)?;
    let rows = fidelity_rows(&dump, &ctx.cfg.pq, &arms, seeds, queries, seed)?;
    match ctx.format {
        Format::Csv => ctx.write("fidelity.csv", &csv(&rows)?)?,
        Format::Json => ctx.write("fidelity.json", &json(&rows)?)?,
    };
    Ok(())
}

fn scenarios(ctx: &Ctx, args: &ScenarioArgs) -> CliResult<Vec<Scenario>> {
    let base = ctx.cfg.scenarios.first().cloned().unwrap_or_default();
    let specs: Vec<ScenarioSpec> = if args.scenarios.is_empty() {
        ctx.cfg.scenarios.clone()
    } else {
        args.scenarios
            .iter()
            .map(|k| ScenarioSpec {
                kind: k.clone(),
                ..base.clone()
            })
            .collect()
    };
    if specs.is_empty() {
        return Err(CliError::Config("no scenarios: pass --scenario or list them in the config".into()));
    }
    specs
        .into_iter()
        .map(|mut s| {
            if let Some(m) = &args.model {
                s.model = ModelSpec::Preset(m.clone());
            }
            s.batch = args.batch.unwrap_or(s.batch);
            s.seq_in = args.seq_in.unwrap_or(s.seq_in);
            s.seq_out = args.seq_out.unwrap_or(s.seq_out);
            s.resolve()
        })
        .collect()
}

fn slug(sc: &Scenario) -> String {
    let w = &sc.workload;
    format!("{}-b{}-in{}-out{}", sc.kind, w.batch, w.seq_in, w.seq_out)
}

fn cmd_simulate(ctx: &Ctx, args: &ScenarioArgs, trace: bool) -> CliResult<()> {
    let scs = scenarios(ctx, args)?;
    let (pq, hw) = (&ctx.cfg.pq, &ctx.cfg.pim);
    let mut reports = Vec::with_capacity(scs.len());
    for sc in &scs {
        let r = run_scenario(sc, pq, hw)?;
        if ctx.format == Format::Json {
            ctx.write(&format!("{}.json", slug(sc)), &json(&r)?)?;
        }
        if trace {
            if let Some(dump) = decode_trace_dump(sc, pq, hw)? {
                ctx.write(&format!("{}.trace", slug(sc)), dump.as_bytes())?;
            }
        }
        reports.push(r);
    }
    if ctx.format == Format::Csv {
        ctx.write("simulate.csv", SimReport::to_csv(&reports).as_bytes())?;
    }
    Ok(())
}

/// One layer's decode step at `seq_in`, one line per command with its issue cycle.
fn decode_trace_dump(sc: &Scenario, pq: &PqConfig, hw: &PimConfig) -> CliResult<Option<String>> {
    let w = &sc.workload;
    let trace = match sc.kind {
        ScenarioKind::AttaccPim => {
            let spread = PqConfig {
                m: w.model.head_dim,
                ..pq.clone()
            };
            trace_dense_decode(w, &plan_placement(&w.model, &spread, w.batch, hw)?, hw)?
        }
        ScenarioKind::Aqpim | ScenarioKind::AqpimBufferpeGather => {
            let placement = plan_placement(&w.model, pq, w.batch, hw)?;
            let layout = allocate(
                &LayoutInputs {
                    pq: pq.clone(),
                    seq_len: w.seq_in,
                    n_layers: w.model.n_layers,
                    head_dim: w.model.head_dim,
                    subvectors_per_bank: placement.max_subvectors_per_bank(),
                    group: w.model.group(),
                },
                hw,
            )?;
            let site = if sc.kind == ScenarioKind::Aqpim {
                GatherSite::Bankpe
            } else {
                GatherSite::Bufferpe
            };
            trace_decode_attention(w, pq, &placement, &layout, hw, site)?
        }
        _ => return Ok(None),
    };
    let detail = simulate_detailed(&trace, hw)?;
    Ok(Some(trace.dump(&detail.issue)))
}

fn cmd_sweep(ctx: &Ctx, args: &ScenarioArgs, axis: Option<String>, points: Vec<usize>) -> CliResult<()> {
    let scs = scenarios(ctx, args)?;
    let (axis, points) = match (axis, ctx.cfg.sweep.clone()) {
        (Some(a), cfg) => {
            let axis: SweepAxis = a.parse()?;
            let points = if points.is_empty() {
                cfg.map(|c| c.points).unwrap_or_default()
            } else {
                points
            };
            (axis, points)
        }
        (None, Some(c)) => (c.axis, if points.is_empty() { c.points } else { points }),
        (None, None) => return Err(CliError::Config("no sweep axis: pass --axis or set sweep in the config".into())),
    };
    let reports = sweep(&scs, axis, &points, &ctx.cfg.pq, &ctx.cfg.pim)?;
    match ctx.format {
        Format::Csv => ctx.write("sweep.csv", SimReport::to_csv(&reports).as_bytes())?,
        Format::Json => ctx.write("sweep.json", &json(&reports)?)?,
    };
    Ok(())
}

fn cmd_gen_synthetic(ctx: &Ctx, a: &SynthArgs) -> CliResult<()> {
    let seed = ctx.seed("gen-synthetic")?;
    let spec = SyntheticSpec {
        n_layers: a.layers,
        n_kv_heads: a.kv_heads,
        n_tokens: a.tokens,
        head_dim: a.head_dim,
        n_latent_clusters: a.clusters,
        cluster_spread: a.spread,
        rng_seed: seed,
    };
    let mut dump: KvDump<f32> = generate_synthetic_kv(&spec)?;
    if let Some(frac) = a.heavy_fraction {
        if !(0.0..=1.0).contains(&frac) || !(a.heavy_factor.is_finite() && a.heavy_factor >= 0.0) {
            return Err(CliError::Config("heavy fraction must lie in [0, 1] and the factor be nonnegative".into()));
        }
        let weights = (0..a.layers * a.kv_heads)
            .map(|u| heavy_token_weights::<f32>(a.tokens, frac, a.heavy_factor, mix(&[seed, u as u64])).0)
            .collect();
        dump = dump.with_weights(Some(weights))?;
    }
    let dump = dump.with_dtype(a.dtype.into());
    let mut bytes = Vec::new();
    write_kv_dump_to(&dump, &mut bytes).map_err(|e| CliError::Io(e.to_string()))?;
    ctx.write(&a.name, &bytes)?;
    Ok(())
}

fn cmd_inspect(ctx: &Ctx, path: &Path, to_file: bool) -> CliResult<()> {
    let dump = load_dump(path)?;
    let s = inspect(&dump)?;
    let (name, bytes) = match ctx.format {
        Format::Json => ("inspect.json", json(&s)?),
        Format::Csv => ("inspect.csv", csv(&s.heads)?),
    };
    if to_file {
        ctx.write(name, &bytes)?;
    } else {
        print!("{}", String::from_utf8_lossy(&bytes));
    }
    Ok(())
}
