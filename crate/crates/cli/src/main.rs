use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tpshift::ffn_check::{random_check, Activation, CheckShape};
use tpshift::kv_layout::{plan_migration, plan_migration_trim_with, MigrationSpec};
use tpshift::model::ModelConfig;
use tpshift::page_store::{DEFAULT_PAGE_SIZE, GB};
use tpshift::scheduler::{Policy, SchedulerConfig};
use tpshift::sim::{self, ClusterConfig, MetricsFormat, PerfModel, SyntheticConfig};
use tpshift::transform_engine::{template_stores, CostModel, GroupSpec, TransformOptions};
use tpshift::weight_plan::{
    make_padding_plan, model_padding_overhead, pages_per_tensor, plan_weight_scale_down,
    plan_weight_scale_up, plan_whole_copy_scale_up, static_weight_bytes, WeightStrategy,
};

#[derive(Parser)]
#[command(
    name = "sim",
    version,
    about = "Tensor-parallelism transformation planner and cluster simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a workload under one scheduling policy.
    Run(RunArgs),
    /// Print a KV cache migration plan.
    PlanKv(PlanKvArgs),
    /// Print weight padding and repartitioning plans.
    PlanWeights(PlanWeightsArgs),
    /// Randomized check that padded and sharded FFNs match the plain one.
    CheckFfn(CheckFfnArgs),
    /// Derived memory and page tables for a model.
    Tables(TablesArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "synthetic")]
    trace: Option<PathBuf>,
    #[arg(long)]
    synthetic: bool,
    /// Short requests per minute.
    #[arg(long, default_value_t = 60.0)]
    short_rate: f64,
    /// Long requests per minute.
    #[arg(long, default_value_t = 1.0)]
    long_rate: f64,
    #[arg(long, default_value_t = 1000)]
    short_len: u64,
    #[arg(long, default_value_t = 50000)]
    long_len: u64,
    #[arg(long, default_value_t = 600.0)]
    duration: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "gyges")]
    policy: Policy,
    #[arg(long, default_value_t = 1)]
    hosts: usize,
    #[arg(long, default_value_t = 8)]
    gpus_per_host: usize,
    /// Model config file, or the name of a built-in model.
    #[arg(long, default_value = "qwen2.5-32b")]
    model: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    #[arg(long, default_value_t = 1)]
    stagger: usize,
    /// Stop the simulation here; defaults to the synthetic duration, or runs
    /// a trace to completion.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: MetricsFormat,
    #[arg(long)]
    event_log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KvStrategyArg {
    Inplace,
    Trim,
}

#[derive(Args)]
struct PlanKvArgs {
    #[arg(long, default_value = "qwen2.5-32b")]
    model: String,
    #[arg(long, default_value_t = 1)]
    tp_from: usize,
    #[arg(long, default_value_t = 2)]
    tp_to: usize,
    /// Requests of one source instance as `id:tokens,...`; repeat once per
    /// source instance.
    #[arg(long = "requests", required = true)]
    requests: Vec<String>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long, value_enum, default_value = "inplace")]
    strategy: KvStrategyArg,
    #[arg(long, default_value_t = 16)]
    tokens_per_block: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightStrategyArg {
    InPlace,
    PartialSwap,
    WholeCopy,
}

#[derive(Args)]
struct PlanWeightsArgs {
    #[arg(long, default_value = "qwen2.5-32b")]
    model: String,
    #[arg(long, default_value_t = 1)]
    tp_from: usize,
    #[arg(long, default_value_t = 4)]
    tp_to: usize,
    #[arg(long, value_enum, default_value = "in-place")]
    strategy: WeightStrategyArg,
    /// Plan against unpadded weights.
    #[arg(long)]
    unpadded: bool,
    #[arg(long, default_value_t = DEFAULT_PAGE_SIZE)]
    page_size: u64,
    /// Print the first layer's plan as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CheckFfnArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 24)]
    inter: usize,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    tp: usize,
    #[arg(long, default_value_t = 2)]
    pad: usize,
    #[arg(long, default_value = "gelu")]
    activation: Activation,
    #[arg(long, default_value_t = 1e-12)]
    tolerance: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TablesArgs {
    #[arg(long, default_value = "qwen2.5-32b")]
    model: String,
    /// Per-GPU memory in decimal GB.
    #[arg(long, default_value_t = 96.0)]
    gpu_gb: f64,
    #[arg(long, default_value_t = DEFAULT_PAGE_SIZE)]
    page_size: u64,
}

fn load_model(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return ModelConfig::load(path).with_context(|| format!("reading model config {spec}"));
    }
    ModelConfig::preset(spec)
        .with_context(|| format!("{spec} is neither a model config file nor a built-in model"))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run(a) => run(a),
        Cmd::PlanKv(a) => plan_kv(a),
        Cmd::PlanWeights(a) => plan_weights(a),
        Cmd::CheckFfn(a) => check_ffn(a),
        Cmd::Tables(a) => tables(a),
    }
}

fn run(a: RunArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (trace, horizon) = match (&a.trace, a.synthetic) {
        (Some(p), _) => (
            sim::load_trace(p).with_context(|| format!("loading {}", p.display()))?,
            a.horizon,
        ),
        (None, true) => {
            let cfg = SyntheticConfig {
                short_rate: a.short_rate,
                long_rate: a.long_rate,
                short_len: a.short_len,
                long_len: a.long_len,
                duration: a.duration,
                seed: a.seed,
                ..Default::default()
            };
            (
                sim::gen_synthetic(&cfg),
                Some(a.horizon.unwrap_or(a.duration)),
            )
        }
        (None, false) => bail!("pass either --trace <path> or --synthetic"),
    };
    let cluster = ClusterConfig {
        hosts: a.hosts,
        gpus_per_host: a.gpus_per_host,
        model,
        transform: TransformOptions {
            stagger_width: a.stagger,
            ..Default::default()
        },
        horizon_s: horizon,
        ..Default::default()
    };
    let sched = SchedulerConfig {
        policy: a.policy,
        scale_down_threshold: a.threshold,
        ..Default::default()
    };
    let cost = CostModel {
        overlap_fraction: a.overlap,
        ..Default::default()
    };
    let out = sim::run(&trace, &cluster, &PerfModel::default(), &sched, &cost)?;
    let m = &out.metrics;
    println!("policy {}", a.policy);
    println!(
        "requests {} completed {} rejected {}",
        m.requests.len(),
        m.completed().count(),
        m.rejected_count()
    );
    println!("throughput_tps_mean {:.3}", m.summary.throughput_tps_mean);
    println!("scale_ups {} scale_downs {}", m.scale_ups, m.scale_downs);
    println!("transformation_count {}", m.summary.transformation_count);
    println!("stall_total_s {:.6}", m.summary.stall_total_s);
    println!("peak_gpu_bytes {}", m.summary.peak_gpu_bytes);
    if let Some(p) = &a.out {
        sim::write_metrics(m, p, a.format).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.event_log {
        out.write_event_log(p)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn parse_requests(s: &str) -> Result<Vec<(u64, u64)>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (id, tokens) = p
                .split_once(':')
                .with_context(|| format!("expected id:tokens, got {p:?}"))?;
            Ok((id.trim().parse()?, tokens.trim().parse()?))
        })
        .collect()
}

fn plan_kv(a: PlanKvArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let group = GroupSpec {
        tp_from: a.tp_from,
        tp_to: a.tp_to,
        instances: a
            .requests
            .iter()
            .map(|s| parse_requests(s))
            .collect::<Result<_>>()?,
        assignment: BTreeMap::new(),
    };
    let opts = TransformOptions {
        tokens_per_block: a.tokens_per_block,
        ..Default::default()
    };
    let stores = template_stores(&model, &group, &opts)?;
    let spec = MigrationSpec::new(a.tp_from, a.tp_to, a.stages.unwrap_or(2 * a.tp_to));
    let plan = match a.strategy {
        KvStrategyArg::Inplace => plan_migration(&stores, &spec)?,
        KvStrategyArg::Trim => plan_migration_trim_with(&stores, &spec)?,
    };
    print!("{}", plan.to_text());
    Ok(())
}

fn plan_weights(a: PlanWeightsArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let padded = !a.unpadded;
    let tps = model.supported_tp.clone();
    println!(
        "model {} layers {} weights {} bytes",
        model.name,
        model.num_layers,
        model.weight_bytes()
    );
    if padded {
        for t in model.mlp_tensors() {
            print!("{}", make_padding_plan(&t, &tps, a.page_size)?.to_text());
        }
        println!(
            "padding_overhead {:.6}",
            model_padding_overhead(&model, &tps, a.page_size)?
        );
    }
    let plans = match (a.strategy, a.tp_to > a.tp_from) {
        (WeightStrategyArg::WholeCopy, true) => vec![plan_whole_copy_scale_up(
            &model,
            a.tp_from,
            a.tp_to,
            a.page_size,
        )?],
        (WeightStrategyArg::WholeCopy, false) => bail!("whole-copy planning covers scale-up only"),
        (s, true) => {
            let strategy = match s {
                WeightStrategyArg::InPlace => WeightStrategy::InPlace,
                _ => WeightStrategy::PartialSwap,
            };
            plan_weight_scale_up(&model, a.tp_from, a.tp_to, strategy, padded, a.page_size)?
        }
        (_, false) => plan_weight_scale_down(&model, a.tp_from, a.tp_to, padded, a.page_size)?,
    };
    let copied: u64 = plans.iter().map(|p| p.copied_bytes).sum();
    let received: u64 = plans.iter().map(|p| p.received_bytes).sum();
    let peak = plans.iter().map(|p| p.extra_peak_bytes).max().unwrap_or(0);
    let kind = plans
        .first()
        .map_or("none".to_string(), |p| format!("{:?}", p.kind));
    println!("plans {} kind {kind}", plans.len());
    println!("copied_bytes {copied}");
    println!("received_bytes {received}");
    println!("extra_peak_bytes {peak}");
    if a.json {
        if let Some(p) = plans.first() {
            println!("{}", serde_json::to_string_pretty(p)?);
        }
    }
    Ok(())
}

fn check_ffn(a: CheckFfnArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let shape = CheckShape {
        rows: a.rows,
        hidden: a.hidden,
        inter: a.inter,
        tp: a.tp,
        pad: a.pad,
    };
    let (mut padded, mut sharded) = (0f64, 0f64);
    for _ in 0..a.trials {
        let r = random_check(shape, a.activation, &mut rng)?;
        padded = padded.max(r.padded_diff);
        sharded = sharded.max(r.sharded_diff);
    }
    println!("trials {}", a.trials);
    println!("max_padded_diff {padded:e}");
    println!("max_sharded_diff {sharded:e}");
    if padded > a.tolerance || sharded > a.tolerance {
        bail!("difference exceeds tolerance {:e}", a.tolerance);
    }
    println!("ok");
    Ok(())
}

fn tables(a: TablesArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let gpu = (a.gpu_gb * GB as f64).round() as u64;
    println!("model {} weights {:.2} GB", model.name, model.weights_gb);
    println!();
    println!("tp  weight_share  kv_bytes_per_token");
    for &tp in &model.supported_tp {
        let share = static_weight_bytes(&model, tp) as f64 / gpu as f64;
        println!(
            "{tp:<3} {:>11.1}%  {}",
            100.0 * share,
            model.kv_bytes_per_token(tp)
        );
    }
    println!();
    let perf = PerfModel::default();
    println!("tp  throughput_tps  max_tokens  total_tps_per_4_gpus");
    for tp in perf.supported_tp() {
        println!(
            "{tp:<3} {:>14}  {:>10}  {:>20}",
            perf.throughput(tp),
            perf.kv_capacity(tp),
            perf.throughput(tp) * (4 / tp) as f64
        );
    }
    println!();
    print!("tensor");
    for &tp in &model.supported_tp {
        print!("  pages@tp{tp}");
    }
    println!();
    for t in model.mlp_tensors() {
        print!("{}", t.name);
        for &tp in &model.supported_tp {
            print!("  {}", pages_per_tensor(&t, tp, a.page_size)?);
        }
        println!();
    }
    Ok(())
}
