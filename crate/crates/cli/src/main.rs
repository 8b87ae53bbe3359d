//! `moa` — command-line harness for the mixture-of-adapters retrieval
//! library: train, evaluate, run the ablation/sweep suites, export routing
//! heatmaps, count parameters, gradient-check the full model, and dump the
//! synthetic dataset.
//!
//! Exit codes: 0 success, 1 bad usage or invalid configuration, 2 runtime
//! failure (I/O, corrupt checkpoint, non-finite loss, failed check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moa_core::adapter::{count_trainable_params, full_scale_preset, CountSpec, RouterMode};
use moa_core::backbone::DualEncoder;
use moa_core::data::{generate_dataset, write_manifest};
use moa_core::harness::{
    export_expert_heatmap, load_checkpoint, model_grad_check, restore_trainable, resume,
    run_ablation_suite, run_hyperparam_sweep, train, HeatmapInput, MetricsRow, Overrides,
    RunConfig, SweepParam, TrainOutcome,
};
use moa_core::{Error, Result};

/// Gradient-check tolerance the PASS/FAIL verdict is printed against.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "moa",
    version,
    about = "Sparse mixture-of-adapters for dual-encoder retrieval: training and analysis harness",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write config.toml, metrics.csv, and checkpoint.bin
    Train(TrainArgs),
    /// Score retrieval on the held-out split (optionally from a checkpoint)
    Eval(EvalArgs),
    /// Run the four-arm ablation suite over several seeds
    Ablate(AblateArgs),
    /// Sweep one mixture knob (expert count or active-expert count)
    Sweep(SweepArgs),
    /// Export a token-by-expert routing weight grid as .txt and .svg
    Heatmap(HeatmapArgs),
    /// Closed-form trainable-parameter count with a per-branch breakdown
    CountParams(CountParamsArgs),
    /// Check every trainable gradient against finite differences
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic dataset and write it to disk
    GenData(GenDataArgs),
}

/// Flags shared by every subcommand: a config file plus targeted overrides.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Run configuration (TOML); the built-in toy configuration when omitted
    #[arg(long, value_name = "PATH", global = false)]
    config: Option<PathBuf>,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the expert count
    #[arg(long, value_name = "N")]
    n_experts: Option<usize>,
    /// Override how many experts each token activates
    #[arg(long, value_name = "K")]
    top_k: Option<usize>,
    /// Override the balance-loss weight
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the router mode
    #[arg(long, value_parser = parse_router, value_name = "standard|domain")]
    router: Option<RouterMode>,
    /// Output directory (a per-command default under ./out when omitted)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Continue from this checkpoint instead of starting fresh
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps (on resume: replaces the old cap)
    #[arg(long, value_name = "N")]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Restore trained weights from this checkpoint (its embedded config is
    /// used; config and override flags are rejected)
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Seeds per arm, numbered seed, seed+1, ...
    #[arg(long, default_value_t = 5, value_name = "N")]
    num_seeds: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Knob to sweep
    #[arg(long, value_parser = parse_sweep_param, default_value = "top-k", value_name = "n-experts|top-k")]
    param: SweepParam,
    /// Comma-separated values for the knob (defaults: top-k 1,2; n-experts 2,4,6)
    #[arg(long, value_delimiter = ',', value_name = "V,V,...")]
    values: Vec<usize>,
    /// Seeds per point, numbered seed, seed+1, ...
    #[arg(long, default_value_t = 5, value_name = "N")]
    num_seeds: u64,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Route this caption: comma-separated token ids
    #[arg(long, value_delimiter = ',', value_name = "ID,ID,...")]
    tokens: Option<Vec<usize>>,
    /// Route the image of this held-out pair (index into the test split)
    #[arg(long, value_name = "IDX")]
    image_from_data: Option<usize>,
    /// Hooked layer to plot (default: the last one)
    #[arg(long, value_name = "IDX")]
    layer: Option<usize>,
    /// Restore trained weights from this checkpoint (its embedded config is
    /// used; config and override flags are rejected)
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CountParamsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Published full-scale geometry instead of the config's (`paper-clip-b16`)
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
}

fn parse_router(s: &str) -> std::result::Result<RouterMode, String> {
    match s {
        "standard" => Ok(RouterMode::Standard),
        "domain" => Ok(RouterMode::Domain),
        other => Err(format!("unknown router `{other}` (expected `standard` or `domain`)")),
    }
}

fn parse_sweep_param(s: &str) -> std::result::Result<SweepParam, String> {
    match s {
        "n-experts" | "n_experts" => Ok(SweepParam::NExperts),
        "top-k" | "top_k" => Ok(SweepParam::TopK),
        other => Err(format!("unknown sweep knob `{other}` (expected `n-experts` or `top-k`)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests land here too; those are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for errors in what the user asked for, 2 for failures while doing it.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument { .. }
        | Error::Data(_)
        | Error::Serialization(_) => 1,
        Error::ShapeMismatch { .. }
        | Error::Contract(_)
        | Error::NonFinite { .. }
        | Error::Checkpoint(_)
        | Error::Io(_) => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Heatmap(a) => cmd_heatmap(a),
        Cmd::CountParams(a) => cmd_count_params(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::GenData(a) => cmd_gen_data(a),
    }
}

/// Load the config (or the built-in toy default), apply override flags, and
/// validate the result.
fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ov = Overrides {
        seed: common.seed,
        n_experts: common.n_experts,
        top_k: common.top_k,
        alpha: common.alpha,
        router: common.router,
    };
    ov.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Commands that take a checkpoint use its embedded config; mixing that with
/// config or override flags would silently pick one, so reject it instead.
fn reject_config_flags(common: &CommonArgs, source: &str) -> Result<()> {
    let any = common.config.is_some()
        || common.seed.is_some()
        || common.n_experts.is_some()
        || common.top_k.is_some()
        || common.alpha.is_some()
        || common.router.is_some();
    if any {
        return Err(Error::InvalidArgument {
            op: "cli",
            msg: format!(
                "{source} carries its own config; drop --config and the override flags"
            ),
        });
    }
    Ok(())
}

fn out_dir(common: &CommonArgs, default: &str) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(default))
}

fn print_outcome(outcome: &TrainOutcome) {
    println!("{}", MetricsRow::CSV_HEADER);
    for row in &outcome.rows {
        println!("{}", row.to_csv());
    }
    if outcome.stopped_early {
        println!(
            "stopped by the step cap at epoch {} step {}",
            outcome.progress.epoch, outcome.progress.step
        );
    }
    println!("metrics:    {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let out = out_dir(&args.common, "train");
    let outcome = match &args.resume {
        Some(path) => {
            reject_config_flags(&args.common, "--resume")?;
            let ckpt = load_checkpoint(path)?;
            resume(ckpt, &out, args.max_steps)?
        }
        None => {
            let mut cfg = load_config(&args.common)?;
            if args.max_steps.is_some() {
                cfg.optim.max_steps = args.max_steps;
            }
            train(&cfg, &out)?
        }
    };
    print_outcome(&outcome);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (cfg, restored) = match &args.checkpoint {
        Some(path) => {
            reject_config_flags(&args.common, "--checkpoint")?;
            let ckpt = load_checkpoint(path)?;
            (ckpt.config.clone(), Some(ckpt))
        }
        None => (load_config(&args.common)?, None),
    };
    let derived = cfg.derived();
    let dataset = generate_dataset(&derived.data)?;
    let mut model = DualEncoder::build(derived.backbone.clone(), Some(derived.moa.clone()))?;
    if let Some(ckpt) = &restored {
        restore_trainable(&mut model.store, &ckpt.params)?;
    }
    let report = moa_core::harness::evaluate_model(&model, &dataset.test, derived.seed)?;
    println!(
        "queries: {}  gallery: {}  (held-out split)",
        report.n_queries, report.n_gallery
    );
    println!("rank1: {:.6}", report.rank1);
    println!("rank5: {:.6}", report.rank5);
    println!("rank10: {:.6}", report.rank10);
    println!("map: {:.6}", report.map);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    if args.num_seeds == 0 {
        return Err(Error::InvalidArgument {
            op: "cli",
            msg: "--num-seeds must be at least 1".into(),
        });
    }
    let seeds: Vec<u64> = (0..args.num_seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let out = out_dir(&args.common, "ablate");
    let table = run_ablation_suite(&cfg, &seeds, &out)?;
    println!("arm,median_rank1,median_map,median_entropy_image,median_entropy_text");
    for s in &table.summaries {
        println!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            s.arm, s.median_rank1, s.median_map, s.median_entropy_image, s.median_entropy_text
        );
    }
    println!("table: {}", out.join("ablation.csv").display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    if args.num_seeds == 0 {
        return Err(Error::InvalidArgument {
            op: "cli",
            msg: "--num-seeds must be at least 1".into(),
        });
    }
    let values = if args.values.is_empty() {
        match args.param {
            SweepParam::TopK => vec![1, 2],
            SweepParam::NExperts => vec![2, 4, 6],
        }
    } else {
        args.values.clone()
    };
    let seeds: Vec<u64> = (0..args.num_seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let out = out_dir(&args.common, "sweep");
    let table = run_hyperparam_sweep(&cfg, args.param, &values, &seeds, &out)?;
    println!(
        "{},median_rank1,median_map,trainable_params,expert_flops_per_token",
        table.param.label()
    );
    for row in &table.rows {
        println!(
            "{},{:.6},{:.6},{},{}",
            row.value, row.median_rank1, row.median_map, row.trainable_params,
            row.expert_flops_per_token
        );
    }
    println!("table: {}", out.join("sweep.csv").display());
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let (cfg, restored) = match &args.checkpoint {
        Some(path) => {
            reject_config_flags(&args.common, "--checkpoint")?;
            let ckpt = load_checkpoint(path)?;
            (ckpt.config.clone(), Some(ckpt))
        }
        None => (load_config(&args.common)?, None),
    };
    let derived = cfg.derived();
    let input = match (&args.tokens, args.image_from_data) {
        (Some(ids), None) => HeatmapInput::TextTokens(ids.clone()),
        (None, Some(idx)) => {
            let dataset = generate_dataset(&derived.data)?;
            let pair = dataset.test.get(idx).ok_or_else(|| Error::InvalidArgument {
                op: "cli",
                msg: format!(
                    "--image-from-data {idx} is out of range; the test split has {} pairs",
                    dataset.test.len()
                ),
            })?;
            HeatmapInput::ImagePixels(pair.image.clone())
        }
        _ => {
            return Err(Error::InvalidArgument {
                op: "cli",
                msg: "pass exactly one of --tokens or --image-from-data".into(),
            })
        }
    };
    let mut model = DualEncoder::build(derived.backbone.clone(), Some(derived.moa.clone()))?;
    if let Some(ckpt) = &restored {
        restore_trainable(&mut model.store, &ckpt.params)?;
    }
    let out = out_dir(&args.common, "heatmap");
    std::fs::create_dir_all(&out)?;
    let data = export_expert_heatmap(&model, &input, args.layer, &out.join("heatmap"))?;
    println!(
        "layer {}: {} tokens x {} experts",
        data.layer,
        data.weights.len(),
        data.n_experts
    );
    println!("grid: {}", data.txt_path.display());
    println!("plot: {}", data.svg_path.display());
    Ok(())
}

fn count_spec_from_config(cfg: &RunConfig) -> CountSpec {
    CountSpec {
        d_image: cfg.backbone.d_model,
        d_text: cfg.backbone.d_model,
        layers_image: cfg.backbone.n_layers,
        layers_text: cfg.backbone.n_layers,
        n_experts: cfg.moa.n_experts,
        reduction: cfg.moa.reduction,
        prompt_count: cfg.moa.prompt_count,
        router: cfg.moa.router,
    }
}

fn cmd_count_params(args: CountParamsArgs) -> Result<()> {
    let spec = match args.preset.as_deref() {
        Some("paper-clip-b16") => full_scale_preset(),
        Some(other) => {
            return Err(Error::InvalidArgument {
                op: "cli",
                msg: format!("unknown preset `{other}` (expected `paper-clip-b16`)"),
            })
        }
        None => count_spec_from_config(&load_config(&args.common)?),
    };
    let breakdown = count_trainable_params(&spec)?;
    println!(
        "geometry: image {}x{} layers, text {}x{} layers, {} experts, reduction {}, {:?} router",
        spec.d_image, spec.layers_image, spec.d_text, spec.layers_text, spec.n_experts,
        spec.reduction, spec.router
    );
    println!("image adapters:  {}", breakdown.adapters_image);
    println!("image router:    {}", breakdown.router_image);
    println!("text adapters:   {}", breakdown.adapters_text);
    println!("text router:     {}", breakdown.router_text);
    println!("total trainable: {}", breakdown.total());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let outcome = model_grad_check(cfg.seed)?;
    println!("coords checked: {}", outcome.report.coords);
    println!("max relative error: {:.3e}", outcome.report.max_rel_err);
    println!(
        "seed used: {} ({} candidate(s) probed)",
        outcome.seed_used, outcome.attempts
    );
    if outcome.report.passes(GRADCHECK_TOL) {
        println!("PASS (tol {GRADCHECK_TOL:e})");
        Ok(())
    } else {
        println!("FAIL (tol {GRADCHECK_TOL:e})");
        Err(Error::Contract(format!(
            "gradient check failed: max relative error {:.3e} exceeds {GRADCHECK_TOL:e}",
            outcome.report.max_rel_err
        )))
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let derived = cfg.derived();
    let dataset = generate_dataset(&derived.data)?;
    let out = out_dir(&args.common, "data");
    write_manifest(&dataset, &out)?;
    println!(
        "wrote {} train + {} test pairs to {}",
        dataset.train.len(),
        dataset.test.len(),
        out.display()
    );
    println!("manifest: {}", out.join("manifest.jsonl").display());
    Ok(())
}
