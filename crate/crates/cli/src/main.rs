use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tailor_core::model::{ModelSpec, ModuleId};
use tailor_core::recipe::{read_recipe, recipe_from_manifests};
use tailor_core::report::{inspect, size_report, verify, InspectReport, SizeReport, VerifyReport};
use tailor_core::store::list_checkpoints;
use tailor_core::{
    merge, resume, train, GroupLayout, StrategyConfig, StrategyKind, TailorError, TrainerConfig,
};

#[derive(Parser, Debug)]
#[command(name = "tailor", version, about = "Split, merge and resume layer-wise training checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model from scratch, writing checkpoints per strategy.
    Train(TrainArgs),
    /// Write a recovery recipe for a run that failed at some step.
    Plan(PlanArgs),
    /// Execute a merge recipe into a new checkpoint.
    Merge(MergeArgs),
    /// Continue training from a complete checkpoint.
    Resume(ResumeArgs),
    /// Show modules, provenance and size breakdown of a checkpoint.
    Inspect(InspectArgs),
    /// Compare two checkpoints bitwise; exits 1 on the first difference.
    Verify(VerifyArgs),
    /// Checkpoint sizes of a run against full checkpoints at the same steps.
    SizeReport(SizeReportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Model config JSON (same schema as a checkpoint's config.json).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    interval: u64,
    /// full, parity, filter or filter(head=H,tail=T,sparse=S).
    #[arg(long, default_value = "full")]
    strategy: String,
    #[arg(long, default_value_t = 2)]
    ranks: usize,
    #[arg(long)]
    out: PathBuf,
    /// Use the two-group (decay / no-decay) optimizer; full strategy only.
    #[arg(long)]
    coarse_groups: bool,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    failure_step: u64,
    /// Where to write the recipe YAML.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long)]
    recipe: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rank files processed concurrently; defaults to the rank count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    steps: u64,
    /// Run directory for new checkpoints and the step log.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Comma-separated module names, e.g. layers.0,norm. Defaults to every
    /// module saved in --a.
    #[arg(long, value_delimiter = ',')]
    modules: Option<Vec<ModuleId>>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SizeReportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Failure of a subcommand: either a library error or a plain user error.
enum Failure {
    Tailor(TailorError),
    User(String),
    /// Already reported on stdout; just exit 1.
    Silent,
}

impl From<TailorError> for Failure {
    fn from(e: TailorError) -> Self {
        Failure::Tailor(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Resume(a) => cmd_resume(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Verify(a) => cmd_verify(a),
        Command::SizeReport(a) => cmd_size_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tailor(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 2 } else { 1 })
        }
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Silent) => ExitCode::from(1),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn load_spec(path: Option<&Path>) -> Result<ModelSpec, Failure> {
    let Some(path) = path else {
        return Ok(ModelSpec::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let spec = load_spec(args.config.as_deref())?;
    let kind: StrategyKind = args.strategy.parse()?;
    let mut cfg = TrainerConfig::new(spec, StrategyConfig::new(kind, args.interval), args.ranks);
    if args.coarse_groups {
        cfg.layout = GroupLayout::Coarse;
    }
    let trainer = train(&cfg, args.steps, &args.out)?;
    let checkpoints = list_checkpoints(&args.out)?;
    println!(
        "trained {} steps ({} layers, {} ranks, strategy {kind}); {} checkpoints in {}",
        trainer.step(),
        spec.num_layers,
        args.ranks,
        checkpoints.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> Outcome {
    let recipe = recipe_from_manifests(&args.run, args.failure_step)?;
    fs::write(&args.out, recipe.to_yaml()).map_err(|e| Failure::User(format!("{}: {e}", args.out.display())))?;
    println!("recipe drawing on {} checkpoints written to {}", recipe.referenced_paths().len(), args.out.display());
    Ok(())
}

fn cmd_merge(args: MergeArgs) -> Outcome {
    let recipe = read_recipe(&args.recipe)?;
    if args.workers == Some(0) {
        return Err(Failure::User("--workers must be at least 1".into()));
    }
    let report = merge(&recipe, &args.out, args.workers)?;
    println!("merged {} sources into {}", report.sources, report.output.display());
    println!(
        "files read: {} optimizer shards, {} weight files; shards written: {}",
        report.shard_files_read, report.weight_files_read, report.shard_files_written
    );
    println!("wall time: {:.3}s", report.elapsed.as_secs_f64());
    Ok(())
}

fn cmd_resume(args: ResumeArgs) -> Outcome {
    let trainer = resume(&args.ckpt, args.steps, args.out.as_deref())?;
    println!("resumed from {} and trained to step {}", args.ckpt.display(), trainer.step());
    Ok(())
}

fn print_inspect(r: &InspectReport) {
    println!("checkpoint {} (step {}, strategy {})", r.path.display(), r.step, r.strategy);
    println!(
        "model: {} layers, hidden {}, ffn {}, vocab {}, {}; {} ranks",
        r.spec.num_layers,
        r.spec.hidden_dim,
        r.spec.ffn_dim,
        r.spec.vocab_size,
        if r.spec.weight_tied { "tied" } else { "untied" },
        r.num_ranks
    );
    println!("{:<16} {:>8}  source", "module", "step");
    for row in &r.modules {
        println!("{:<16} {:>8}  {}", row.module.to_string(), row.step, row.source);
    }
    if !r.missing.is_empty() {
        let names: Vec<String> = r.missing.iter().map(ToString::to_string).collect();
        println!("missing: {}", names.join(", "));
    }
    println!("size:");
    println!("  bf16 weights      {:>12}", r.bytes.weights);
    println!("  fp32 master       {:>12}", r.master_bytes);
    println!("  fp32 exp_avg      {:>12}", r.exp_avg_bytes);
    println!("  fp32 exp_avg_sq   {:>12}", r.exp_avg_sq_bytes);
    println!("  optimizer files   {:>12}", r.bytes.optimizer);
    println!("  metadata          {:>12}", r.bytes.metadata);
    println!("  total             {:>12}", r.bytes.total());
    println!("  total / bf16 model  {:.4}", r.size_ratio);
    println!("  total / weight file {:.4}", r.weights_file_ratio);
}

fn cmd_inspect(args: InspectArgs) -> Outcome {
    let report = inspect(&args.ckpt)?;
    if args.json {
        print_json(&report);
    } else {
        print_inspect(&report);
    }
    Ok(())
}

fn print_verify(r: &VerifyReport) {
    println!("compared {} modules", r.compared.len());
    match &r.first_divergence {
        None => println!("identical"),
        Some(d) => println!("first divergence: {} {}[{}]: {} vs {}", d.module, d.item, d.index, d.a, d.b),
    }
}

fn cmd_verify(args: VerifyArgs) -> Outcome {
    let report = verify(&args.a, &args.b, args.modules.as_deref())?;
    if args.json {
        print_json(&report);
    } else {
        print_verify(&report);
    }
    if report.equal {
        Ok(())
    } else {
        Err(Failure::Silent)
    }
}

fn print_size_report(r: &SizeReport) {
    println!("{:>8} {:>8} {:>12} {:>12}", "step", "modules", "bytes", "full");
    for c in &r.checkpoints {
        println!("{:>8} {:>8} {:>12} {:>12}", c.step, c.modules, c.total, c.full_equivalent);
    }
    println!("total {} of {} full-checkpoint bytes (ratio {:.4})", r.total_bytes, r.full_equivalent_bytes, r.ratio);
}

fn cmd_size_report(args: SizeReportArgs) -> Outcome {
    let report = size_report(&args.run)?;
    if args.json {
        print_json(&report);
    } else {
        print_size_report(&report);
    }
    Ok(())
}
