use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expertadapt::checkpoint::Checkpoint;
use expertadapt::data::{
    load_manifest, sample_indices, save_dataset, starting_indices, ExpertCombination, ExpertId, SamplingPlan,
};
use expertadapt::experiment::{
    parse_config, parse_shared_config, render_tables, report_from_ledger, write_config, write_tables, ExperimentKind, ExperimentSpec,
    Profile, Runner,
};
use expertadapt::model::CinUnet;
use expertadapt::stats::Format;
use expertadapt::synth::{default_reference_styles, generate_dataset, ExpertStyle, SynthConfig};
use expertadapt::train::{evaluate_model, expert_samples, finetune, train, FinetuneScope};
use expertadapt::{Error, Result};

#[derive(Parser)]
#[command(name = "expertadapt", version, about = "Expert-adaptive segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-expert dataset to disk.
    GenData(GenDataArgs),
    /// Train a model on one combination of experts.
    Train(TrainArgs),
    /// Adapt a checkpoint to a new expert from a few samples.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run one experiment grid and write its ledger and tables.
    Experiment(ExperimentArgs),
    /// Re-render tables from an existing ledger.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config; missing keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse completed work found in the output directory.
    #[arg(long)]
    resume: bool,
    /// Suppress progress lines on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    cases: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// JSON list of expert styles.
    #[arg(long)]
    styles: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; defaults to the config's data source.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated expert ids; defaults to the training-stage experts.
    #[arg(long, value_delimiter = ',')]
    experts: Vec<u32>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    expert: u32,
    /// Number of annotated samples.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Sampling way (1-based).
    #[arg(long, default_value_t = 1)]
    way: usize,
    /// Update only the new expert's branch.
    #[arg(long)]
    expert_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Branch used for prediction.
    #[arg(long)]
    expert: u32,
    /// Expert whose masks are the reference; defaults to --expert.
    #[arg(long)]
    reference: Option<u32>,
}

#[derive(Args)]
struct ExperimentArgs {
    kind: ExperimentKind,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    kind: ExperimentKind,
    /// Results root used by `experiment`.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: Format,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

/// Spec for an experiment grid (`kind` given) or for a single command.
fn resolve(common: &Common, kind: Option<ExperimentKind>) -> Result<ExperimentSpec> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => "{}".to_string(),
    };
    let mut spec = match kind {
        Some(k) => {
            let spec = parse_config(&text, Some(k), common.profile)?;
            let doc: serde_json::Value = serde_json::from_str(&text)?;
            if let Some(v) = doc.get("kind") {
                let file_kind: ExperimentKind = serde_json::from_value(v.clone())?;
                if file_kind != k {
                    return Err(Error::Config(format!(
                        "config is for {} but {} was requested",
                        file_kind.slug(),
                        k.slug()
                    )));
                }
            }
            spec
        }
        None => parse_shared_config(&text, common.profile)?,
    };
    if let Some(out) = &common.out {
        spec.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        spec.train.seed = seed;
    }
    Ok(spec)
}

fn splits(
    spec: &ExperimentSpec,
    data: Option<&Path>,
) -> Result<(expertadapt::data::MultiExpertDataset, expertadapt::data::MultiExpertDataset)> {
    match data {
        Some(root) => load_manifest(root)?.split(spec.data.n_train),
        None => spec.data.load(),
    }
}

fn progress(quiet: bool, msg: impl FnOnce() -> String) {
    if !quiet {
        eprintln!("{}", msg());
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let styles = match &args.styles {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<Vec<ExpertStyle>>(&text).map_err(|e| Error::Config(format!("styles: {e}")))?
        }
        None => default_reference_styles(),
    };
    let cfg = SynthConfig::new(args.cases, args.size.0, args.size.1, styles, args.seed);
    let ds = generate_dataset(&cfg)?;
    save_dataset(&ds, &args.out)?;
    println!("wrote {} cases to {}", ds.len(), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let spec = resolve(&args.common, None)?;
    let combo = if args.experts.is_empty() {
        ExpertCombination::new(spec.pretrain_experts.clone())?
    } else {
        ExpertCombination::from_ids(&args.experts)?
    };
    let out = &spec.out_dir;
    let ckpt_path = out.join("model.ckpt");
    if args.common.resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.header.train.as_ref() == Some(&spec.train) && ck.header.step == spec.train.train_steps {
            println!("{} is up to date", ckpt_path.display());
            return Ok(());
        }
    }
    let (train_set, _) = splits(&spec, args.data.as_deref())?;
    let n_branches = combo.members().iter().map(|e| e.0 as usize).max().unwrap_or(1);
    let mut model = CinUnet::build(
        &expertadapt::model::ModelConfig {
            n_experts: n_branches,
            ..spec.model.clone()
        },
        spec.train.seed,
    )?;
    model.retain_experts(combo.members());
    progress(args.common.quiet, || {
        format!("training on experts {} for {} steps", combo.label(), spec.train.train_steps)
    });
    let outcome = train(&mut model, &train_set, &combo, &spec.train)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    outcome.write_jsonl(&out.join("loss.jsonl"))?;
    Checkpoint::new(model, Some(spec.train.clone()), spec.train.train_steps, spec.train.seed).save(&ckpt_path)?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn run_finetune(args: FinetuneArgs) -> Result<()> {
    let mut spec = resolve(&args.common, None)?;
    if args.expert_only {
        spec.train.finetune_scope = FinetuneScope::ExpertOnly;
    }
    let expert = ExpertId::new(args.expert)?;
    let (train_set, _) = splits(&spec, args.data.as_deref())?;
    let starts = starting_indices(train_set.len(), spec.n_ways)?;
    let start = *starts
        .get(args.way.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("way {} outside 1..={}", args.way, starts.len())))?;
    let positions = sample_indices(&SamplingPlan::new(start, args.samples, train_set.len())?)?;
    let mut model = Checkpoint::load(&args.checkpoint)?.model;
    let samples = expert_samples(&train_set, expert, &positions)?;
    progress(args.common.quiet, || {
        format!("fine-tuning {expert} on cases {positions:?} for {} steps", spec.train.finetune_steps)
    });
    let outcome = finetune(&mut model, &samples, expert, &spec.train)?;
    let out = &spec.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    outcome.write_jsonl(&out.join("finetune_loss.jsonl"))?;
    let path = out.join("finetuned.ckpt");
    Checkpoint::new(model, Some(spec.train.clone()), spec.train.finetune_steps, spec.train.seed).save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let spec = resolve(&args.common, None)?;
    let branch = ExpertId::new(args.expert)?;
    let reference = ExpertId::new(args.reference.unwrap_or(args.expert))?;
    let (_, test_set) = splits(&spec, args.data.as_deref())?;
    let model = Checkpoint::load(&args.checkpoint)?.model;
    let summary = evaluate_model(&model, &test_set, branch, reference)?;
    let json = serde_json::to_string_pretty(&summary)?;
    if args.common.out.is_some() {
        let out = &spec.out_dir;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("eval.json");
        fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))?;
    }
    println!("{json}");
    Ok(())
}

fn run_experiment(args: ExperimentArgs) -> Result<()> {
    let spec = resolve(&args.common, Some(args.kind))?;
    write_config(&spec)?;
    let dir = spec.experiment_dir();
    let mut runner = Runner::new(spec, args.common.resume)?;
    runner.verbose = !args.common.quiet;
    let outcome = runner.run()?;
    write_tables(&dir, &outcome.tables)?;
    print!("{}", render_tables(&outcome.tables, Format::Markdown)?);
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let tables = report_from_ledger(&args.out.join(args.kind.slug()))?;
    print!("{}", render_tables(&tables, args.format)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Eval(a) => run_eval(a),
        Command::Experiment(a) => run_experiment(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
