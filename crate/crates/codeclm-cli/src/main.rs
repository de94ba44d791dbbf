//! Batch command surface: `gen-data`, `train`, `sample`, and `eval`.
//!
//! Exit status: 0 on success, 1 on usage/config errors, 2 on runtime
//! failures. Errors print as single `error: ...` lines on stderr. The only
//! environment variable honored is `CODECLM_THREADS` (worker thread count).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use codeclm::evalkit::{ablation_sweep, run_eval, EvalReport};
use codeclm::sampler::{synthesize, ConfidenceRule, DecodePolicy, GuidanceWeights};
use codeclm::toyworld::{
    read_records, sample_instruction_for_phase, write_records, Language, Phase, Record,
};
use codeclm::trainer::{
    load_checkpoint, save_checkpoint, train_phase, write_metrics_csv, DecayShape, TrainConfig,
    TrainerState,
};

#[derive(Parser)]
#[command(name = "codeclm", version, about = "Instruction-to-codec-token language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a line-delimited dataset of sampled instructions with their
    /// oracle semantic ids and acoustic grids.
    GenData(GenDataArgs),
    /// Train one curriculum phase from a TOML config.
    Train(TrainArgs),
    /// Generate an acoustic grid from one instruction (optionally with a
    /// speech prompt).
    Sample(SampleArgs),
    /// Evaluate a checkpoint on a held-out set, optionally sweeping the
    /// guidance strengths.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of records to emit.
    #[arg(long)]
    count: usize,
    /// Dataset richness: pretrain (content only), instruct, or stress.
    #[arg(long, value_parser = parse_phase)]
    phase: Phase,
    /// Languages to mix, e.g. "l0,l1" or "l0".
    #[arg(long, default_value = "l0,l1")]
    languages: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config path (see FORMATS.md).
    config: PathBuf,
    /// Warm-start parameters from a checkpoint, with fresh optimizer state
    /// (phase hand-off).
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue an interrupted run exactly (parameters plus optimizer
    /// state plus step counters).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to take the instruction from.
    #[arg(long, required_unless_present = "literal", conflicts_with = "literal")]
    instruction_file: Option<PathBuf>,
    /// Zero-based line in the instruction file.
    #[arg(long, default_value_t = 0)]
    line: usize,
    /// A single dataset record as inline JSON (grid fields may be omitted).
    #[arg(long)]
    literal: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    #[arg(long, default_value_t = 16)]
    max_semantic: usize,
    #[arg(long, default_value_t = 96)]
    max_frames: usize,
    #[arg(long, default_value_t = 4)]
    nar_iterations: usize,
    /// Rank kept predictions by probability plus Gumbel noise.
    #[arg(long)]
    gumbel_confidence: bool,
    /// Grid file whose first frames serve as the speech prompt.
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Zero-based line in the prompt file.
    #[arg(long, default_value_t = 0)]
    prompt_line: usize,
    /// Prompt length in frames (default: the whole stored grid).
    #[arg(long)]
    prompt_frames: Option<usize>,
    /// Force the language label instead of sampling it ("l0" or "l1").
    #[arg(long, value_parser = parse_language)]
    forced_language: Option<Language>,
    /// Output grid record path (dataset line format).
    #[arg(long)]
    out: PathBuf,
    /// Generation report path (JSON; defaults to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out dataset file.
    #[arg(long)]
    eval_set: PathBuf,
    /// Run the four-row ablation sweep (baseline plus each strength at 2).
    #[arg(long, conflicts_with_all = ["gamma", "alpha", "beta"])]
    sweep: bool,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    max_semantic: usize,
    #[arg(long, default_value_t = 96)]
    max_frames: usize,
    /// Report output path (JSON array; defaults to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    match s {
        "pretrain" => Ok(Phase::Pretrain),
        "instruct" => Ok(Phase::Instruct),
        "stress" => Ok(Phase::Stress),
        _ => Err(format!("unknown phase {s:?} (pretrain|instruct|stress)")),
    }
}

fn parse_language(s: &str) -> Result<Language, String> {
    match s.to_ascii_lowercase().as_str() {
        "l0" => Ok(Language::L0),
        "l1" => Ok(Language::L1),
        _ => Err(format!("unknown language {s:?} (l0|l1)")),
    }
}

/// Training-run file schema. Unknown keys are rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    phase: String,
    dataset: PathBuf,
    out_dir: PathBuf,
    ar_steps: usize,
    nar_steps: usize,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default = "default_peak_lr")]
    peak_lr: f64,
    #[serde(default = "default_warmup")]
    warmup: usize,
    #[serde(default)]
    decay: Option<String>,
    #[serde(default = "default_p_drop")]
    p_drop_text: f64,
    #[serde(default = "default_p_drop")]
    p_drop_st: f64,
    #[serde(default = "default_p_no_prompt")]
    p_no_prompt: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    model_seed: u64,
    #[serde(default = "default_true")]
    use_semantic: bool,
    /// "desk" (default) or "tiny" (fast smoke runs).
    #[serde(default)]
    model: Option<String>,
}

fn default_batch() -> usize {
    8
}
fn default_peak_lr() -> f64 {
    3e-4
}
fn default_warmup() -> usize {
    200
}
fn default_p_drop() -> f64 {
    0.1
}
fn default_p_no_prompt() -> f64 {
    0.3
}
fn default_true() -> bool {
    true
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }

    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("CODECLM_THREADS") {
        let threads: usize =
            value.parse().map_err(|_| anyhow!("CODECLM_THREADS must be a positive integer"))?;
        if threads == 0 {
            bail!("CODECLM_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("building the worker pool")?;
    }
    Ok(())
}

fn parse_languages(spec: &str) -> anyhow::Result<Vec<Language>> {
    let langs: Vec<Language> = spec
        .split(',')
        .map(|s| parse_language(s.trim()).map_err(|e| anyhow!(e)))
        .collect::<anyhow::Result<_>>()?;
    if langs.is_empty() {
        bail!("at least one language is required");
    }
    Ok(langs)
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let languages = parse_languages(&args.languages)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let records: Vec<Record> = (0..args.count as u64)
        .map(|i| {
            let seed = args.seed.wrapping_add(i);
            let language = languages[(i % languages.len() as u64) as usize];
            let inst = sample_instruction_for_phase(seed, language, args.phase);
            Record::from_instruction(seed, &inst)
        })
        .collect();
    write_records(&args.out, &records).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let file: TrainFileConfig = toml::from_str(&text)
        .map_err(|e| anyhow!("{}: {e}", args.config.display()))?;

    let phase = parse_phase(&file.phase).map_err(|e| anyhow!(e))?;
    let decay = match file.decay.as_deref() {
        None | Some("linear") => DecayShape::Linear,
        Some("inverse-sqrt") => DecayShape::InverseSqrt,
        Some(other) => bail!("unknown decay shape {other:?} (linear|inverse-sqrt)"),
    };
    let cfg = TrainConfig {
        phase,
        ar_steps: file.ar_steps,
        nar_steps: file.nar_steps,
        batch_size: file.batch_size,
        peak_lr: file.peak_lr,
        warmup: file.warmup,
        decay,
        p_drop_text: file.p_drop_text,
        p_drop_st: file.p_drop_st,
        p_no_prompt: file.p_no_prompt,
        seed: file.seed,
    };

    if !file.dataset.exists() {
        bail!("dataset {} does not exist", file.dataset.display());
    }
    std::fs::create_dir_all(&file.out_dir)
        .with_context(|| format!("creating {}", file.out_dir.display()))?;

    let records = read_records(&file.dataset)?;
    let dataset: Vec<_> =
        records.iter().map(Record::example).collect::<codeclm::Result<_>>()?;

    let mut state = if let Some(resume) = &args.resume {
        load_checkpoint(resume).with_context(|| format!("resuming from {}", resume.display()))?
    } else if let Some(init) = &args.init {
        let mut state =
            load_checkpoint(init).with_context(|| format!("initializing from {}", init.display()))?;
        state.reset_optimizer();
        state.metric_rows.clear();
        state
    } else {
        let model_config = match file.model.as_deref() {
            None | Some("desk") => codeclm::models::ModelConfig {
                use_semantic: file.use_semantic,
                ..codeclm::models::ModelConfig::desk_default()
            },
            Some("tiny") => codeclm::models::ModelConfig {
                use_semantic: file.use_semantic,
                ..codeclm::models::ModelConfig::tiny()
            },
            Some(other) => bail!("unknown model {other:?} (desk|tiny)"),
        };
        TrainerState::new(codeclm::models::ModelBundle::new(file.model_seed, &model_config)?)
    };

    let report = train_phase(&mut state, &dataset, &cfg)?;
    write_metrics_csv(&file.out_dir.join("metrics.csv"), &report.rows)?;
    state.config_echo = Some(cfg);
    state.metric_rows.extend(report.rows.iter().cloned());

    let ckpt_dir = file.out_dir.join("checkpoint");
    save_checkpoint(&state, &ckpt_dir)?;
    println!(
        "trained {} ar steps and {} nar steps; checkpoint at {}",
        state.adam_ar.step,
        state.adam_nar.step,
        ckpt_dir.display()
    );
    if report.ar_examples > 0 {
        println!(
            "condition dropout: text {:.4}, semantic {:.4}; prompts omitted {:.4}",
            report.text_dropped as f64 / report.ar_examples as f64,
            report.st_dropped as f64 / report.ar_examples as f64,
            if report.nar_examples > 0 {
                report.prompts_omitted as f64 / report.nar_examples as f64
            } else {
                0.0
            }
        );
    }
    Ok(())
}

fn load_record(path: &Path, line: usize) -> anyhow::Result<Record> {
    let records = read_records(path)?;
    records
        .into_iter()
        .nth(line)
        .ok_or_else(|| anyhow!("{} has no line {line}", path.display()))
}

fn cmd_sample(args: SampleArgs) -> anyhow::Result<()> {
    if !args.checkpoint.exists() {
        bail!("checkpoint {} does not exist", args.checkpoint.display());
    }
    let record = if let Some(literal) = &args.literal {
        serde_json::from_str::<Record>(literal).context("parsing --literal record")?
    } else {
        load_record(args.instruction_file.as_ref().expect("clap enforces"), args.line)?
    };
    let instruction = record.instruction()?;
    instruction.validate()?;

    let prompt = match &args.prompt {
        Some(path) => {
            let prompt_record = load_record(path, args.prompt_line)?;
            let grid = prompt_record.acoustic_grid()?;
            let frames = args.prompt_frames.unwrap_or(grid.frames());
            Some(grid.prefix(frames))
        }
        None => None,
    };

    let state = load_checkpoint(&args.checkpoint)?;
    let gw = GuidanceWeights { gamma: args.gamma, alpha: args.alpha, beta: args.beta };
    let policy = DecodePolicy {
        temperature: args.temperature,
        top_k: args.top_k,
        max_semantic: args.max_semantic,
        max_frames: args.max_frames,
        nar_iterations: args.nar_iterations,
        confidence: if args.gumbel_confidence {
            ConfidenceRule::ProbGumbel
        } else {
            ConfidenceRule::Prob
        },
        seed: args.seed,
        force_all_variants: false,
    };

    let (grid, report) = synthesize(
        &state.bundle.store,
        &state.bundle.nets,
        &instruction.tokens,
        &gw,
        &policy,
        prompt.as_ref(),
        args.forced_language,
    )?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    // The output grid record reuses the dataset line format; semantic_raw
    // holds the generated (deduplicated) sequence.
    let out_record =
        Record::from_parts(args.seed, &instruction, report.semantic_ids.clone(), &grid);
    write_records(&args.out, &[out_record])?;

    let report_json = serde_json::to_string_pretty(&report)?;
    match &args.report {
        Some(path) => std::fs::write(path, report_json + "\n")?,
        None => println!("{report_json}"),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    if !args.checkpoint.exists() {
        bail!("checkpoint {} does not exist", args.checkpoint.display());
    }
    if !args.eval_set.exists() {
        bail!("eval set {} does not exist", args.eval_set.display());
    }
    let state = load_checkpoint(&args.checkpoint)?;
    let records = read_records(&args.eval_set)?;
    let eval_set: Vec<_> =
        records.iter().map(Record::example).collect::<codeclm::Result<_>>()?;

    let rows = if args.sweep {
        ablation_sweep()
    } else {
        vec![GuidanceWeights { gamma: args.gamma, alpha: args.alpha, beta: args.beta }]
    };

    let policy = DecodePolicy {
        max_semantic: args.max_semantic,
        max_frames: args.max_frames,
        seed: args.seed,
        ..DecodePolicy::default()
    };
    let checkpoint_id = args.checkpoint.display().to_string();
    let reports: Vec<EvalReport> = rows
        .iter()
        .map(|gw| run_eval(&state.bundle.store, &state.bundle.nets, &eval_set, gw, &policy, &checkpoint_id))
        .collect::<codeclm::Result<_>>()?;

    let json = serde_json::to_string_pretty(&reports)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}
