//! Subcommands. Each one is a thin wrapper over a core pipeline that reads
//! its inputs, runs, and writes artifacts under the output directory with
//! fixed names.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use lenctl_core::backend::{build_backend, complete, Backend, GenRequest, Message, Role};
use lenctl_core::controller::{run_batch, SessionStatus};
use lenctl_core::feedback::{build_prompt_with, TemplateSet};
use lenctl_core::metrics::{
    emit_judge_prompts, export_distributions, pilot_study, run_grid, score_replies, write_judge_jsonl, GridItem,
    GridSpec, JudgeItem, JudgePrompt, PilotInput,
};
use lenctl_core::sftgen::{build_dataset, build_icl_demo, write_jsonl, PoolEntry, SftVariant, SourceItem};
use lenctl_core::{Counter, InsertionMode, LengthUnit, PromptMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{parse_grid, AppConfig};
use crate::{CliError, CliResult, ExitKind};

#[derive(Debug, Parser)]
#[command(name = "lenctl", version, about = "Length-controlled generation with exact length feedback")]
pub struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the controller on prompts and print the clean text.
    Generate(GenerateArgs),
    /// Sweep a target grid over a dataset and report MAE and PM.
    Bench(BenchArgs),
    /// Ask the backend to estimate lengths of existing texts.
    Pilot(PilotArgs),
    /// Build a length-annotated SFT dataset from sampled responses.
    SftBuild(SftArgs),
    /// Emit judge prompts and score replies.
    Judge(JudgeArgs),
    /// Serve an OpenAI-compatible chat endpoint with length control.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub unit: LengthUnit,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub target: u64,
    #[arg(long)]
    pub mode: Option<PromptMode>,
    #[arg(long)]
    pub insertion_mode: Option<InsertionMode>,
    /// Prompt text; repeatable. Without it, `--input` or stdin is read.
    #[arg(long)]
    pub prompt: Vec<String>,
    /// JSONL file of `{"id", "instruction"}` lines.
    #[arg(long, conflicts_with = "prompt")]
    pub input: Option<PathBuf>,
    /// Demonstration pool for the in-context modes; overrides `demo_pool`.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Write per-step traces and session records under the output directory.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub unit: LengthUnit,
    #[arg(long)]
    pub mode: Option<PromptMode>,
    /// Target grid (`5,10,15` or `100..400:50`); overrides `grid.<unit>`.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<Vec<usize>>,
    /// JSONL file of `{"id", "instruction"}` lines; overrides `dataset`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Use N generated instructions instead of a dataset.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Use only the first N items.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PilotArgs {
    #[arg(long)]
    pub unit: LengthUnit,
    /// JSONL file of `{"sample_id", "text", "specified_len"}` lines.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SftArgs {
    /// JSONL file of `{"id", "question", "response"}` lines; overrides `dataset`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "feedback")]
    pub variant: SftVariant,
    /// Use only the first N items.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// JSONL file of `{"sample_id", "fields": {...}}` lines.
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated judge template ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub templates: Vec<String>,
    /// JSONL file of `{"sample_id", "template_id", "reply"}` lines to score.
    #[arg(long)]
    pub replies: Option<PathBuf>,
    /// Send each prompt to the configured backend and score the replies.
    #[arg(long, conflicts_with = "replies")]
    pub call: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
}

/// Loaded configuration plus the objects every command needs.
pub struct Context {
    pub config: AppConfig,
    pub counter: Counter,
    pub templates: Arc<TemplateSet>,
}

impl Context {
    pub fn load(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> CliResult<Context> {
        let mut config = AppConfig::load(cli.config.as_deref(), env)?;
        if let Some(out) = &cli.out {
            config.out_dir = out.clone();
        }
        if let Some(seed) = cli.seed {
            config.set_seed(seed);
        }
        let counter = config.counter()?;
        let templates = config.template_set()?;
        Ok(Context {
            config,
            counter,
            templates,
        })
    }

    pub fn backend(&self) -> CliResult<Arc<dyn Backend>> {
        build_backend(&self.config.backend, &self.counter).map_err(CliError::config)
    }

    fn out_path(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.config.out_dir)
            .with_context(|| format!("creating {}", self.config.out_dir.display()))
            .map_err(CliError::config)?;
        Ok(self.config.out_dir.join(name))
    }
}

pub fn run(cli: Cli, env: impl Fn(&str) -> Option<String>, stdout: &mut dyn Write) -> CliResult<()> {
    let ctx = Context::load(&cli, env)?;
    match cli.command {
        Command::Generate(args) => cmd_generate(&ctx, args, stdout),
        Command::Bench(args) => cmd_bench(&ctx, args, stdout),
        Command::Pilot(args) => cmd_pilot(&ctx, args, stdout),
        Command::SftBuild(args) => cmd_sft_build(&ctx, args, stdout),
        Command::Judge(args) => cmd_judge(&ctx, args, stdout),
        Command::Serve(args) => crate::proxy::serve_blocking(ctx, &args.listen),
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(CliError::config)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line
            .with_context(|| format!("reading {}", path.display()))
            .map_err(CliError::config)?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), idx + 1))
            .map_err(CliError::config)?;
        out.push(item);
    }
    Ok(out)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> CliResult<()> {
    let file = File::create(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(CliError::config)?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush().map_err(Into::into))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::config)
}

fn emit(stdout: &mut dyn Write, text: impl std::fmt::Display) -> CliResult<()> {
    writeln!(stdout, "{text}").map_err(CliError::config)
}

fn load_pool(ctx: &Context, flag: Option<&Path>, mode: PromptMode) -> CliResult<Vec<PoolEntry>> {
    if !mode.uses_demo() {
        return Ok(Vec::new());
    }
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| ctx.config.demo_pool.clone())
        .ok_or_else(|| CliError::usage(format!("mode {mode} needs --pool or `demo_pool`")))?;
    read_jsonl(&path)
}

/// Generated instructions for desk-scale runs. Each one starts with a
/// distinct subject word.
pub fn synthetic_items(n: usize) -> Vec<GridItem> {
    (0..n)
        .map(|i| GridItem {
            id: i.to_string(),
            instruction: format!("Subject{i:04} deserves a short explanatory piece for a general reader."),
        })
        .collect()
}

/// Keeps file names to a safe alphabet.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.@".contains(c) { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRecord {
    pub id: String,
    pub unit: LengthUnit,
    pub target: usize,
    pub mode: PromptMode,
    pub status: SessionStatus,
    pub count: usize,
    pub feedback_events: usize,
    pub resume_count: usize,
    pub clean_text: String,
    pub error: Option<String>,
}

fn cmd_generate(ctx: &Context, args: GenerateArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let items: Vec<GridItem> = if let Some(path) = &args.input {
        read_jsonl(path)?
    } else if !args.prompt.is_empty() {
        args.prompt
            .iter()
            .enumerate()
            .map(|(i, p)| GridItem {
                id: i.to_string(),
                instruction: p.clone(),
            })
            .collect()
    } else {
        let mut text = String::new();
        std::io::stdin().read_to_string(&mut text).map_err(CliError::config)?;
        vec![GridItem {
            id: "stdin".into(),
            instruction: text.trim().to_string(),
        }]
    };
    if items.is_empty() || items.iter().any(|i| i.instruction.trim().is_empty()) {
        return Err(CliError::usage("empty prompt"));
    }
    let mode = args.mode.unwrap_or(ctx.config.mode);
    let constraint = ctx.config.constraint(args.unit, args.target as usize);
    let mut controller = ctx.config.controller;
    if let Some(m) = args.insertion_mode {
        controller.insertion_mode = m;
    }
    let pool = load_pool(ctx, args.pool.as_deref(), mode)?;
    let demo = if mode.uses_demo() {
        let with_markers = mode.uses_feedback();
        Some(build_icl_demo(&pool, constraint, with_markers, &ctx.counter).map_err(CliError::config)?)
    } else {
        None
    };
    let prompts = items
        .iter()
        .map(|it| build_prompt_with(&ctx.templates, &it.instruction, constraint, mode, demo.as_ref()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::config)?;
    let backend = ctx.backend()?;
    let results = run_batch(backend.as_ref(), &prompts, &controller, &ctx.counter, ctx.config.parallelism)
        .map_err(CliError::config)?;

    let mut first_failure: Option<CliError> = None;
    let mut records = Vec::with_capacity(items.len());
    for (item, result) in items.iter().zip(&results) {
        let (state, error) = match result {
            Ok(s) => (s, None),
            Err(e) => (e.state.as_ref(), Some(&e.error)),
        };
        if items.len() > 1 {
            emit(stdout, format_args!("### {}", item.id))?;
        }
        emit(stdout, &state.clean_text)?;
        if let Some(e) = error {
            tracing::error!(id = %item.id, error = %e, "session failed");
            first_failure.get_or_insert_with(|| {
                CliError::new(ExitKind::of_controller(e), anyhow::anyhow!("{}: {e}", item.id))
            });
        }
        records.push(GenerateRecord {
            id: item.id.clone(),
            unit: constraint.unit,
            target: constraint.target,
            mode,
            status: state.status,
            count: ctx.counter.count_value(&state.clean_text, constraint.unit),
            feedback_events: state.events.len(),
            resume_count: state.resume_count,
            clean_text: state.clean_text.clone(),
            error: error.map(ToString::to_string),
        });
    }

    if args.trace {
        write_file(&ctx.out_path("generate.jsonl")?, |w| {
            for r in &records {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        let dir = ctx.out_path("traces")?;
        fs::create_dir_all(&dir).map_err(CliError::config)?;
        for (item, result) in items.iter().zip(&results) {
            let state = lenctl_core::controller::final_state(result);
            write_file(&dir.join(format!("{}.jsonl", file_stem(&item.id))), |w| {
                state.write_trace(w).map_err(Into::into)
            })?;
        }
    }
    first_failure.map_or(Ok(()), Err)
}

fn cmd_bench(ctx: &Context, args: BenchArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut items = if let Some(n) = args.synthetic {
        synthetic_items(n)
    } else {
        let path = args
            .input
            .clone()
            .or_else(|| ctx.config.dataset.clone())
            .ok_or_else(|| CliError::usage("bench needs --input, --synthetic or `dataset`"))?;
        read_jsonl::<GridItem>(&path)?
    };
    if let Some(limit) = args.limit {
        items.truncate(limit);
    }
    let mode = args.mode.unwrap_or(ctx.config.mode);
    let pool = load_pool(ctx, args.pool.as_deref(), mode)?;
    let spec = GridSpec {
        unit: args.unit,
        grid: args.grid.unwrap_or_else(|| ctx.config.grids.get(args.unit).clone()),
        mode,
        epsilon: *ctx.config.epsilon.get(args.unit),
        templates: &ctx.templates,
        demo_pool: &pool,
        parallelism: ctx.config.parallelism,
    };
    let backend = ctx.backend()?;
    let report = run_grid(&items, &spec, backend.as_ref(), &ctx.config.controller, &ctx.counter)
        .map_err(CliError::config)?;
    if report.pairs.is_empty() {
        let first = report.failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(CliError::backend(anyhow::anyhow!("every session failed; first error: {first}")));
    }

    let stem = format!("bench_{}_{}", args.unit, mode);
    write_file(&ctx.out_path(&format!("{stem}.csv"))?, |w| {
        export_distributions(&report.pairs, w).map_err(Into::into)
    })?;
    let mut summary = report.summary_json();
    summary["mode"] = json!(mode);
    summary["failed_samples"] = json!(report.failures);
    summary["capped_samples"] = json!(report.capped);
    write_file(&ctx.out_path(&format!("{stem}.json"))?, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n").map_err(Into::into)
    })?;
    let s = &report.summary;
    emit(
        stdout,
        format_args!(
            "unit={} mode={} n={} mae={:.4} pm={:.4} epsilon={} failures={} capped={}",
            s.unit,
            mode,
            s.n,
            s.mae,
            s.pm,
            s.epsilon,
            report.failures.len(),
            report.capped.len()
        ),
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn cmd_pilot(ctx: &Context, args: PilotArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let inputs: Vec<PilotInput> = read_jsonl(&args.input)?;
    let backend = ctx.backend()?;
    let report =
        pilot_study(&inputs, args.unit, backend.as_ref(), &ctx.counter, &ctx.templates).map_err(CliError::config)?;
    write_file(&ctx.out_path(&format!("pilot_{}.json", args.unit))?, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.write_all(b"\n").map_err(Into::into)
    })?;
    emit(stdout, "bucket\tn\tmae_est_vs_gen\tmae_gen_vs_spec")?;
    for b in &report.buckets {
        emit(
            stdout,
            format_args!("{}\t{}\t{}\t{}", b.label, b.n, fmt_opt(b.mae_est_vs_gen), fmt_opt(b.mae_gen_vs_spec)),
        )?;
    }
    if !report.unparseable.is_empty() {
        tracing::warn!(count = report.unparseable.len(), "estimates without a parseable count");
    }
    Ok(())
}

fn cmd_sft_build(ctx: &Context, args: SftArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let path = args
        .input
        .clone()
        .or_else(|| ctx.config.dataset.clone())
        .ok_or_else(|| CliError::usage("sft-build needs --input or `dataset`"))?;
    let mut items: Vec<SourceItem> = read_jsonl(&path)?;
    if let Some(n) = args.n {
        items.truncate(n);
    }
    if items.is_empty() {
        return Err(CliError::config(anyhow::anyhow!("{} has no items", path.display())));
    }
    let report = build_dataset(&items, args.variant, ctx.config.seed, &ctx.counter, &ctx.templates);
    let variant = match args.variant {
        SftVariant::Plain => "plain",
        SftVariant::Feedback => "feedback",
    };
    write_file(&ctx.out_path(&format!("sft_{variant}.jsonl"))?, |w| {
        write_jsonl(&report.examples, w).map_err(Into::into)
    })?;
    emit(
        stdout,
        format_args!("examples={} dropped={}", report.examples.len(), report.dropped.len()),
    )
}

#[derive(Debug, Deserialize)]
struct ReplyLine {
    sample_id: String,
    template_id: String,
    reply: String,
}

fn cmd_judge(ctx: &Context, args: JudgeArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let items: Vec<JudgeItem> = read_jsonl(&args.input)?;
    let ids: Vec<&str> = args.templates.iter().map(|s| s.trim()).collect();
    let prompts = emit_judge_prompts(&items, &ids, &ctx.templates).map_err(CliError::config)?;
    write_file(&ctx.out_path("judge_prompts.jsonl")?, |w| {
        write_judge_jsonl(&prompts, w).map_err(Into::into)
    })?;

    let replies: Vec<(JudgePrompt, String)> = if let Some(path) = &args.replies {
        let mut by_key: BTreeMap<(String, String), String> = read_jsonl::<ReplyLine>(path)?
            .into_iter()
            .map(|r| ((r.sample_id, r.template_id), r.reply))
            .collect();
        prompts
            .iter()
            .filter_map(|p| {
                by_key
                    .remove(&(p.sample_id.clone(), p.template_id.clone()))
                    .map(|r| (p.clone(), r))
            })
            .collect()
    } else if args.call {
        let backend = ctx.backend()?;
        let mut out = Vec::with_capacity(prompts.len());
        for p in &prompts {
            let mut req = GenRequest::new(vec![Message::new(Role::User, p.prompt_text.clone())]);
            req.sampling = ctx.config.controller.sampling;
            let reply = complete(backend.as_ref(), &req).map_err(CliError::backend)?;
            out.push((p.clone(), reply.text));
        }
        out
    } else {
        return emit(stdout, format_args!("prompts={}", prompts.len()));
    };

    let scores = score_replies(&replies, &ctx.templates).map_err(CliError::config)?;
    write_file(&ctx.out_path("judge_scores.jsonl")?, |w| {
        for s in &scores {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let mut per_template: BTreeMap<&str, (u64, usize, usize)> = BTreeMap::new();
    for s in &scores {
        let e = per_template.entry(&s.template_id).or_default();
        match s.score {
            Some(v) => {
                e.0 += u64::from(v);
                e.1 += 1;
            }
            None => e.2 += 1,
        }
    }
    for (id, (sum, n, bad)) in per_template {
        let mean = if n == 0 { "-".to_string() } else { format!("{:.4}", sum as f64 / n as f64) };
        emit(stdout, format_args!("{id}\tscored={n}\tunparsed={bad}\tmean={mean}"))?;
    }
    Ok(())
}
