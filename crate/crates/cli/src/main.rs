//! `mudok`: generate benchmarks, pre-train, tune, evaluate and run the
//! transfer, ablation and census protocols.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mudok_core::encoder::Encoder;
use mudok_core::experiment::{
    evaluate_state, run_ablation, run_census, run_pretrain, run_transfer, tune, Enhancement, ExperimentConfig, Report,
    TaskKind,
};
use mudok_core::kg::bench::{load_benchmark, write_benchmark, Benchmark};
use mudok_core::kg::synth::{generate_synthetic_benchmark, SyntheticSpec};
use mudok_core::pretrain::checkpoint;
use mudok_core::rec::Split;
use mudok_core::{Error, Result};

const THREADS_VAR: &str = "MUDOK_THREADS";
const PRETRAIN_CHECKPOINT: &str = "pretrain.mdkc";

#[derive(Parser, Debug)]
#[command(
    name = "mudok",
    version,
    about = "Multi-domain KG pre-training and prompt tuning experiments"
)]
struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory all other paths are relative to.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic multi-domain benchmark.
    GenSynth {
        /// Generator parameters (JSON); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Pre-train the encoder on the selected domains.
    Pretrain,
    /// Tune prompts and a recommender on the target domain.
    TuneRec(TuneArgs),
    /// Tune prompts and a text classifier on the target domain.
    TuneText(TuneArgs),
    /// Evaluate a tuned state written by tune-rec or tune-text.
    Eval {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Out-of-domain transfer against the no-pretrain control.
    Transfer {
        #[arg(long)]
        target: Option<String>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Skip the all-domain upper bound.
        #[arg(long)]
        no_full: bool,
    },
    /// Full configuration plus the three ablations.
    Ablate {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Total versus trainable parameter counts.
    Census {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Project to this many entities instead of the benchmark's.
        #[arg(long, requires = "items")]
        entities: Option<usize>,
        /// Tuned items for the projection.
        #[arg(long, requires = "entities")]
        items: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct TuneArgs {
    /// Pre-trained checkpoint; defaults to the one in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    enhancement: Option<EnhancementArg>,
    #[arg(long)]
    target: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Rec,
    Text,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Rec => TaskKind::Rec,
            TaskArg::Text => TaskKind::Text,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnhancementArg {
    Base,
    Mudok,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

struct Ctx {
    workdir: PathBuf,
    cfg: ExperimentConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.workdir.join(&self.cfg.output_dir).join(name)
    }

    fn bench(&self) -> Result<Benchmark> {
        let manifest = self.path(&self.cfg.manifest);
        require(&manifest, "manifest")?;
        load_benchmark(&manifest)
    }

    fn emit(&self, report: &Report) -> Result<()> {
        let dir = self.workdir.join(&self.cfg.output_dir);
        fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
        let json = dir.join(format!("{}.json", report.command));
        fs::write(&json, report.to_json() + "\n").map_err(|e| runtime(&json, e))?;
        let table = report.to_table();
        let txt = dir.join(format!("{}.txt", report.command));
        fs::write(&txt, &table).map_err(|e| runtime(&txt, e))?;
        print!("{table}");
        Ok(())
    }
}

fn runtime(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} not found", path.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    require(path, what)?;
    let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg: ExperimentConfig = match &cli.config {
        Some(p) => read_json(&cli.workdir.join(p), "config")?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx {
        workdir: cli.workdir,
        cfg,
    };
    match cli.command {
        Command::GenSynth { spec, out } => gen_synth(&ctx, cli.seed, spec, &out),
        Command::Pretrain => pretrain(&ctx),
        Command::TuneRec(args) => tune_cmd(ctx, TaskKind::Rec, args),
        Command::TuneText(args) => tune_cmd(ctx, TaskKind::Text, args),
        Command::Eval { state, split } => eval(ctx, &state, split),
        Command::Transfer { target, task, no_full } => {
            let mut ctx = ctx;
            if let Some(t) = task {
                ctx.cfg.task = t.into();
            }
            if target.is_some() {
                ctx.cfg.target_domain = target;
            }
            let bench = ctx.bench()?;
            let cmp = run_transfer(&bench, &ctx.cfg, !no_full, &ctx.workdir)?;
            ctx.emit(&cmp.report())
        }
        Command::Ablate { task } => {
            let mut ctx = ctx;
            if let Some(t) = task {
                ctx.cfg.task = t.into();
            }
            let bench = ctx.bench()?;
            let cmp = run_ablation(&bench, &ctx.cfg, &ctx.workdir)?;
            ctx.emit(&cmp.report())
        }
        Command::Census { task, entities, items } => {
            let mut ctx = ctx;
            if let Some(t) = task {
                ctx.cfg.task = t.into();
            }
            let bench = ctx.bench()?;
            let report = run_census(&bench, &ctx.cfg, entities.zip(items))?;
            ctx.emit(&report)
        }
    }
}

fn gen_synth(ctx: &Ctx, seed: Option<u64>, spec: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => read_json(&ctx.path(&p), "spec")?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let bench = generate_synthetic_benchmark(&spec)?;
    let manifest = write_benchmark(&bench, &ctx.path(out))?;
    println!("{}", manifest.display());
    Ok(())
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let bench = ctx.bench()?;
    let outcome = run_pretrain(&bench, &ctx.cfg)?;
    let ckpt = ctx.out(PRETRAIN_CHECKPOINT);
    let extra = json!({
        "kind": "pretrained",
        "seed": ctx.cfg.seed,
        "domains": outcome.domains,
        "ablation": outcome.ablation.label(),
    });
    checkpoint::save(&ckpt, &outcome.encoder.params, &outcome.encoder.config, extra)?;
    let log = ctx.out("pretrain_log.json");
    let text = serde_json::to_string_pretty(&outcome.log).expect("log serializes") + "\n";
    fs::write(&log, text).map_err(|e| runtime(&log, e))?;
    ctx.emit(&outcome.report(ctx.cfg.seed))
}

fn load_encoder(path: &Path) -> Result<Encoder<f32>> {
    require(path, "checkpoint")?;
    let (store, sidecar) = checkpoint::load(path)?;
    Encoder::from_params(sidecar.encoder, store)
}

fn tune_cmd(mut ctx: Ctx, task: TaskKind, args: TuneArgs) -> Result<()> {
    ctx.cfg.task = task;
    if let Some(e) = args.enhancement {
        ctx.cfg.enhancement = match e {
            EnhancementArg::Base => Enhancement::Base,
            EnhancementArg::Mudok => Enhancement::Mudok,
        };
    }
    if args.target.is_some() {
        ctx.cfg.target_domain = args.target;
    }
    if let Some(c) = args.checkpoint {
        ctx.cfg.checkpoint = Some(c);
    }
    let bench = ctx.bench()?;
    ctx.cfg.target_domain = Some(ctx.cfg.target(&bench)?);
    let encoder = match ctx.cfg.enhancement {
        Enhancement::Base => None,
        Enhancement::Mudok => {
            let path = match &ctx.cfg.checkpoint {
                Some(p) => ctx.path(p),
                None => ctx.out(PRETRAIN_CHECKPOINT),
            };
            let enc = load_encoder(&path)?;
            ctx.cfg.pretrain.encoder = enc.config.clone();
            Some(enc)
        }
    };
    let outcome = tune(&bench, &ctx.cfg, encoder, &ctx.workdir)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let command = match task {
        TaskKind::Rec => "tune-rec",
        TaskKind::Text => "tune-text",
    };
    let extra = json!({ "kind": "tuned", "config": ctx.cfg });
    checkpoint::save(
        &ctx.out(&format!("{command}.mdkc")),
        &outcome.state,
        &ctx.cfg.pretrain.encoder,
        extra,
    )?;
    ctx.emit(&outcome.report(command, ctx.cfg.seed))
}

fn eval(ctx: Ctx, state: &Path, split: SplitArg) -> Result<()> {
    let path = ctx.path(state);
    require(&path, "state")?;
    let (store, sidecar) = checkpoint::load(&path)?;
    if sidecar.extra.get("kind").and_then(|k| k.as_str()) != Some("tuned") {
        return Err(Error::Config(format!("{} is not a tuned state", path.display())));
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(sidecar.extra["config"].clone()).map_err(|source| Error::Json {
            path: checkpoint::sidecar_path(&path),
            source,
        })?;
    cfg.output_dir = ctx.cfg.output_dir.clone();
    let ctx = Ctx {
        workdir: ctx.workdir,
        cfg,
    };
    let bench = ctx.bench()?;
    let (split, label) = match split {
        SplitArg::Valid => (Split::Valid, "valid"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let metrics = evaluate_state(&bench, &ctx.cfg, &store, split, &ctx.workdir)?;
    let columns: Vec<&str> = metrics.keys().map(String::as_str).collect();
    let mut report = Report::new("eval", ctx.cfg.seed, &columns);
    report.push(label, metrics.iter().map(|(k, v)| (k.as_str(), *v)));
    report.details = json!({
        "state": state,
        "task": ctx.cfg.task.label(),
        "domain": ctx.cfg.target_domain,
    });
    ctx.emit(&report)
}
