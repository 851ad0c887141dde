use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sar_core::fmt::{Fmt, FmtConfig};
use sar_core::inference::{bench, evaluate_nll, generate, paint, PaintSpec, SamplerConfig};
use sar_core::masks::{gen_masks_with, validate_masks, MaskOptions};
use sar_core::policy::PlanPolicy;
use sar_core::schedule::{GridShape, OutputIntervals};
use sar_core::synthdata::{read_jsonl, write_jsonl, TokenGrid};
use sar_core::training::{train_loop, DatasetSource, Trainer};

use crate::config::{thread_cap, CliError, CliResult, LoadedSource, RunConfig};
use crate::output::{bench_csv, masks_text, pgm, write_mask_files};

/// Set autoregressive modeling on synthetic token grids.
#[derive(Debug, Parser)]
#[command(name = "sar", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes loss.csv, model.ckpt and the effective config.
    Train(TrainArgs),
    /// Generate grids from a checkpoint.
    Sample(SampleArgs),
    /// Complete partially known grids.
    Paint(PaintArgs),
    /// Count attention work for one generation, with or without the cache.
    Bench(BenchArgs),
    /// Print the three attention masks of an interval list.
    Masks(MasksArgs),
    /// Teacher-forced NLL of a checkpoint on a dataset under a plan.
    Eval(EvalArgs),
    /// Export grids drawn from the configured source as JSON lines.
    Data(DataArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 2.0)]
    cfg: f32,
    #[arg(long = "top-k", default_value_t = 0)]
    top_k: usize,
    #[arg(long = "top-p", default_value_t = 1.0)]
    top_p: f32,
    #[arg(long, default_value_t = 1.0)]
    temp: f32,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    cache: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplingArgs {
    fn sampler(&self) -> CliResult<SamplerConfig> {
        let s = SamplerConfig {
            temperature: self.temp,
            top_k: self.top_k,
            top_p: self.top_p,
            cfg_scale: self.cfg,
            seed: self.seed,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the plan the checkpoint was trained with.
    #[arg(long)]
    plan: Option<String>,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// JSON output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the grids as a plain greymap.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PaintArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON object `{"known": {"<cell>": <token>, ...}}`.
    #[arg(long)]
    known: PathBuf,
    #[arg(long, default_value_t = 4)]
    sets: usize,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence length; must be a square number.
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    sets: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    cache: Switch,
    /// Plan order and schedule, as in `raster-<sets>-cosine`.
    #[arg(long, default_value = "raster")]
    order: String,
    #[arg(long, default_value = "cosine")]
    schedule: String,
    /// Benchmark a trained model instead of a freshly initialized one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    /// Comma-separated set sizes, e.g. 1,2,2,3.
    #[arg(long, value_delimiter = ',', required = true)]
    intervals: Vec<usize>,
    /// Masked-modeling masks: the first set is unsupervised context.
    #[arg(long)]
    masked: bool,
    /// With --masked, use full decoder self-attention.
    #[arg(long)]
    drop_decoder_self_mask: bool,
    /// Directory for m_e.csv, m_ds.csv, m_dc.csv and masks.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    plan: String,
    /// JSON-lines token grids.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the source definition as JSON.
    #[arg(long)]
    source_out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let threads = thread_cap()?;
    log::info!("worker threads: 1 (cap {threads})");
    match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Paint(a) => paint_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Masks(a) => masks(a),
        Command::Eval(a) => eval(a),
        Command::Data(a) => data(a),
    }
}

fn parse_plan(s: &str) -> CliResult<PlanPolicy> {
    Ok(s.parse::<PlanPolicy>()?)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn load_checkpoint(path: &Path) -> CliResult<(Fmt, Option<PlanPolicy>)> {
    if !path.exists() {
        return Err(CliError::runtime(format!("checkpoint {} not found", path.display())));
    }
    let (model, meta, _) = Fmt::load(path)?;
    let policy = meta
        .get("train")
        .and_then(|t| t.get("policy"))
        .and_then(|p| p.as_str())
        .and_then(|p| p.parse().ok());
    Ok((model, policy))
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    cfg.command = "train".into();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.plan {
        cfg.plan = parse_plan(p)?;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    cfg.train.policy = cfg.plan;
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("sar-run"));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("effective_config.json"), to_json(&cfg)?)?;

    let source = cfg.load_source()?;
    // validate the policy against the grid before any work
    cfg.plan.sample(cfg.model.grid, cfg.seed, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let model = Fmt::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let trainer = Trainer::new(model, cfg.train.clone())?;
    let outcome = match &source {
        LoadedSource::Pattern(s) => {
            std::fs::write(out.join("source.json"), s.to_json()? + "\n")?;
            train_loop(trainer, s, Some(&out))?
        }
        LoadedSource::Dataset(grids) => train_loop(trainer, &DatasetSource { grids: grids.clone() }, Some(&out))?,
    };
    let last = outcome.stats.last().map(|s| s.loss);
    eprintln!(
        "trained {} steps, final loss {}, checkpoint {}",
        outcome.trainer.step,
        last.map_or("n/a".into(), |l| format!("{l:.4}")),
        out.join("model.ckpt").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SampleOutput<'a> {
    plan: String,
    sampler: &'a SamplerConfig,
    cache: bool,
    grids: Vec<TokenGrid>,
}

fn write_grids(
    out: Option<&Path>,
    pgm_path: Option<&Path>,
    plan: String,
    sampler: &SamplerConfig,
    cache: bool,
    grids: Vec<TokenGrid>,
    vocab: usize,
) -> CliResult<()> {
    if let Some(p) = pgm_path {
        emit(Some(p), &pgm(&grids, vocab))?;
    }
    emit(out, &to_json(&SampleOutput { plan, sampler, cache, grids })?)
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let sampler = a.sampling.sampler()?;
    let (model, trained) = load_checkpoint(&a.checkpoint)?;
    let policy = match (&a.plan, trained) {
        (Some(p), _) => parse_plan(p)?,
        (None, Some(p)) => p,
        (None, None) => return Err(CliError::usage("--plan is required for this checkpoint")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.sampling.seed);
    let mut grids = Vec::with_capacity(a.count);
    for _ in 0..a.count {
        let plan = policy.sample_for_inference(model.config.grid, a.sampling.seed, &mut rng)?;
        grids.push(generate(&model, a.class, &plan, &sampler, a.sampling.cache.on(), &mut rng)?.grid);
    }
    write_grids(
        a.out.as_deref(),
        a.pgm.as_deref(),
        policy.to_string(),
        &sampler,
        a.sampling.cache.on(),
        grids,
        model.config.vocab,
    )
}

fn paint_cmd(a: PaintArgs) -> CliResult<()> {
    let sampler = a.sampling.sampler()?;
    let (model, trained) = load_checkpoint(&a.checkpoint)?;
    match trained {
        Some(p) if p.uses_random_order() => {}
        Some(p) => log::warn!("checkpoint trained with {p}; painting expects a random-order model"),
        None => log::warn!("checkpoint has no training policy; painting expects a random-order model"),
    }
    let text = std::fs::read_to_string(&a.known)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", a.known.display())))?;
    let spec: PaintSpec = serde_json::from_str(&text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.sampling.seed);
    let grids = (0..a.count)
        .map(|_| paint(&model, a.class, &spec, a.sets, &sampler, a.sampling.cache.on(), &mut rng))
        .collect::<sar_core::Result<Vec<_>>>()?;
    write_grids(
        a.out.as_deref(),
        a.pgm.as_deref(),
        format!("paint-{}", a.sets),
        &sampler,
        a.sampling.cache.on(),
        grids,
        model.config.vocab,
    )
}

fn bench_cmd(a: BenchArgs) -> CliResult<()> {
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => {
            let side = (a.n as f64).sqrt().round() as usize;
            if side * side != a.n || side == 0 {
                return Err(CliError::validation(format!("--n {} is not a square number", a.n)));
            }
            let grid = GridShape::square(side)?;
            Fmt::new(FmtConfig::tiny(grid, 8, 4), &mut ChaCha8Rng::seed_from_u64(a.seed))?
        }
    };
    if model.config.seq_len() != a.n {
        return Err(CliError::validation(format!(
            "--n {} does not match the checkpoint's {} tokens",
            a.n,
            model.config.seq_len()
        )));
    }
    let policy = parse_plan(&format!("{}-{}-{}", a.order, a.sets, a.schedule))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let plan = policy.sample_for_inference(model.config.grid, a.seed, &mut rng)?;
    let report = bench(&model, &plan, &SamplerConfig::greedy(), a.cache.on(), &mut rng)?;
    emit(a.out.as_deref(), &bench_csv(&report))
}

fn masks(a: MasksArgs) -> CliResult<()> {
    let intervals = OutputIntervals::new(a.intervals)?;
    if intervals.total() == 0 {
        return Err(CliError::validation("intervals cover no tokens"));
    }
    if a.masked && intervals.num_sets() < 2 {
        return Err(CliError::validation("--masked needs at least two sets"));
    }
    let options = MaskOptions::for_training(!a.masked, a.drop_decoder_self_mask);
    let m = gen_masks_with(&intervals, options)?;
    let violations = validate_masks(&m, &intervals);
    if !violations.is_empty() {
        return Err(CliError::runtime(format!("generated masks are inconsistent: {violations:?}")));
    }
    match &a.out {
        Some(dir) => write_mask_files(&m, dir),
        None => {
            print!("{}", masks_text(&m));
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct EvalOutput {
    plan: String,
    grids: usize,
    nll_per_token: f64,
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let policy = parse_plan(&a.plan)?;
    let grids = read_jsonl(&a.data)?;
    for g in &grids {
        if g.shape != model.config.grid {
            return Err(CliError::validation("dataset grid does not match the checkpoint"));
        }
        g.validate(model.config.vocab)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let nll = evaluate_nll(&model, &grids, &policy, a.seed, &mut rng)?;
    let out = EvalOutput { plan: policy.to_string(), grids: grids.len(), nll_per_token: nll };
    emit(a.out.as_deref(), &to_json(&out)?)
}

fn data(a: DataArgs) -> CliResult<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    cfg.model.validate()?;
    let LoadedSource::Pattern(source) = cfg.load_source()? else {
        return Err(CliError::validation("data export needs a pattern source"));
    };
    let grids = source.sample_dataset(a.count, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_jsonl(&a.out, &grids)?;
    if let Some(p) = &a.source_out {
        emit(Some(p), &(source.to_json()? + "\n"))?;
    }
    Ok(())
}
