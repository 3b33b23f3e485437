use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use reform::bench::{
    ablation_table, run_ablation, run_method, run_niah, work_reports, work_table, Method, NiahGrid, WorkReport,
};
use reform::headfinder::{
    all_candidates, bad_heads, eval_heads, gen_kv_dataset, gen_qa_dataset, random_heads, report_tsv, select_heads,
    synthetic_corpus, EvalConfig, HeadEvalResult, Needle, QaItem,
};
use reform::par::with_threads;
use reform::rfwt::DType;
use reform::tokenizer::SEP;
use reform::{EvictionPolicy, HeadSpec, Model, ModelConfig, PipelineConfig, QuerySplit, TokenId, Tokenizer};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "reform", version, about = "Compressive long-context inference toolkit")]
struct Cli {
    /// RFWT weight file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Directory for sidecar reports.
    #[arg(long, global = true, default_value = "reform-out")]
    out: PathBuf,
    /// Vocabulary file, one token per line (byte tokenizer otherwise).
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prefill a prompt and generate greedily.
    Run(RunArgs),
    /// Needle-in-a-haystack grid for one method.
    Niah(NiahArgs),
    /// Score every head candidate by mean normalized rank.
    Headscan(HeadscanArgs),
    /// Selected, random and bad head sets under each eviction policy.
    Ablate(AblateArgs),
    /// Work counters for several methods on one prompt.
    ExportReport(ReportArgs),
    /// Write a random or probe model.
    MakeModel(MakeModelArgs),
}

#[derive(Args)]
struct PromptArgs {
    /// Context text file. Its last non-empty line is the question unless
    /// --question is given.
    #[arg(long)]
    prompt: PathBuf,
    #[arg(long)]
    question: Option<String>,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value = "reform")]
    method: Method,
}

#[derive(Args)]
struct GridArgs {
    /// Haystack text; a synthetic corpus is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated context lengths.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Comma-separated needle depths in percent.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<f64>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum, default_value_t = NeedleKind::Probe)]
    needle: NeedleKind,
}

#[derive(Clone, Copy, ValueEnum)]
enum NeedleKind {
    Probe,
    Classic,
}

#[derive(Args)]
struct NiahArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value = "reform")]
    method: Method,
}

#[derive(Args)]
struct ScanArgs {
    /// Samples per synthetic dataset.
    #[arg(long, default_value_t = 4)]
    scan_samples: usize,
    /// Tokens per synthetic sample.
    #[arg(long, default_value_t = 2048)]
    scan_length: usize,
    #[arg(long, default_value_t = 8)]
    kv_pairs: usize,
    /// QA items as `question<TAB>answer<TAB>doc...` lines.
    #[arg(long)]
    qa_file: Option<PathBuf>,
    /// Neighbors on each side for mean pooling of scores.
    #[arg(long, default_value_t = 20)]
    pool_window: usize,
}

#[derive(Args)]
struct HeadscanArgs {
    #[command(flatten)]
    scan: ScanArgs,
    #[arg(long, default_value_t = 2)]
    per_dataset: usize,
    /// Pattern-matching heads must sit below this fraction of the depth.
    #[arg(long, default_value_t = 0.7)]
    depth_cap: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    scan: ScanArgs,
    /// Size of the random and bad head sets (defaults to the selected set's size).
    #[arg(long)]
    k: Option<usize>,
    /// Explicit bad heads; otherwise the worst heads of a scan.
    #[arg(long, value_delimiter = ',')]
    bad_heads: Option<Vec<HeadSpec>>,
    #[arg(long, value_delimiter = ',', default_value = "h2o,streamingllm,tova")]
    policies: Vec<EvictionPolicy>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "reform,h2o,streamingllm,tova,truncation,dense"
    )]
    methods: Vec<Method>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Random,
    Probe,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F16,
}

#[derive(Args)]
struct MakeModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Random)]
    kind: ModelKind,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    /// Model config TOML for random models (small default otherwise).
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunSidecar<'a> {
    method: Method,
    input_len: usize,
    output_len: usize,
    selection: Option<&'a [usize]>,
    stats: &'a reform::WorkStats,
}

#[derive(Serialize)]
struct ReportsSidecar<'a> {
    reports: &'a [WorkReport],
}

#[derive(Serialize)]
struct HeadscanSidecar<'a> {
    results: &'a [HeadEvalResult],
}

#[derive(Serialize)]
struct AblateSidecar<'a> {
    seed: u64,
    random_seed: u64,
    rows: &'a [reform::bench::AblationRow],
}

#[derive(Debug)]
struct Usage(&'static str);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0)
    }
}

impl std::error::Error for Usage {}

struct Ctx {
    model_path: Option<PathBuf>,
    config: PipelineConfig,
    tok: Tokenizer,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn model(&self) -> Result<Model> {
        let path = self
            .model_path
            .as_ref()
            .ok_or(Usage("--model is required for this command"))?;
        let model = Model::load(path)?;
        if self.tok.vocab_size() > model.config.vocab_size {
            bail!(reform::Error::Config(format!(
                "tokenizer has {} ids but the model only {}",
                self.tok.vocab_size(),
                model.config.vocab_size
            )));
        }
        Ok(model)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| reform::Error::io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, text).map_err(|e| reform::Error::io(&path, e))?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_toml<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, &toml::to_string(value)?)
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| reform::Error::io(path, e))?)
}

/// Context, separator and question as one token stream. With a suffix split
/// the file is encoded verbatim.
fn prompt_tokens(ctx: &Ctx, args: &PromptArgs) -> Result<Vec<TokenId>> {
    let text = read_text(&args.prompt)?;
    if let QuerySplit::Suffix(_) = ctx.config.query_split {
        return Ok(ctx.tok.encode(&text)?);
    }
    let (context, question) = match &args.question {
        Some(q) => (text.as_str(), q.clone()),
        None => {
            let trimmed = text.trim_end();
            match trimmed.rfind('\n') {
                Some(i) => (&trimmed[..i + 1], trimmed[i + 1..].to_string()),
                None => bail!(reform::Error::Split(format!(
                    "{} has a single line; pass --question",
                    args.prompt.display()
                ))),
            }
        }
    };
    let sep = match ctx.config.query_split {
        QuerySplit::Separator(id) => id,
        QuerySplit::Suffix(_) => SEP,
    };
    let mut tokens = ctx.tok.encode(context)?;
    tokens.push(sep);
    tokens.extend(ctx.tok.encode(&question)?);
    Ok(tokens)
}

fn grid_inputs(ctx: &Ctx, args: &GridArgs) -> Result<(NiahGrid, String, Needle)> {
    let default = NiahGrid::default();
    let grid = NiahGrid {
        lengths: args.lengths.clone().unwrap_or(default.lengths),
        depths: args.depths.clone().unwrap_or(default.depths),
        samples: args.samples.unwrap_or(default.samples),
    };
    let longest = grid.lengths.iter().copied().max().unwrap_or(0);
    let corpus = match &args.corpus {
        Some(p) => read_text(p)?,
        None => synthetic_corpus(ctx.seed, 2 * longest + 4096),
    };
    let needle = match args.needle {
        NeedleKind::Probe => Needle::probe(),
        NeedleKind::Classic => Needle::classic(),
    };
    Ok((grid, corpus, needle))
}

fn scan(ctx: &Ctx, model: &Model, args: &ScanArgs) -> Result<(Vec<HeadEvalResult>, Vec<HeadEvalResult>)> {
    let corpus = synthetic_corpus(ctx.seed, 4 * args.scan_length + 4096);
    let items = match &args.qa_file {
        Some(p) => QaItem::parse_tsv(&read_text(p)?)?,
        None => Vec::new(),
    };
    let kv = gen_kv_dataset(
        &ctx.tok,
        &corpus,
        args.kv_pairs,
        args.scan_length,
        args.scan_samples,
        ctx.seed,
    )?;
    let qa = gen_qa_dataset(&ctx.tok, &corpus, &items, args.scan_length, args.scan_samples, ctx.seed)?;
    let c = &ctx.config;
    let eval = EvalConfig {
        chunk_size: c.chunk_size,
        cache_budget: c.cache_budget,
        sink_len: c.sink_len,
        recent_len: c.recent_len,
        eviction: c.eviction,
        observer_window: c.observer_window,
        pool_window: args.pool_window,
    };
    let candidates = all_candidates(&model.config);
    info!(
        "scanning {} candidates on {} + {} samples",
        candidates.len(),
        kv.samples.len(),
        qa.samples.len()
    );
    Ok((
        eval_heads(model, &kv, &candidates, &eval)?,
        eval_heads(model, &qa, &candidates, &eval)?,
    ))
}

fn heads_toml(heads: &[HeadSpec]) -> String {
    let list: Vec<String> = heads.iter().map(|h| format!("\"{h}\"")).collect();
    format!("selected_heads = [{}]\n", list.join(", "))
}

fn cmd_run(ctx: &Ctx, args: &RunArgs) -> Result<()> {
    let model = ctx.model()?;
    let tokens = prompt_tokens(ctx, &args.prompt)?;
    let out = run_method(&model, &tokens, args.method, &ctx.config, args.prompt.max_new)?;
    println!("{}", ctx.tok.decode(&out.output));
    let selection = (args.method == Method::Reform).then_some(out.retained.as_slice());
    ctx.write_toml(
        "run.toml",
        &RunSidecar {
            method: args.method,
            input_len: tokens.len(),
            output_len: out.output.len(),
            selection,
            stats: &out.stats,
        },
    )?;
    Ok(())
}

fn cmd_niah(ctx: &Ctx, args: &NiahArgs) -> Result<()> {
    let model = ctx.model()?;
    let (grid, corpus, needle) = grid_inputs(ctx, &args.grid)?;
    let result = run_niah(
        &model,
        &ctx.tok,
        &corpus,
        &needle,
        &grid,
        args.method,
        &ctx.config,
        ctx.seed,
    )?;
    print!("{}", result.table());
    ctx.write_toml(&format!("niah-{}.toml", args.method.name()), &result)?;
    Ok(())
}

fn cmd_headscan(ctx: &Ctx, args: &HeadscanArgs) -> Result<()> {
    let model = ctx.model()?;
    let (kv, qa) = scan(ctx, &model, &args.scan)?;
    let mut all = kv.clone();
    all.extend(qa.iter().cloned());
    let report = report_tsv(&all);
    print!("{report}");
    ctx.write("headscan.tsv", &report)?;
    ctx.write_toml("headscan.toml", &HeadscanSidecar { results: &all })?;
    let picks = select_heads(&kv, &qa, model.config.n_layers, args.per_dataset, args.depth_cap)?;
    let snippet = heads_toml(&picks);
    PipelineConfig::from_toml(&snippet)?;
    let path = ctx.write("heads.toml", &snippet)?;
    eprintln!("selected heads written to {}", path.display());
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, args: &AblateArgs) -> Result<()> {
    let model = ctx.model()?;
    let (grid, corpus, needle) = grid_inputs(ctx, &args.grid)?;
    let selected = ctx.config.selected_heads.clone();
    let k = args.k.unwrap_or(selected.len());
    let random_seed = ctx.seed.wrapping_add(1);
    info!("random heads drawn with seed {random_seed}");
    let random = random_heads(&model.config, k, random_seed)?;
    let bad = match &args.bad_heads {
        Some(b) => b.clone(),
        None => {
            let (kv, qa) = scan(ctx, &model, &args.scan)?;
            bad_heads(&[&kv, &qa], k)?
        }
    };
    let sets = [
        ("selected".to_string(), selected),
        ("random".to_string(), random),
        ("bad".to_string(), bad),
    ];
    let rows = run_ablation(
        &model,
        &ctx.tok,
        &corpus,
        &needle,
        &grid,
        &sets,
        &args.policies,
        &ctx.config,
        ctx.seed,
    )?;
    print!("{}", ablation_table(&rows));
    ctx.write_toml(
        "ablate.toml",
        &AblateSidecar {
            seed: ctx.seed,
            random_seed,
            rows: &rows,
        },
    )?;
    Ok(())
}

fn cmd_report(ctx: &Ctx, args: &ReportArgs) -> Result<()> {
    let model = ctx.model()?;
    let tokens = prompt_tokens(ctx, &args.prompt)?;
    let reports = work_reports(&model, &tokens, &args.methods, &ctx.config, args.prompt.max_new)?;
    print!("{}", work_table(&reports));
    ctx.write_toml("work.toml", &ReportsSidecar { reports: &reports })?;
    Ok(())
}

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 64,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 16,
        d_ff: 128,
        vocab_size: reform::tokenizer::BYTE_VOCAB_SIZE,
        rope_theta: 10000.0,
        rms_eps: 1e-5,
        max_positions: 32768,
    }
}

fn cmd_make_model(ctx: &Ctx, args: &MakeModelArgs) -> Result<()> {
    let path = ctx
        .model_path
        .as_ref()
        .ok_or(Usage("--model names the file to write"))?;
    let model = match args.kind {
        ModelKind::Probe => reform::probe::probe_model(),
        ModelKind::Random => {
            let cfg = match &args.model_config {
                Some(p) => toml::from_str(&read_text(p)?).map_err(|e| reform::Error::Config(e.to_string()))?,
                None => small_config(),
            };
            Model::init_random(cfg, ctx.seed)?
        }
    };
    let dtype = match args.dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F16 => DType::F16,
    };
    model.save(path, dtype)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let tok = match &cli.vocab {
        Some(p) => Tokenizer::from_vocab_file(p)?,
        None => Tokenizer::Bytes,
    };
    let ctx = Ctx {
        model_path: cli.model,
        config,
        tok,
        seed: cli.seed,
        out: cli.out,
    };
    with_threads(cli.jobs, || match &cli.cmd {
        Command::Run(a) => cmd_run(&ctx, a),
        Command::Niah(a) => cmd_niah(&ctx, a),
        Command::Headscan(a) => cmd_headscan(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::ExportReport(a) => cmd_report(&ctx, a),
        Command::MakeModel(a) => cmd_make_model(&ctx, a),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REFORM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.downcast_ref::<reform::Error>() {
                Some(r) => r.exit_code(),
                None if e.is::<Usage>() => 2,
                None => 1,
            };
            ExitCode::from(code as u8)
        }
    }
}
