use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sead_core::data::{
    gen_synthetic, ingest_examples, load_tables, rng_for, write_examples, CorpusSplit, DataError, ExampleRecord,
    OnError, SplitName, TableStore,
};
use sead_core::eg::{EgMode, EgPolicy};
use sead_core::eval::{
    ablation_csv, ablation_markdown, evaluate, predict, run_ablation, standard_rows, AblationData, DecodeStrategy,
    EvalOptions,
};
use sead_core::model::{load_checkpoint, save_checkpoint, train, ModelConfig, Seq2Seq, TrainConfig};
use sead_core::noising::{make_instance_traced, NoiseConfig};
use sead_core::sql::render_query;
use sead_core::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "sead", version, about = "Schema-aware denoising text-to-SQL toolkit")]
struct Cli {
    /// Master seed for data generation, noising and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with [model], [train], [noise], [eg] and [eval] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Abort with a nonzero exit code on the first malformed input line.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a tables file and an examples file and write normalized copies.
    Ingest(IngestArgs),
    /// Generate a seeded synthetic corpus.
    GenSynthetic(GenArgs),
    /// Write noised training instances for inspection.
    Augment(AugmentArgs),
    /// Train a model and write it to a directory.
    Train(TrainArgs),
    /// Predict SQL for every example in a file.
    Decode(DecodeArgs),
    /// Score predictions against gold queries.
    Eval(EvalArgs),
    /// Train and evaluate the ablation matrix.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    n_tables: usize,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_dev: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    p_drop: Option<f64>,
    #[arg(long)]
    p_add: Option<f64>,
    #[arg(long)]
    p_shuffle: Option<f64>,
    #[arg(long)]
    p_swap: Option<f64>,
    /// Mask spans in the reconstruction branch.
    #[arg(long)]
    infilling: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DecodeOpts {
    #[arg(long, default_value = "off")]
    eg: EgMode,
    #[arg(long, default_value_t = 5)]
    beam_k: usize,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tables: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    opts: DecodeOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tables: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    opts: DecodeOpts,
    /// Also compute BLEU of greedy predictions.
    #[arg(long)]
    bleu: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Comma-separated row names; all six rows by default.
    #[arg(long, value_delimiter = ',')]
    rows: Vec<String>,
    #[command(flatten)]
    opts: DecodeOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    noise: NoiseConfig,
    eg: EgPolicy,
    eval: EvalOptions,
    vocab: VocabConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct VocabConfig {
    min_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { min_freq: 1 }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.noise.seed = s;
            cfg.model.init_seed = s;
        }
        Ok(cfg)
    }

    fn strategy(&self, opts: &DecodeOpts) -> DecodeStrategy {
        match opts.eg {
            EgMode::Off => DecodeStrategy::Greedy,
            mode => {
                let base = EgPolicy::for_mode(mode, opts.beam_k);
                DecodeStrategy::Eg(EgPolicy { release_select: self.eg.release_select, ..base })
            }
        }
    }
}

struct Ctx {
    seed: u64,
    cfg: RunConfig,
    on_error: OnError,
}

impl Ctx {
    fn tables(&self, path: &Path) -> Result<TableStore> {
        let (tables, report) = load_tables(path, self.on_error)?;
        for w in &report.warnings {
            tracing::warn!("{w}");
        }
        tracing::info!(tables = report.records, skipped = report.skipped.len(), "loaded tables");
        Ok(tables)
    }

    fn examples(&self, path: &Path, tables: &TableStore, name: SplitName) -> Result<CorpusSplit> {
        let (split, report) = ingest_examples(path, tables, name, self.on_error)?;
        tracing::info!(examples = report.records, skipped = report.skipped.len(), path = %path.display(), "loaded examples");
        Ok(split)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_model(dir: &Path) -> Result<Seq2Seq> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt")).context("loading vocabulary")?;
    load_checkpoint(&dir.join("model.ckpt"), vocab).context("loading checkpoint")
}

fn cmd_ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let tables = ctx.tables(&a.tables)?;
    let (split, report) = ingest_examples(&a.examples, &tables, SplitName::Train, ctx.on_error)?;
    fs::create_dir_all(&a.out)?;
    tables.write_jsonl(&a.out.join("tables.jsonl"))?;
    write_examples(&a.out.join("examples.jsonl"), &split.records)?;
    write_json(&a.out.join("ingest_report.json"), &report)?;
    println!(
        "ingested {} tables, {} examples ({} skipped, {} warnings)",
        tables.len(),
        split.len(),
        report.skipped.len(),
        report.warnings.len()
    );
    Ok(())
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> Result<()> {
    let total = a.n_train + a.n_dev + a.n_test;
    if total == 0 || a.n_tables == 0 {
        bail!("need at least one table and one example");
    }
    let (tables, corpus) = gen_synthetic(ctx.seed, a.n_tables, total);
    let mut records = corpus.records;
    let test = records.split_off(a.n_train + a.n_dev);
    let dev = records.split_off(a.n_train);
    fs::create_dir_all(&a.out)?;
    tables.write_jsonl(&a.out.join("tables.jsonl"))?;
    write_examples(&a.out.join("train.jsonl"), &records)?;
    write_examples(&a.out.join("dev.jsonl"), &dev)?;
    write_examples(&a.out.join("test.jsonl"), &test)?;
    println!("wrote {} tables, {}/{}/{} train/dev/test examples to {}", tables.len(), records.len(), dev.len(), test.len(), a.out.display());
    Ok(())
}

fn cmd_augment(ctx: &Ctx, a: &AugmentArgs) -> Result<()> {
    let tables = ctx.tables(&a.tables)?;
    let split = ctx.examples(&a.input, &tables, SplitName::Train)?;
    let mut noise = ctx.cfg.noise.clone();
    for (slot, v) in [
        (&mut noise.p_drop, a.p_drop),
        (&mut noise.p_add, a.p_add),
        (&mut noise.p_shuffle, a.p_shuffle),
        (&mut noise.p_swap, a.p_swap),
    ] {
        if let Some(v) = v {
            anyhow::ensure!((0.0..=1.0).contains(&v), "probability {v} outside [0, 1]");
            *slot = v;
        }
    }
    noise.infilling_enabled |= a.infilling;
    let mut out = String::new();
    for (i, r) in split.records.iter().enumerate() {
        let schema = tables.get(&r.table_id)?.schema();
        let mut rng = rng_for(noise.seed, a.epoch as u64, i as u64);
        let (inst, trace) = make_instance_traced(r, &schema, &noise, Some(&tables), &mut rng);
        let line = json!({
            "source": inst.source.join(" "),
            "target": inst.target.join(" "),
            "direction": inst.direction,
            "reconstruction": trace.reconstruction,
            "swapped": trace.swapped,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    fs::write(&a.out, out)?;
    println!("wrote {} instances to {}", split.len(), a.out.display());
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let tables = ctx.tables(&a.tables)?;
    let train_split = ctx.examples(&a.train, &tables, SplitName::Train)?;
    let dev: Vec<ExampleRecord> = match &a.dev {
        Some(p) => ctx.examples(p, &tables, SplitName::Dev)?.records,
        None => Vec::new(),
    };
    let vocab = Vocabulary::build(&train_split, &tables, ctx.cfg.vocab.min_freq)?;
    tracing::info!(size = vocab.len(), "built vocabulary");
    let mut model = Seq2Seq::new(ctx.cfg.model.clone(), vocab)?;
    tracing::info!(parameters = model.params.num_scalars(), "initialized model");
    let report = train(&mut model, &train_split.records, &dev, &tables, &ctx.cfg.noise, &ctx.cfg.train)?;
    fs::create_dir_all(&a.out)?;
    save_checkpoint(&model, &a.out.join("model.ckpt"))?;
    model.vocab.save(&a.out.join("vocab.txt"))?;
    fs::write(a.out.join("config.toml"), toml::to_string(&ctx.cfg)?)?;
    write_json(&a.out.join("train_report.json"), &report)?;
    let last = report.history.last();
    println!(
        "trained {} epochs ({} steps); final loss {:.4}; best dev BLEU {}",
        report.history.len(),
        report.steps,
        last.map_or(f64::NAN, |h| h.mean_loss),
        report.best_bleu.map_or("n/a".to_string(), |b| format!("{b:.1}"))
    );
    Ok(())
}

fn cmd_decode(ctx: &Ctx, a: &DecodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let tables = ctx.tables(&a.tables)?;
    let split = ctx.examples(&a.input, &tables, SplitName::Test)?;
    let strategy = ctx.cfg.strategy(&a.opts);
    let mut out = String::new();
    for r in &split.records {
        let p = predict(&model, r, &tables, &strategy, ctx.cfg.eval.max_len)?;
        let line = json!({
            "question": r.question,
            "table_id": r.table_id,
            "sql": p.query.as_ref().map(|q| render_query(q).join(" ")),
            "ast": p.query,
            "tokens": p.tokens.join(" "),
            "degraded": p.degraded,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    fs::write(&a.out, out)?;
    println!("decoded {} examples to {}", split.len(), a.out.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let tables = ctx.tables(&a.tables)?;
    let split = ctx.examples(&a.input, &tables, SplitName::Test)?;
    let opts = EvalOptions { with_bleu: a.bleu || ctx.cfg.eval.with_bleu, ..ctx.cfg.eval.clone() };
    let report = evaluate(&model, &split.records, &tables, &ctx.cfg.strategy(&a.opts), &opts)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> Result<()> {
    let tables = ctx.tables(&a.tables)?;
    let train_split = ctx.examples(&a.train, &tables, SplitName::Train)?;
    let dev = match &a.dev {
        Some(p) => ctx.examples(p, &tables, SplitName::Dev)?.records,
        None => Vec::new(),
    };
    let test = ctx.examples(&a.test, &tables, SplitName::Test)?.records;
    let vocab = Vocabulary::build(&train_split, &tables, ctx.cfg.vocab.min_freq)?;
    let mut rows = standard_rows(&ctx.cfg.noise);
    if !a.rows.is_empty() {
        for name in &a.rows {
            if !rows.iter().any(|r| &r.name == name) {
                bail!("unknown ablation row `{name}`");
            }
        }
        rows.retain(|r| a.rows.contains(&r.name));
    }
    let data = AblationData { train: &train_split.records, valid: &dev, eval: &test, tables: &tables, vocab: &vocab };
    let results = run_ablation(&rows, &a.seeds, &data, &ctx.cfg.model, &ctx.cfg.train, &ctx.cfg.strategy(&a.opts), &ctx.cfg.eval);
    fs::create_dir_all(&a.out)?;
    let md = ablation_markdown(&results);
    fs::write(a.out.join("ablation.md"), &md)?;
    fs::write(a.out.join("ablation.csv"), ablation_csv(&results))?;
    write_json(&a.out.join("ablation.json"), &results)?;
    print!("{md}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(cfg.train.seed),
        cfg,
        on_error: if cli.strict { OnError::Abort } else { OnError::Skip },
    };
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(&ctx, a),
        Command::GenSynthetic(a) => cmd_gen(&ctx, a),
        Command::Augment(a) => cmd_augment(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Decode(a) => cmd_decode(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| "info".into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<DataError>().is_some_and(|d| matches!(d, DataError::Format { .. })) {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
