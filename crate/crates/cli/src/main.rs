//! `fastweights` command-line interface: train, evaluate, generate,
//! convert, benchmark, gradient-check, and ablate, all behind one seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fastweights::ablate;
use fastweights::checkpoint::{load_checkpoint, save_checkpoint};
use fastweights::corpus::{self, CorpusSplits};
use fastweights::featmap::FeatureMapKind;
use fastweights::genbench;
use fastweights::gradients::gradcheck_rule;
use fastweights::model::{
    build_model, convert_mixer, generate, MixerKind, Model, ModelConfig, Sampling,
};
use fastweights::rules::{RuleConfig, RuleKind};
use fastweights::train::{evaluate_perplexity, train, Schedule, TrainConfig};

#[derive(Parser)]
#[command(
    name = "fastweights",
    version,
    about = "Kernel-based recurrent replacements for causal self-attention"
)]
struct Cli {
    /// Seed for all randomness (model init, data order, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level language model.
    Train(TrainArgs),
    /// Report perplexity of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Sample text from a checkpoint (or a fresh random model).
    Generate(GenerateArgs),
    /// Convert a softmax-attention checkpoint onto a fast-weight rule.
    Convert(ConvertArgs),
    /// Benchmark per-token generation latency and live state memory.
    Bench(BenchArgs),
    /// Check analytic rule gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the update-rule ablation grid and emit Markdown + CSV tables.
    Ablate(AblateArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training recipe preset: desk, pile-appendix-a, wt103-appendix-b.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Experiment preset (e.g. table1-decay-phi-off, table2-decay-m32);
    /// overrides --preset and --mixer with the named cell's model + recipe.
    #[arg(long)]
    experiment: Option<String>,
    /// Sequence mixer: softmax, localN, or a rule (add, gated, delta, decay).
    #[arg(long, default_value = "decay")]
    mixer: String,
    /// Corpus file; bundled synthetic text when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// key=value config file overriding recipe fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Output stem: writes <stem>.manifest, <stem>.bin, <stem>.report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include wall-clock timings in the report (off by default so reports
    /// are byte-identical across reruns).
    #[arg(long)]
    timings: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint stem (as written by train/convert --out).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which split to score: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Prior context tokens carried across scoring chunks.
    #[arg(long, default_value_t = 0)]
    context: usize,
    /// Cap on split bytes to score (0 = whole split).
    #[arg(long, default_value_t = 0)]
    max_bytes: usize,
}

#[derive(clap::Args)]
struct GenerateArgs {
    /// Checkpoint stem; omitted = fresh random desk model with --mixer.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "decay")]
    mixer: String,
    #[arg(long, default_value = "The ")]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    /// 0 = greedy; otherwise softmax temperature.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
}

#[derive(clap::Args)]
struct ConvertArgs {
    /// Source checkpoint stem; must hold a softmax-attention model.
    /// Omitted = fresh random desk softmax model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Target update rule: add, gated, delta, decay.
    #[arg(long)]
    rule: String,
    #[arg(long, default_value = "identity")]
    feature_map: String,
    /// Feature size m.
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long)]
    sum_norm: bool,
    #[arg(long)]
    attention_norm: bool,
    /// Output checkpoint stem.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Comma-separated mixer labels.
    #[arg(long, default_value = "softmax,delta,decay")]
    mixers: String,
    /// Comma-separated ascending sequence lengths.
    #[arg(long, default_value = "256,512,1024,2048,4096")]
    lengths: String,
    #[arg(long, default_value_t = 9)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// CSV output path; a .meta sidecar documents the model shape.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// Update rule to check: add, gated, delta, decay.
    #[arg(long)]
    rule: String,
    #[arg(long, default_value = "linear")]
    feature_map: String,
    #[arg(long)]
    sum_norm: bool,
    #[arg(long)]
    attention_norm: bool,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    t: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// double: eps 1e-5, pass threshold 1e-5. single: looser tolerances
    /// (eps 1e-4, threshold 1e-3) for what survives f32 arithmetic; the
    /// comparison itself always runs in double precision.
    #[arg(long, default_value = "double")]
    precision: String,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override training steps per cell (default 300).
    #[arg(long)]
    steps: Option<usize>,
    /// Output stem: writes <stem>.md and <stem>.csv.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Eval(args) => cmd_eval(args, cli.seed),
        Command::Generate(args) => cmd_generate(args, cli.seed),
        Command::Convert(args) => cmd_convert(args, cli.seed),
        Command::Bench(args) => cmd_bench(args, cli.seed),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args, cli.seed),
    }
}

fn load_data(path: &Option<PathBuf>, seed: u64) -> Result<CorpusSplits> {
    match path {
        Some(p) => corpus::load_corpus(p, (0.8, 0.1, 0.1), seed)
            .with_context(|| format!("loading corpus from {}", p.display())),
        None => corpus::bundled_splits().context("building bundled corpus"),
    }
}

fn parse_feature_map(s: &str) -> Result<FeatureMapKind> {
    Ok(match s {
        "identity" | "none" => FeatureMapKind::Identity,
        "linear" => FeatureMapKind::Linear,
        "relu" => FeatureMapKind::Relu,
        "elu1" => FeatureMapKind::Elu1,
        other => bail!("unknown feature map '{other}' (identity, linear, relu, elu1)"),
    })
}

fn apply_config_file(cfg: &mut TrainConfig, mixer: &mut String, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut min_lr: Option<f64> = None;
    let mut cosine = matches!(cfg.schedule, Schedule::Cosine { .. });
    if let Schedule::Cosine { min_lr: m } = cfg.schedule {
        min_lr = Some(m);
    }
    let mut warmup_set = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let ctx = || format!("{}:{}: bad value for {key}", path.display(), lineno + 1);
        match key {
            "batch_size" => cfg.batch_size = value.parse().with_context(ctx)?,
            "seq_len" => cfg.seq_len = value.parse().with_context(ctx)?,
            "steps" => cfg.steps = value.parse().with_context(ctx)?,
            "lr" => cfg.lr = value.parse().with_context(ctx)?,
            "warmup_steps" => {
                cfg.warmup_steps = value.parse().with_context(ctx)?;
                warmup_set = true;
            }
            "clip_norm" => cfg.clip_norm = value.parse().with_context(ctx)?,
            "eval_every" => cfg.eval_every = value.parse().with_context(ctx)?,
            "eval_tokens" => {
                let n: usize = value.parse().with_context(ctx)?;
                cfg.eval_tokens = if n == 0 { None } else { Some(n) };
            }
            "schedule" => match value {
                "constant" => cosine = false,
                "cosine" => cosine = true,
                other => bail!("{}:{}: unknown schedule '{other}'", path.display(), lineno + 1),
            },
            "min_lr" => min_lr = Some(value.parse().with_context(ctx)?),
            "mixer" => *mixer = value.to_string(),
            other => bail!("{}:{}: unknown config key '{other}'", path.display(), lineno + 1),
        }
    }
    // Shortening a recipe shouldn't require re-deriving its warmup; an
    // explicit warmup_steps line is taken literally and validated later.
    if !warmup_set {
        cfg.warmup_steps = cfg.warmup_steps.min(cfg.steps);
    }
    cfg.schedule = if cosine {
        Schedule::Cosine {
            min_lr: min_lr.unwrap_or(0.0),
        }
    } else {
        Schedule::Constant
    };
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: u64) -> Result<i32> {
    let data = load_data(&args.data, seed)?;

    let (model_cfg, mut cfg) = match &args.experiment {
        Some(name) => {
            let spec = ablate::preset(name, seed)?;
            (spec.model, spec.train)
        }
        None => {
            let mut cfg = TrainConfig::preset(&args.preset)?;
            let mut mixer_label = args.mixer.clone();
            if let Some(path) = &args.config {
                apply_config_file(&mut cfg, &mut mixer_label, path)?;
            }
            let mixer = genbench::mixer_from_label(&mixer_label)?;
            (ModelConfig::desk(mixer), cfg)
        }
    };
    if let Some(v) = args.steps {
        cfg.steps = v;
        cfg.warmup_steps = cfg.warmup_steps.min(v);
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    cfg.seed = seed;
    if cfg.seq_len + 1 > model_cfg.max_t {
        bail!(
            "seq_len {} does not fit the model's max_t {}",
            cfg.seq_len,
            model_cfg.max_t
        );
    }

    let mut model = build_model::<f32>(&model_cfg, seed)?;
    eprintln!(
        "training {} ({} params) for {} steps on {}",
        model_cfg.mixer.label(),
        model.param_count(),
        cfg.steps,
        data.provenance.source
    );
    let report = train(&mut model, &data, &cfg)?;

    let lines = report.to_lines(args.timings);
    if let Some(stem) = &args.out {
        save_checkpoint(&model, stem)?;
        let report_path = stem.with_extension("report");
        std::fs::write(&report_path, lines.join("\n") + "\n")?;
        eprintln!(
            "wrote {}.manifest/.bin and {}",
            stem.display(),
            report_path.display()
        );
    }
    for line in &lines {
        println!("{line}");
    }
    Ok(0)
}

fn split_of<'a>(data: &'a CorpusSplits, name: &str) -> Result<&'a [u8]> {
    Ok(match name {
        "train" => &data.train,
        "valid" => &data.valid,
        "test" => &data.test,
        other => bail!("unknown split '{other}' (train, valid, test)"),
    })
}

fn cmd_eval(args: EvalArgs, seed: u64) -> Result<i32> {
    let model = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.data, seed)?;
    let mut split = split_of(&data, &args.split)?;
    if args.max_bytes > 0 {
        split = &split[..split.len().min(args.max_bytes)];
    }
    let ppl = evaluate_perplexity(&model, split, args.context)?;
    println!(
        "split={} context={} bytes={} perplexity={:.6}",
        args.split,
        args.context,
        split.len(),
        ppl
    );
    Ok(0)
}

fn cmd_generate(args: GenerateArgs, seed: u64) -> Result<i32> {
    let model: Model<f32> = match &args.checkpoint {
        Some(stem) => load_checkpoint(stem)?,
        None => {
            let mixer = genbench::mixer_from_label(&args.mixer)?;
            build_model(&ModelConfig::desk(mixer), seed)?
        }
    };
    let prompt = corpus::tokenize(args.prompt.as_bytes());
    if prompt.is_empty() {
        bail!("prompt must be non-empty");
    }
    let sampling = if args.temperature > 0.0 {
        Sampling::Temperature {
            tau: args.temperature,
            seed,
        }
    } else {
        Sampling::Greedy
    };
    let tokens = generate(&model, &prompt, args.tokens, &sampling)?;
    let bytes = corpus::detokenize(&tokens)?;
    println!("{}{}", args.prompt, String::from_utf8_lossy(&bytes));
    Ok(0)
}

fn cmd_convert(args: ConvertArgs, seed: u64) -> Result<i32> {
    let model: Model<f32> = match &args.checkpoint {
        Some(stem) => load_checkpoint(stem)?,
        None => build_model(&ModelConfig::desk(MixerKind::Softmax), seed)?,
    };
    let target = RuleConfig {
        rule: RuleKind::parse(&args.rule)?,
        feature_map: parse_feature_map(&args.feature_map)?,
        sum_norm: args.sum_norm,
        attention_norm: args.attention_norm,
        d: model.config.head_dim,
        m: args.m,
    };
    let converted = convert_mixer(&model, &target, seed)?;
    save_checkpoint(&converted, &args.out)?;
    println!(
        "converted {} -> {} ({} params), wrote {}.manifest/.bin",
        model.config.mixer.label(),
        converted.config.mixer.label(),
        converted.param_count(),
        args.out.display()
    );
    Ok(0)
}

fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .with_context(|| format!("bad length '{x}'"))
        })
        .collect()
}

fn cmd_bench(args: BenchArgs, seed: u64) -> Result<i32> {
    let mixers: Vec<String> = args
        .mixers
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let lengths = parse_lengths(&args.lengths)?;
    let records = genbench::bench_generation_default(&mixers, &lengths, args.repeats, args.warmup, seed)?;
    genbench::emit_csv(&records, &args.out)?;
    let max_t = lengths.last().copied().unwrap_or(1);
    let shape = genbench::bench_model_config(MixerKind::Softmax, max_t);
    let meta_path = PathBuf::from(format!("{}.meta", args.out.display()));
    std::fs::write(
        &meta_path,
        genbench::describe_bench_model(&shape, args.repeats, args.warmup),
    )?;
    print!("{}", genbench::csv_string(&records));
    eprintln!("wrote {} and {}", args.out.display(), meta_path.display());
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let (eps, threshold) = match args.precision.as_str() {
        "double" => (1e-5, 1e-5),
        "single" => (1e-4, 1e-3),
        other => bail!("unknown precision '{other}' (single, double)"),
    };
    let config = RuleConfig {
        rule: RuleKind::parse(&args.rule)?,
        feature_map: parse_feature_map(&args.feature_map)?,
        sum_norm: args.sum_norm,
        attention_norm: args.attention_norm,
        d: args.d,
        m: args.m,
    };
    config.validate()?;
    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..args.seeds as u64 {
        let report = gradcheck_rule(config, args.t, seed, eps)?;
        max_rel_err = max_rel_err.max(report.max_rel_err);
        checked += report.checked;
    }
    println!(
        "rule={} config={} T={} seeds={} checked={checked} max_rel_err={max_rel_err:.3e}",
        args.rule,
        config.describe(),
        args.t,
        args.seeds
    );
    Ok(if max_rel_err <= threshold { 0 } else { 1 })
}

fn cmd_ablate(args: AblateArgs, seed: u64) -> Result<i32> {
    let data = load_data(&args.data, seed)?;
    let mut grid = ablate::table1_grid(seed);
    if let Some(steps) = args.steps {
        for cell in &mut grid {
            if let Some(spec) = &mut cell.spec {
                spec.train.steps = steps;
                spec.train.warmup_steps = spec.train.warmup_steps.min(steps);
                spec.train.eval_every = spec.train.eval_every.min(steps.max(1));
            }
        }
    }
    let table = ablate::run_ablation_grid(&data, &grid, seed)?;
    let md_path = args.out.with_extension("md");
    let csv_path = args.out.with_extension("csv");
    std::fs::write(&md_path, table.to_markdown())?;
    std::fs::write(&csv_path, table.to_csv())?;
    print!("{}", table.to_markdown());
    eprintln!("wrote {} and {}", md_path.display(), csv_path.display());
    Ok(0)
}
