use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actflow::data::synth::{synth_corpus, GeneratorSpec};
use actflow::data::{load_corpus, read_corpus, save_corpus};
use actflow::gradcheck::{dims_from_config, gradient_check, tiny_dims, DEFAULT_EPS, DEFAULT_TOLERANCE};
use actflow::metrics::{Smoothing, TopKAggregation};
use actflow::trainer::{ablate, cross_validate, history_tsv, train};
use actflow::{load_checkpoint, save_checkpoint, BleuOptions, TrainConfig, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "actflow", version, about = "Joint dialogue act and response prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint, or cross-validate.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Train and test every model variant over several seeds.
    Ablate(AblateArgs),
    /// Predict the next system act and response for sessions on stdin.
    Predict(PredictArgs),
    /// Compare backprop against finite differences on a small network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    dialogues: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Generator spec (JSON); the bundled restaurant domain when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_spec")]
    out: Option<PathBuf>,
    /// Print the bundled generator spec and exit.
    #[arg(long)]
    print_spec: bool,
}

/// Training configuration: a `key = value` file, then individual overrides.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    minibatch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    recon_weight: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Comma-separated `window:count` pairs.
    #[arg(long)]
    conv_windows: Option<String>,
    #[arg(long)]
    ae_hidden: Option<usize>,
    #[arg(long)]
    ae_out: Option<usize>,
    #[arg(long)]
    trainable_embeddings: Option<bool>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: actflow::Error| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self) -> actflow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        macro_rules! flag {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    overrides.push((stringify!($field), v.to_string()));
                })*
            };
        }
        flag!(minibatch_size, lr, clip_norm, epochs, alpha, variant, recon_weight, hidden, embed_dim, conv_windows,
              ae_hidden, ae_out, trainable_embeddings, val_fraction, seed);
        if let Some(p) = &self.embeddings {
            overrides.push(("embeddings", p.display().to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| actflow::Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            overrides.push((k, v.to_string()));
        }
        for (k, v) in overrides {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "folds")]
    out: Option<PathBuf>,
    /// Per-epoch log as TSV; defaults to the checkpoint path plus `.history.tsv`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Run k-fold cross-validation over dialogues instead of a single fit.
    #[arg(long)]
    folds: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    bleu: BleuArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothingArg {
    PlusOne,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Max,
    Mean,
}

#[derive(Args)]
struct BleuArgs {
    /// Smoothing for cumulative BLEU-4.
    #[arg(long, value_enum, default_value = "plus-one")]
    smoothing: SmoothingArg,
    /// How the top-k candidates' scores combine per sample.
    #[arg(long, value_enum, default_value = "max")]
    aggregation: AggregationArg,
}

impl BleuArgs {
    fn options(&self) -> BleuOptions {
        BleuOptions {
            smoothing: match self.smoothing {
                SmoothingArg::PlusOne => Smoothing::PlusOne,
                SmoothingArg::None => Smoothing::None,
            },
            aggregation: match self.aggregation {
                AggregationArg::Max => TopKAggregation::Max,
                AggregationArg::Mean => TopKAggregation::Mean,
            },
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Retrieval cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    topk: Vec<usize>,
    /// Report path; `.json` writes JSON, anything else `key=value` lines.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    bleu: BleuArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for per-variant reports and the comparison table.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Fraction of dialogues held out for testing in each seed's split.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Comma-separated subset of variants; all when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Vec<Variant>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    bleu: BleuArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Take layer sizes, variant, alpha and reconstruction weight from a
    /// config file instead of the built-in tiny network.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A single variant; every variant when omitted (or the config's).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    recon_weight: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

fn write_report(path: &Path, report: &actflow::EvalReport) -> io::Result<()> {
    let text = if path.extension().is_some_and(|e| e == "json") {
        report.to_json()
    } else {
        report.to_kv_text()
    };
    fs::write(path, text)
}

fn run(cli: Cli) -> actflow::Result<bool> {
    match cli.command {
        Command::Synth(a) => {
            let spec = match &a.spec {
                Some(p) => GeneratorSpec::load(p)?,
                None => GeneratorSpec::restaurant(),
            };
            if a.print_spec {
                println!("{}", spec.to_json());
                return Ok(true);
            }
            let sessions = synth_corpus(a.dialogues, a.seed, &spec)?;
            let out = a.out.expect("clap requires --out");
            save_corpus(&sessions, &out)?;
            eprintln!("wrote {} dialogues to {}", sessions.len(), out.display());
        }
        Command::Train(a) => {
            let cfg = a.config.resolve()?;
            let sessions = load_corpus(&a.data)?;
            if let Some(folds) = a.folds {
                let cv = cross_validate(&cfg, &sessions, folds, a.bleu.options())?;
                print!("{}", cv.render());
                return Ok(true);
            }
            let model = train(&cfg, &sessions, &mut |r| {
                let val = r.val_micro_f1.map_or("-".to_string(), |v| format!("{v:.4}"));
                eprintln!("epoch {:>3}  loss {:.4}  val micro-F1 {}  {:.1}s", r.epoch, r.loss, val, r.seconds);
            })?;
            let out = a.out.expect("clap requires --out");
            save_checkpoint(&model, &out)?;
            let history = a.history.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".history.tsv");
                PathBuf::from(p)
            });
            fs::write(&history, history_tsv(&model.history))?;
            eprintln!("saved {} and {}", out.display(), history.display());
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.model)?;
            let report = model.evaluate_sessions(&load_corpus(&a.data)?, a.bleu.options(), &a.topk)?;
            print!("{}", report.render_table(model.vocab.acts.labels()));
            if let Some(p) = &a.report {
                write_report(p, &report)?;
            }
        }
        Command::Ablate(a) => {
            let cfg = a.config.resolve()?;
            let sessions = load_corpus(&a.data)?;
            let variants = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() };
            let seeds: Vec<u64> = (0..a.seeds).map(|s| cfg.seed + s).collect();
            fs::create_dir_all(&a.out)?;
            let report = ablate(&cfg, &sessions, &variants, &seeds, a.test_fraction, a.bleu.options(), &mut |r| {
                eprintln!(
                    "{:<16} seed {:<4} micro-F1 {:.4}  bleu4_cumu@3 {:.4}",
                    r.variant.name(),
                    r.seed,
                    r.report.micro_f1,
                    r.report.retrieval.get(&3).map_or(0.0, |x| x.bleu4_cumu)
                );
            })?;
            for v in report.variants() {
                fs::write(a.out.join(format!("{}.json", v.name())), report.variant_json(v))?;
            }
            fs::write(a.out.join("comparison.tsv"), report.to_tsv())?;
            print!("{}", report.render_table());
        }
        Command::Predict(a) => {
            let model = load_checkpoint(&a.model)?;
            let sessions = read_corpus(io::stdin().lock())?;
            let mut out = BufWriter::new(io::stdout().lock());
            for s in &sessions {
                let p = model.predict_next(&s.turns)?;
                writeln!(out, "{}\t{}", p.act_label, p.utterance)?;
            }
            out.flush()?;
        }
        Command::Gradcheck(a) => {
            let file = a.config.as_ref().map(TrainConfig::load).transpose()?;
            let (dims, alpha, recon) = match &file {
                Some(c) => (dims_from_config(c), c.alpha, c.recon_weight),
                None => (tiny_dims(), a.alpha, a.recon_weight),
            };
            let variants = match (a.variant, &file) {
                (Some(v), _) => vec![v],
                (None, Some(c)) => vec![c.variant],
                (None, None) => Variant::ALL.to_vec(),
            };
            let mut ok = true;
            for v in variants {
                let mut cfg = v.config(alpha);
                cfg.recon_weight = recon;
                let r = gradient_check(&dims, &cfg, a.seed, a.eps)?;
                let pass = r.max_relative_error < a.tolerance;
                ok &= pass;
                println!(
                    "{:<16} max relative error {:.3e} ({}, {} scalars) {}",
                    v.name(),
                    r.max_relative_error,
                    r.worst,
                    r.scalars,
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
