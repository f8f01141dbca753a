//! `noisin` — train, evaluate and diagnose noise-injected recurrent
//! language models.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 numerical failure
//! (NaN loss or non-finite values), 3 diagnostic invariant violation.

use clap::{Args, Parser, Subcommand};
use noisin::train::{self, DiagnoseOptions, EvalMode, Preset, TrainConfig};
use noisin::{checkpoint, data::Vocab, Error};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "noisin", version, about = "Noise-injection regularization for RNN language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and the config echo.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run unbiasedness, Jensen-bound and risk-decomposition diagnostics.
    Diagnose(DiagnoseArgs),
}

/// Every training-contract field is a flag; omitted flags fall back to the
/// config file, then the preset, then the built-in defaults.
#[derive(Args)]
struct ConfigArgs {
    /// desk | medium | large
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` config file (e.g. an echoed config from a prior run)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    noise_family: Option<String>,
    #[arg(long)]
    noise_mode: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    injection: Option<String>,
    #[arg(long)]
    dropout_input: Option<f64>,
    #[arg(long)]
    dropout_recurrent: Option<f64>,
    #[arg(long)]
    dropout_output: Option<f64>,
    #[arg(long)]
    dropout_per_sequence: Option<bool>,
    #[arg(long)]
    k_samples: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dtype: Option<String>,
    /// noise-off | k-sample
    #[arg(long)]
    eval_mode: Option<String>,
    /// word | char
    #[arg(long)]
    token_level: Option<String>,
    #[arg(long)]
    max_vocab: Option<usize>,
    /// epoch number, or "off"
    #[arg(long)]
    asgd_trigger: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> noisin::Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(p) = &self.preset {
            p.parse::<Preset>()?.apply(&mut cfg);
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_lines(&text)?;
        }
        // Route each present flag through the same key/value parser as the
        // config file, so precedence and parsing are uniform.
        let mut put = |key: &str, val: Option<String>| -> noisin::Result<()> {
            if let Some(v) = val {
                cfg.set(key, &v)?;
            }
            Ok(())
        };
        put("cell", self.cell.clone())?;
        put("layers", self.layers.map(|v| v.to_string()))?;
        put("hidden", self.hidden.map(|v| v.to_string()))?;
        put("emb_dim", self.emb_dim.map(|v| v.to_string()))?;
        put("family", self.family.clone())?;
        put("sigma2", self.sigma2.map(|v| v.to_string()))?;
        put("noise_family", self.noise_family.clone())?;
        put("noise_mode", self.noise_mode.clone())?;
        put("gamma", self.gamma.map(|v| v.to_string()))?;
        put("alpha", self.alpha.map(|v| v.to_string()))?;
        put("injection", self.injection.clone())?;
        put("dropout_input", self.dropout_input.map(|v| v.to_string()))?;
        put("dropout_recurrent", self.dropout_recurrent.map(|v| v.to_string()))?;
        put("dropout_output", self.dropout_output.map(|v| v.to_string()))?;
        put("dropout_per_sequence", self.dropout_per_sequence.map(|v| v.to_string()))?;
        put("k_samples", self.k_samples.map(|v| v.to_string()))?;
        put("lr", self.lr.map(|v| v.to_string()))?;
        put("lr_decay_factor", self.lr_decay_factor.map(|v| v.to_string()))?;
        put("clip_norm", self.clip_norm.map(|v| v.to_string()))?;
        put("batch_size", self.batch_size.map(|v| v.to_string()))?;
        put("unroll", self.unroll.map(|v| v.to_string()))?;
        put("max_epochs", self.max_epochs.map(|v| v.to_string()))?;
        put("seed", self.seed.map(|v| v.to_string()))?;
        put("dtype", self.dtype.clone())?;
        put("eval_mode", self.eval_mode.clone())?;
        put("token_level", self.token_level.clone())?;
        put("max_vocab", self.max_vocab.map(|v| v.to_string()))?;
        put("asgd_trigger", self.asgd_trigger.clone())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training split (plain UTF-8 text)
    #[arg(long)]
    train_file: PathBuf,
    /// Validation split
    #[arg(long)]
    valid_file: PathBuf,
    /// Output directory for config echo, vocab, metrics and checkpoints
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Extra copy of the metrics CSV
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `noisin train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus split to score
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary dump; defaults to vocab.tsv next to the checkpoint
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Config echo; defaults to config.echo next to the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the echoed eval mode: noise-off | k-sample
    #[arg(long)]
    eval_mode: Option<String>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Diagnose a trained checkpoint instead of a fresh initialization
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for risk.csv and diagnose.txt
    #[arg(long, default_value = "diagnose")]
    out: PathBuf,
    /// Comma-separated spread grid for the risk decomposition
    #[arg(long, default_value = "0.1,0.5,1.0")]
    gammas: String,
    /// Monte Carlo samples for the z-score and risk estimates
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    /// Inner resampling size of the covariance estimator
    #[arg(long, default_value_t = 64)]
    inner: usize,
    /// Conditioning sequence length
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    /// Expect the dropout transition to be biased (its violation then does
    /// not fail the run)
    #[arg(long, default_value_t = false)]
    expect_biased: bool,
}

fn run_train(args: &TrainArgs) -> noisin::Result<u8> {
    let cfg = args.cfg.resolve()?;
    let outcome = train::train(&cfg, &args.train_file, &args.valid_file, Some(&args.out))?;
    if let Some(extra) = &args.metrics_out {
        std::fs::write(extra, outcome.metrics.to_csv())?;
    }
    println!(
        "trained {} epochs; best valid ppl {:.4} at epoch {}; final valid ppl {:.4}",
        cfg.max_epochs, outcome.best_valid_ppl, outcome.best_epoch, outcome.final_valid_ppl
    );
    if let Some(p) = &outcome.best_checkpoint {
        println!("best checkpoint: {}", p.display());
    }
    println!("metrics: {}", args.out.join("metrics.csv").display());
    Ok(0)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn run_eval(args: &EvalArgs) -> noisin::Result<u8> {
    let model = checkpoint::load_model(&args.checkpoint)?;
    let vocab_path =
        args.vocab.clone().unwrap_or_else(|| sibling(&args.checkpoint, "vocab.tsv"));
    let vocab = Vocab::parse_dump(&std::fs::read_to_string(&vocab_path)?)?;
    let config_path =
        args.config.clone().unwrap_or_else(|| sibling(&args.checkpoint, "config.echo"));
    let cfg = TrainConfig::parse(&std::fs::read_to_string(&config_path)?)?;
    let mode = match &args.eval_mode {
        Some(m) => m.parse::<EvalMode>()?,
        None => cfg.eval_mode,
    };
    let (loss, ppl) = train::evaluate(
        &model,
        &vocab,
        &args.corpus,
        cfg.token_level,
        cfg.batch_size,
        cfg.unroll,
        mode,
        cfg.seed,
    )?;
    println!("loss {loss}");
    println!("perplexity {ppl}");
    Ok(0)
}

fn run_diagnose(args: &DiagnoseArgs) -> noisin::Result<u8> {
    let cfg = args.cfg.resolve()?;
    let mut gammas = Vec::new();
    for part in args.gammas.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        gammas.push(
            part.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad spread '{part}' in --gammas")))?,
        );
    }
    let options = DiagnoseOptions {
        gammas,
        n_samples: args.samples,
        n_inner: args.inner,
        jensen_ks: vec![2, 16, 64],
        sequence_len: args.seq_len,
        expect_biased: args.expect_biased,
    };
    let report =
        train::diagnose(&cfg, args.checkpoint.as_deref(), &options, Some(&args.out))?;
    print!("{}", report.summary());
    println!("report: {}", args.out.join("risk.csv").display());
    Ok(if report.hard_failure { 3 } else { 0 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are success, not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Diagnose(a) => run_diagnose(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::NanLoss { .. } | Error::NonFinite(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
