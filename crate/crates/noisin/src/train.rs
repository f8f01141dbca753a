//! Training, evaluation and diagnostics drivers shared by the CLI and the
//! acceptance suite.
//!
//! A run is fully determined by its [`TrainConfig`]: the resolved config is
//! echoed to `config.echo` next to the outputs, and re-running from the
//! echoed file reproduces the run bit for bit (wall-clock column aside).

use crate::checkpoint;
use crate::data::{BatchStream, TokenLevel, Vocab, WindowView};
use crate::expfam::Family;
use crate::model::{
    self, DropoutConfig, JensenGap, LayerInjection, NoisinModel, UnbiasednessReport,
};
use crate::noise::{InjectionMode, NoiseFamily, NoiseSpec};
use crate::regularizer::{self, RiskRow};
use crate::rng::Pcg32;
use crate::rnn::CellKind;
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EvalMode {
    /// Evaluate the deterministic expected network (injection off).
    NoiseOff,
    /// Average the loss over K noisy rollouts.
    KSample,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::NoiseOff => "noise-off",
            EvalMode::KSample => "k-sample",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noise-off" | "noise_off" | "off" => Ok(EvalMode::NoiseOff),
            "k-sample" | "k_sample" | "ksample" => Ok(EvalMode::KSample),
            other => Err(Error::Config(format!("unknown eval mode '{other}'"))),
        }
    }
}

/// The reproducibility contract of one run. Defaults are the standard
/// word-level training settings: SGD at learning rate 30 decayed by 1.2 on
/// validation regressions, gradient clipping at norm 0.25, 35-step unroll,
/// batch 80, seed 1111, dropout rates (0.5, 0.4, 0.5).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    pub family: Family,
    pub sigma2: f64,
    pub noise_family: NoiseFamily,
    pub noise_mode: InjectionMode,
    pub gamma: f64,
    pub alpha: f64,
    pub injection: LayerInjection,
    pub dropout_input: f64,
    pub dropout_recurrent: f64,
    pub dropout_output: f64,
    pub dropout_per_sequence: bool,
    pub k_samples: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub unroll: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub dtype: Dtype,
    pub eval_mode: EvalMode,
    pub token_level: TokenLevel,
    pub max_vocab: usize,
    /// Tail-averaged SGD: averaging starts at this epoch. None = plain SGD.
    pub asgd_trigger: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F64,
}

impl Dtype {
    pub fn name(&self) -> &'static str {
        "f64"
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f64" => Ok(Dtype::F64),
            "f32" => Err(Error::Config(
                "f32 storage is not implemented; all computation runs at f64".into(),
            )),
            other => Err(Error::Config(format!("unknown dtype '{other}'"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cell: CellKind::Lstm,
            layers: 2,
            hidden: 650,
            emb_dim: 650,
            family: Family::Categorical,
            sigma2: 1.0,
            noise_family: NoiseFamily::Gaussian,
            noise_mode: InjectionMode::Off,
            gamma: 1.0,
            alpha: crate::noise::DEFAULT_GAMMA_SHAPE,
            injection: LayerInjection::EveryLayer,
            dropout_input: 0.5,
            dropout_recurrent: 0.4,
            dropout_output: 0.5,
            dropout_per_sequence: false,
            k_samples: 1,
            lr: 30.0,
            lr_decay_factor: 1.2,
            clip_norm: 0.25,
            batch_size: 80,
            unroll: 35,
            max_epochs: 200,
            seed: 1111,
            dtype: Dtype::F64,
            eval_mode: EvalMode::NoiseOff,
            token_level: TokenLevel::Word,
            max_vocab: 10_000,
            asgd_trigger: None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Preset {
    /// 1-layer, 256 hidden, char-level, small epoch budget; runs on a CPU
    /// in minutes.
    Desk,
    /// 2 x 650 word-level network.
    Medium,
    /// 2 x 1500 word-level network.
    Large,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "medium" => Ok(Preset::Medium),
            "large" => Ok(Preset::Large),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

impl Preset {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        match self {
            Preset::Desk => {
                cfg.cell = CellKind::Lstm;
                cfg.layers = 1;
                cfg.hidden = 256;
                cfg.emb_dim = 256;
                cfg.token_level = TokenLevel::Char;
                cfg.max_vocab = 256;
                cfg.max_epochs = 20;
                cfg.batch_size = 8;
                cfg.unroll = 35;
                cfg.lr = 8.0;
                cfg.lr_decay_factor = 1.0;
                cfg.dropout_input = 0.0;
                cfg.dropout_recurrent = 0.0;
                cfg.dropout_output = 0.0;
            }
            Preset::Medium => {
                cfg.cell = CellKind::Lstm;
                cfg.layers = 2;
                cfg.hidden = 650;
                cfg.emb_dim = 650;
                cfg.token_level = TokenLevel::Word;
                cfg.max_vocab = 10_000;
            }
            Preset::Large => {
                cfg.cell = CellKind::Lstm;
                cfg.layers = 2;
                cfg.hidden = 1500;
                cfg.emb_dim = 1500;
                cfg.token_level = TokenLevel::Word;
                cfg.max_vocab = 10_000;
            }
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.emb_dim == 0 {
            return Err(Error::Config("layers, hidden and emb_dim must be positive".into()));
        }
        if self.batch_size == 0 || self.unroll == 0 {
            return Err(Error::Config("batch_size and unroll must be positive".into()));
        }
        if self.k_samples == 0 {
            return Err(Error::Config("k_samples must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.lr_decay_factor >= 1.0) {
            return Err(Error::Config("lr must be >= 0 and lr_decay_factor >= 1".into()));
        }
        if self.max_vocab < 2 {
            return Err(Error::Config("max_vocab must be >= 2".into()));
        }
        self.noise_spec()?;
        DropoutConfig::new(self.dropout_input, self.dropout_recurrent, self.dropout_output)?;
        Ok(())
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        if self.noise_mode == InjectionMode::Off {
            Ok(NoiseSpec::off())
        } else {
            NoiseSpec::new(self.noise_family, self.gamma, self.alpha, self.noise_mode)
        }
    }

    fn dropout_config(&self) -> Result<Option<DropoutConfig>> {
        let mut d =
            DropoutConfig::new(self.dropout_input, self.dropout_recurrent, self.dropout_output)?;
        d.per_sequence = self.dropout_per_sequence;
        Ok(d.is_active().then_some(d))
    }

    /// Builds the freshly initialized model this config describes.
    pub fn build_model(&self, vocab_size: usize, rng: &mut Pcg32) -> Result<NoisinModel> {
        NoisinModel::init(
            self.cell,
            self.layers,
            self.hidden,
            self.emb_dim,
            vocab_size,
            self.family,
            self.sigma2,
            self.noise_spec()?,
            self.k_samples,
            self.injection,
            self.dropout_config()?,
            rng,
        )
    }

    /// Every field as `key = value` lines; parseable by [`TrainConfig::parse`].
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cell = {}", self.cell.name());
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "emb_dim = {}", self.emb_dim);
        let _ = writeln!(s, "family = {}", self.family.name());
        let _ = writeln!(s, "sigma2 = {}", self.sigma2);
        let _ = writeln!(s, "noise_family = {}", self.noise_family.name());
        let _ = writeln!(s, "noise_mode = {}", self.noise_mode.name());
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "injection = {}", self.injection.name());
        let _ = writeln!(s, "dropout_input = {}", self.dropout_input);
        let _ = writeln!(s, "dropout_recurrent = {}", self.dropout_recurrent);
        let _ = writeln!(s, "dropout_output = {}", self.dropout_output);
        let _ = writeln!(s, "dropout_per_sequence = {}", self.dropout_per_sequence);
        let _ = writeln!(s, "k_samples = {}", self.k_samples);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "unroll = {}", self.unroll);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "dtype = {}", self.dtype.name());
        let _ = writeln!(s, "eval_mode = {}", self.eval_mode.name());
        let _ = writeln!(s, "token_level = {}", self.token_level.name());
        let _ = writeln!(s, "max_vocab = {}", self.max_vocab);
        let _ = writeln!(
            s,
            "asgd_trigger = {}",
            self.asgd_trigger.map_or("off".to_string(), |e| e.to_string())
        );
        s
    }

    /// Parses `key = value` lines ('#' starts a comment) on top of the
    /// defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply_lines(text)?;
        Ok(cfg)
    }

    pub fn apply_lines(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "cell" => self.cell = value.parse()?,
            "layers" => self.layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "emb_dim" => self.emb_dim = num(key, value)?,
            "family" => self.family = value.parse()?,
            "sigma2" => self.sigma2 = num(key, value)?,
            "noise_family" => self.noise_family = value.parse()?,
            "noise_mode" => self.noise_mode = value.parse()?,
            "gamma" => self.gamma = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "injection" => self.injection = value.parse()?,
            "dropout_input" => self.dropout_input = num(key, value)?,
            "dropout_recurrent" => self.dropout_recurrent = num(key, value)?,
            "dropout_output" => self.dropout_output = num(key, value)?,
            "dropout_per_sequence" => self.dropout_per_sequence = num(key, value)?,
            "k_samples" => self.k_samples = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "unroll" => self.unroll = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dtype" => self.dtype = value.parse()?,
            "eval_mode" => self.eval_mode = value.parse()?,
            "token_level" => self.token_level = value.parse()?,
            "max_vocab" => self.max_vocab = num(key, value)?,
            "asgd_trigger" => {
                self.asgd_trigger = if value == "off" { None } else { Some(num(key, value)?) }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

/// One appended metrics row per epoch.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ppl: f64,
    pub valid_loss: f64,
    pub valid_ppl: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,train_loss,train_ppl,valid_loss,valid_ppl,lr,wall_time_s";

#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_ppl, r.valid_loss, r.valid_ppl, r.lr, r.wall_time_s
            );
        }
        s
    }

    /// The deterministic columns (everything but wall time); the
    /// reproducibility contract compares these.
    pub fn deterministic_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_ppl,valid_loss,valid_ppl,lr\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_ppl, r.valid_loss, r.valid_ppl, r.lr
            );
        }
        s
    }
}

pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub final_valid_ppl: f64,
    /// Model state at the best validation epoch.
    pub best_model: NoisinModel,
    pub vocab: Vocab,
    pub best_checkpoint: Option<PathBuf>,
}

/// RNG stream derivation for a run: one root seeded by the config, then in
/// order init, noise, dropout, eval children.
fn run_rngs(seed: u64) -> (Pcg32, Pcg32, Pcg32, Pcg32) {
    let mut root = Pcg32::seeded(seed);
    let init = root.split();
    let noise = root.split();
    let dropout = root.split();
    let eval = root.split();
    (init, noise, dropout, eval)
}

fn read_corpus(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{} is not valid UTF-8", path.display())))
}

/// Token-weighted evaluation over a batched stream, hidden state carried
/// across windows (reset at the start). KSample mode averages K noisy
/// rollouts per window on a child of `eval_rng`.
pub fn evaluate_stream(
    model: &NoisinModel,
    stream: &BatchStream,
    eval_mode: EvalMode,
    eval_rng: &mut Pcg32,
) -> Result<(f64, f64)> {
    let mut states = model.initial_states(stream.batch_size());
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for w in stream.windows() {
        let view = w.view();
        let (obj, finals) = match eval_mode {
            EvalMode::NoiseOff => {
                let (_, finals, obj) = model.deterministic_forward(view, &states)?;
                (obj, finals)
            }
            EvalMode::KSample => {
                let (_, finals, obj) =
                    model.noisy_forward_k(view, &states, model.k_samples, eval_rng, None)?;
                (obj, finals)
            }
        };
        total += obj.total_nll;
        tokens += obj.tokens;
        states = finals;
    }
    let loss = total / tokens as f64;
    Ok((loss, loss.exp()))
}

/// Tail-averaged parameter state for the averaged-SGD variant.
struct ParamAverage {
    avg: Vec<Tensor>,
    count: usize,
}

impl ParamAverage {
    fn new(model: &NoisinModel) -> Self {
        ParamAverage {
            avg: model.named_params().into_iter().map(|(_, t)| t.clone()).collect(),
            count: 1,
        }
    }

    fn update(&mut self, model: &NoisinModel) {
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for (slot, (_, p)) in self.avg.iter_mut().zip(model.named_params()) {
            for (a, &v) in slot.data_mut().iter_mut().zip(p.data()) {
                *a += w * (v - *a);
            }
        }
    }

    fn materialize(&self, model: &NoisinModel) -> NoisinModel {
        let mut m = model.clone();
        for ((_, p), a) in m.named_params_mut().into_iter().zip(&self.avg) {
            p.data_mut().copy_from_slice(a.data());
        }
        m
    }
}

/// Full training driver: windowed truncated BPTT with per-window state
/// carry (reset each epoch), per-epoch validation, validation-triggered
/// learning-rate decay, best-checkpoint tracking, metrics and config echo.
///
/// With `out_dir` set, writes `config.echo`, `vocab.tsv`, `metrics.csv`,
/// per-improvement checkpoints `ckpt_epoch_N.bin` and a `best.txt`
/// manifest. A NaN loss aborts with the metrics so far flushed and the
/// last good checkpoint retained.
pub fn train(
    config: &TrainConfig,
    train_path: &Path,
    valid_path: &Path,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_text = read_corpus(train_path)?;
    let valid_text = read_corpus(valid_path)?;
    let train_tokens = crate::data::tokenize(&train_text, config.token_level);
    let valid_tokens = crate::data::tokenize(&valid_text, config.token_level);
    let vocab = Vocab::build(&train_tokens, config.max_vocab)?;
    let train_ids = vocab.encode(&train_tokens);
    let valid_ids = vocab.encode(&valid_tokens);
    let train_stream = BatchStream::new(&train_ids, config.batch_size, config.unroll)?;
    let valid_stream = BatchStream::new(&valid_ids, config.batch_size, config.unroll)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.echo"), config.echo())?;
        std::fs::write(dir.join("vocab.tsv"), vocab.dump())?;
    }

    let (mut init_rng, mut noise_rng, mut dropout_rng, mut eval_rng) = run_rngs(config.seed);
    let mut model = config.build_model(vocab.len(), &mut init_rng)?;
    let dropout_active = model.dropout.is_some();

    let mut metrics = MetricsLog::default();
    let mut lr = config.lr;
    let mut best_epoch = 0usize;
    let mut best_model = model.clone();
    let mut best_checkpoint: Option<PathBuf> = None;
    let mut averager: Option<ParamAverage> = None;
    let started = Instant::now();

    let flush = |metrics: &MetricsLog, dir: Option<&Path>| -> Result<()> {
        if let Some(dir) = dir {
            std::fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
        }
        Ok(())
    };

    // Initial validation row (epoch 0): untrained-model baseline, which is
    // also the initial best checkpoint.
    let (v_loss, v_ppl) = evaluate_stream(&model, &valid_stream, config.eval_mode, &mut eval_rng)?;
    metrics.rows.push(MetricsRow {
        epoch: 0,
        train_loss: f64::NAN,
        train_ppl: f64::NAN,
        valid_loss: v_loss,
        valid_ppl: v_ppl,
        lr,
        wall_time_s: started.elapsed().as_secs_f64(),
    });
    let mut best_valid_ppl = v_ppl;
    if let Some(dir) = out_dir {
        let path = dir.join("ckpt_epoch_0.bin");
        checkpoint::save_model(&model, &path)?;
        std::fs::write(
            dir.join("best.txt"),
            format!("epoch = 0\nvalid_ppl = {v_ppl}\nfile = ckpt_epoch_0.bin\n"),
        )?;
        best_checkpoint = Some(path);
    }
    flush(&metrics, out_dir)?;

    let windows = train_stream.windows();
    for epoch in 1..=config.max_epochs {
        let epoch_started = Instant::now();
        let mut states = model.initial_states(config.batch_size);
        let mut total = 0.0f64;
        let mut tokens = 0usize;
        for (wi, w) in windows.iter().enumerate() {
            let drop_rng = dropout_active.then_some(&mut dropout_rng);
            let step = model.train_step(
                w.view(),
                &states,
                lr,
                config.clip_norm,
                &mut noise_rng,
                drop_rng,
            );
            let (obj, finals) = match step {
                Ok(ok) => ok,
                Err(Error::NonFinite(_)) => {
                    flush(&metrics, out_dir)?;
                    return Err(Error::NanLoss { epoch, window: wi });
                }
                Err(e) => return Err(e),
            };
            total += obj.total_nll;
            tokens += obj.tokens;
            states = finals;
            if let Some(avg) = averager.as_mut() {
                avg.update(&model);
            } else if config.asgd_trigger.is_some_and(|t| epoch >= t) {
                averager = Some(ParamAverage::new(&model));
            }
        }
        let train_loss = total / tokens as f64;

        let eval_model = match &averager {
            Some(avg) => avg.materialize(&model),
            None => model.clone(),
        };
        let (valid_loss, valid_ppl) =
            evaluate_stream(&eval_model, &valid_stream, config.eval_mode, &mut eval_rng)?;

        if valid_ppl < best_valid_ppl {
            best_valid_ppl = valid_ppl;
            best_epoch = epoch;
            best_model = eval_model.clone();
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt_epoch_{epoch}.bin"));
                checkpoint::save_model(&eval_model, &path)?;
                std::fs::write(
                    dir.join("best.txt"),
                    format!("epoch = {epoch}\nvalid_ppl = {valid_ppl}\nfile = {}\n",
                        path.file_name().unwrap().to_string_lossy()),
                )?;
                best_checkpoint = Some(path);
            }
        } else if valid_ppl > best_valid_ppl {
            // Strictly worse than the running best: decay, never increase.
            lr /= config.lr_decay_factor;
        }

        metrics.rows.push(MetricsRow {
            epoch,
            train_loss,
            train_ppl: train_loss.exp(),
            valid_loss,
            valid_ppl,
            lr,
            wall_time_s: epoch_started.elapsed().as_secs_f64(),
        });
        flush(&metrics, out_dir)?;
    }

    let final_valid_ppl = metrics.rows.last().map(|r| r.valid_ppl).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        metrics,
        best_epoch,
        best_valid_ppl,
        final_valid_ppl,
        best_model,
        vocab,
        best_checkpoint,
    })
}

/// Evaluation driver for a stored model on one corpus split.
pub fn evaluate(
    model: &NoisinModel,
    vocab: &Vocab,
    corpus_path: &Path,
    level: TokenLevel,
    batch_size: usize,
    unroll: usize,
    eval_mode: EvalMode,
    seed: u64,
) -> Result<(f64, f64)> {
    if vocab.len() != model.vocab_size() {
        return Err(Error::VocabMismatch(format!(
            "vocabulary has {} entries, model embeds {}",
            vocab.len(),
            model.vocab_size()
        )));
    }
    let text = read_corpus(corpus_path)?;
    let tokens = crate::data::tokenize(&text, level);
    let ids = vocab.encode(&tokens);
    let stream = BatchStream::new(&ids, batch_size, unroll)?;
    let (_, _, _, mut eval_rng) = run_rngs(seed);
    evaluate_stream(model, &stream, eval_mode, &mut eval_rng)
}

pub struct DiagnoseOptions {
    pub gammas: Vec<f64>,
    pub n_samples: usize,
    pub n_inner: usize,
    pub jensen_ks: Vec<usize>,
    pub sequence_len: usize,
    pub expect_biased: bool,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            gammas: vec![0.1, 0.5, 1.0],
            n_samples: 20_000,
            n_inner: 64,
            jensen_ks: vec![2, 16, 64],
            sequence_len: 8,
            expect_biased: false,
        }
    }
}

pub struct DiagnoseReport {
    pub unbiasedness: Option<UnbiasednessReport>,
    pub dropout_unbiasedness: Option<UnbiasednessReport>,
    pub jensen: Vec<(usize, JensenGap)>,
    pub risk_rows: Vec<RiskRow>,
    /// Jensen gap below the floor or an unexpected unbiasedness violation.
    pub hard_failure: bool,
}

impl DiagnoseReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        if let Some(u) = &self.unbiasedness {
            let _ = writeln!(
                s,
                "unbiasedness: max |z| = {:.3} over {} samples ({})",
                u.max_abs_z,
                u.n_samples,
                if u.violated { "VIOLATED" } else { "ok" }
            );
        }
        if let Some(u) = &self.dropout_unbiasedness {
            let _ = writeln!(
                s,
                "dropout transition: max |z| = {:.3} over {} samples ({})",
                u.max_abs_z,
                u.n_samples,
                if u.violated { "biased, as expected" } else { "no bias detected" }
            );
        }
        for (k, j) in &self.jensen {
            let _ = writeln!(
                s,
                "jensen K={k}: bound {:.6}, log-mean-exp {:.6}, gap {:.3e}",
                j.bound, j.log_mean_exp, j.gap
            );
        }
        for row in &self.risk_rows {
            let _ = writeln!(
                s,
                "risk gamma={}: r_det {:.6}, r_noisy {:.6} (se {:.2e}), reg_emp {:.6}, reg_taylor {:.6}{}",
                row.gamma,
                row.report.r_det,
                row.report.r_noisy,
                row.report.r_noisy_stderr,
                row.report.reg_empirical,
                row.report.reg_taylor,
                if row.inconclusive { " [inconclusive]" } else { "" }
            );
        }
        let _ = writeln!(s, "hard_failure = {}", self.hard_failure);
        s
    }
}

/// Diagnostics driver: unbiasedness z-scores, Jensen gaps and the risk
/// decomposition table for the configured model (fresh init, or a
/// checkpoint when given). Writes `risk.csv` and `diagnose.txt` to
/// `out_dir` when set.
pub fn diagnose(
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    options: &DiagnoseOptions,
    out_dir: Option<&Path>,
) -> Result<DiagnoseReport> {
    config.validate()?;
    let (mut init_rng, mut noise_rng, _, _) = run_rngs(config.seed);
    let model = match checkpoint_path {
        Some(p) => checkpoint::load_model(p)?,
        None => config.build_model(config.max_vocab.min(64), &mut init_rng)?,
    };

    // Fixed pseudo-random token sequence for the conditioning trajectory.
    let vocab = model.vocab_size();
    let mut seq_rng = Pcg32::new(config.seed, 77);
    let seq: Vec<usize> = (0..options.sequence_len.max(2))
        .map(|_| (seq_rng.next_u32() as usize) % vocab)
        .collect();
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let window = WindowView::from_sequence(inputs, targets);
    let init = model.initial_states(1);

    let unbiasedness = if model.num_layers() == 1 {
        Some(model::check_unbiasedness(
            &model,
            &inputs[..inputs.len().min(3)],
            &init,
            options.n_samples.max(10_000),
            &mut noise_rng,
        )?)
    } else {
        None
    };

    let dropout_unbiasedness = match (&model.dropout, model.cells[0].kind.is_lstm()) {
        (Some(d), true) if d.input_rate > 0.0 || d.recurrent_rate > 0.0 => {
            Some(model::check_unbiasedness_dropout(
                &model.cells[0],
                &model.embedding,
                d,
                &inputs[..inputs.len().min(3)],
                &init[0],
                options.n_samples.max(10_000),
                &mut noise_rng,
            )?)
        }
        _ => None,
    };

    let mut jensen = Vec::new();
    for &k in &options.jensen_ks {
        jensen.push((k, model::jensen_gap(&model, window, &init, k, &mut noise_rng)?));
    }

    let risk_rows = if model.noise.mode == InjectionMode::Off {
        Vec::new()
    } else {
        regularizer::decomposition_check(
            &model,
            window,
            &options.gammas,
            options.n_samples.max(1000),
            options.n_inner,
            &mut noise_rng,
        )?
    };

    let jensen_bad = jensen.iter().any(|(_, j)| j.gap < -1e-12);
    let noisin_bad = unbiasedness.as_ref().is_some_and(|u| u.violated);
    let dropout_bad = dropout_unbiasedness.as_ref().is_some_and(|u| u.violated);
    let hard_failure = jensen_bad || noisin_bad || (dropout_bad && !options.expect_biased);

    let report = DiagnoseReport {
        unbiasedness,
        dropout_unbiasedness,
        jensen,
        risk_rows,
        hard_failure,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("risk.csv"), regularizer::risk_rows_csv(&report.risk_rows))?;
        std::fs::write(dir.join("diagnose.txt"), report.summary())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pin_the_reported_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 30.0);
        assert_eq!(c.lr_decay_factor, 1.2);
        assert_eq!(c.clip_norm, 0.25);
        assert_eq!(c.unroll, 35);
        assert_eq!(c.batch_size, 80);
        assert_eq!(c.seed, 1111);
        assert_eq!(
            (c.dropout_input, c.dropout_recurrent, c.dropout_output),
            (0.5, 0.4, 0.5)
        );
        assert_eq!(c.max_epochs, 200);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn echo_parse_roundtrip_is_exact() {
        let mut c = TrainConfig::default();
        c.gamma = 0.1 + 0.2; // deliberately non-representable-looking
        c.lr = 29.999999999999996;
        c.noise_mode = InjectionMode::Multiplicative;
        c.noise_family = NoiseFamily::Beta;
        c.asgd_trigger = Some(17);
        c.eval_mode = EvalMode::KSample;
        c.token_level = TokenLevel::Char;
        let echoed = c.echo();
        let parsed = TrainConfig::parse(&echoed).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(parsed.gamma.to_bits(), c.gamma.to_bits());
        assert_eq!(parsed.lr.to_bits(), c.lr.to_bits());
    }

    #[test]
    fn unknown_keys_and_bad_values_error() {
        assert!(TrainConfig::parse("frobnicate = 3\n").is_err());
        assert!(TrainConfig::parse("lr = banana\n").is_err());
        assert!(TrainConfig::parse("dtype = f32\n").is_err());
        assert!(TrainConfig::parse("lr = 2.5 # comment\n").is_ok());
    }

    #[test]
    fn presets_apply() {
        let mut c = TrainConfig::default();
        Preset::Desk.apply(&mut c);
        assert_eq!(c.layers, 1);
        assert_eq!(c.hidden, 256);
        assert_eq!(c.token_level, TokenLevel::Char);
        assert!(c.max_epochs <= 20);
        let mut m = TrainConfig::default();
        Preset::Large.apply(&mut m);
        assert_eq!(m.hidden, 1500);
    }

    #[test]
    fn metrics_csv_has_exact_exp_relationship() {
        let mut log = MetricsLog::default();
        log.rows.push(MetricsRow {
            epoch: 1,
            train_loss: 1.234567890123,
            train_ppl: 1.234567890123f64.exp(),
            valid_loss: 0.5,
            valid_ppl: 0.5f64.exp(),
            lr: 30.0,
            wall_time_s: 1.0,
        });
        let csv = log.to_csv();
        let line = csv.lines().nth(1).unwrap();
        let cols: Vec<&str> = line.split(',').collect();
        let loss: f64 = cols[1].parse().unwrap();
        let ppl: f64 = cols[2].parse().unwrap();
        assert!((ppl - loss.exp()).abs() <= 1e-12 * ppl.abs());
    }
}
