//! The `capctl` command line: corpus generation, training, captioning,
//! evaluation and gradient checks.

pub mod run_config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use capctl_core::captioner::{Captioner, Direction};
use capctl_core::checkpoint::Checkpoint;
use capctl_core::config::prefixed;
use capctl_core::corpus::{build_dataset, Control, CorpusConfig, Dataset, Split};
use capctl_core::evaluator::{
    beta_sweep, check_vocab, control_study, eval_system, parse_study, run_system, worker_count,
    write_csv, DecodeMode, EvalConfig, SystemUnderTest, THREADS_ENV,
};
use capctl_core::matcher::Matcher;
use capctl_core::metrics::EvalReport;
use capctl_core::rng::stream;
use capctl_core::trainer::{
    default_beta, make_matcher_pairs, train_matcher, train_scst, train_xe, BetaPolicy, CaptionData,
    EpochRecord, TrainLog, TrainMode,
};
use capctl_core::verify::{grad_suite, GRAD_TOLERANCE};

use run_config::{parse_override, render_effective, Preset, RunConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_EMPTY: i32 = 4;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn empty(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_EMPTY,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<capctl_core::Error> for CliError {
    fn from(e: capctl_core::Error) -> Self {
        let code = match e {
            capctl_core::Error::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "capctl",
    version,
    about = "Controllable image captioning on a synthetic scene corpus"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene corpus.
    GenData(GenDataArgs),
    /// Train a captioner with cross-entropy or self-critical training.
    Train(TrainArgs),
    /// Train the caption/image matcher on forward and backward outputs.
    TrainMatcher(TrainMatcherArgs),
    /// Caption one scene.
    Caption(CaptionArgs),
    /// Evaluate a captioning system on a split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
}

/// Settings shared by every command that reads a config.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` file with corpus., captioner., matcher., train., eval. keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
}

impl ConfigArgs {
    fn load(&self, flags: Vec<(&str, Option<String>)>) -> CliResult<RunConfig> {
        let mut kv = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<capctl_core::Result<Vec<_>>>()?;
        kv.extend(
            flags
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
        );
        Ok(RunConfig::new(self.preset, self.config.as_deref(), kv)?)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total scenes, split 80/10/10 into train/val/test.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub feat_dim: Option<usize>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Fwd,
    Bwd,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Fwd => Direction::Forward,
            DirectionArg::Bwd => Direction::Backward,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ControlArg {
    Quality,
    Length,
    Tense,
    Nouns,
    Multi,
}

impl From<ControlArg> for Control {
    fn from(c: ControlArg) -> Self {
        match c {
            ControlArg::Quality => Control::Quality,
            ControlArg::Length => Control::Length,
            ControlArg::Tense => Control::Tense,
            ControlArg::Nouns => Control::Nouns,
            ControlArg::Multi => Control::Multi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Xe,
    Scst,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "fwd")]
    pub direction: DirectionArg,
    #[arg(long, value_enum)]
    pub control: ControlArg,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Output checkpoint; the epoch log and effective config go beside it.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Starting checkpoint (required for scst).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fixed control signal for scst, comma separated.
    #[arg(long)]
    pub beta: Option<String>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainMatcherArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fwd: PathBuf,
    #[arg(long)]
    pub bwd: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scene: u64,
    /// Control signal, one comma-separated value per dimension.
    #[arg(long)]
    pub beta: String,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, requires = "matcher")]
    pub bwd: Option<PathBuf>,
    #[arg(long)]
    pub matcher: Option<PathBuf>,
    /// Also print every candidate with its matcher score.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fwd: PathBuf,
    #[arg(long, requires = "matcher")]
    pub bwd: Option<PathBuf>,
    #[arg(long)]
    pub matcher: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Control values to sweep: `a,b,c` for one-dimensional signals, or
    /// full vectors separated by `;`.
    #[arg(long)]
    pub beta_sweep: Option<String>,
    /// Attribute compliance study, `ATTR=lo..hi` or `ATTR=v1,v2`.
    #[arg(long)]
    pub control_study: Option<String>,
    /// Fixed control signal (default: the model's default request).
    #[arg(long)]
    pub beta: Option<String>,
    /// `median`, `scaled:X` or `native:X`.
    #[arg(long)]
    pub threshold: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub report: PathBuf,
    /// Per-scene CSV (default: the report path with a .csv extension).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Multiplies analytic gradients before comparison (fault injection).
    #[arg(long, default_value_t = 1.0, hide = true)]
    pub corrupt_scale: f64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::TrainMatcher(a) => train_matcher_cmd(&a),
        Command::Caption(a) => caption(&a),
        Command::Eval(a) => eval(&a),
        Command::GradCheck(a) => grad_check(&a),
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Path of the epoch log written beside a checkpoint.
pub fn log_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, ".log.jsonl")
}

/// Path of the effective config written beside an output file.
pub fn config_path(output: &Path) -> PathBuf {
    sidecar(output, ".config.txt")
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::load(dir)
        .map_err(|e| CliError::data(format!("cannot load dataset {}: {e}", dir.display())))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path)
        .map_err(|e| CliError::data(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn load_captioner(path: &Path, data: &Dataset) -> CliResult<Captioner<f32>> {
    let ck = load_checkpoint(path)?;
    check_vocab(
        data.vocab.hash(),
        ck.vocab_hash()?,
        &path.display().to_string(),
    )?;
    let model = Captioner::from_checkpoint(&ck)?;
    if model.config().feat_dim != data.config.feat_dim {
        return Err(CliError::data(format!(
            "{} expects {}-wide region features, dataset has {}",
            path.display(),
            model.config().feat_dim,
            data.config.feat_dim
        )));
    }
    Ok(model)
}

fn load_matcher(path: &Path, data: &Dataset) -> CliResult<Matcher<f32>> {
    let ck = load_checkpoint(path)?;
    check_vocab(
        data.vocab.hash(),
        ck.vocab_hash()?,
        &path.display().to_string(),
    )?;
    let m = Matcher::from_checkpoint(&ck)?;
    if m.config().feat_dim != data.config.feat_dim {
        return Err(CliError::data(format!(
            "{} does not match the dataset feature width",
            path.display()
        )));
    }
    Ok(m)
}

/// Parses `a,b,c` into a control signal of the expected width.
pub fn parse_beta(s: &str, dim: usize) -> CliResult<Vec<f64>> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::usage(format!("control signal {s:?} is not a list of numbers")))?;
    if v.len() != dim {
        return Err(CliError::usage(format!(
            "control signal has {} values, the model takes {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CliError::usage("control signal values must be finite"));
    }
    Ok(v)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn print_epoch(r: &EpochRecord) {
    let mut line = format!(
        "epoch {:>3}  lr {:.2e}  loss {:.4}",
        r.epoch, r.lr, r.mean_loss
    );
    if let Some(t) = r.token_loss {
        line.push_str(&format!("  token_loss {t:.4}"));
    }
    if let Some(m) = r.mean_reward {
        line.push_str(&format!("  reward {m:.4}"));
    }
    if let Some(v) = r.val_cider {
        line.push_str(&format!("  val_cider {v:.4}"));
    }
    println!("{line}  ({:.1}s)", r.wall_time);
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if let Some(0) = a.scenes {
        return Err(CliError::usage("--scenes must be positive"));
    }
    let mut flags = vec![
        ("corpus.seed", a.seed.map(|s| s.to_string())),
        ("corpus.feat_dim", a.feat_dim.map(|d| d.to_string())),
    ];
    if let Some(n) = a.scenes {
        let split = CorpusConfig::with_total(n);
        flags.push(("corpus.train_scenes", Some(split.train_scenes.to_string())));
        flags.push(("corpus.val_scenes", Some(split.val_scenes.to_string())));
        flags.push(("corpus.test_scenes", Some(split.test_scenes.to_string())));
    }
    let rc = a.cfg.load(flags)?;
    let cfg = rc.corpus()?;
    let occupied = fs::read_dir(&a.out)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied && !a.force {
        return Err(CliError::usage(format!(
            "{} is not empty; pass --force to overwrite",
            a.out.display()
        )));
    }
    let data = build_dataset(&cfg)?;
    data.save(&a.out)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", a.out.display())))?;
    println!(
        "wrote {} scenes ({} train / {} val / {} test, vocabulary {}) to {}",
        cfg.total(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let rc = a.cfg.load(vec![
        ("train.seed", a.seed.map(|s| s.to_string())),
        ("train.epochs", a.epochs.map(|e| e.to_string())),
    ])?;
    let mode = rc.mode(a.mode.map(|m| match m {
        ModeArg::Xe => TrainMode::Xe,
        ModeArg::Scst => TrainMode::Scst,
    }))?;
    if mode == TrainMode::Matcher {
        return Err(CliError::usage("use train-matcher to train the matcher"));
    }
    if mode == TrainMode::Scst && a.init.is_none() {
        return Err(CliError::usage(
            "self-critical training needs --init from a cross-entropy checkpoint",
        ));
    }
    let control = Control::from(a.control);
    let direction = Direction::from(a.direction);
    let mut tc = rc.train(mode)?;
    tc.validate()?;
    let data = load_dataset(&a.data)?;

    let mut model = match &a.init {
        Some(p) => {
            let m = load_captioner(p, &data)?;
            if m.config().control != control || m.config().direction != direction {
                return Err(CliError::usage(format!(
                    "--init {} was trained with control {} direction {:?}, not {} {:?}",
                    p.display(),
                    m.config().control.name(),
                    m.config().direction,
                    control.name(),
                    direction
                )));
            }
            m
        }
        None => {
            let cfg = rc.captioner(data.config.feat_dim, data.vocab.len(), control, direction)?;
            cfg.validate()?;
            Captioner::new(cfg, &mut stream(tc.seed, "init"))?
        }
    };
    if mode == TrainMode::Scst {
        if let Some(b) = &a.beta {
            tc.beta = BetaPolicy::Fixed(parse_beta(b, control.beta_dim())?);
        } else if tc.beta == BetaPolicy::FromLabel {
            tc.beta = BetaPolicy::Fixed(default_beta(control));
        }
        if let BetaPolicy::Fixed(b) = &tc.beta {
            if b.len() != control.beta_dim() {
                return Err(CliError::usage(format!(
                    "train.beta has {} values, control {} takes {}",
                    b.len(),
                    control.name(),
                    control.beta_dim()
                )));
            }
        }
    } else if a.beta.is_some() {
        return Err(CliError::usage(
            "--beta applies to scst; cross-entropy uses each reference's labels",
        ));
    }

    let effective = render_effective(
        rc.preset,
        &[
            prefixed(&data.config, "corpus"),
            prefixed(model.config(), "captioner"),
            vec![
                ("captioner.control".into(), control.name().into()),
                (
                    "captioner.direction".into(),
                    format!("{direction:?}").to_lowercase(),
                ),
            ],
            prefixed(&tc, "train"),
        ],
    );
    write_text(&config_path(&a.ckpt), &effective)?;

    let cd = CaptionData {
        train: &data.train,
        val: &data.val,
        idf: &data.idf,
        vocab_hash: data.vocab.hash(),
    };
    let ckpt = a.ckpt.clone();
    let mut hook = |r: &EpochRecord, ck: &Checkpoint| {
        print_epoch(r);
        ck.save(&ckpt)
    };
    let log = match mode {
        TrainMode::Xe => train_xe(&mut model, &cd, &tc, &mut hook)?,
        _ => train_scst(&mut model, &cd, &tc, &mut hook)?,
    };
    save_log(&log, &log_path(&a.ckpt))?;
    println!("checkpoint {}", a.ckpt.display());
    Ok(())
}

fn save_log(log: &TrainLog, path: &Path) -> CliResult<()> {
    write_text(path, &log.to_jsonl()?)
}

fn train_matcher_cmd(a: &TrainMatcherArgs) -> CliResult<()> {
    let rc = a.cfg.load(vec![
        ("train.seed", a.seed.map(|s| s.to_string())),
        ("train.epochs", a.epochs.map(|e| e.to_string())),
    ])?;
    let tc = rc.train(TrainMode::Matcher)?;
    tc.validate()?;
    let ec = rc.eval()?;
    let data = load_dataset(&a.data)?;
    let fwd = load_captioner(&a.fwd, &data)?;
    let bwd = load_captioner(&a.bwd, &data)?;
    if fwd.config().direction != Direction::Forward || bwd.config().direction != Direction::Backward
    {
        return Err(CliError::data(
            "--fwd must be a forward and --bwd a backward captioner",
        ));
    }
    if fwd.config().control != bwd.config().control {
        return Err(CliError::data(
            "forward and backward captioners use different controls",
        ));
    }
    let policy = ec.policy(&fwd);
    if let BetaPolicy::Fixed(b) = &policy {
        if b.len() != fwd.config().beta_dim() {
            return Err(CliError::usage(
                "eval.beta does not match the captioners' control width",
            ));
        }
    }
    let pairs = make_matcher_pairs(&fwd, &bwd, &data.train, &policy, &data.idf)?;
    if pairs.is_empty() {
        return Err(CliError::empty(
            "forward and backward captions tie (or are empty) on every training scene; no pairs to train on",
        ));
    }
    println!(
        "{} caption pairs from {} training scenes",
        pairs.len(),
        data.train.len()
    );
    let mc = rc.matcher(data.config.feat_dim, data.vocab.len())?;
    mc.validate()?;
    let effective = render_effective(
        rc.preset,
        &[
            prefixed(&data.config, "corpus"),
            prefixed(&mc, "matcher"),
            prefixed(&tc, "train"),
            prefixed(&ec, "eval"),
        ],
    );
    write_text(&config_path(&a.out), &effective)?;
    let mut matcher = Matcher::new(mc, &mut stream(tc.seed, "init"))?;
    let out = a.out.clone();
    let log = train_matcher(
        &mut matcher,
        &pairs,
        &data.train,
        &tc,
        data.vocab.hash(),
        &mut |r, ck| {
            print_epoch(r);
            ck.save(&out)
        },
    )?;
    save_log(&log, &log_path(&a.out))?;
    println!("checkpoint {}", a.out.display());
    Ok(())
}

fn decode_mode(beam: Option<usize>) -> CliResult<DecodeMode> {
    match beam {
        None | Some(1) => Ok(DecodeMode::Greedy),
        Some(0) => Err(CliError::usage("--beam must be positive")),
        Some(k) => Ok(DecodeMode::Beam(k)),
    }
}

fn caption(a: &CaptionArgs) -> CliResult<()> {
    let decode = decode_mode(a.beam)?;
    let data = load_dataset(&a.data)?;
    let fwd = load_captioner(&a.ckpt, &data)?;
    let beta = parse_beta(&a.beta, fwd.config().beta_dim())?;
    let bwd = a
        .bwd
        .as_deref()
        .map(|p| load_captioner(p, &data))
        .transpose()?;
    let matcher = a
        .matcher
        .as_deref()
        .map(|p| load_matcher(p, &data))
        .transpose()?;
    let sut = SystemUnderTest {
        forward: &fwd,
        backward: bwd.as_ref(),
        matcher: matcher.as_ref(),
        decode,
    };
    sut.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let scene = data
        .find_scene(a.scene)
        .ok_or_else(|| CliError::data(format!("scene {} is not in the dataset", a.scene)))?;
    let res = run_system(
        &sut,
        std::slice::from_ref(scene),
        &BetaPolicy::Fixed(beta),
        &data.idf,
        1,
    )?;
    let r = &res[0];
    println!("{}", data.vocab.decode(&r.tokens));
    if a.verbose {
        for (i, c) in r.candidates.iter().enumerate() {
            let label = match sut.decode {
                DecodeMode::Beam(_) => format!("beam_{i}"),
                DecodeMode::Greedy => (if i == 0 { "fwd" } else { "bwd" }).to_string(),
            };
            let score = r
                .candidate_scores
                .get(i)
                .map_or("-".to_string(), |s| format!("{s:.4}"));
            println!("  {label:<7} {score:>9}  {}", data.vocab.decode(c));
        }
        println!("  selected {}  cider {:.4}", r.source.label(), r.cider);
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepEntry {
    beta: Vec<f64>,
    report: EvalReport,
}

#[derive(Serialize)]
struct StudyEntry {
    attribute: String,
    requested: f64,
    compliance: f64,
    mean_observed: f64,
    mean_cider: f64,
}

/// Parses a sweep list for a model with `dim` control dimensions.
pub fn parse_sweep(s: &str, dim: usize) -> CliResult<Vec<Vec<f64>>> {
    let groups: Vec<&str> = if s.contains(';') {
        s.split(';')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .collect()
    } else if dim == 1 {
        s.split(',').collect()
    } else {
        vec![s]
    };
    let out = groups
        .iter()
        .map(|g| parse_beta(g, dim))
        .collect::<CliResult<Vec<_>>>()?;
    if out.is_empty() {
        return Err(CliError::usage("empty --beta-sweep"));
    }
    Ok(out)
}

fn threads(cfg: &EvalConfig) -> usize {
    if std::env::var_os(THREADS_ENV).is_some() {
        worker_count()
    } else {
        cfg.threads.max(1)
    }
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    if a.beta_sweep.is_some() && a.control_study.is_some() {
        return Err(CliError::usage(
            "--beta-sweep and --control-study cannot be combined",
        ));
    }
    let rc = a.cfg.load(vec![
        ("eval.beam", a.beam.map(|b| b.to_string())),
        ("eval.threshold", a.threshold.clone()),
    ])?;
    let mut ec = rc.eval()?;
    ec.threads = threads(&ec);
    let data = load_dataset(&a.data)?;
    let fwd = load_captioner(&a.fwd, &data)?;
    let dim = fwd.config().beta_dim();
    if let Some(b) = &a.beta {
        ec.beta = Some(BetaPolicy::Fixed(parse_beta(b, dim)?));
    }
    if let Some(BetaPolicy::Fixed(b)) = &ec.beta {
        if b.len() != dim {
            return Err(CliError::usage(format!(
                "eval.beta has {} values, the model takes {dim}",
                b.len()
            )));
        }
    }
    let scenes = data.split(a.split.into());
    if scenes.is_empty() {
        return Err(CliError::empty(format!(
            "split {} has no scenes",
            Split::from(a.split).name()
        )));
    }
    let effective = render_effective(
        rc.preset,
        &[prefixed(&data.config, "corpus"), prefixed(&ec, "eval")],
    );
    write_text(&config_path(&a.report), &effective)?;

    if let Some(sweep) = &a.beta_sweep {
        if a.matcher.is_some() {
            return Err(CliError::usage(
                "--beta-sweep evaluates the forward captioner alone",
            ));
        }
        let values = parse_sweep(sweep, dim)?;
        let rows = beta_sweep(&fwd, &values, scenes, &data.idf, &data.vocab, &ec)?;
        for (b, r) in &rows {
            println!(
                "beta {b:?}  cider {:.4}  bleu4 {:.4}  poor {:.4}",
                r.cider, r.bleu4, r.poor_quality_fraction
            );
        }
        let out: Vec<SweepEntry> = rows
            .into_iter()
            .map(|(beta, report)| SweepEntry { beta, report })
            .collect();
        return write_json(&a.report, &out);
    }
    if let Some(spec) = &a.control_study {
        if a.matcher.is_some() {
            return Err(CliError::usage(
                "--control-study evaluates the forward captioner alone",
            ));
        }
        let (attr, values) = parse_study(spec)?;
        let rows = control_study(
            &fwd,
            attr,
            &values,
            scenes,
            &data.idf,
            &data.vocab,
            ec.threads,
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
        for r in &rows {
            println!(
                "{} {:>5}  compliance {:.4}  mean {:.3}  cider {:.4}",
                attr.name(),
                r.requested,
                r.compliance,
                r.mean_observed,
                r.mean_cider
            );
        }
        let out: Vec<StudyEntry> = rows
            .into_iter()
            .map(|r| StudyEntry {
                attribute: attr.name().to_string(),
                requested: r.requested,
                compliance: r.compliance,
                mean_observed: r.mean_observed,
                mean_cider: r.mean_cider,
            })
            .collect();
        return write_json(&a.report, &out);
    }

    let bwd = a
        .bwd
        .as_deref()
        .map(|p| load_captioner(p, &data))
        .transpose()?;
    let matcher = a
        .matcher
        .as_deref()
        .map(|p| load_matcher(p, &data))
        .transpose()?;
    let sut = SystemUnderTest {
        forward: &fwd,
        backward: bwd.as_ref(),
        matcher: matcher.as_ref(),
        decode: decode_mode(Some(ec.beam))?,
    };
    sut.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let (report, results) = eval_system(&sut, scenes, &data.idf, &data.vocab, &ec)?;
    println!(
        "bleu1 {:.4}  bleu4 {:.4}  cider {:.4}  poor {:.4}",
        report.bleu1, report.bleu4, report.cider, report.poor_quality_fraction
    );
    for (k, v) in &report.compliance {
        println!("compliance {k} {v:.4}");
    }
    write_json(&a.report, &report)?;
    let csv = a
        .csv
        .clone()
        .unwrap_or_else(|| a.report.with_extension("csv"));
    write_csv(&csv, &results, &data.vocab)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", csv.display())))?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn grad_check(a: &GradCheckArgs) -> CliResult<()> {
    let rows = grad_suite(a.seed, a.corrupt_scale)?;
    println!(
        "{:<18} {:>14} {:>8}  status",
        "check", "max_rel_error", "entries"
    );
    let mut failed = 0;
    for r in &rows {
        let ok = r.passes();
        failed += usize::from(!ok);
        println!(
            "{:<18} {:>14.3e} {:>8}  {}",
            r.name,
            r.report.max_rel_error,
            r.report.checked,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(CliError {
            code: EXIT_FAILURE,
            message: format!(
                "{failed} of {} gradient checks exceed {GRAD_TOLERANCE:e}",
                rows.len()
            ),
        });
    }
    Ok(())
}
