use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use skillscope::assess::{write_events, EventFormat};
use skillscope::gp::{load_model, save_model};
use skillscope::pipeline::{
    feature_report_csv, read_pose_log, run_assess, run_curve, run_experiment, run_features, run_synth, run_train,
    write_dataset, ExperimentConfig, RunConfig, SplitBy, StreamSession,
};
use skillscope::synth::{BenchmarkOptions, Manifest};
use skillscope::{Kernel, PoseLog, RateBase, SkillLabel, SummativeResult};

#[derive(Parser)]
#[command(name = "skillscope", version, about = "Expert/novice skill assessment from endoscope and instrument motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on labelled pose logs.
    Train(TrainArgs),
    /// Assess one pose log and print per-sample events.
    Assess(AssessArgs),
    /// Assess pose rows read from standard input as they arrive.
    Stream(StreamArgs),
    /// Error and prediction ratios over an uncertainty-threshold grid.
    Curve(CurveArgs),
    /// Significance report for every candidate feature.
    Features(FeaturesArgs),
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Synthetic train/assess experiment with a JSON report.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct LabelledLogs {
    /// Pose logs recorded by experts.
    #[arg(long, num_args = 1..)]
    expert: Vec<PathBuf>,
    /// Pose logs recorded by novices.
    #[arg(long, num_args = 1..)]
    novice: Vec<PathBuf>,
    /// Manifest written by `synth`; its sessions are added to the lists.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl LabelledLogs {
    fn load(&self) -> Result<Vec<(PoseLog, SkillLabel)>> {
        let mut files: Vec<(PathBuf, SkillLabel)> = Vec::new();
        files.extend(self.expert.iter().map(|p| (p.clone(), SkillLabel::Expert)));
        files.extend(self.novice.iter().map(|p| (p.clone(), SkillLabel::Novice)));
        if let Some(m) = &self.manifest {
            let text = std::fs::read_to_string(m).with_context(|| format!("reading {}", m.display()))?;
            let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", m.display()))?;
            let dir = m.parent().unwrap_or(Path::new("."));
            files.extend(manifest.sessions.iter().map(|e| (dir.join(&e.file), e.label)));
        }
        if files.is_empty() {
            bail!("no pose logs given (use --expert/--novice or --manifest)");
        }
        files.into_iter().map(|(p, l)| Ok((read_pose_log(&p)?, l))).collect()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitMode {
    Sample,
    Session,
}

#[derive(Clone, Copy, ValueEnum)]
enum Base {
    All,
    Predicted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

impl From<Format> for EventFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => EventFormat::Csv,
            Format::Jsonl => EventFormat::JsonLines,
        }
    }
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Training fraction of the pooled data.
    #[arg(long, default_value_t = 0.4)]
    split: f64,
    #[arg(long, value_enum, default_value = "sample")]
    split_by: SplitMode,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Maximum number of training points kept in the model.
    #[arg(long, default_value_t = 2000)]
    cap: usize,
    /// Fit kernel hyperparameters by maximizing the marginal likelihood.
    #[arg(long)]
    fit: bool,
    /// Points used for hyperparameter fitting.
    #[arg(long, default_value_t = 300)]
    fit_cap: usize,
    /// Kernel signal std.
    #[arg(long, default_value_t = 1.0)]
    sigma_f: f64,
    /// Kernel length scale (all features, standardized units).
    #[arg(long, default_value_t = 1.0)]
    length_scale: f64,
    /// Observation noise std.
    #[arg(long, default_value_t = 0.1)]
    sigma_n: f64,
}

#[derive(Args, Clone)]
struct AssessOpts {
    /// Uncertainty above which a sample abstains.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn run_config(train: Option<&TrainOpts>, assess: Option<&AssessOpts>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(t) = train {
        cfg.split = t.split;
        cfg.split_by = match t.split_by {
            SplitMode::Sample => SplitBy::Sample,
            SplitMode::Session => SplitBy::Session,
        };
        cfg.seed = t.seed;
        cfg.subsample_cap = t.cap;
        cfg.fit = t.fit;
        cfg.fit_cap = t.fit_cap;
        cfg.kernel = Some(Kernel::new(t.sigma_f, vec![t.length_scale; 5], t.sigma_n)?);
    }
    if let Some(a) = assess {
        cfg.threshold = a.threshold;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    logs: LabelledLogs,
    #[command(flatten)]
    opts: TrainOpts,
    /// Where to write the model.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct AssessArgs {
    #[arg(long, short)]
    model: PathBuf,
    log: PathBuf,
    #[command(flatten)]
    opts: AssessOpts,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Write events here instead of standard output.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[command(flatten)]
    opts: AssessOpts,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[command(flatten)]
    logs: LabelledLogs,
    #[arg(long, value_enum, default_value = "all")]
    rate_base: Base,
    /// Comma-separated ascending thresholds in [0, 1].
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    logs: LabelledLogs,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    experts: usize,
    #[arg(long, default_value_t = 4)]
    novices: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Session length in seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// 0 keeps the class profiles apart, 1 makes them identical.
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    #[arg(long, default_value_t = 0.85)]
    tracking_rate: f64,
    /// Output directory for the logs and manifest.json.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    opts: TrainOpts,
    #[command(flatten)]
    assess: AssessOpts,
    #[arg(long, default_value_t = 4)]
    experts: usize,
    #[arg(long, default_value_t = 4)]
    novices: usize,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    /// Directory for report.json, events.csv and curve.csv.
    #[arg(long, short)]
    out: PathBuf,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn report_summative(s: &SummativeResult) {
    if s.n_events == 0 {
        eprintln!("warning: no events were assessed; the verdict defaults to expert");
    }
    eprintln!("summative: score={} verdict={} events={} abstained={}", s.score, s.verdict, s.n_events, s.n_abstained);
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = run_config(Some(&a.opts), None)?;
    let sessions = a.logs.load()?;
    let out = run_train(&sessions, &cfg)?;
    save_model(&out.model, &a.out)?;
    let c = out.counts;
    eprintln!("pooled={} train={} held_out={} model_points={}", c.pooled, c.train, c.test, c.model_points);
    Ok(())
}

fn assess_cmd(a: &AssessArgs) -> Result<()> {
    let cfg = run_config(None, Some(&a.opts))?;
    let model = load_model(&a.model)?;
    let log = read_pose_log(&a.log)?;
    let out = run_assess(&model, &log, &cfg)?;
    let mut w = output(a.out.as_deref())?;
    write_events(&mut w, &out.events, a.format.into())?;
    w.flush()?;
    report_summative(&out.summative);
    Ok(())
}

fn stream_cmd(a: &StreamArgs) -> Result<()> {
    let cfg = run_config(None, Some(&a.opts))?;
    let model = load_model(&a.model)?;
    let format: EventFormat = a.format.into();
    let mut session = StreamSession::new(&model, &cfg)?;
    let mut out = io::stdout().lock();
    if let Some(h) = format.header() {
        writeln!(out, "{h}")?;
        out.flush()?;
    }
    let emit = |events: Vec<skillscope::AssessmentEvent>, out: &mut io::StdoutLock| -> Result<()> {
        for e in &events {
            writeln!(out, "{}", format.line(e))?;
        }
        if !events.is_empty() {
            out.flush()?;
        }
        Ok(())
    };
    for line in io::stdin().lock().lines() {
        let events = session.feed_line(&line?)?;
        emit(events, &mut out)?;
    }
    let events = session.finish()?;
    emit(events, &mut out)?;
    report_summative(&session.summary());
    Ok(())
}

fn curve_cmd(a: &CurveArgs) -> Result<()> {
    let rate_base = match a.rate_base {
        Base::All => RateBase::All,
        Base::Predicted => RateBase::Predicted,
    };
    let mut cfg = RunConfig { rate_base, ..Default::default() };
    if let Some(g) = &a.grid {
        cfg.grid = g.clone();
    }
    let model = load_model(&a.model)?;
    let curve = run_curve(&model, &a.logs.load()?, &cfg)?;
    let mut w = output(a.out.as_deref())?;
    curve.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn features_cmd(a: &FeaturesArgs) -> Result<()> {
    let stats = run_features(&a.logs.load()?, &RunConfig::default().extract)?;
    let mut w = output(a.out.as_deref())?;
    w.write_all(feature_report_csv(&stats).as_bytes())?;
    w.flush()?;
    Ok(())
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let opts = BenchmarkOptions { duration: a.duration, overlap: a.overlap, tracking_rate: a.tracking_rate };
    let dataset = run_synth(a.experts, a.novices, a.seed, &opts)?;
    write_dataset(&dataset, &a.out)?;
    eprintln!("wrote {} sessions to {}", dataset.sessions.len(), a.out.display());
    Ok(())
}

fn experiment_cmd(a: &ExperimentArgs) -> Result<()> {
    let cfg = run_config(Some(&a.opts), Some(&a.assess))?;
    let exp = ExperimentConfig {
        n_expert: a.experts,
        n_novice: a.novices,
        synth: BenchmarkOptions { duration: a.duration, overlap: a.overlap, ..Default::default() },
    };
    let out = run_experiment(&exp, &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let write = |name: &str, body: String| {
        let p = a.out.join(name);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    };
    write("report.json", out.report.to_json())?;
    write("events.csv", out.events_csv())?;
    write("curve.csv", out.report.curve.to_csv())?;
    let r = &out.report;
    eprintln!(
        "sessions correct {}/{}; sample accuracy {:.4} over {} non-abstained held-out samples",
        r.sessions_correct,
        r.sessions.len(),
        r.sample_accuracy,
        r.predicted
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Assess(a) => assess_cmd(a),
        Command::Stream(a) => stream_cmd(a),
        Command::Curve(a) => curve_cmd(a),
        Command::Features(a) => features_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
