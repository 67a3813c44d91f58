//! End-to-end composition used by the command-line tool and the acceptance
//! suite: pooled training with a seeded split, per-session assessment,
//! confidence curves, feature reports, synthetic datasets and a streaming
//! line-at-a-time session.
//!
//! All randomness flows from `RunConfig::seed` through one ChaCha8 stream per
//! run, so every output is a pure function of inputs and config.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assess::{
    curve_from_predictions, default_grid, summative_score, AssessError, AssessmentEvent, Assessor, ConfidenceCurve,
    EventLabel, RateBase, SummativeResult,
};
use crate::extract::{extract_log, ExtractConfig, ExtractError, ExtractStats, FeatureExtractor, TimedFeatures};
use crate::features::{feature_significance, FeatureError, FeatureStats, FeatureVector, Normalizer, CANDIDATE_NAMES};
use crate::gp::{fit_hyperparams, train, GpError, GpModel, HyperBounds, Kernel};
use crate::poselog::{write_pose_log, Line, LineParser, PoseLog, PoseLogError};
use crate::synth::{generate_benchmark, BenchmarkOptions, LabeledDataset, SynthError};
use crate::SkillLabel;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    PoseLog { context: String, source: PoseLogError },
    #[error("session '{session}': {source}")]
    Extract { session: String, source: ExtractError },
    #[error("session '{0}' produced no paired feature samples")]
    NoFeatures(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Assess(#[from] AssessError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// How the training fraction is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBy {
    /// Individual feature samples from all sessions pooled together.
    #[default]
    Sample,
    /// Whole sessions, stratified by label; avoids temporal leakage.
    Session,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub extract: ExtractConfig,
    /// Starting (or fixed, when `fit` is false) kernel; `None` uses the
    /// standardized-unit defaults.
    pub kernel: Option<Kernel>,
    pub fit: bool,
    /// Training fraction in (0, 1).
    pub split: f64,
    pub split_by: SplitBy,
    /// Uncertainty above which an event abstains.
    pub threshold: f64,
    /// Maximum number of training points kept in the GP.
    pub subsample_cap: usize,
    /// Maximum number of points used for hyperparameter fitting.
    pub fit_cap: usize,
    pub rate_base: RateBase,
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            extract: ExtractConfig::default(),
            kernel: None,
            fit: false,
            split: 0.4,
            split_by: SplitBy::Sample,
            threshold: 0.5,
            subsample_cap: 2000,
            fit_cap: 300,
            rate_base: RateBase::All,
            grid: default_grid(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split {} must lie in (0, 1)", self.split));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} must lie in [0, 1]", self.threshold));
        }
        if self.subsample_cap == 0 {
            return bad("subsample cap must be at least 1".into());
        }
        if self.fit && self.fit_cap < 5 {
            return bad("fit cap must be at least 5".into());
        }
        if let Some(k) = &self.kernel {
            k.validate()?;
            if k.dim() != FeatureVector::DIM {
                return bad(format!("kernel has {} length scales, features have {}", k.dim(), FeatureVector::DIM));
            }
        }
        self.extract.noise.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn initial_kernel(&self) -> Kernel {
        self.kernel.clone().unwrap_or_else(|| Kernel::default_for(FeatureVector::DIM))
    }
}

/// Reads and parses a pose log file.
pub fn read_pose_log(path: &Path) -> Result<PoseLog, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    crate::poselog::parse_pose_log(&bytes).map_err(|source| PipelineError::PoseLog { context: path.display().to_string(), source })
}

pub fn extract_session(log: &PoseLog, cfg: &ExtractConfig) -> Result<(Vec<TimedFeatures>, ExtractStats), PipelineError> {
    extract_log(log, cfg).map_err(|source| PipelineError::Extract { session: log.session.clone(), source })
}

/// One feature sample tagged with its session and true label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledSample {
    pub session: usize,
    pub label: SkillLabel,
    pub sample: TimedFeatures,
}

/// Extracts every session and concatenates the samples in session order.
pub fn pool_sessions(sessions: &[(PoseLog, SkillLabel)], cfg: &ExtractConfig) -> Result<Vec<PooledSample>, PipelineError> {
    let mut pool = Vec::new();
    for (i, (log, label)) in sessions.iter().enumerate() {
        let (rows, _) = extract_session(log, cfg)?;
        if rows.is_empty() {
            return Err(PipelineError::NoFeatures(log.session.clone()));
        }
        pool.extend(rows.into_iter().map(|sample| PooledSample { session: i, label: *label, sample }));
    }
    Ok(pool)
}

/// Sorted training and held-out indices into the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn train_count(split: f64, n: usize) -> usize {
    ((split * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Randomly assigns `round(split · N)` pooled samples to training.
pub fn split_samples(n: usize, split: f64, rng: &mut ChaCha8Rng) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = if n < 2 { n } else { train_count(split, n) };
    let (mut train, mut test) = (idx[..k].to_vec(), idx[k..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

/// Assigns whole sessions to training, `round(split · n_class)` (at least
/// one) per label.
pub fn split_sessions(labels: &[SkillLabel], split: f64, rng: &mut ChaCha8Rng) -> Split {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [SkillLabel::Expert, SkillLabel::Novice] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let k = if idx.len() < 2 { idx.len() } else { train_count(split, idx.len()) };
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

/// Pool-level split following `cfg.split_by`.
pub fn split_pool(pool: &[PooledSample], n_sessions: usize, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Split {
    match cfg.split_by {
        SplitBy::Sample => split_samples(pool.len(), cfg.split, rng),
        SplitBy::Session => {
            let mut labels = vec![SkillLabel::Expert; n_sessions];
            for p in pool {
                labels[p.session] = p.label;
            }
            let s = split_sessions(&labels, cfg.split, rng);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (i, p) in pool.iter().enumerate() {
                if s.train.binary_search(&p.session).is_ok() {
                    train.push(i);
                } else {
                    test.push(i);
                }
            }
            Split { train, test }
        }
    }
}

/// Summary of what went into a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCounts {
    pub pooled: usize,
    pub train: usize,
    pub test: usize,
    pub model_points: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GpModel,
    pub pool: Vec<PooledSample>,
    pub split: Split,
    pub counts: TrainCounts,
}

/// Fits the normalizer on all training samples, subsamples to the cap and
/// trains (optionally fitting hyperparameters on a further subsample).
pub fn train_model(train_set: &[(FeatureVector, SkillLabel)], cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<GpModel, PipelineError> {
    cfg.validate()?;
    let has = |l| train_set.iter().any(|(_, t)| *t == l);
    if !has(SkillLabel::Expert) || !has(SkillLabel::Novice) {
        return Err(FeatureError::SingleClass.into());
    }
    let raw: Vec<Vec<f64>> = train_set.iter().map(|(f, _)| f.to_array().to_vec()).collect();
    let normalizer = Normalizer::fit(&raw)?;
    let keep = subsample(train_set.len(), cfg.subsample_cap, rng);
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| normalizer.apply(&raw[i])).collect();
    let y: Vec<f64> = keep.iter().map(|&i| train_set[i].1.sign()).collect();
    let mut kernel = cfg.initial_kernel();
    if cfg.fit {
        let sub = subsample(rows.len(), cfg.fit_cap, rng);
        let fit_rows: Vec<Vec<f64>> = sub.iter().map(|&i| rows[i].clone()).collect();
        let fit_y: Vec<f64> = sub.iter().map(|&i| y[i]).collect();
        kernel = fit_hyperparams(&fit_rows, &fit_y, &kernel, &HyperBounds::default())?;
    }
    Ok(train(&rows, &y, &kernel, normalizer)?)
}

/// Sorted uniform sample of `min(n, cap)` indices out of `n`.
fn subsample(n: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = index::sample(rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// Pools labelled sessions, splits, and trains on the training part.
pub fn run_train(sessions: &[(PoseLog, SkillLabel)], cfg: &RunConfig) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    let pool = pool_sessions(sessions, &cfg.extract)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split = split_pool(&pool, sessions.len(), cfg, &mut rng);
    let train_set: Vec<_> = split.train.iter().map(|&i| (pool[i].sample.features, pool[i].label)).collect();
    let model = train_model(&train_set, cfg, &mut rng)?;
    let counts = TrainCounts { pooled: pool.len(), train: split.train.len(), test: split.test.len(), model_points: model.len() };
    Ok(TrainOutcome { model, pool, split, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssessOutcome {
    pub events: Vec<AssessmentEvent>,
    pub summative: SummativeResult,
    pub stats: ExtractStats,
}

/// Assesses every paired sample of one log.
pub fn run_assess(model: &GpModel, log: &PoseLog, cfg: &RunConfig) -> Result<AssessOutcome, PipelineError> {
    cfg.validate()?;
    let (rows, stats) = extract_session(log, &cfg.extract)?;
    let events = assess_rows(model, rows.iter().map(|r| (r.t, r.features)), cfg.threshold)?;
    let summative = summative_score(&events);
    Ok(AssessOutcome { events, summative, stats })
}

fn assess_rows(model: &GpModel, rows: impl Iterator<Item = (f64, FeatureVector)>, threshold: f64) -> Result<Vec<AssessmentEvent>, PipelineError> {
    let mut assessor = Assessor::new(model, threshold)?;
    rows.map(|(t, f)| assessor.assess(t, &f).map_err(PipelineError::from)).collect()
}

/// Confidence curve of `model` over every sample of the labelled logs.
pub fn run_curve(model: &GpModel, sessions: &[(PoseLog, SkillLabel)], cfg: &RunConfig) -> Result<ConfidenceCurve, PipelineError> {
    cfg.validate()?;
    let pool = pool_sessions(sessions, &cfg.extract)?;
    curve_for(model, pool.iter(), cfg)
}

fn curve_for<'a>(model: &GpModel, samples: impl Iterator<Item = &'a PooledSample>, cfg: &RunConfig) -> Result<ConfidenceCurve, PipelineError> {
    let preds = samples
        .map(|p| Ok((model.predict_features(&p.sample.features)?, p.label)))
        .collect::<Result<Vec<_>, GpError>>()?;
    Ok(curve_from_predictions(&preds, &cfg.grid, cfg.rate_base)?)
}

/// Significance of every candidate feature over the labelled logs.
pub fn run_features(sessions: &[(PoseLog, SkillLabel)], cfg: &ExtractConfig) -> Result<FeatureStats, PipelineError> {
    let pool = pool_sessions(sessions, cfg)?;
    let data: Vec<_> = pool.iter().map(|p| (p.sample.candidates, p.label)).collect();
    Ok(feature_significance(&data)?)
}

pub const FEATURE_REPORT_HEADER: &str = "feature,expert_mean,expert_std,novice_mean,novice_std,pooled_std,significance,selected";

pub fn feature_report_csv(stats: &FeatureStats) -> String {
    let mut out = String::from(FEATURE_REPORT_HEADER);
    out.push('\n');
    for f in &stats.features {
        let selected = FeatureVector::NAMES.contains(&f.name.as_str());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            f.name, f.expert.mean, f.expert.std, f.novice.mean, f.novice.std, f.pooled.std, f.significance, u8::from(selected)
        );
    }
    debug_assert_eq!(stats.features.len(), CANDIDATE_NAMES.len());
    out
}

pub fn run_synth(n_expert: usize, n_novice: usize, base_seed: u64, opts: &BenchmarkOptions) -> Result<LabeledDataset, PipelineError> {
    Ok(generate_benchmark(n_expert, n_novice, base_seed, opts)?)
}

/// Writes one pose log per session plus `manifest.json` into `dir`.
pub fn write_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for ((log, _), entry) in dataset.sessions.iter().zip(&dataset.manifest.sessions) {
        let path = dir.join(&entry.file);
        std::fs::write(&path, write_pose_log(log)).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, dataset.manifest.to_json() + "\n").map_err(io_err(&path))
}

/// Scale of the synthetic train/assess experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_expert: usize,
    pub n_novice: usize,
    pub synth: BenchmarkOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { n_expert: 4, n_novice: 4, synth: BenchmarkOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionVerdict {
    pub session: String,
    pub label: SkillLabel,
    pub verdict: SkillLabel,
    pub score: f64,
    pub n_events: usize,
    pub n_abstained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub counts: TrainCounts,
    pub kernel: Kernel,
    pub threshold: f64,
    pub sessions: Vec<SessionVerdict>,
    pub sessions_correct: usize,
    /// Non-abstained held-out samples and how many were labelled correctly.
    pub predicted: usize,
    pub predicted_correct: usize,
    pub sample_accuracy: f64,
    pub curve: ConfidenceCurve,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub dataset: LabeledDataset,
    pub model: GpModel,
    /// Held-out events per session, in session order.
    pub events: Vec<(String, Vec<AssessmentEvent>)>,
}

impl ExperimentOutcome {
    /// All held-out events as one CSV with a leading session column.
    pub fn events_csv(&self) -> String {
        let mut out = String::from("session,t,label,confidence,mean\n");
        for (session, events) in &self.events {
            for e in events {
                let _ = writeln!(out, "{session},{}", e.to_csv());
            }
        }
        out
    }
}

/// Generates a labelled benchmark, trains on a random split of the pooled
/// samples, and assesses the held-out samples of every session.
pub fn run_experiment(exp: &ExperimentConfig, cfg: &RunConfig) -> Result<ExperimentOutcome, PipelineError> {
    cfg.validate()?;
    let dataset = run_synth(exp.n_expert, exp.n_novice, cfg.seed, &exp.synth)?;
    let TrainOutcome { model, pool, split, counts } = run_train(&dataset.sessions, cfg)?;

    let mut held_out: Vec<Vec<&PooledSample>> = vec![Vec::new(); dataset.sessions.len()];
    for &i in &split.test {
        held_out[pool[i].session].push(&pool[i]);
    }
    let mut sessions = Vec::new();
    let mut events = Vec::new();
    let (mut predicted, mut predicted_correct) = (0, 0);
    for (i, samples) in held_out.iter().enumerate() {
        let (log, label) = &dataset.sessions[i];
        let ev = assess_rows(&model, samples.iter().map(|p| (p.sample.t, p.sample.features)), cfg.threshold)?;
        for e in &ev {
            if let Some(l) = e.label.skill() {
                predicted += 1;
                predicted_correct += usize::from(l == *label);
            }
        }
        let s = summative_score(&ev);
        sessions.push(SessionVerdict {
            session: log.session.clone(),
            label: *label,
            verdict: s.verdict,
            score: s.score,
            n_events: s.n_events,
            n_abstained: s.n_abstained,
        });
        events.push((log.session.clone(), ev));
    }
    let curve = curve_for(&model, split.test.iter().map(|&i| &pool[i]), cfg)?;
    let report = ExperimentReport {
        seed: cfg.seed,
        counts,
        kernel: model.kernel().clone(),
        threshold: cfg.threshold,
        sessions_correct: sessions.iter().filter(|s| s.verdict == s.label).count(),
        sessions,
        predicted,
        predicted_correct,
        sample_accuracy: if predicted == 0 { 0.0 } else { predicted_correct as f64 / predicted as f64 },
        curve,
    };
    Ok(ExperimentOutcome { report, dataset, model, events })
}

/// Running confidence-weighted vote, identical to [`summative_score`] over
/// the same events in the same order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SummativeTally {
    score: f64,
    n_events: usize,
    n_abstained: usize,
}

impl SummativeTally {
    pub fn add(&mut self, e: &AssessmentEvent) {
        self.n_events += 1;
        match e.label {
            EventLabel::Abstain => self.n_abstained += 1,
            l => self.score += e.confidence * l.skill().map_or(0.0, SkillLabel::sign),
        }
    }

    pub fn result(&self) -> SummativeResult {
        SummativeResult {
            score: self.score,
            verdict: SkillLabel::from_score(self.score),
            n_events: self.n_events,
            n_abstained: self.n_abstained,
        }
    }
}

/// Line-at-a-time assessment of a pose log arriving on a stream. Memory is
/// bounded by the model plus the pairing buffer.
#[derive(Debug)]
pub struct StreamSession<'m> {
    parser: LineParser,
    extractor: Option<FeatureExtractor>,
    assessor: Assessor<'m>,
    extract: ExtractConfig,
    tally: SummativeTally,
}

impl<'m> StreamSession<'m> {
    pub fn new(model: &'m GpModel, cfg: &RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            parser: LineParser::new(),
            extractor: None,
            assessor: Assessor::new(model, cfg.threshold)?,
            extract: cfg.extract,
            tally: SummativeTally::default(),
        })
    }

    fn located(&self, source: PoseLogError) -> PipelineError {
        PipelineError::PoseLog { context: "<stream>".into(), source }
    }

    /// Consumes one input line and returns the events it completed.
    pub fn feed_line(&mut self, line: &str) -> Result<Vec<AssessmentEvent>, PipelineError> {
        let sample = match self.parser.feed(line).map_err(|e| self.located(e))? {
            Line::Skip => return Ok(Vec::new()),
            Line::Sample(s) => s,
        };
        if self.extractor.is_none() {
            let header = self.parser.header_log().map_err(|e| self.located(e))?;
            let ex = FeatureExtractor::for_log(&header, self.extract)
                .map_err(|source| PipelineError::Extract { session: header.session.clone(), source })?;
            self.extractor = Some(ex);
        }
        let ex = self.extractor.as_mut().expect("initialized above");
        let rows = ex.push(&sample).map_err(|source| PipelineError::Extract { session: "<stream>".into(), source })?;
        self.assess(rows)
    }

    /// Flushes samples still waiting for a pairing partner.
    pub fn finish(&mut self) -> Result<Vec<AssessmentEvent>, PipelineError> {
        let rows = self.extractor.as_mut().map(FeatureExtractor::finish).unwrap_or_default();
        self.assess(rows)
    }

    fn assess(&mut self, rows: Vec<TimedFeatures>) -> Result<Vec<AssessmentEvent>, PipelineError> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            let e = self.assessor.assess(r.t, &r.features)?;
            self.tally.add(&e);
            out.push(e);
        }
        Ok(out)
    }

    pub fn summary(&self) -> SummativeResult {
        self.tally.result()
    }

    pub fn stats(&self) -> ExtractStats {
        self.extractor.as_ref().map(FeatureExtractor::stats).unwrap_or_default()
    }
}
