//! Per-sample assessment with abstention, the summative verdict, and
//! confidence/error trade-off curves.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::gp::{GpError, GpModel, Prediction};
use crate::SkillLabel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssessError {
    #[error("model has no training data")]
    UntrainedModel,
    #[error("uncertainty threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("timestamp {t} precedes previous {prev}")]
    NonMonotoneTime { t: f64, prev: f64 },
    #[error("test set contains only one class")]
    SingleClass,
    #[error("threshold grid must be ascending within [0, 1]")]
    InvalidGrid,
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventLabel {
    Expert,
    Novice,
    Abstain,
}

impl EventLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            EventLabel::Expert => "expert",
            EventLabel::Novice => "novice",
            EventLabel::Abstain => "abstain",
        }
    }

    pub fn skill(self) -> Option<SkillLabel> {
        match self {
            EventLabel::Expert => Some(SkillLabel::Expert),
            EventLabel::Novice => Some(SkillLabel::Novice),
            EventLabel::Abstain => None,
        }
    }
}

impl From<SkillLabel> for EventLabel {
    fn from(l: SkillLabel) -> Self {
        match l {
            SkillLabel::Expert => EventLabel::Expert,
            SkillLabel::Novice => EventLabel::Novice,
        }
    }
}

/// One real-time assessment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssessmentEvent {
    pub t: f64,
    pub label: EventLabel,
    /// `1 - uncertainty`.
    pub confidence: f64,
    /// Raw GP mean.
    pub mean: f64,
}

impl AssessmentEvent {
    /// Labels a prediction, abstaining when its uncertainty exceeds `threshold`.
    pub fn from_prediction(t: f64, p: &Prediction, threshold: f64) -> Self {
        let label = if p.uncertainty > threshold { EventLabel::Abstain } else { p.label.into() };
        Self { t, label, confidence: 1.0 - p.uncertainty, mean: p.mean }
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.t, self.label.as_str(), self.confidence, self.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

pub const EVENT_CSV_HEADER: &str = "t,label,confidence,mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EventFormat {
    #[default]
    Csv,
    JsonLines,
}

impl EventFormat {
    pub fn header(self) -> Option<&'static str> {
        match self {
            EventFormat::Csv => Some(EVENT_CSV_HEADER),
            EventFormat::JsonLines => None,
        }
    }

    pub fn line(self, e: &AssessmentEvent) -> String {
        match self {
            EventFormat::Csv => e.to_csv(),
            EventFormat::JsonLines => e.to_json(),
        }
    }
}

pub fn write_events<W: Write>(mut w: W, events: &[AssessmentEvent], format: EventFormat) -> io::Result<()> {
    if let Some(h) = format.header() {
        writeln!(w, "{h}")?;
    }
    for e in events {
        writeln!(w, "{}", format.line(e))?;
    }
    Ok(())
}

fn check_threshold(threshold: f64) -> Result<(), AssessError> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(AssessError::InvalidThreshold(threshold))
    }
}

/// Stateful per-sample assessor over one ordered stream.
#[derive(Debug)]
pub struct Assessor<'m> {
    model: &'m GpModel,
    threshold: f64,
    last_t: Option<f64>,
}

impl<'m> Assessor<'m> {
    pub fn new(model: &'m GpModel, threshold: f64) -> Result<Self, AssessError> {
        if model.is_empty() {
            return Err(AssessError::UntrainedModel);
        }
        check_threshold(threshold)?;
        Ok(Self { model, threshold, last_t: None })
    }

    pub fn assess(&mut self, t: f64, f: &FeatureVector) -> Result<AssessmentEvent, AssessError> {
        if let Some(prev) = self.last_t {
            if t < prev {
                return Err(AssessError::NonMonotoneTime { t, prev });
            }
        }
        self.last_t = Some(t);
        let p = self.model.predict_features(f)?;
        Ok(AssessmentEvent::from_prediction(t, &p, self.threshold))
    }
}

/// Lazily assesses a time-ordered feature stream, one event per input.
pub fn assess_stream<'m, I>(
    model: &'m GpModel,
    features: I,
    threshold: f64,
) -> Result<impl Iterator<Item = Result<AssessmentEvent, AssessError>> + 'm, AssessError>
where
    I: IntoIterator<Item = (f64, FeatureVector)>,
    I::IntoIter: 'm,
{
    let mut assessor = Assessor::new(model, threshold)?;
    Ok(features.into_iter().map(move |(t, f)| assessor.assess(t, &f)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummativeResult {
    pub score: f64,
    pub verdict: SkillLabel,
    pub n_events: usize,
    pub n_abstained: usize,
}

/// Confidence-weighted vote: `Σ confidence · (±1)` over non-abstained events,
/// expert iff the sum is `>= 0`.
pub fn summative_score(events: &[AssessmentEvent]) -> SummativeResult {
    let mut score = 0.0;
    let mut n_abstained = 0;
    for e in events {
        match e.label.skill() {
            Some(l) => score += e.confidence * l.sign(),
            None => n_abstained += 1,
        }
    }
    SummativeResult { score, verdict: SkillLabel::from_score(score), n_events: events.len(), n_abstained }
}

/// Denominator for the error ratios of a [`ConfidenceCurve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateBase {
    /// All test samples, abstained or not.
    #[default]
    All,
    /// Only samples that received a label.
    Predicted,
}

/// Counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveCounts {
    pub wrong: usize,
    /// Novice predicted expert.
    pub false_positive: usize,
    /// Expert predicted novice.
    pub false_negative: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCurve {
    pub rate_base: RateBase,
    pub n_samples: usize,
    pub thresholds: Vec<f64>,
    pub counts: Vec<CurveCounts>,
    pub wrong_ratio: Vec<f64>,
    pub false_positive_ratio: Vec<f64>,
    pub false_negative_ratio: Vec<f64>,
    pub prediction_ratio: Vec<f64>,
}

pub const CURVE_CSV_HEADER: &str = "threshold,wrong,fp,fn,predicted";

impl ConfidenceCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CURVE_CSV_HEADER}")?;
        for i in 0..self.thresholds.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.thresholds[i],
                self.wrong_ratio[i],
                self.false_positive_ratio[i],
                self.false_negative_ratio[i],
                self.prediction_ratio[i]
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

/// Uncertainty grid 0, 0.05, ..., 1.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Builds the curve from already computed predictions with their true labels.
pub fn curve_from_predictions(
    preds: &[(Prediction, SkillLabel)],
    grid: &[f64],
    rate_base: RateBase,
) -> Result<ConfidenceCurve, AssessError> {
    let has = |l| preds.iter().any(|(_, t)| *t == l);
    if !has(SkillLabel::Expert) || !has(SkillLabel::Novice) {
        return Err(AssessError::SingleClass);
    }
    if grid.iter().any(|g| !(0.0..=1.0).contains(g)) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(AssessError::InvalidGrid);
    }
    let n = preds.len();
    let mut curve = ConfidenceCurve {
        rate_base,
        n_samples: n,
        thresholds: grid.to_vec(),
        counts: Vec::with_capacity(grid.len()),
        wrong_ratio: Vec::with_capacity(grid.len()),
        false_positive_ratio: Vec::with_capacity(grid.len()),
        false_negative_ratio: Vec::with_capacity(grid.len()),
        prediction_ratio: Vec::with_capacity(grid.len()),
    };
    for &th in grid {
        let mut c = CurveCounts { wrong: 0, false_positive: 0, false_negative: 0, predicted: 0 };
        for (p, truth) in preds {
            if p.uncertainty > th {
                continue;
            }
            c.predicted += 1;
            match (p.label, truth) {
                (SkillLabel::Expert, SkillLabel::Novice) => c.false_positive += 1,
                (SkillLabel::Novice, SkillLabel::Expert) => c.false_negative += 1,
                _ => {}
            }
        }
        c.wrong = c.false_positive + c.false_negative;
        let denom = match rate_base {
            RateBase::All => n,
            RateBase::Predicted => c.predicted,
        };
        let ratio = |k: usize| if denom == 0 { 0.0 } else { k as f64 / denom as f64 };
        curve.wrong_ratio.push(ratio(c.wrong));
        curve.false_positive_ratio.push(ratio(c.false_positive));
        curve.false_negative_ratio.push(ratio(c.false_negative));
        curve.prediction_ratio.push(c.predicted as f64 / n as f64);
        curve.counts.push(c);
    }
    Ok(curve)
}

/// Error, false-positive, false-negative and prediction ratios of `model` on
/// a labelled test set for each uncertainty threshold in `grid`.
pub fn confidence_curve(
    model: &GpModel,
    test: &[(FeatureVector, SkillLabel)],
    grid: &[f64],
    rate_base: RateBase,
) -> Result<ConfidenceCurve, AssessError> {
    if model.is_empty() {
        return Err(AssessError::UntrainedModel);
    }
    let preds = test
        .iter()
        .map(|(f, l)| Ok((model.predict_features(f)?, *l)))
        .collect::<Result<Vec<_>, AssessError>>()?;
    curve_from_predictions(&preds, grid, rate_base)
}
