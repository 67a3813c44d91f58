//! Skill assessment from relative endoscope-instrument motion.
//!
//! Tracked poses are projected into an endoscope-centred frame, smoothed
//! with a constant-velocity Kalman filter, reduced to five kinematic
//! features, and classified expert/novice by a Gaussian process whose
//! predictive uncertainty drives abstention and a confidence-weighted
//! summative verdict.
//!
//! ```text
//! poselog -> geometry -> kinematics -> features -> gp -> assess
//! ```

pub mod assess;
pub mod extract;
pub mod features;
pub mod geometry;
pub mod gp;
pub mod kinematics;
pub mod pipeline;
pub mod poselog;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use assess::{assess_stream, confidence_curve, summative_score, AssessmentEvent, ConfidenceCurve, EventLabel, RateBase, SummativeResult};
pub use extract::{FeatureExtractor, TimedFeatures};
pub use features::{CandidateFeatures, FeatureStats, FeatureVector, Normalizer};
pub use geometry::{CranialVector, Device, EndoscopeFrame, PoseSample, ScopeModel};
pub use gp::{GpModel, Kernel, Prediction};
pub use kinematics::{KinematicState, NoiseConfig};
pub use poselog::PoseLog;

/// Binary skill level. Expert maps to +1, novice to -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillLabel {
    Expert,
    Novice,
}

impl SkillLabel {
    pub fn sign(self) -> f64 {
        match self {
            SkillLabel::Expert => 1.0,
            SkillLabel::Novice => -1.0,
        }
    }

    /// Expert iff `score >= 0`.
    pub fn from_score(score: f64) -> Self {
        if score >= 0.0 {
            SkillLabel::Expert
        } else {
            SkillLabel::Novice
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            SkillLabel::Expert => SkillLabel::Novice,
            SkillLabel::Novice => SkillLabel::Expert,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SkillLabel::Expert => "expert",
            SkillLabel::Novice => "novice",
        }
    }
}

impl std::fmt::Display for SkillLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SkillLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "expert" | "e" | "+1" | "1" => Ok(SkillLabel::Expert),
            "novice" | "n" | "-1" => Ok(SkillLabel::Novice),
            other => Err(format!("unknown skill label '{other}'")),
        }
    }
}
