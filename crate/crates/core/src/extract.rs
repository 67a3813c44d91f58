//! Pose stream to feature stream.
//!
//! Each device gets its own constant-velocity filter in the world frame.
//! Every valid instrument fix is paired with the nearest valid endoscope fix
//! within [`PAIRING_WINDOW`]; the pair defines the endoscope frame, the
//! relative velocity, and the shaft direction used for the candidate
//! features. The extractor is incremental so the same code serves batch
//! files and live streams.

use std::collections::VecDeque;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_candidates, select_features, CandidateFeatures, FeatureVector};
use crate::geometry::{instrument_direction_local, project_point, CranialVector, Device, GeometryError, PoseSample, ScopeModel};
use crate::kinematics::{KinematicsError, NoiseConfig, SpeedTracker, PAIRING_WINDOW};
use crate::poselog::PoseLog;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractError {
    #[error("{device:?} sample at t={t} is not after the previous one")]
    NonMonotoneTime { device: Device, t: f64 },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub noise: NoiseConfig,
    /// Instrument pointing direction (handle toward tip) in its body frame.
    pub instrument_shaft_body: Vector3<f64>,
    pub pairing_window: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { noise: NoiseConfig::default(), instrument_shaft_body: Vector3::z(), pairing_window: PAIRING_WINDOW }
    }
}

/// Features at one instrument timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedFeatures {
    pub t: f64,
    pub candidates: CandidateFeatures,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractStats {
    pub paired: usize,
    pub unpaired: usize,
    pub degenerate: usize,
    pub invalid: usize,
}

#[derive(Debug, Clone, Copy)]
struct Fix {
    t: f64,
    position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
    velocity: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    cfg: ExtractConfig,
    scope: ScopeModel,
    cranial: CranialVector,
    endo_kf: SpeedTracker,
    instr_kf: SpeedTracker,
    endo_fixes: VecDeque<Fix>,
    pending: VecDeque<Fix>,
    last_t: [Option<f64>; 2],
    last_instrument_t: Option<f64>,
    clock: f64,
    prev_shaft: Option<(f64, Vector3<f64>)>,
    stats: ExtractStats,
}

impl FeatureExtractor {
    pub fn new(cfg: ExtractConfig, scope: ScopeModel, cranial: CranialVector) -> Result<Self, ExtractError> {
        cfg.noise.validate()?;
        Ok(Self {
            cfg,
            scope,
            cranial,
            endo_kf: SpeedTracker::new(cfg.noise),
            instr_kf: SpeedTracker::new(cfg.noise),
            endo_fixes: VecDeque::new(),
            pending: VecDeque::new(),
            last_t: [None; 2],
            last_instrument_t: None,
            clock: f64::NEG_INFINITY,
            prev_shaft: None,
            stats: ExtractStats::default(),
        })
    }

    /// Extractor configured from a log's metadata.
    pub fn for_log(log: &PoseLog, cfg: ExtractConfig) -> Result<Self, ExtractError> {
        Self::new(cfg, ScopeModel::with_angle(log.scope_angle_deg), log.cranial_vector()?)
    }

    pub fn stats(&self) -> ExtractStats {
        self.stats
    }

    /// Consumes one sample and returns every feature row that became
    /// resolvable, in instrument-time order.
    pub fn push(&mut self, s: &PoseSample) -> Result<Vec<TimedFeatures>, ExtractError> {
        let slot = &mut self.last_t[s.device as usize];
        if slot.is_some_and(|prev| s.t <= prev) {
            return Err(ExtractError::NonMonotoneTime { device: s.device, t: s.t });
        }
        *slot = Some(s.t);
        self.clock = self.clock.max(s.t);

        if s.valid {
            match s.device {
                Device::Endoscope => {
                    let est = self.endo_kf.observe(s.t, &s.position)?;
                    self.endo_fixes.push_back(Fix { t: s.t, position: s.position, orientation: s.orientation, velocity: est.velocity });
                }
                Device::Instrument => {
                    let est = self.instr_kf.observe(s.t, &s.position)?;
                    self.pending.push_back(Fix { t: s.t, position: s.position, orientation: s.orientation, velocity: est.velocity });
                    self.last_instrument_t = Some(s.t);
                }
            }
        } else {
            self.stats.invalid += 1;
        }
        let out = self.drain(false);
        self.prune();
        Ok(out)
    }

    /// Resolves everything still pending at end of input.
    pub fn finish(&mut self) -> Vec<TimedFeatures> {
        self.drain(true)
    }

    fn drain(&mut self, flush: bool) -> Vec<TimedFeatures> {
        let mut out = Vec::new();
        while let Some(fix) = self.pending.front().copied() {
            let later_endo = self.endo_fixes.back().is_some_and(|e| e.t >= fix.t);
            if !(flush || later_endo || self.clock > fix.t + self.cfg.pairing_window) {
                break;
            }
            self.pending.pop_front();
            match self.nearest_endoscope(fix.t) {
                Some(endo) => {
                    if let Some(row) = self.features_for(&fix, &endo) {
                        out.push(row);
                    }
                }
                None => self.stats.unpaired += 1,
            }
        }
        out
    }

    fn nearest_endoscope(&self, t: f64) -> Option<Fix> {
        let after = self.endo_fixes.iter().position(|e| e.t >= t);
        let candidates = match after {
            Some(0) => [self.endo_fixes.front(), None],
            Some(i) => [self.endo_fixes.get(i - 1), self.endo_fixes.get(i)],
            None => [self.endo_fixes.back(), None],
        };
        candidates
            .into_iter()
            .flatten()
            .filter(|e| (e.t - t).abs() <= self.cfg.pairing_window)
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .copied()
    }

    fn features_for(&mut self, instr: &Fix, endo: &Fix) -> Option<TimedFeatures> {
        let frame = match self.scope.frame_for(&endo.position, &endo.orientation, &self.cranial) {
            Ok(f) => f,
            Err(_) => {
                self.stats.degenerate += 1;
                return None;
            }
        };
        let tip_local = project_point(&frame, &instr.position);
        let velocity_local = frame.rotate_vector(&(instr.velocity - endo.velocity));
        let shaft_local = instrument_direction_local(&frame, &instr.orientation, &self.cfg.instrument_shaft_body);
        let candidates = extract_candidates(&tip_local, &velocity_local, &shaft_local, self.prev_shaft, instr.t);
        self.prev_shaft = Some((instr.t, shaft_local));
        self.stats.paired += 1;
        Some(TimedFeatures { t: instr.t, candidates, features: select_features(&candidates) })
    }

    /// Drops endoscope fixes that can no longer be the nearest match for any
    /// current or future instrument sample.
    fn prune(&mut self) {
        let horizon = match (self.pending.front(), self.last_instrument_t) {
            (Some(p), _) => p.t,
            (None, Some(t)) => t,
            (None, None) => return,
        };
        while self.endo_fixes.len() >= 2 && self.endo_fixes[1].t <= horizon {
            self.endo_fixes.pop_front();
        }
    }
}

/// Extracts features from a whole log. Rows are replayed in time order.
pub fn extract_log(log: &PoseLog, cfg: &ExtractConfig) -> Result<(Vec<TimedFeatures>, ExtractStats), ExtractError> {
    let mut ex = FeatureExtractor::for_log(log, *cfg)?;
    let mut order: Vec<&PoseSample> = log.samples.iter().collect();
    order.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut out = Vec::new();
    for s in order {
        out.extend(ex.push(s)?);
    }
    out.extend(ex.finish());
    Ok((out, ex.stats()))
}
