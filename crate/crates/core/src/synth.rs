//! Seeded synthetic endoscope + instrument sessions with expert and novice
//! motion profiles.
//!
//! Sampling follows the envelope of a commercial optical navigation system:
//! an irregular 6-16 Hz clock, asynchronous endoscope/instrument stamps and
//! bursty occlusion dropouts. Expert instruments stay close to the scope axis
//! and move slowly and steadily; novices wander off-axis with faster, more
//! erratic motion. `overlap` pulls both profiles toward their midpoint.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Device, PoseSample, ScopeModel};
use crate::poselog::PoseLog;
use crate::SkillLabel;

/// Sampling-rate envelope (Hz).
pub const MIN_RATE_HZ: f64 = 6.14;
pub const MAX_RATE_HZ: f64 = 15.63;
/// Instrument stamps trail the endoscope stamp by a slowly drifting lag (s).
pub const MIN_STAMP_LAG: f64 = 0.001;
pub const MAX_STAMP_LAG: f64 = 0.015;
const LAG_STEP: f64 = 0.0005;
const SIM_STEP: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub class: SkillLabel,
    pub mean_sampling_hz: f64,
    pub sampling_jitter_hz: f64,
    /// Fraction of samples delivered, in (0, 1].
    pub tracking_rate: f64,
    /// Mean dropout burst length in samples.
    pub mean_dropout_burst: f64,
    pub duration: f64,
    pub seed: u64,
    /// Lateral spread of the instrument tip around the scope axis (mm).
    pub axis_offset_mm: f64,
    /// Mean working depth in front of the scope tip (mm).
    pub depth_mm: f64,
    /// Mean (y, z) offset of the working point from the scope axis (mm).
    pub lateral_mm: [f64; 2],
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Heading diffusion (rad/√s).
    pub heading_jitter: f64,
    /// Tracker position noise std (mm).
    pub position_noise_mm: f64,
    /// 0 keeps the class profile, 1 makes both classes identical.
    pub overlap: f64,
}

struct Kinematic {
    axis_offset_mm: f64,
    depth_mm: f64,
    lateral_mm: [f64; 2],
    speed_mean: f64,
    speed_std: f64,
    heading_jitter: f64,
}

const EXPERT: Kinematic = Kinematic { axis_offset_mm: 2.0, depth_mm: 9.0, lateral_mm: [0.0, 0.0], speed_mean: 3.0, speed_std: 1.0, heading_jitter: 0.6 };
const NOVICE: Kinematic = Kinematic { axis_offset_mm: 6.0, depth_mm: 15.0, lateral_mm: [3.0, -5.0], speed_mean: 9.0, speed_std: 4.0, heading_jitter: 2.0 };

impl ProfileConfig {
    pub fn for_class(class: SkillLabel, seed: u64) -> Self {
        let k = match class {
            SkillLabel::Expert => &EXPERT,
            SkillLabel::Novice => &NOVICE,
        };
        Self {
            class,
            mean_sampling_hz: 14.0,
            sampling_jitter_hz: 4.0,
            tracking_rate: 0.85,
            mean_dropout_burst: 3.0,
            duration: 60.0,
            seed,
            axis_offset_mm: k.axis_offset_mm,
            depth_mm: k.depth_mm,
            lateral_mm: k.lateral_mm,
            speed_mean: k.speed_mean,
            speed_std: k.speed_std,
            heading_jitter: k.heading_jitter,
            position_noise_mm: 0.3,
            overlap: 0.0,
        }
    }

    pub fn expert(seed: u64) -> Self {
        Self::for_class(SkillLabel::Expert, seed)
    }

    pub fn novice(seed: u64) -> Self {
        Self::for_class(SkillLabel::Novice, seed)
    }

    /// Blends the kinematic parameters toward the expert/novice midpoint.
    pub fn with_overlap(mut self, overlap: f64) -> Self {
        let mix = |own: f64, e: f64, n: f64| own + overlap * (0.5 * (e + n) - own);
        self.axis_offset_mm = mix(self.axis_offset_mm, EXPERT.axis_offset_mm, NOVICE.axis_offset_mm);
        self.depth_mm = mix(self.depth_mm, EXPERT.depth_mm, NOVICE.depth_mm);
        for i in 0..2 {
            self.lateral_mm[i] = mix(self.lateral_mm[i], EXPERT.lateral_mm[i], NOVICE.lateral_mm[i]);
        }
        self.speed_mean = mix(self.speed_mean, EXPERT.speed_mean, NOVICE.speed_mean);
        self.speed_std = mix(self.speed_std, EXPERT.speed_std, NOVICE.speed_std);
        self.heading_jitter = mix(self.heading_jitter, EXPERT.heading_jitter, NOVICE.heading_jitter);
        self.overlap = overlap;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.tracking_rate > 0.0 && self.tracking_rate <= 1.0) {
            return bad("tracking_rate must be in (0, 1]");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.mean_sampling_hz > 0.0 && self.sampling_jitter_hz >= 0.0) {
            return bad("sampling rate must be positive and jitter non-negative");
        }
        let lo = (self.mean_sampling_hz - self.sampling_jitter_hz).max(MIN_RATE_HZ);
        let hi = (self.mean_sampling_hz + self.sampling_jitter_hz).min(MAX_RATE_HZ);
        if lo > hi {
            return bad("sampling band lies outside the tracker envelope");
        }
        if self.mean_dropout_burst < 1.0 {
            return bad("mean_dropout_burst must be >= 1 sample");
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap must be in [0, 1]");
        }
        let nonneg = [self.axis_offset_mm, self.depth_mm, self.speed_mean, self.speed_std, self.heading_jitter, self.position_noise_mm];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("kinematic parameters must be finite and non-negative");
        }
        if !self.lateral_mm.iter().all(|v| v.is_finite()) {
            return bad("lateral offset must be finite");
        }
        Ok(())
    }

    fn rate_band(&self) -> (f64, f64) {
        (
            (self.mean_sampling_hz - self.sampling_jitter_hz).max(MIN_RATE_HZ),
            (self.mean_sampling_hz + self.sampling_jitter_hz).min(MAX_RATE_HZ),
        )
    }
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Occlusion as a two-state Markov chain with geometric burst lengths.
struct Occlusion {
    lost: bool,
    p_lose: f64,
    p_recover: f64,
}

impl Occlusion {
    fn new(rate: f64, mean_burst: f64) -> Self {
        let p_recover = 1.0 / mean_burst;
        Self { lost: false, p_lose: p_recover * (1.0 - rate) / rate, p_recover }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> bool {
        let u: f64 = rng.random();
        self.lost = if self.lost { u >= self.p_recover } else { u < self.p_lose };
        !self.lost
    }
}

/// Ground-truth scene simulator in endoscope-local coordinates.
struct Scene {
    cfg: ProfileConfig,
    t: f64,
    tip: Vector3<f64>,
    heading: Vector3<f64>,
    speed: f64,
    target: Vector3<f64>,
    scope_phase: [f64; 5],
    entry: Vector3<f64>,
}

fn working_point(c: &ProfileConfig) -> Vector3<f64> {
    Vector3::new(-c.depth_mm, c.lateral_mm[0], c.lateral_mm[1])
}

const TARGET_TAU: f64 = 2.0;
const SPEED_TAU: f64 = 1.0;
const STEER_GAIN: f64 = 3.0;

impl Scene {
    fn new(cfg: &ProfileConfig, rng: &mut ChaCha8Rng) -> Self {
        let anchor = working_point(cfg);
        let mut scope_phase = [0.0; 5];
        for p in &mut scope_phase {
            *p = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Self {
            cfg: cfg.clone(),
            t: 0.0,
            tip: anchor,
            heading: -Vector3::x(),
            speed: cfg.speed_mean,
            target: anchor,
            scope_phase,
            entry: Vector3::new(60.0, rng.random_range(3.0..7.0), rng.random_range(-4.0..-1.0)),
        }
    }

    fn advance(&mut self, to: f64, rng: &mut ChaCha8Rng) {
        while self.t < to {
            let dt = SIM_STEP.min(to - self.t);
            let sq = dt.sqrt();
            let c = &self.cfg;
            // target wanders around the working point as an OU process
            let anchor = working_point(c);
            let spread = Vector3::new(0.25 * c.depth_mm, c.axis_offset_mm, c.axis_offset_mm);
            let n = gauss3(rng);
            for i in 0..3 {
                self.target[i] += -(self.target[i] - anchor[i]) / TARGET_TAU * dt + spread[i] * (2.0 / TARGET_TAU).sqrt() * sq * n[i];
            }
            let to_target = self.target - self.tip;
            let want = if to_target.norm() > 1e-9 { to_target.normalize() } else { self.heading };
            let h = self.heading + (want - self.heading) * (STEER_GAIN * dt) + gauss3(rng) * (c.heading_jitter * sq);
            self.heading = if h.norm() > 1e-9 { h.normalize() } else { want };
            let z: f64 = rng.sample(StandardNormal);
            self.speed += -(self.speed - c.speed_mean) / SPEED_TAU * dt + c.speed_std * (2.0 / SPEED_TAU).sqrt() * sq * z;
            self.speed = self.speed.max(0.0);
            // slow down on approach so the tip settles near the target
            let approach = (to_target.norm() / (c.axis_offset_mm + 1.0)).min(1.0);
            self.tip += self.heading * (self.speed * approach.max(0.3) * dt);
            self.t += dt;
        }
    }

    /// World pose of the endoscope tip: slow drift and wobble around a
    /// nominal posterior-looking pose.
    fn scope_pose(&self) -> (Vector3<f64>, UnitQuaternion<f64>) {
        let p = &self.scope_phase;
        let t = self.t;
        let origin = Vector3::new(2.0 * (0.11 * t + p[0]).sin(), 1.5 * (0.07 * t + p[1]).sin(), 2.0 * (0.13 * t + p[2]).sin());
        let view = Vector3::new(0.12 * (0.05 * t + p[3]).sin(), 1.0, 0.1 * (0.09 * t + p[4]).sin() - 0.15).normalize();
        let q = UnitQuaternion::rotation_between(&Vector3::z(), &view).expect("view is never -z");
        (origin, q)
    }
}

/// Generates one interleaved endoscope + instrument pose log.
pub fn generate_session(cfg: &ProfileConfig) -> Result<PoseLog, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cranial = Vector3::z();
    let cranial_v = crate::geometry::CranialVector::new(cranial).expect("unit z");
    let scope = ScopeModel::default();
    let mut scene = Scene::new(cfg, &mut rng);
    let mut endo_occ = Occlusion::new(cfg.tracking_rate, cfg.mean_dropout_burst);
    let mut instr_occ = Occlusion::new(cfg.tracking_rate, cfg.mean_dropout_burst);
    let (lo, hi) = cfg.rate_band();

    let mut log = PoseLog::new(format!("{}-{:016x}", cfg.class, cfg.seed), cranial);
    log.label = Some(cfg.class);
    let mut t = 0.0;
    let mut lag = rng.random_range(MIN_STAMP_LAG..MAX_STAMP_LAG);
    while t <= cfg.duration {
        scene.advance(t, &mut rng);
        let (origin, q_scope) = scene.scope_pose();
        let frame = scope.frame_for(&origin, &q_scope, &cranial_v).expect("scope never looks along the cranial axis");
        let endo_ok = endo_occ.step(&mut rng);
        if endo_ok {
            let noisy = origin + gauss3(&mut rng) * cfg.position_noise_mm;
            log.samples.push(PoseSample::new(t, Device::Endoscope, noisy, q_scope, true));
        } else {
            log.samples.push(PoseSample::dropped(t, Device::Endoscope));
        }

        lag = (lag + rng.random_range(-LAG_STEP..LAG_STEP)).clamp(MIN_STAMP_LAG, MAX_STAMP_LAG);
        scene.advance(t + lag, &mut rng);
        let (origin, q_scope) = scene.scope_pose();
        let frame_i = scope.frame_for(&origin, &q_scope, &cranial_v).unwrap_or(frame);
        let tip_world = frame_i.unproject_point(&scene.tip);
        let shaft_local = (scene.tip - scene.entry).normalize();
        let shaft_world = frame_i.rotation().transpose() * shaft_local;
        let q_instr = UnitQuaternion::rotation_between(&Vector3::z(), &shaft_world)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        if instr_occ.step(&mut rng) {
            let noisy = tip_world + gauss3(&mut rng) * cfg.position_noise_mm;
            log.samples.push(PoseSample::new(t + lag, Device::Instrument, noisy, q_instr, true));
        } else {
            log.samples.push(PoseSample::dropped(t + lag, Device::Instrument));
        }

        let rate = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        t += 1.0 / rate;
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub session: String,
    pub label: SkillLabel,
    pub file: String,
    pub config: ProfileConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub base_seed: u64,
    pub sessions: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub sessions: Vec<(PoseLog, SkillLabel)>,
    pub manifest: Manifest,
}

/// Options shared by every session of a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    pub duration: f64,
    pub overlap: f64,
    pub tracking_rate: f64,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self { duration: 60.0, overlap: 0.0, tracking_rate: 0.85 }
    }
}

/// `n_expert` expert then `n_novice` novice sessions with seeds drawn from
/// `base_seed`.
pub fn generate_benchmark(n_expert: usize, n_novice: usize, base_seed: u64, opts: &BenchmarkOptions) -> Result<LabeledDataset, SynthError> {
    if n_expert == 0 || n_novice == 0 {
        return Err(SynthError::InvalidConfig("need at least one session per class".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(base_seed);
    let mut sessions = Vec::new();
    let mut entries = Vec::new();
    let plan = std::iter::repeat_n(SkillLabel::Expert, n_expert).chain(std::iter::repeat_n(SkillLabel::Novice, n_novice));
    let mut counters = [0usize; 2];
    for class in plan {
        let idx = &mut counters[usize::from(class == SkillLabel::Novice)];
        let mut cfg = ProfileConfig::for_class(class, seeds.next_u64()).with_overlap(opts.overlap);
        cfg.duration = opts.duration;
        cfg.tracking_rate = opts.tracking_rate;
        let mut log = generate_session(&cfg)?;
        log.session = format!("{class}-{:02}", *idx);
        *idx += 1;
        entries.push(ManifestEntry { session: log.session.clone(), label: class, file: format!("{}.csv", log.session), config: cfg });
        sessions.push((log, class));
    }
    Ok(LabeledDataset { sessions, manifest: Manifest { generator: "skillscope-synth/1".into(), base_seed, sessions: entries } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{extract_log, ExtractConfig};
    use crate::features::feature_significance;
    use crate::poselog::write_pose_log;

    fn short(class: SkillLabel, seed: u64, duration: f64) -> ProfileConfig {
        ProfileConfig { duration, ..ProfileConfig::for_class(class, seed) }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = write_pose_log(&generate_session(&short(SkillLabel::Expert, 9, 10.0)).unwrap());
        let b = write_pose_log(&generate_session(&short(SkillLabel::Expert, 9, 10.0)).unwrap());
        let c = write_pose_log(&generate_session(&short(SkillLabel::Expert, 10, 10.0)).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_tracking_drops_nothing() {
        let cfg = ProfileConfig { tracking_rate: 1.0, ..short(SkillLabel::Novice, 1, 30.0) };
        assert!(generate_session(&cfg).unwrap().samples.iter().all(|s| s.valid));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ProfileConfig { tracking_rate: 0.0, ..ProfileConfig::expert(0) },
            ProfileConfig { tracking_rate: 1.5, ..ProfileConfig::expert(0) },
            ProfileConfig { duration: 0.0, ..ProfileConfig::expert(0) },
            ProfileConfig { mean_sampling_hz: 40.0, sampling_jitter_hz: 1.0, ..ProfileConfig::expert(0) },
            ProfileConfig { overlap: 2.0, ..ProfileConfig::expert(0) },
        ] {
            assert!(matches!(generate_session(&cfg), Err(SynthError::InvalidConfig(_))));
        }
    }

    #[test]
    fn sampling_envelope_and_dropout_rate() {
        // bursty dropouts need a long session for the delivered fraction to settle
        let cfg = ProfileConfig { tracking_rate: 0.8, ..short(SkillLabel::Expert, 5, 4000.0) };
        let log = generate_session(&cfg).unwrap();
        for device in [Device::Endoscope, Device::Instrument] {
            let s: Vec<_> = log.device_samples(device).collect();
            for w in s.windows(2) {
                let dt = w[1].t - w[0].t;
                assert!(dt > 0.0);
                let rate = 1.0 / dt;
                assert!((6.0..=16.0).contains(&rate), "{rate}");
            }
            let delivered = s.iter().filter(|x| x.valid).count() as f64 / s.len() as f64;
            assert!((delivered - 0.8).abs() < 0.02, "{device:?}: {delivered}");
            assert!(s.iter().all(|x| (x.orientation.quaternion().norm() - 1.0).abs() < 1e-9));
        }
    }

    #[test]
    fn benchmark_layout() {
        let opts = BenchmarkOptions { duration: 5.0, ..Default::default() };
        let d = generate_benchmark(4, 4, 42, &opts).unwrap();
        assert_eq!(d.sessions.len(), 8);
        assert_eq!(d.sessions.iter().filter(|(_, l)| *l == SkillLabel::Expert).count(), 4);
        assert_eq!(d.manifest.sessions[5].session, "novice-01");
        assert_eq!(d.manifest.to_json(), generate_benchmark(4, 4, 42, &opts).unwrap().manifest.to_json());
        assert!(generate_benchmark(0, 4, 42, &opts).is_err());
    }

    #[test]
    fn default_profiles_are_separable() {
        let mut data = Vec::new();
        for (class, seed) in [(SkillLabel::Expert, 1), (SkillLabel::Novice, 2)] {
            let log = generate_session(&short(class, seed, 60.0)).unwrap();
            let (rows, _) = extract_log(&log, &ExtractConfig::default()).unwrap();
            data.extend(rows.into_iter().map(|r| (r.candidates, class)));
        }
        let stats = feature_significance(&data).unwrap();
        let strong = ["x", "y", "z", "distance_ratio", "speed"]
            .iter()
            .filter(|n| stats.get(n).unwrap().significance > 1.0)
            .count();
        assert!(strong >= 3, "{:#?}", stats.features);
    }
}
