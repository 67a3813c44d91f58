//! Constant-velocity Kalman filter for tip speed from irregular, dropout-prone
//! position fixes.
//!
//! The motion model is linear (position observations, constant-velocity
//! state), so a plain linear filter is exact here.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Matrix6x3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prior standard deviation of the velocity at initialization (mm/s).
pub const INITIAL_VELOCITY_STD: f64 = 100.0;
/// Maximum timestamp distance for pairing endoscope and instrument samples (s).
pub const PAIRING_WINDOW: f64 = 0.075;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("negative time step {0} s (out-of-order input)")]
    NegativeDt(f64),
    #[error("empty track")]
    EmptyTrack,
    #[error("timestamps not strictly increasing at index {0}")]
    NonMonotoneTime(usize),
    #[error("noise parameters must be strictly positive")]
    InvalidNoise,
}

/// Filter noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Position measurement noise std (mm).
    pub sigma_pos_obs: f64,
    /// Velocity random-walk std accumulated per second (mm/s).
    pub sigma_speed_proc: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma_pos_obs: 0.3, sigma_speed_proc: 1.0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.sigma_pos_obs > 0.0 && self.sigma_speed_proc > 0.0 {
            Ok(())
        } else {
            Err(KinematicsError::InvalidNoise)
        }
    }
}

/// Filter state: position (mm) stacked over velocity (mm/s), with covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub t: f64,
    pub x: Vector6<f64>,
    pub p: Matrix6<f64>,
}

impl KinematicState {
    pub fn position(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3).into_owned()
    }

    pub fn speed(&self) -> f64 {
        self.velocity().norm()
    }
}

pub fn kf_init(first_obs: Vector3<f64>, t0: f64, cfg: &NoiseConfig) -> KinematicState {
    let mut x = Vector6::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&first_obs);
    let mut p = Matrix6::zeros();
    let pv = cfg.sigma_pos_obs * cfg.sigma_pos_obs;
    let vv = INITIAL_VELOCITY_STD * INITIAL_VELOCITY_STD;
    for i in 0..3 {
        p[(i, i)] = pv;
        p[(i + 3, i + 3)] = vv;
    }
    KinematicState { t: t0, x, p }
}

fn transition(dt: f64) -> Matrix6<f64> {
    let mut f = Matrix6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    f
}

/// White-acceleration process noise: velocity variance grows by
/// `sigma_speed_proc^2` per second.
fn process_noise(dt: f64, cfg: &NoiseConfig) -> Matrix6<f64> {
    let q = cfg.sigma_speed_proc * cfg.sigma_speed_proc;
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = q * dt * dt * dt / 3.0;
        m[(i, i + 3)] = q * dt * dt / 2.0;
        m[(i + 3, i)] = q * dt * dt / 2.0;
        m[(i + 3, i + 3)] = q * dt;
    }
    m
}

fn symmetrize(p: &Matrix6<f64>) -> Matrix6<f64> {
    (p + p.transpose()) * 0.5
}

pub fn kf_predict(s: &KinematicState, dt: f64, cfg: &NoiseConfig) -> Result<KinematicState, KinematicsError> {
    if dt < 0.0 || dt.is_nan() {
        return Err(KinematicsError::NegativeDt(dt));
    }
    if dt == 0.0 {
        return Ok(*s);
    }
    let f = transition(dt);
    let p = f * s.p * f.transpose() + process_noise(dt, cfg);
    Ok(KinematicState { t: s.t + dt, x: f * s.x, p: symmetrize(&p) })
}

/// Measurement update with `H = [I | 0]`, Joseph form.
pub fn kf_update(s: &KinematicState, obs: &Vector3<f64>, cfg: &NoiseConfig) -> KinematicState {
    let mut h = Matrix3x6::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    let r = Matrix3::identity() * (cfg.sigma_pos_obs * cfg.sigma_pos_obs);
    let innovation = obs - h * s.x;
    let s_cov = h * s.p * h.transpose() + r;
    // s_cov is SPD (r > 0), so the Cholesky inverse always exists.
    let s_inv = s_cov.cholesky().expect("innovation covariance is SPD").inverse();
    let gain: Matrix6x3<f64> = s.p * h.transpose() * s_inv;
    let x = s.x + gain * innovation;
    let i_kh = Matrix6::identity() - gain * h;
    let p = i_kh * s.p * i_kh.transpose() + gain * r * gain.transpose();
    KinematicState { t: s.t, x, p: symmetrize(&p) }
}

/// Filtered velocity at one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedEstimate {
    pub t: f64,
    pub speed: f64,
    pub velocity: Vector3<f64>,
}

/// Incremental filter over one device stream.
#[derive(Debug, Clone)]
pub struct SpeedTracker {
    cfg: NoiseConfig,
    state: Option<KinematicState>,
}

impl SpeedTracker {
    pub fn new(cfg: NoiseConfig) -> Self {
        Self { cfg, state: None }
    }

    pub fn state(&self) -> Option<&KinematicState> {
        self.state.as_ref()
    }

    /// Advances to `t` and folds in `obs`. Time gaps from dropped samples are
    /// bridged by a single prediction over the whole gap.
    pub fn observe(&mut self, t: f64, obs: &Vector3<f64>) -> Result<SpeedEstimate, KinematicsError> {
        let next = match &self.state {
            None => kf_init(*obs, t, &self.cfg),
            Some(s) => {
                let predicted = kf_predict(s, t - s.t, &self.cfg)?;
                let mut updated = kf_update(&predicted, obs, &self.cfg);
                updated.t = t;
                updated
            }
        };
        self.state = Some(next);
        Ok(SpeedEstimate { t, speed: next.speed(), velocity: next.velocity() })
    }
}

/// Runs the filter over a strictly time-ordered track of valid fixes.
pub fn estimate_speed(track: &[(f64, Vector3<f64>)], cfg: &NoiseConfig) -> Result<Vec<SpeedEstimate>, KinematicsError> {
    if track.is_empty() {
        return Err(KinematicsError::EmptyTrack);
    }
    if let Some(i) = track.windows(2).position(|w| w[1].0.partial_cmp(&w[0].0) != Some(std::cmp::Ordering::Greater)) {
        return Err(KinematicsError::NonMonotoneTime(i + 1));
    }
    let mut tracker = SpeedTracker::new(*cfg);
    track.iter().map(|(t, p)| tracker.observe(*t, p)).collect()
}

/// Pairs every instrument timestamp with the nearest endoscope timestamp
/// within `window` seconds. Both slices must be sorted ascending. Returns
/// `(instrument_index, endoscope_index)`; unpaired instrument samples are
/// omitted.
pub fn pair_nearest(instrument_t: &[f64], endoscope_t: &[f64], window: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(instrument_t.len());
    let mut j = 0;
    for (i, &ti) in instrument_t.iter().enumerate() {
        while j + 1 < endoscope_t.len() && endoscope_t[j + 1] <= ti {
            j += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        for k in [j, j + 1] {
            if let Some(&te) = endoscope_t.get(k) {
                let d = (te - ti).abs();
                if d <= window && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((k, d));
                }
            }
        }
        if let Some((k, _)) = best {
            out.push((i, k));
        }
    }
    out
}
