//! Kinematic feature candidates, their class separability, and the selected
//! five-feature vector used for learning.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SkillLabel;

/// Below this tip-to-tip distance (mm) the distance ratio is reported as 0.
pub const MIN_TIP_DISTANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("dataset contains only one class")]
    SingleClass,
    #[error("need at least 2 samples per class, got {expert} expert / {novice} novice")]
    TooFewSamples { expert: usize, novice: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Every feature candidate for one paired instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateFeatures {
    /// Instrument tip in the endoscope frame (mm).
    pub pos_local: [f64; 3],
    /// Tip-to-tip distance (mm).
    pub d_tip: f64,
    /// Distance from the instrument tip to the endoscope axis line (mm).
    pub d_line: f64,
    /// Relative tip speed (mm/s).
    pub speed: f64,
    /// Angle between instrument shaft and endoscope viewing direction (rad).
    pub angle: f64,
    /// Rate of change of the shaft direction (rad/s).
    pub angular_speed: f64,
}

/// The five learned features: x, y, z, distance ratio, speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub distance_ratio: f64,
    pub speed: f64,
}

impl FeatureVector {
    pub const DIM: usize = 5;
    pub const NAMES: [&'static str; 5] = ["x", "y", "z", "distance_ratio", "speed"];

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.z, self.distance_ratio, self.speed]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { x: a[0], y: a[1], z: a[2], distance_ratio: a[3], speed: a[4] }
    }
}

/// Viewing direction in the endoscope frame (X points toward the handle).
fn viewing_dir() -> Vector3<f64> {
    -Vector3::x()
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 form stays accurate for nearly parallel vectors
    a.cross(b).norm().atan2(a.dot(b))
}

pub fn extract_candidates(
    tip_local: &Vector3<f64>,
    velocity_local: &Vector3<f64>,
    shaft_dir_local: &Vector3<f64>,
    prev: Option<(f64, Vector3<f64>)>,
    t: f64,
) -> CandidateFeatures {
    let d_tip = tip_local.norm();
    let d_line = tip_local.y.hypot(tip_local.z);
    let angle = angle_between(shaft_dir_local, &viewing_dir());
    let angular_speed = match prev {
        Some((t_prev, shaft_prev)) if t > t_prev => angle_between(shaft_dir_local, &shaft_prev) / (t - t_prev),
        _ => 0.0,
    };
    CandidateFeatures {
        pos_local: [tip_local.x, tip_local.y, tip_local.z],
        d_tip,
        d_line: d_line.min(d_tip),
        speed: velocity_local.norm(),
        angle,
        angular_speed,
    }
}

impl CandidateFeatures {
    pub fn distance_ratio(&self) -> f64 {
        if self.d_tip < MIN_TIP_DISTANCE {
            0.0
        } else {
            (self.d_line / self.d_tip).clamp(0.0, 1.0)
        }
    }

    /// Values in [`CANDIDATE_NAMES`] order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.pos_local[0],
            self.pos_local[1],
            self.pos_local[2],
            self.d_tip,
            self.d_line,
            self.distance_ratio(),
            self.speed,
            self.angle,
            self.angular_speed,
        ]
    }
}

pub const CANDIDATE_NAMES: [&str; 9] = [
    "x",
    "y",
    "z",
    "d_tip",
    "d_line",
    "distance_ratio",
    "speed",
    "angle",
    "angular_speed",
];

pub fn select_features(c: &CandidateFeatures) -> FeatureVector {
    FeatureVector {
        x: c.pos_local[0],
        y: c.pos_local[1],
        z: c.pos_local[2],
        distance_ratio: c.distance_ratio(),
        speed: c.speed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Separability summary for one candidate feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub name: String,
    pub expert: MeanStd,
    pub novice: MeanStd,
    pub pooled: MeanStd,
    /// |mean_expert - mean_novice| / pooled within-class std.
    pub significance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub n_expert: usize,
    pub n_novice: usize,
    pub features: Vec<FeatureScore>,
}

impl FeatureStats {
    pub fn get(&self, name: &str) -> Option<&FeatureScore> {
        self.features.iter().find(|f| f.name == name)
    }
}

// Sample mean and variance, summed in sorted order so the result does not
// depend on dataset order.
fn mean_var(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = if values.len() > 1 { dev.iter().sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Standardized mean difference (pooled within-class std) per candidate.
pub fn feature_significance(dataset: &[(CandidateFeatures, SkillLabel)]) -> Result<FeatureStats, FeatureError> {
    let n_expert = dataset.iter().filter(|(_, l)| *l == SkillLabel::Expert).count();
    let n_novice = dataset.len() - n_expert;
    if n_expert == 0 || n_novice == 0 {
        return Err(FeatureError::SingleClass);
    }
    if n_expert < 2 || n_novice < 2 {
        return Err(FeatureError::TooFewSamples { expert: n_expert, novice: n_novice });
    }
    let features = CANDIDATE_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut e: Vec<f64> = Vec::with_capacity(n_expert);
            let mut n: Vec<f64> = Vec::with_capacity(n_novice);
            for (c, l) in dataset {
                match l {
                    SkillLabel::Expert => e.push(c.values()[k]),
                    SkillLabel::Novice => n.push(c.values()[k]),
                }
            }
            let mut all: Vec<f64> = e.iter().chain(&n).copied().collect();
            let (me, ve) = mean_var(&mut e);
            let (mn, vn) = mean_var(&mut n);
            let (ma, _) = mean_var(&mut all);
            let (ne, nn) = (n_expert as f64, n_novice as f64);
            let pooled_std = (((ne - 1.0) * ve + (nn - 1.0) * vn) / (ne + nn - 2.0)).sqrt();
            let diff = (me - mn).abs();
            let significance = if diff == 0.0 { 0.0 } else { diff / pooled_std.max(1e-12) };
            FeatureScore {
                name: name.to_string(),
                expert: MeanStd { mean: me, std: ve.sqrt() },
                novice: MeanStd { mean: mn, std: vn.sqrt() },
                pooled: MeanStd { mean: ma, std: pooled_std },
                significance,
            }
        })
        .collect();
    Ok(FeatureStats { n_expert, n_novice, features })
}

/// Per-feature z-score transform fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits mean and population std per column. Zero-variance columns get
    /// scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, FeatureError> {
        let first = rows.first().ok_or(FeatureError::EmptyTrainingSet)?;
        let d = first.len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(FeatureError::DimensionMismatch { expected: d, got: r.len() });
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }
}

pub fn standardize_fit(train: &[FeatureVector]) -> Result<Normalizer, FeatureError> {
    let rows: Vec<Vec<f64>> = train.iter().map(|f| f.to_array().to_vec()).collect();
    Normalizer::fit(&rows)
}

pub fn standardize_apply(n: &Normalizer, f: &FeatureVector) -> FeatureVector {
    let v = n.apply(&f.to_array());
    FeatureVector::from_array([v[0], v[1], v[2], v[3], v[4]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cand(x: f64, y: f64, z: f64) -> CandidateFeatures {
        extract_candidates(&Vector3::new(x, y, z), &Vector3::zeros(), &-Vector3::x(), None, 0.0)
    }

    #[test]
    fn three_four_five() {
        let c = cand(3.0, 4.0, 0.0);
        assert_eq!(c.d_tip, 5.0);
        assert_eq!(c.d_line, 4.0);
        assert_eq!(select_features(&c).distance_ratio, 0.8);
    }

    #[test]
    fn distance_ratio_edges() {
        assert_eq!(select_features(&cand(-7.0, 0.0, 0.0)).distance_ratio, 0.0);
        assert_eq!(select_features(&cand(0.0, 4.0, 3.0)).distance_ratio, 1.0);
        assert_eq!(select_features(&cand(0.001, 0.001, 0.0)).distance_ratio, 0.0);
    }

    #[test]
    fn parallel_shaft_has_zero_angle() {
        let shaft = -Vector3::x();
        let c = extract_candidates(&Vector3::new(-5.0, 1.0, 1.0), &Vector3::new(1.0, 2.0, 2.0), &shaft, Some((0.0, shaft)), 0.1);
        assert_eq!(c.angle, 0.0);
        assert_eq!(c.angular_speed, 0.0);
        assert_eq!(c.speed, 3.0);
    }

    #[test]
    fn angular_speed_from_previous_direction() {
        let now = Vector3::new(-1.0, 1.0, 0.0).normalize();
        let c = extract_candidates(&Vector3::zeros(), &Vector3::zeros(), &now, Some((1.0, -Vector3::x())), 1.5);
        assert!((c.angle - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((c.angular_speed - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn significance_errors() {
        let c = cand(1.0, 1.0, 1.0);
        assert_eq!(feature_significance(&[(c, SkillLabel::Expert), (c, SkillLabel::Expert)]), Err(FeatureError::SingleClass));
        assert!(matches!(
            feature_significance(&[(c, SkillLabel::Expert), (c, SkillLabel::Expert), (c, SkillLabel::Novice)]),
            Err(FeatureError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn identical_classes_score_zero() {
        let mut data = Vec::new();
        for k in 0..10 {
            let c = cand(k as f64, (k * k) as f64, 1.0);
            data.push((c, SkillLabel::Expert));
            data.push((c, SkillLabel::Novice));
        }
        let stats = feature_significance(&data).unwrap();
        assert!(stats.features.iter().all(|f| f.significance == 0.0));
    }

    #[test]
    fn constant_classes_give_large_finite_score() {
        let data: Vec<_> = (0..6)
            .map(|k| if k % 2 == 0 { (cand(0.0, 1.0, 1.0), SkillLabel::Expert) } else { (cand(10.0, 1.0, 1.0), SkillLabel::Novice) })
            .collect();
        let s = feature_significance(&data).unwrap().get("x").unwrap().significance;
        assert!(s.is_finite() && s > 1e6);
    }

    #[test]
    fn gaussian_classes_unit_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        for _ in 0..10_000 {
            data.push((cand(n.sample(&mut rng), 0.0, 1.0), SkillLabel::Expert));
            data.push((cand(1.0 + n.sample(&mut rng), 0.0, 1.0), SkillLabel::Novice));
        }
        let s = feature_significance(&data).unwrap().get("x").unwrap().significance;
        assert!((s - 1.0).abs() < 0.05, "{s}");
    }

    #[test]
    fn normalizer_examples() {
        let v = FeatureVector::from_array([1.0, 2.0, 3.0, 0.5, 4.0]);
        let n = standardize_fit(&[v, v, v]).unwrap();
        assert_eq!(n.scale, vec![1.0; 5]);
        assert_eq!(standardize_apply(&n, &v).to_array(), [0.0; 5]);

        let a = FeatureVector::from_array([-1.0; 5]);
        let b = FeatureVector::from_array([1.0; 5]);
        let n = standardize_fit(&[a, b]).unwrap();
        assert_eq!(standardize_apply(&n, &a), a);
        assert_eq!(standardize_apply(&n, &b), b);

        assert_eq!(standardize_fit(&[]), Err(FeatureError::EmptyTrainingSet));
    }

    proptest! {
        #[test]
        fn candidate_identities(x in -50.0..50.0f64, y in -50.0..50.0f64, z in -50.0..50.0f64,
                                vx in -20.0..20.0f64, a in -1.0..1.0f64, b in -1.0..1.0f64) {
            let shaft = Vector3::new(-1.0, a, b).normalize();
            let c = extract_candidates(&Vector3::new(x, y, z), &Vector3::new(vx, 1.0, 0.0), &shaft, None, 0.0);
            prop_assert!((c.d_tip - (x * x + y * y + z * z).sqrt()).abs() < 1e-9);
            prop_assert!((c.d_line - (y * y + z * z).sqrt()).abs() < 1e-9);
            prop_assert!(c.d_line <= c.d_tip);
            let r = select_features(&c).distance_ratio;
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=std::f64::consts::PI).contains(&c.angle));
            prop_assert!((c.angle.cos() - (-shaft.x)).abs() < 1e-9);
            prop_assert!((c.speed - (vx * vx + 1.0).sqrt()).abs() < 1e-12);
        }

        #[test]
        fn significance_symmetries(vals in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64, any::<bool>()), 6..40), scale in 0.1..20.0f64) {
            let data: Vec<_> = vals.iter().map(|(a, b, e)| {
                let mut c = cand(*a, *b, 1.0);
                c.speed = a.abs() + b;
                (c, if *e { SkillLabel::Expert } else { SkillLabel::Novice })
            }).collect();
            let Ok(base) = feature_significance(&data) else { return Ok(()); };

            let mut rev = data.clone();
            rev.reverse();
            let swapped: Vec<_> = data.iter().map(|(c, l)| (*c, l.flipped())).collect();
            let scaled: Vec<_> = data.iter().map(|(c, l)| { let mut c = *c; c.speed *= scale; (c, *l) }).collect();
            let r = feature_significance(&rev).unwrap();
            let s = feature_significance(&swapped).unwrap();
            let k = feature_significance(&scaled).unwrap();
            for i in 0..base.features.len() {
                prop_assert!((base.features[i].significance - r.features[i].significance).abs() < 1e-9);
                prop_assert!((base.features[i].significance - s.features[i].significance).abs() < 1e-9);
            }
            let (b, k) = (base.get("speed").unwrap().significance, k.get("speed").unwrap().significance);
            prop_assert!((b - k).abs() < 1e-9 * b.max(1.0));
        }

        #[test]
        fn standardized_training_has_zero_mean_unit_std(rows in proptest::collection::vec(proptest::array::uniform5(-100.0..100.0f64), 2..50)) {
            let train: Vec<_> = rows.iter().map(|r| FeatureVector::from_array(*r)).collect();
            let n = standardize_fit(&train).unwrap();
            let z: Vec<_> = train.iter().map(|f| standardize_apply(&n, f).to_array()).collect();
            for k in 0..5 {
                let m = z.iter().map(|r| r[k]).sum::<f64>() / z.len() as f64;
                let v = z.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / z.len() as f64;
                prop_assert!(m.abs() < 1e-9);
                if n.scale[k] != 1.0 || v > 0.0 {
                    prop_assert!((v.sqrt() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
