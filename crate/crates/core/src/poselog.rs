//! Pose-log CSV format.
//!
//! ```text
//! # version=1
//! # session=expert-00
//! # scope_angle_deg=0
//! # cranial=0,0,1
//! # label=expert
//! t,device,px,py,pz,qw,qx,qy,qz,valid
//! 0,endoscope,12.5,-3,40.25,1,0,0,0,1
//! ```
//!
//! Metadata lines come first; `label` is optional. Parsing is strict: any
//! malformed line rejects the whole file with its 1-based line number.

use std::collections::HashSet;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{quaternion_from_wxyz, CranialVector, Device, GeometryError, PoseSample};
use crate::SkillLabel;

pub const POSELOG_VERSION: u32 = 1;
pub const COLUMNS: &str = "t,device,px,py,pz,qw,qx,qy,qz,valid";
/// Accepted deviation of a row quaternion's norm from one.
pub const QUATERNION_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseLogError {
    #[error("empty file")]
    EmptyFile,
    #[error("unknown pose-log version {0}")]
    UnknownVersion(String),
    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: {device:?} timestamp not strictly increasing")]
    NonMonotoneTime { device: Device, line: usize },
}

/// One recorded session.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLog {
    pub version: u32,
    pub session: String,
    pub scope_angle_deg: f64,
    /// Cranial direction as recorded (normalized on use).
    pub cranial: Vector3<f64>,
    pub label: Option<SkillLabel>,
    pub samples: Vec<PoseSample>,
}

impl PoseLog {
    pub fn new(session: impl Into<String>, cranial: Vector3<f64>) -> Self {
        Self {
            version: POSELOG_VERSION,
            session: session.into(),
            scope_angle_deg: 0.0,
            cranial,
            label: None,
            samples: Vec::new(),
        }
    }

    pub fn cranial_vector(&self) -> Result<CranialVector, GeometryError> {
        CranialVector::new(self.cranial)
    }

    pub fn device_samples(&self, device: Device) -> impl Iterator<Item = &PoseSample> {
        self.samples.iter().filter(move |s| s.device == device)
    }
}

/// Incremental parser state: feeds one line at a time so the same code
/// serves whole files and standard-input streams.
#[derive(Debug, Default)]
pub struct LineParser {
    line: usize,
    in_body: bool,
    header: Header,
    last_t: [Option<f64>; 2],
}

#[derive(Debug, Default, Clone)]
struct Header {
    version: Option<u32>,
    session: Option<String>,
    scope_angle_deg: Option<f64>,
    cranial: Option<Vector3<f64>>,
    label: Option<SkillLabel>,
}

/// What one input line contributed.
#[derive(Debug, Clone, PartialEq)]
pub enum Line {
    Skip,
    Sample(PoseSample),
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64, PoseLogError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| PoseLogError::MalformedRow { line, reason: format!("{what}: '{s}' is not a number") })
}

fn parse_vec3(v: &str) -> Option<Vector3<f64>> {
    let parts: Vec<f64> = v.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    (parts.len() == 3 && parts.iter().all(|p| p.is_finite())).then(|| Vector3::new(parts[0], parts[1], parts[2]))
}

impl LineParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn line_number(&self) -> usize {
        self.line
    }

    pub fn feed(&mut self, raw: &str) -> Result<Line, PoseLogError> {
        self.line += 1;
        let line = self.line;
        let text = raw.trim_end_matches(['\r', '\n']);
        if text.trim().is_empty() {
            return Ok(Line::Skip);
        }
        if let Some(meta) = text.strip_prefix('#') {
            if self.in_body {
                return Err(PoseLogError::MalformedHeader { line, reason: "metadata after data rows".into() });
            }
            self.header_line(meta.trim(), line)?;
            return Ok(Line::Skip);
        }
        if !self.in_body {
            self.begin_body()?;
            if text == COLUMNS {
                return Ok(Line::Skip);
            }
        }
        self.row(text, line).map(Line::Sample)
    }

    fn begin_body(&mut self) -> Result<(), PoseLogError> {
        match self.header.version {
            Some(POSELOG_VERSION) => {}
            Some(v) => return Err(PoseLogError::UnknownVersion(v.to_string())),
            None => return Err(PoseLogError::UnknownVersion("missing".into())),
        }
        self.in_body = true;
        Ok(())
    }

    fn header_line(&mut self, meta: &str, line: usize) -> Result<(), PoseLogError> {
        let bad = |reason: String| PoseLogError::MalformedHeader { line, reason };
        let (key, value) = meta.split_once('=').ok_or_else(|| bad(format!("expected key=value, got '{meta}'")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "version" => {
                let v = value.parse::<u32>().map_err(|_| PoseLogError::UnknownVersion(value.to_string()))?;
                if v != POSELOG_VERSION {
                    return Err(PoseLogError::UnknownVersion(value.to_string()));
                }
                self.header.version = Some(v);
            }
            "session" => self.header.session = Some(value.to_string()),
            "scope_angle_deg" => {
                let a = value.parse::<f64>().ok().filter(|a| a.is_finite()).ok_or_else(|| bad(format!("bad scope angle '{value}'")))?;
                self.header.scope_angle_deg = Some(a);
            }
            "cranial" => {
                let c = parse_vec3(value)
                    .filter(|c| c.norm() > 1e-12)
                    .ok_or_else(|| bad(format!("bad cranial vector '{value}'")))?;
                self.header.cranial = Some(c);
            }
            "label" => self.header.label = Some(value.parse().map_err(bad)?),
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    fn row(&mut self, text: &str, line: usize) -> Result<PoseSample, PoseLogError> {
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != 10 {
            return Err(PoseLogError::MalformedRow { line, reason: format!("expected 10 fields, got {}", fields.len()) });
        }
        let t = parse_f64(fields[0], "t", line)?;
        if !t.is_finite() || t < 0.0 {
            return Err(PoseLogError::MalformedRow { line, reason: format!("invalid timestamp {t}") });
        }
        let device: Device = fields[1]
            .trim()
            .parse()
            .map_err(|_| PoseLogError::MalformedRow { line, reason: format!("unknown device '{}'", fields[1]) })?;
        let mut nums = [0.0; 7];
        for (k, (slot, name)) in nums.iter_mut().zip(["px", "py", "pz", "qw", "qx", "qy", "qz"]).enumerate() {
            *slot = parse_f64(fields[2 + k], name, line)?;
            if !slot.is_finite() {
                return Err(PoseLogError::MalformedRow { line, reason: format!("{name} is not finite") });
            }
        }
        let orientation = quaternion_from_wxyz([nums[3], nums[4], nums[5], nums[6]], QUATERNION_TOL)
            .ok_or_else(|| PoseLogError::MalformedRow { line, reason: "quaternion is not unit-norm".into() })?;
        let valid = match fields[9].trim() {
            "1" => true,
            "0" => false,
            other => return Err(PoseLogError::MalformedRow { line, reason: format!("valid flag '{other}' is not 0 or 1") }),
        };
        let slot = &mut self.last_t[device as usize];
        if slot.is_some_and(|prev| t <= prev) {
            return Err(PoseLogError::NonMonotoneTime { device, line });
        }
        *slot = Some(t);
        Ok(PoseSample::new(t, device, Vector3::new(nums[0], nums[1], nums[2]), orientation, valid))
    }

    /// Finalizes the header once the metadata block is complete.
    pub fn header_log(&mut self) -> Result<PoseLog, PoseLogError> {
        if !self.in_body {
            self.begin_body()?;
        }
        let h = self.header.clone();
        Ok(PoseLog {
            version: h.version.unwrap_or(POSELOG_VERSION),
            session: h.session.unwrap_or_default(),
            scope_angle_deg: h.scope_angle_deg.unwrap_or(0.0),
            cranial: h.cranial.unwrap_or_else(Vector3::z),
            label: h.label,
            samples: Vec::new(),
        })
    }
}

pub fn parse_pose_log(bytes: &[u8]) -> Result<PoseLog, PoseLogError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(PoseLogError::EmptyFile);
    }
    let text = std::str::from_utf8(bytes).map_err(|e| PoseLogError::MalformedRow {
        line: bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1,
        reason: "invalid UTF-8".into(),
    })?;
    let mut parser = LineParser::new();
    let mut samples = Vec::new();
    for raw in text.lines() {
        if let Line::Sample(s) = parser.feed(raw)? {
            samples.push(s);
        }
    }
    let mut log = parser.header_log()?;
    log.samples = samples;
    Ok(log)
}

pub fn write_header(log: &PoseLog) -> String {
    let mut out = String::new();
    out.push_str(&format!("# version={}\n", log.version));
    out.push_str(&format!("# session={}\n", log.session));
    out.push_str(&format!("# scope_angle_deg={}\n", log.scope_angle_deg));
    out.push_str(&format!("# cranial={},{},{}\n", log.cranial.x, log.cranial.y, log.cranial.z));
    if let Some(l) = log.label {
        out.push_str(&format!("# label={l}\n"));
    }
    out.push_str(COLUMNS);
    out.push('\n');
    out
}

pub fn format_row(s: &PoseSample) -> String {
    let [qw, qx, qy, qz] = s.quaternion_wxyz();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        s.t,
        s.device.as_str(),
        s.position.x,
        s.position.y,
        s.position.z,
        qw,
        qx,
        qy,
        qz,
        u8::from(s.valid)
    )
}

pub fn write_pose_log(log: &PoseLog) -> String {
    let mut out = write_header(log);
    for s in &log.samples {
        out.push_str(&format_row(s));
        out.push('\n');
    }
    out
}

/// Devices present among the samples, for diagnostics.
pub fn devices(log: &PoseLog) -> HashSet<Device> {
    log.samples.iter().map(|s| s.device).collect()
}
