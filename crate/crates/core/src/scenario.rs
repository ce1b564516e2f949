//! Scenario configuration: TOML schema, defaults and validation.
//!
//! Every field is optional; omitted fields take the reference values
//! (`A = 1.001`, `C = 1`, `Q = 0.001`, `R = 0.1`, `x0 = 0.1`, `α = 0.7`,
//! `α_a = 0.9`, `α_e = 0.8` from step 900, horizon 2000, `ρ_i = 5e-6`).
//!
//! ```toml
//! seed = 7
//! runs = 500
//! horizon = 2000
//!
//! [system]
//! a = 1.001            # scalar, or rows: [[1.0, 0.1], [0.0, 1.0]]
//! x0 = 0.1             # scalar, vector, or "random" for x0 ~ N(0, sigma0)
//!
//! [channels]
//! alpha_e = 0.8
//! alpha_e_before_activation = 1.0
//!
//! [attacker]
//! kind = "selective"   # passive | selective | block-all
//! activation = { step = 900 }   # or { receipt = 630 } or { geometric = 5e-6 }
//!
//! [detection]
//! preset = "reference" # reference | exact | misspecified, used when no detectors are listed
//!
//! [[detection.detectors]]
//! name = "exact"
//! side = "receiver"    # receiver | sensor
//! thresholds = [0.9875]
//! # assumed_alpha_e = 0.98   (omit for the exact post-change model)
//! ```

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, AttackKind, ChannelParams};
use crate::process::SystemParams;
use crate::qcd::GeometricModel;

pub const DEFAULT_SEED: u64 = 2024;
pub const DEFAULT_RUNS: u64 = 500;
pub const DEFAULT_HORIZON: u64 = 2000;
pub const DEFAULT_ACTIVATION_STEP: u64 = 900;
pub const DEFAULT_RHO_I: f64 = 5e-6;
pub const DEFAULT_DELAY_PENALTY: f64 = 0.001;
pub const DEFAULT_WINDOW: usize = 150;
pub const DEFAULT_EXACT_THRESHOLD: f64 = 0.9875;
pub const DEFAULT_MISSPEC_THRESHOLD: f64 = 0.9865;
pub const DEFAULT_ASSUMED_ALPHA_E: f64 = 0.98;

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(DVector<f64>),
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorSide {
    /// Ages of innovation at legitimate receipts.
    Receiver,
    /// Ages of acknowledgment at the sensor.
    Sensor,
}

impl DetectorSide {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorSide::Receiver => "receiver",
            DetectorSide::Sensor => "sensor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub name: String,
    pub side: DetectorSide,
    /// Eavesdropper quality assumed by the post-change model; `None` uses the true `α_e`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assumed_alpha_e: Option<f64>,
    pub thresholds: Vec<f64>,
}

impl DetectorSpec {
    pub fn model(&self, scenario: &Scenario) -> Result<GeometricModel> {
        let alpha_e = self.assumed_alpha_e.unwrap_or(scenario.channels.alpha_e);
        GeometricModel::from_channels(&scenario.channels, alpha_e, scenario.rho_i)
            .map_err(|e| prefix_field(e, &format!("detection.detectors.{}", self.name)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Exact receiver detector, mis-specified receiver detector and mis-specified sensor detector.
    Reference,
    Exact,
    Misspecified,
}

impl Preset {
    pub fn detectors(self) -> Vec<DetectorSpec> {
        let exact = DetectorSpec {
            name: "exact".into(),
            side: DetectorSide::Receiver,
            assumed_alpha_e: None,
            thresholds: vec![DEFAULT_EXACT_THRESHOLD],
        };
        let misspec = DetectorSpec {
            name: "misspec".into(),
            side: DetectorSide::Receiver,
            assumed_alpha_e: Some(DEFAULT_ASSUMED_ALPHA_E),
            thresholds: vec![DEFAULT_MISSPEC_THRESHOLD],
        };
        let sensor = DetectorSpec {
            name: "sensor".into(),
            side: DetectorSide::Sensor,
            assumed_alpha_e: Some(DEFAULT_ASSUMED_ALPHA_E),
            thresholds: vec![DEFAULT_MISSPEC_THRESHOLD],
        };
        match self {
            Preset::Reference => vec![exact, misspec, sensor],
            Preset::Exact => vec![exact],
            Preset::Misspecified => vec![misspec, sensor],
        }
    }
}

/// Forced channel outcomes at one step. Draws are still consumed so the
/// random streams stay aligned with an unscripted run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcedStep {
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_e: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_a: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub force: Vec<ForcedStep>,
    /// Process and measurement noise are zero at every step after this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_off_after: Option<u64>,
}

impl Script {
    pub fn forced(&self, step: u64) -> Option<&ForcedStep> {
        self.force.iter().find(|f| f.step == step)
    }

    pub fn noise_on(&self, step: u64) -> bool {
        self.noise_off_after.is_none_or(|last| step <= last)
    }
}

/// A validated simulation setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub runs: u64,
    pub horizon: u64,
    pub system: SystemParams,
    pub x0: InitialState,
    /// Channel qualities once the change has happened.
    pub channels: ChannelParams,
    /// Eavesdropper quality before the change.
    pub alpha_e_before_activation: f64,
    pub attacker: AttackKind,
    pub activation: Activation,
    pub rho_i: f64,
    pub delay_penalty: f64,
    pub moving_average_window: usize,
    pub detectors: Vec<DetectorSpec>,
    pub script: Script,
}

impl Default for Scenario {
    fn default() -> Self {
        parse_scenario_str("").expect("defaults are valid")
    }
}

impl Scenario {
    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn detector(&self, name: &str) -> Option<&DetectorSpec> {
        self.detectors.iter().find(|d| d.name == name)
    }

    /// Checks every cross-field constraint. Called by the parser; call again
    /// after editing fields in code.
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.runs < 1 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        ChannelParams::new(self.channels.alpha, self.channels.alpha_a, self.channels.alpha_e)
            .map_err(|e| prefix_field(e, "channels"))?;
        if !(0.0..=1.0).contains(&self.alpha_e_before_activation) {
            return Err(Error::config(
                "channels.alpha_e_before_activation",
                format!("{} is outside [0, 1]", self.alpha_e_before_activation),
            ));
        }
        self.activation
            .validate()
            .map_err(|e| prefix_field(e, "attacker.activation"))?;
        if !(self.rho_i > 0.0 && self.rho_i < 1.0) {
            return Err(Error::config("detection.rho_i", format!("{} must lie in (0, 1)", self.rho_i)));
        }
        if !(self.delay_penalty > 0.0 && self.delay_penalty.is_finite()) {
            return Err(Error::config("detection.delay_penalty", "must be positive"));
        }
        if self.moving_average_window < 1 {
            return Err(Error::config("detection.moving_average_window", "must be at least 1"));
        }
        if let InitialState::Fixed(x0) = &self.x0 {
            if x0.len() != self.system.state_dim() {
                return Err(Error::config(
                    "system.x0",
                    format!("length {} does not match state dimension {}", x0.len(), self.system.state_dim()),
                ));
            }
        }
        let mut names = BTreeSet::new();
        for d in &self.detectors {
            let field = format!("detection.detectors.{}", d.name);
            if d.name.is_empty() || !d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::config(
                    "detection.detectors.name",
                    format!("{:?} must be nonempty and use only letters, digits, '-' and '_'", d.name),
                ));
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::config(field, "duplicate detector name"));
            }
            if d.thresholds.is_empty() {
                return Err(Error::config(format!("{field}.thresholds"), "must list at least one threshold"));
            }
            for &h in &d.thresholds {
                if !(h > 0.0 && h < 1.0) {
                    return Err(Error::config(format!("{field}.thresholds"), format!("{h} must lie in (0, 1)")));
                }
            }
            if let Some(ae) = d.assumed_alpha_e {
                if !(ae > 0.0 && ae <= 1.0) {
                    return Err(Error::config(format!("{field}.assumed_alpha_e"), format!("{ae} must lie in (0, 1]")));
                }
            }
            self.channels
                .check_detectable()
                .map_err(|e| prefix_field(e, "channels"))?;
            d.model(self)?;
        }
        Ok(())
    }

    /// Serializes to TOML such that parsing the result yields an equal scenario.
    pub fn to_toml(&self) -> String {
        let raw = RawScenario::from_scenario(self);
        toml::to_string(&raw).expect("scenario serializes")
    }
}

fn prefix_field(err: Error, prefix: &str) -> Error {
    match err {
        Error::Config { field, reason } => Error::Config {
            field: format!("{prefix}.{field}"),
            reason,
        },
        e => e,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, field: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixSpec::Rows(rows) => {
                let nrows = rows.len();
                let ncols = rows.first().map_or(0, Vec::len);
                if nrows == 0 || ncols == 0 {
                    return Err(Error::config(field, "matrix must be nonempty"));
                }
                if rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::config(field, "rows must have equal length"));
                }
                Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
            }
        }
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        if m.nrows() == 1 && m.ncols() == 1 {
            MatrixSpec::Scalar(m[(0, 0)])
        } else {
            MatrixSpec::Rows((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum InitialSpec {
    Scalar(f64),
    Vector(Vec<f64>),
    Keyword(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma0: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x0: Option<InitialSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha_e_before_activation: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttacker {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<AttackKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho_i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delay_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    moving_average_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detectors: Option<Vec<DetectorSpec>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    runs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    horizon: Option<u64>,
    #[serde(default)]
    system: RawSystem,
    #[serde(default)]
    channels: RawChannels,
    #[serde(default)]
    attacker: RawAttacker,
    #[serde(default)]
    detection: RawDetection,
    #[serde(default)]
    script: Script,
}

impl RawScenario {
    fn into_scenario(self) -> Result<Scenario> {
        let mat = |spec: Option<MatrixSpec>, field: &str, default: f64| -> Result<DMatrix<f64>> {
            spec.map_or(Ok(DMatrix::from_element(1, 1, default)), |s| s.to_matrix(field))
        };
        let a = mat(self.system.a, "system.a", 1.001)?;
        let c = mat(self.system.c, "system.c", 1.0)?;
        let q = mat(self.system.q, "system.q", 0.001)?;
        let r = mat(self.system.r, "system.r", 0.1)?;
        let sigma0 = mat(self.system.sigma0, "system.sigma0", 0.01)?;
        let system = SystemParams::new(a, c, q, r, sigma0).map_err(|e| prefix_field(e, "system"))?;

        let x0 = match self.system.x0 {
            None => InitialState::Fixed(DVector::from_element(system.state_dim(), 0.1)),
            Some(InitialSpec::Scalar(v)) => InitialState::Fixed(DVector::from_element(system.state_dim(), v)),
            Some(InitialSpec::Vector(v)) => InitialState::Fixed(DVector::from_vec(v)),
            Some(InitialSpec::Keyword(s)) if s == "random" => InitialState::Random,
            Some(InitialSpec::Keyword(s)) => {
                return Err(Error::config("system.x0", format!("{s:?} is not a number, a vector or \"random\"")))
            }
        };
        if let InitialState::Fixed(v) = &x0 {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config("system.x0", "entries must be finite"));
            }
        }

        let ch = self.channels;
        let channels = ChannelParams {
            alpha: ch.alpha.unwrap_or(0.7),
            alpha_a: ch.alpha_a.unwrap_or(0.9),
            alpha_e: ch.alpha_e.unwrap_or(0.8),
        };
        let det = self.detection;
        let detectors = match (det.detectors, det.preset) {
            (Some(_), Some(_)) => {
                return Err(Error::config("detection", "give either preset or detectors, not both"))
            }
            (Some(list), None) => list,
            (None, preset) => preset.unwrap_or(Preset::Reference).detectors(),
        };
        let scenario = Scenario {
            seed: self.seed.unwrap_or(DEFAULT_SEED),
            runs: self.runs.unwrap_or(DEFAULT_RUNS),
            horizon: self.horizon.unwrap_or(DEFAULT_HORIZON),
            system,
            x0,
            channels,
            alpha_e_before_activation: ch.alpha_e_before_activation.unwrap_or(1.0),
            attacker: self.attacker.kind.unwrap_or(AttackKind::Selective),
            activation: self
                .attacker
                .activation
                .unwrap_or(Activation::Step(DEFAULT_ACTIVATION_STEP)),
            rho_i: det.rho_i.unwrap_or(DEFAULT_RHO_I),
            delay_penalty: det.delay_penalty.unwrap_or(DEFAULT_DELAY_PENALTY),
            moving_average_window: det.moving_average_window.unwrap_or(DEFAULT_WINDOW),
            detectors,
            script: self.script,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    fn from_scenario(s: &Scenario) -> Self {
        RawScenario {
            seed: Some(s.seed),
            runs: Some(s.runs),
            horizon: Some(s.horizon),
            system: RawSystem {
                a: Some(MatrixSpec::from_matrix(s.system.a())),
                c: Some(MatrixSpec::from_matrix(s.system.c())),
                q: Some(MatrixSpec::from_matrix(s.system.q())),
                r: Some(MatrixSpec::from_matrix(s.system.r())),
                sigma0: Some(MatrixSpec::from_matrix(s.system.sigma0())),
                x0: Some(match &s.x0 {
                    InitialState::Random => InitialSpec::Keyword("random".into()),
                    InitialState::Fixed(v) => InitialSpec::Vector(v.iter().copied().collect()),
                }),
            },
            channels: RawChannels {
                alpha: Some(s.channels.alpha),
                alpha_a: Some(s.channels.alpha_a),
                alpha_e: Some(s.channels.alpha_e),
                alpha_e_before_activation: Some(s.alpha_e_before_activation),
            },
            attacker: RawAttacker {
                kind: Some(s.attacker),
                activation: Some(s.activation),
            },
            detection: RawDetection {
                rho_i: Some(s.rho_i),
                delay_penalty: Some(s.delay_penalty),
                moving_average_window: Some(s.moving_average_window),
                preset: None,
                detectors: Some(s.detectors.clone()),
            },
            script: s.script.clone(),
        }
    }
}

fn toml_error(err: toml::de::Error) -> Error {
    let message = err.message().to_string();
    // serde names the offending key in the message; keep the whole text as the reason
    let field = message
        .split('`')
        .nth(1)
        .filter(|_| message.contains("unknown field") || message.contains("missing field"))
        .unwrap_or("scenario")
        .to_string();
    Error::Config {
        field,
        reason: err.to_string().trim().to_string(),
    }
}

/// Parses and validates a scenario from TOML text.
pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let raw: RawScenario = toml::from_str(text).map_err(toml_error)?;
    raw.into_scenario()
}

pub fn parse_scenario(path: &std::path::Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario_str(&text)
}
