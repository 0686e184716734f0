//! Scenario parameters.
//!
//! A scenario is described by a flat `key = value` text file. Every key is
//! optional; omitted keys take the default values listed on
//! [`ScenarioSpec::default`]. Derived quantities (uplink sample count,
//! per-AP power budget, noise power in watts) are never read from the file,
//! they are always recomputed from the source keys so the coherence-block
//! split cannot be violated.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, DeploymentStrategy};

/// Errors raised while reading or validating a scenario.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid scenario: {0}")]
    Invalid(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Converts a power level in dBm to watts.
pub fn noise_power_from_dbm(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Physical constants of one coherence block and the radio front ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Samples per coherence block.
    pub delta_c: usize,
    /// Pilot samples.
    pub delta_p: usize,
    /// Downlink energy-transfer samples.
    pub delta_d: usize,
    /// Uplink information samples, always `delta_c - delta_p - delta_d`.
    pub delta_u: usize,
    /// Pilot transmit power (W).
    pub rho_p: f64,
    /// Per-AP downlink power limit (W).
    pub rho_d: f64,
    /// Receiver noise power (W).
    pub sigma2: f64,
    /// Carrier frequency (Hz).
    pub f_c: f64,
    /// LOS shadow-fading standard deviation (dB).
    pub sigma_sf_los: f64,
    /// NLOS shadow-fading standard deviation (dB). Kept for completeness, no
    /// blocking model consumes it.
    pub sigma_sf_nlos: f64,
}

impl SystemParams {
    /// Builds the parameter set, deriving `delta_u` from the block split.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        delta_c: usize,
        delta_p: usize,
        delta_d: usize,
        rho_p: f64,
        rho_d: f64,
        sigma2: f64,
        f_c: f64,
        sigma_sf_los: f64,
        sigma_sf_nlos: f64,
    ) -> Result<Self, ConfigError> {
        if delta_p + delta_d >= delta_c {
            return Err(ConfigError::Invalid(format!(
                "delta_p + delta_d ({}) must leave at least one uplink sample in delta_c ({delta_c})",
                delta_p + delta_d
            )));
        }
        let params = SystemParams {
            delta_c,
            delta_p,
            delta_d,
            delta_u: delta_c - delta_p - delta_d,
            rho_p,
            rho_d,
            sigma2,
            f_c,
            sigma_sf_los,
            sigma_sf_nlos,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.delta_p + self.delta_d + self.delta_u != self.delta_c {
            return invalid("delta_p + delta_d + delta_u != delta_c".into());
        }
        for (name, v) in [
            ("delta_p", self.delta_p),
            ("delta_d", self.delta_d),
            ("delta_u", self.delta_u),
        ] {
            if v < 1 {
                return invalid(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("rho_p", self.rho_p),
            ("rho_d", self.rho_d),
            ("sigma2", self.sigma2),
            ("f_c", self.f_c),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("{name} must be a positive finite number, got {v}"));
            }
        }
        for (name, v) in [
            ("sigma_sf_los", self.sigma_sf_los),
            ("sigma_sf_nlos", self.sigma_sf_nlos),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} must be nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    /// Carrier wavelength (m).
    pub fn wavelength(&self) -> f64 {
        299_792_458.0 / self.f_c
    }
}

/// Constants of the saturating rectifier model `E = delta_d A I / (B I + C)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifierParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for RectifierParams {
    fn default() -> Self {
        RectifierParams { a: 1.0, b: 1.0, c: 1.0 }
    }
}

impl RectifierParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(ConfigError::Invalid("rect_a must be > 0".into()));
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(ConfigError::Invalid("rect_b must be >= 0".into()));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(ConfigError::Invalid("rect_c must be > 0".into()));
        }
        Ok(())
    }
}

/// Energy symbol structure of the downlink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransmissionMode {
    /// All APs send the same energy symbol per user; amplitudes add.
    Coherent,
    /// Independent symbols per AP; powers add.
    NonCoherent,
}

/// Rectifier model used to turn input power into harvested energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EhModel {
    Linear,
    NonLinear,
}

impl FromStr for TransmissionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coherent" => Ok(Self::Coherent),
            "non-coherent" => Ok(Self::NonCoherent),
            _ => Err(format!("unknown mode `{s}` (expected coherent|non-coherent)")),
        }
    }
}

impl fmt::Display for TransmissionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Coherent => "coherent",
            Self::NonCoherent => "non-coherent",
        })
    }
}

impl FromStr for EhModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "non-linear" => Ok(Self::NonLinear),
            _ => Err(format!("unknown eh_model `{s}` (expected linear|non-linear)")),
        }
    }
}

impl fmt::Display for EhModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::NonLinear => "non-linear",
        })
    }
}

/// Complete description of one experiment.
///
/// The raw file-level quantities (`total_power_w`, `noise_dbm`,
/// `carrier_ghz`) are kept alongside the derived [`SystemParams`] so that a
/// spec serializes back to exactly the text it was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub system: SystemParams,
    pub rectifier: RectifierParams,
    pub total_power_w: f64,
    pub noise_dbm: f64,
    pub carrier_ghz: f64,
    /// Number of UAV access points; a perfect square.
    pub ap_count: usize,
    /// Antennas per AP.
    pub antennas: usize,
    pub user_count: usize,
    pub ris_count: usize,
    /// Reflecting elements per RIS.
    pub ris_elements: usize,
    pub ris_alpha: f64,
    pub coverage_m: f64,
    pub ap_height_m: f64,
    pub ris_height_m: f64,
    pub user_height_m: f64,
    pub mode: TransmissionMode,
    pub eh_model: EhModel,
    pub strategy: DeploymentStrategy,
    pub setups: usize,
    pub seed: u64,
    pub mc_realizations: usize,
}

impl Default for ScenarioSpec {
    /// Desk-scale scenario with the reference physical constants: 200-sample
    /// coherence blocks split 5/25/170, 0.1 uW pilots, 10 W network budget,
    /// -96 dBm noise, 3.4 GHz carrier, 3/4 dB shadowing.
    fn default() -> Self {
        let mut spec = ScenarioSpec {
            system: SystemParams {
                delta_c: 200,
                delta_p: 5,
                delta_d: 25,
                delta_u: 170,
                rho_p: 1e-7,
                rho_d: 0.0,
                sigma2: 0.0,
                f_c: 0.0,
                sigma_sf_los: 3.0,
                sigma_sf_nlos: 4.0,
            },
            rectifier: RectifierParams::default(),
            total_power_w: 10.0,
            noise_dbm: -96.0,
            carrier_ghz: 3.4,
            ap_count: 16,
            antennas: 4,
            user_count: 8,
            ris_count: 4,
            ris_elements: 32,
            ris_alpha: 1.0,
            coverage_m: 100.0,
            ap_height_m: 25.0,
            ris_height_m: 10.0,
            user_height_m: 1.0,
            mode: TransmissionMode::Coherent,
            eh_model: EhModel::NonLinear,
            strategy: DeploymentStrategy::Hybrid,
            setups: 50,
            seed: 1,
            mc_realizations: 500,
        };
        spec.refresh_derived();
        spec
    }
}

const KEYS: [&str; 28] = [
    "delta_c",
    "delta_p",
    "delta_d",
    "rho_p_w",
    "total_power_w",
    "noise_dbm",
    "carrier_ghz",
    "shadow_los_db",
    "shadow_nlos_db",
    "ap_count",
    "antennas",
    "user_count",
    "ris_count",
    "ris_elements",
    "ris_alpha",
    "coverage_m",
    "ap_height_m",
    "ris_height_m",
    "user_height_m",
    "mode",
    "eh_model",
    "strategy",
    "setups",
    "seed",
    "mc_realizations",
    "rect_a",
    "rect_b",
    "rect_c",
];

impl ScenarioSpec {
    /// Recomputes every derived system quantity from the source fields.
    fn refresh_derived(&mut self) {
        let s = &mut self.system;
        s.delta_u = s.delta_c.saturating_sub(s.delta_p + s.delta_d);
        s.rho_d = if self.ap_count > 0 {
            self.total_power_w / self.ap_count as f64
        } else {
            f64::NAN
        };
        s.sigma2 = noise_power_from_dbm(self.noise_dbm);
        s.f_c = self.carrier_ghz * 1e9;
    }

    /// Checks every scenario invariant, including that the requested RIS
    /// deployment fits the AP grid.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let s = &self.system;
        if s.delta_p + s.delta_d >= s.delta_c {
            return invalid("delta_p + delta_d must be smaller than delta_c");
        }
        if !(self.total_power_w.is_finite() && self.total_power_w > 0.0) {
            return invalid("total_power_w must be > 0");
        }
        if !self.noise_dbm.is_finite() {
            return invalid("noise_dbm must be finite");
        }
        if !(self.carrier_ghz.is_finite() && self.carrier_ghz > 0.0) {
            return invalid("carrier_ghz must be > 0");
        }
        if self.ap_count == 0 || geometry::grid_side(self.ap_count).is_none() {
            return invalid("ap_count must be a nonzero perfect square");
        }
        s.validate()?;
        self.rectifier.validate()?;
        if self.antennas < 1 {
            return invalid("antennas must be at least 1");
        }
        if self.user_count < 1 {
            return invalid("user_count must be at least 1");
        }
        if !(self.ris_alpha > 0.0 && self.ris_alpha <= 1.0) {
            return invalid("alpha out of (0,1]");
        }
        if !(self.coverage_m.is_finite() && self.coverage_m > 0.0) {
            return invalid("coverage_m must be > 0");
        }
        for (name, h) in [
            ("ap_height_m", self.ap_height_m),
            ("ris_height_m", self.ris_height_m),
            ("user_height_m", self.user_height_m),
        ] {
            if !(h.is_finite() && h >= 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be >= 0")));
            }
        }
        if self.setups < 1 {
            return invalid("setups must be at least 1");
        }
        if self.mc_realizations < 100 {
            return invalid("mc_realizations must be at least 100");
        }
        if self.ris_count > 0 {
            let slots = geometry::central_slots(self.ap_count);
            let central = match self.strategy {
                DeploymentStrategy::Edge => 0,
                DeploymentStrategy::Central => self.ris_count,
                DeploymentStrategy::Hybrid => self.ris_count / 2,
            };
            if central > slots {
                return Err(ConfigError::Invalid(format!(
                    "{central} central RIS panels requested but the AP grid only has {slots} slots"
                )));
            }
        }
        Ok(())
    }

    /// Re-derives dependent quantities and validates. Call after mutating
    /// any source field.
    pub fn finalize(mut self) -> Result<Self, ConfigError> {
        self.refresh_derived();
        self.validate()?;
        Ok(self)
    }

    /// Parses scenario text; see the module docs for the format.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut spec = ScenarioSpec::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| ConfigError::Parse { line: line_no, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            if !KEYS.contains(&key) {
                return Err(perr(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(perr(format!("duplicate key `{key}`")));
            }
            spec.set(key, value).map_err(perr)?;
        }
        spec.finalize()
    }

    /// Reads and validates a scenario file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value `{value}` for `{key}`"))
        }
        match key {
            "delta_c" => self.system.delta_c = num(key, value)?,
            "delta_p" => self.system.delta_p = num(key, value)?,
            "delta_d" => self.system.delta_d = num(key, value)?,
            "rho_p_w" => self.system.rho_p = num(key, value)?,
            "total_power_w" => self.total_power_w = num(key, value)?,
            "noise_dbm" => self.noise_dbm = num(key, value)?,
            "carrier_ghz" => self.carrier_ghz = num(key, value)?,
            "shadow_los_db" => self.system.sigma_sf_los = num(key, value)?,
            "shadow_nlos_db" => self.system.sigma_sf_nlos = num(key, value)?,
            "ap_count" => self.ap_count = num(key, value)?,
            "antennas" => self.antennas = num(key, value)?,
            "user_count" => self.user_count = num(key, value)?,
            "ris_count" => self.ris_count = num(key, value)?,
            "ris_elements" => self.ris_elements = num(key, value)?,
            "ris_alpha" => self.ris_alpha = num(key, value)?,
            "coverage_m" => self.coverage_m = num(key, value)?,
            "ap_height_m" => self.ap_height_m = num(key, value)?,
            "ris_height_m" => self.ris_height_m = num(key, value)?,
            "user_height_m" => self.user_height_m = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "eh_model" => self.eh_model = value.parse()?,
            "strategy" => self.strategy = value.parse()?,
            "setups" => self.setups = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mc_realizations" => self.mc_realizations = num(key, value)?,
            "rect_a" => self.rectifier.a = num(key, value)?,
            "rect_b" => self.rectifier.b = num(key, value)?,
            "rect_c" => self.rectifier.c = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Writes every key in the scenario text format. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_kv_string(&self) -> String {
        let s = &self.system;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("delta_c", s.delta_c.to_string());
        kv("delta_p", s.delta_p.to_string());
        kv("delta_d", s.delta_d.to_string());
        kv("rho_p_w", format!("{:?}", s.rho_p));
        kv("total_power_w", format!("{:?}", self.total_power_w));
        kv("noise_dbm", format!("{:?}", self.noise_dbm));
        kv("carrier_ghz", format!("{:?}", self.carrier_ghz));
        kv("shadow_los_db", format!("{:?}", s.sigma_sf_los));
        kv("shadow_nlos_db", format!("{:?}", s.sigma_sf_nlos));
        kv("ap_count", self.ap_count.to_string());
        kv("antennas", self.antennas.to_string());
        kv("user_count", self.user_count.to_string());
        kv("ris_count", self.ris_count.to_string());
        kv("ris_elements", self.ris_elements.to_string());
        kv("ris_alpha", format!("{:?}", self.ris_alpha));
        kv("coverage_m", format!("{:?}", self.coverage_m));
        kv("ap_height_m", format!("{:?}", self.ap_height_m));
        kv("ris_height_m", format!("{:?}", self.ris_height_m));
        kv("user_height_m", format!("{:?}", self.user_height_m));
        kv("mode", self.mode.to_string());
        kv("eh_model", self.eh_model.to_string());
        kv("strategy", self.strategy.to_string());
        kv("setups", self.setups.to_string());
        kv("seed", self.seed.to_string());
        kv("mc_realizations", self.mc_realizations.to_string());
        kv("rect_a", format!("{:?}", self.rectifier.a));
        kv("rect_b", format!("{:?}", self.rectifier.b));
        kv("rect_c", format!("{:?}", self.rectifier.c));
        out
    }
}
