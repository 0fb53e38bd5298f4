//! Experiment configuration: JSON on disk, degrees and nanoseconds at this
//! boundary, SI radians/seconds once resolved.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use num_complex::Complex64;
use tfib_core::channel::{FrequencyGrid, PropagationModel, Wave};
use tfib_core::estimator::{EstimatorConfig, ExclusionWindow};
use tfib_core::geometry::{
    build_sample_grid, nyquist_min_samples, RadiusMode, SampleGrid, TorusGeometry, SPEED_OF_LIGHT,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub sampling: SamplingConfig,
    pub scene: SceneConfig,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub output: OutputConfig,
    /// Free text carried into every manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(rename = "R")]
    pub major_radius: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(rename = "P")]
    pub samples: usize,
    #[serde(rename = "M")]
    pub modes: usize,
    #[serde(rename = "K")]
    pub frequencies: usize,
    pub f_min_ghz: f64,
    pub f_max_ghz: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Spherical,
    Plane,
}

impl From<Model> for PropagationModel {
    fn from(m: Model) -> Self {
        match m {
            Model::Spherical => PropagationModel::Spherical,
            Model::Plane => PropagationModel::Plane,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WaveConfig {
    pub phi_deg: f64,
    pub theta_deg: f64,
    pub tau_ns: f64,
    #[serde(default = "one")]
    pub amp_mag: f64,
    #[serde(default)]
    pub amp_phase_deg: f64,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub waves: Vec<WaveConfig>,
    #[serde(default = "spherical")]
    pub model: Model,
    #[serde(default = "two")]
    pub gamma: f64,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn spherical() -> Model {
    Model::Spherical
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    pub waves: usize,
    pub weights: Option<Vec<f64>>,
    pub pad_angle: usize,
    pub pad_time: usize,
    pub exclusion_angle_bins: usize,
    pub exclusion_time_bins: usize,
    pub dispersion_guard: bool,
    pub magnitude_cap_db: f64,
    pub subtraction_model: Model,
    pub refine: bool,
    pub allow_mode_aliasing: bool,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        EstimatorSettings {
            waves: d.waves,
            weights: None,
            pad_angle: d.pad_angle,
            pad_time: d.pad_time,
            exclusion_angle_bins: d.exclusion.angle_bins,
            exclusion_time_bins: d.exclusion.time_bins,
            dispersion_guard: d.dispersion_guard,
            magnitude_cap_db: d.magnitude_cap_db,
            subtraction_model: Model::Spherical,
            refine: d.refine,
            allow_mode_aliasing: d.allow_mode_aliasing,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Pgm,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: Option<String>,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: None,
            formats: vec![Format::Csv, Format::Pgm],
        }
    }
}

/// A configuration problem located in the source text.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub file: String,
    pub line: usize,
    pub column: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}:{}:{}: {}", self.file, self.line, self.column, self.message)
        } else {
            write!(
                f,
                "{}:{}:{}: {}: {}",
                self.file, self.line, self.column, self.field, self.message
            )
        }
    }
}

impl std::error::Error for ConfigError {}

/// Line and column (1-based) of the key at `path`, found by walking the
/// keys in order through the text; the last key is skipped `nth` times
/// (array elements). Falls back to the deepest key found.
fn locate(text: &str, path: &[&str], nth: usize) -> (usize, usize) {
    let mut from = 0;
    let mut at = 0;
    for (depth, key) in path.iter().enumerate() {
        let needle = format!("\"{key}\"");
        let repeats = if depth + 1 == path.len() { nth + 1 } else { 1 };
        for _ in 0..repeats {
            match text[from..].find(&needle) {
                Some(i) => {
                    at = from + i;
                    from = at + needle.len();
                }
                None => break,
            }
        }
    }
    let line = text[..at].matches('\n').count() + 1;
    let column = at - text[..at].rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

struct Checker<'a> {
    file: &'a str,
    text: &'a str,
}

impl Checker<'_> {
    fn fail(&self, path: &[&str], message: impl Into<String>) -> ConfigError {
        let (line, column) = locate(self.text, path, 0);
        ConfigError {
            file: self.file.to_string(),
            line,
            column,
            field: path.join("."),
            message: message.into(),
        }
    }

    fn fail_wave(&self, index: usize, key: &str, message: impl Into<String>) -> ConfigError {
        let (line, column) = locate(self.text, &["scene", "waves", key], index);
        ConfigError {
            file: self.file.to_string(),
            line,
            column,
            field: format!("scene.waves[{index}].{key}"),
            message: message.into(),
        }
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str, file: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError {
        file: file.to_string(),
        line: e.line(),
        column: e.column(),
        field: String::new(),
        message: e.to_string(),
    })?;
    validate(&cfg, &Checker { file, text })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    Ok(parse_config(&text, &path.display().to_string())?)
}

fn validate(cfg: &ExperimentConfig, c: &Checker) -> Result<(), ConfigError> {
    let g = &cfg.geometry;
    let geom = TorusGeometry::new(g.major_radius, g.rho).map_err(|e| c.fail(&["geometry", "rho"], e.to_string()))?;

    let s = &cfg.sampling;
    if s.samples < 3 {
        let outer = nyquist_min_samples(&geom, s.f_max_ghz.max(0.0) * 1e9, RadiusMode::Outermost).ok();
        let hint = outer.map_or(String::new(), |n| {
            format!("; the Nyquist bound for this torus at f_max is P >= {n}")
        });
        return Err(c.fail(
            &["sampling", "P"],
            format!("P = {} cannot sample a ring (need at least 3 samples){hint}", s.samples),
        ));
    }
    if s.modes < 2 || !s.modes.is_multiple_of(2) {
        return Err(c.fail(
            &["sampling", "M"],
            format!("M = {} must be a positive even mode count", s.modes),
        ));
    }
    if s.modes > s.samples && !cfg.estimator.allow_mode_aliasing {
        return Err(c.fail(
            &["sampling", "M"],
            format!(
                "M = {} exceeds P = {} (modes alias); set estimator.allow_mode_aliasing to accept",
                s.modes, s.samples
            ),
        ));
    }
    if !(s.f_min_ghz > 0.0) || !s.f_min_ghz.is_finite() {
        return Err(c.fail(&["sampling", "f_min_ghz"], "must be positive"));
    }
    FrequencyGrid::new(s.f_min_ghz * 1e9, s.f_max_ghz * 1e9, s.frequencies)
        .map_err(|e| c.fail(&["sampling", "K"], e.to_string()))?;

    let sc = &cfg.scene;
    if sc.waves.is_empty() {
        return Err(c.fail(&["scene", "waves"], "at least one wave is required"));
    }
    if !(sc.gamma >= 0.0) || !sc.gamma.is_finite() {
        return Err(c.fail(&["scene", "gamma"], "path-loss exponent must be finite and >= 0"));
    }
    if let Some(snr) = sc.snr_db {
        if !snr.is_finite() {
            return Err(c.fail(&["scene", "snr_db"], "must be finite"));
        }
    }
    let reach = geom.outer_radius() / SPEED_OF_LIGHT * 1e9;
    for (i, w) in sc.waves.iter().enumerate() {
        let finite = [w.phi_deg, w.theta_deg, w.tau_ns, w.amp_mag, w.amp_phase_deg]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(c.fail_wave(i, "phi_deg", "wave fields must be finite"));
        }
        if !(0.0..=180.0).contains(&w.theta_deg) {
            return Err(c.fail_wave(i, "theta_deg", "elevation must lie in [0, 180] degrees"));
        }
        if w.tau_ns <= reach {
            return Err(c.fail_wave(
                i,
                "tau_ns",
                format!("source must lie outside the torus: tau > (R + rho)/c = {reach:.4} ns"),
            ));
        }
        if w.amp_mag < 0.0 {
            return Err(c.fail_wave(i, "amp_mag", "magnitude must be >= 0"));
        }
    }

    let e = &cfg.estimator;
    e.to_core(s.modes)
        .validate()
        .map_err(|err| c.fail(&["estimator"], err.to_string()))?;
    if let Some(w) = &e.weights {
        if w.len() != s.samples {
            return Err(c.fail(
                &["estimator", "weights"],
                format!("{} weights for {} horizontal rings", w.len(), s.samples),
            ));
        }
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(c.fail(&["estimator", "weights"], "weights must be >= 0 and sum to 1"));
        }
    }
    if cfg.output.formats.is_empty() {
        return Err(c.fail(&["output", "formats"], "at least one format is required"));
    }
    Ok(())
}

impl EstimatorSettings {
    pub fn to_core(&self, modes: usize) -> EstimatorConfig {
        EstimatorConfig {
            modes,
            waves: self.waves,
            weights: self.weights.clone(),
            pad_angle: self.pad_angle,
            pad_time: self.pad_time,
            exclusion: ExclusionWindow {
                angle_bins: self.exclusion_angle_bins,
                time_bins: self.exclusion_time_bins,
            },
            dispersion_guard: self.dispersion_guard,
            magnitude_cap_db: self.magnitude_cap_db,
            subtraction_model: self.subtraction_model.into(),
            gamma: 2.0,
            refine: self.refine,
            allow_mode_aliasing: self.allow_mode_aliasing,
        }
    }
}

impl ExperimentConfig {
    pub fn geometry(&self) -> TorusGeometry {
        TorusGeometry::new(self.geometry.major_radius, self.geometry.rho).expect("validated")
    }

    pub fn grid(&self) -> Arc<SampleGrid> {
        Arc::new(build_sample_grid(self.geometry(), self.sampling.samples).expect("validated"))
    }

    pub fn freq(&self) -> FrequencyGrid {
        let s = &self.sampling;
        FrequencyGrid::new(s.f_min_ghz * 1e9, s.f_max_ghz * 1e9, s.frequencies).expect("validated")
    }

    pub fn waves(&self) -> Vec<Wave> {
        self.scene
            .waves
            .iter()
            .map(|w| {
                Wave::new(
                    w.phi_deg.to_radians(),
                    w.theta_deg.to_radians(),
                    w.tau_ns * 1e-9,
                    Complex64::from_polar(w.amp_mag, w.amp_phase_deg.to_radians()),
                )
            })
            .collect()
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        let mut e = self.estimator.to_core(self.sampling.modes);
        e.gamma = self.scene.gamma;
        e
    }
}
