use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::json;

use tfib_core::channel::{
    read_cache_header, synthesize_channel_with, ChannelTensor, LayoutChoice, NoiseSpec, SynthesisOptions, Wave,
};
use tfib_core::estimator::{
    array_gain_cut, azimuth_stage, elevation_spectrum, estimate_multipath_detailed, extract_wave, CutAxis, Extraction,
};
use tfib_core::geometry::select_phi_ring;
use tfib_core::Error as CoreError;

use crate::config::{ExperimentConfig, Format};
use crate::output::{write_manifest, Manifest, OutputDir};

pub const CACHE_NAME: &str = "tensor.tfc";

fn manifest_for(command: &str, arguments: serde_json::Value, cfg: &ExperimentConfig) -> anyhow::Result<Manifest> {
    Ok(Manifest::new(
        command,
        arguments,
        serde_json::to_value(cfg)?,
        cfg.notes.clone(),
    ))
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<PathBuf> {
    match (out, &cfg.output.directory) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(d)) => Ok(PathBuf::from(d)),
        (None, None) => bail!("no output directory: pass --out or set output.directory"),
    }
}

fn synthesis_options(cfg: &ExperimentConfig) -> SynthesisOptions {
    SynthesisOptions {
        layout: LayoutChoice::Auto,
        noise: cfg.scene.snr_db.map(|snr_db| NoiseSpec {
            snr_db,
            seed: cfg.scene.seed,
        }),
    }
}

fn synthesize(cfg: &ExperimentConfig, waves: &[Wave]) -> anyhow::Result<ChannelTensor> {
    Ok(synthesize_channel_with(
        waves,
        cfg.grid(),
        cfg.freq(),
        cfg.scene.model.into(),
        cfg.scene.gamma,
        &synthesis_options(cfg),
    )?)
}

pub fn simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let dir = output_dir(cfg, out)?;
    let mut out = OutputDir::create(&dir)?;
    let tensor = synthesize(cfg, &cfg.waves())?;
    tensor.write_cache(&out.path(CACHE_NAME))?;
    out.record(CACHE_NAME, "tensor-cache");
    let manifest = manifest_for("simulate", json!({ "out": dir }), cfg)?;
    write_manifest(&mut out, manifest)
}

/// Opens a cache written by `simulate` and checks it against the config.
fn open_tensor(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<ChannelTensor> {
    if !path.is_file() {
        bail!(
            "tensor cache {} not found; run `tfib simulate` with this config first",
            path.display()
        );
    }
    let header = read_cache_header(path).with_context(|| format!("reading {}", path.display()))?;
    let freq = cfg.freq();
    if header.frequencies != freq.count() || header.f_min != freq.f_min() || header.f_max != freq.f_max() {
        bail!(
            "tensor cache {} holds K = {} over [{}, {}] GHz, config asks for K = {} over [{}, {}] GHz",
            path.display(),
            header.frequencies,
            header.f_min * 1e-9,
            header.f_max * 1e-9,
            freq.count(),
            freq.f_min() * 1e-9,
            freq.f_max() * 1e-9
        );
    }
    ChannelTensor::open_cache(path, cfg.grid()).with_context(|| format!("opening {}", path.display()))
}

#[derive(Debug, Serialize)]
struct WaveRecord {
    phi_deg: f64,
    theta_deg: f64,
    tau_ns: f64,
    amp_mag: f64,
    amp_phase_deg: f64,
    delta_az_db: f64,
    delta_el_db: f64,
    tau_at_tube_ns: f64,
    tau_azimuth_ns: f64,
}

impl WaveRecord {
    fn from(ex: &Extraction) -> Self {
        let e = &ex.estimate;
        WaveRecord {
            phi_deg: e.phi_hat.to_degrees(),
            theta_deg: e.theta_hat.to_degrees(),
            tau_ns: e.tau_hat * 1e9,
            amp_mag: e.amplitude_hat.norm(),
            amp_phase_deg: e.amplitude_hat.arg().to_degrees(),
            delta_az_db: e.delta_azimuth,
            delta_el_db: e.delta_elevation,
            tau_at_tube_ns: e.tau_at_tube * 1e9,
            tau_azimuth_ns: e.tau_azimuth * 1e9,
        }
    }
}

pub fn estimate(cfg: &ExperimentConfig, tensor_path: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let dir = output_dir(cfg, out)?;
    let tensor = match tensor_path {
        Some(p) => open_tensor(cfg, p)?,
        None => synthesize(cfg, &cfg.waves())?,
    };
    let ecfg = cfg.estimator_config();
    let (extractions, failure) = match estimate_multipath_detailed(&tensor, &ecfg) {
        Ok((ex, _)) => (ex, None),
        Err(CoreError::Partial { completed, source }) => {
            // rerun the completed prefix to recover its diagrams
            let done = completed.len();
            let mut partial = ecfg.clone();
            partial.waves = done;
            let (ex, _) = estimate_multipath_detailed(&tensor, &partial)?;
            (ex, Some(format!("stopped after {done} wave(s): {source}")))
        }
        Err(e) => return Err(e.into()),
    };

    let mut out = OutputDir::create(&dir)?;
    for (i, ex) in extractions.iter().enumerate() {
        for (stage, result) in [("azimuth", &ex.azimuth), ("elevation", &ex.elevation)] {
            let stem = format!("wave{}_{stage}", i + 1);
            if cfg.output.formats.contains(&Format::Csv) {
                out.diagram_csv(&format!("{stem}.csv"), &result.diagram)?;
            }
            if cfg.output.formats.contains(&Format::Pgm) {
                out.diagram_pgm(&format!("{stem}.pgm"), &result.diagram)?;
            }
        }
    }
    let waves: Vec<WaveRecord> = extractions.iter().map(WaveRecord::from).collect();
    let arguments = json!({ "tensor": tensor_path, "out": dir });
    let mut manifest = manifest_for("estimate", arguments, cfg)?;
    out.record("results.json", "results");
    manifest.outputs = out.entries().to_vec();
    let record = json!({ "waves": waves, "error": failure, "manifest": manifest });
    out.json_unrecorded("results.json", &record)?;
    write_manifest(&mut out, manifest)?;
    if let Some(msg) = failure {
        bail!("{msg}; partial results written to {}", dir.display());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    #[value(name = "P")]
    P,
    #[value(name = "M")]
    M,
    #[value(name = "theta")]
    Theta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    DeltaAzimuth,
    DeltaElevation,
}

pub fn check_sweep_values(values: &[f64]) -> anyhow::Result<()> {
    if values.len() < 2 {
        bail!("a sweep needs at least 2 values, got {}", values.len());
    }
    if let Some(w) = values.windows(2).find(|w| !(w[1] > w[0])) {
        bail!("sweep values must be strictly increasing ({} then {})", w[0], w[1]);
    }
    Ok(())
}

fn as_count(v: f64, what: &str) -> anyhow::Result<usize> {
    if v.fract() != 0.0 || v < 0.0 {
        bail!("{what} must be a non-negative integer, got {v}");
    }
    Ok(v as usize)
}

/// One sweep point: the config with `param` set to `value`, re-validated.
fn sweep_point(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> anyhow::Result<(ExperimentConfig, bool)> {
    let mut c = cfg.clone();
    match param {
        SweepParam::P => c.sampling.samples = as_count(value, "P")?,
        SweepParam::M => c.sampling.modes = as_count(value, "M")?,
        SweepParam::Theta => {
            for w in &mut c.scene.waves {
                w.theta_deg = value;
            }
        }
    }
    let aliased = c.sampling.modes > c.sampling.samples;
    if aliased {
        c.estimator.allow_mode_aliasing = true;
    }
    let text = serde_json::to_string_pretty(&c)?;
    let c = crate::config::parse_config(&text, &format!("sweep point {value}"))?;
    Ok((c, aliased))
}

pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    metric: SweepMetric,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    check_sweep_values(values)?;
    let dir = output_dir(cfg, out)?;
    let points: Vec<(ExperimentConfig, bool)> = values
        .iter()
        .map(|&v| sweep_point(cfg, param, v))
        .collect::<anyhow::Result<_>>()?;

    let mut rows = Vec::with_capacity(values.len());
    for ((c, aliased), v) in points.iter().zip(values) {
        let tensor = synthesize(c, &c.waves())?;
        let mut ecfg = c.estimator_config();
        let delta = match metric {
            SweepMetric::DeltaAzimuth => azimuth_stage(&tensor, &ecfg)?.delta,
            SweepMetric::DeltaElevation => {
                ecfg.refine = false;
                extract_wave(&tensor, &ecfg)?.estimate.delta_elevation
            }
        };
        rows.push(vec![format_value(*v), format!("{delta:.4}"), aliased.to_string()]);
    }

    let mut out = OutputDir::create(&dir)?;
    let name = match param {
        SweepParam::P => "P",
        SweepParam::M => "M",
        SweepParam::Theta => "theta_deg",
    };
    let metric_name = match metric {
        SweepMetric::DeltaAzimuth => "delta_azimuth_db",
        SweepMetric::DeltaElevation => "delta_elevation_db",
    };
    out.table_csv(
        "sweep.csv",
        &[name.to_string(), metric_name.to_string(), "modes_aliased".to_string()],
        &rows,
    )?;
    let arguments = json!({ "param": param, "values": values, "metric": metric, "out": dir });
    write_manifest(&mut out, manifest_for("sweep", arguments, cfg)?)
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GainDomain {
    Azimuth,
    Elevation,
    Time,
}

impl GainDomain {
    /// Default sweep: 20 degree azimuth steps, 10 degree elevation steps,
    /// 5 ns delay steps.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            GainDomain::Azimuth => (0..18).map(|i| 20.0 * i as f64).collect(),
            GainDomain::Elevation => (0..=18).map(|i| 10.0 * i as f64).collect(),
            GainDomain::Time => (1..10).map(|i| 5.0 * i as f64).collect(),
        }
    }
}

/// Normalized gain cuts through a single wave swept over one domain. Each
/// column is one swept value; levels are relative to the strongest cut.
pub fn gain(
    cfg: &ExperimentConfig,
    domain: GainDomain,
    values: Option<&[f64]>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let values = values.map_or_else(|| domain.default_values(), <[f64]>::to_vec);
    check_sweep_values(&values)?;
    let dir = output_dir(cfg, out)?;
    let base = cfg
        .scene
        .waves
        .first()
        .context("gain needs a wave in the scene")?
        .clone();
    let ecfg = cfg.estimator_config();
    let grid = cfg.grid();

    let mut axis = Vec::new();
    let mut columns = Vec::with_capacity(values.len());
    let mut peaks = Vec::with_capacity(values.len());
    for &v in &values {
        let mut c = cfg.clone();
        let mut w = base.clone();
        match domain {
            GainDomain::Azimuth => w.phi_deg = v,
            GainDomain::Elevation => w.theta_deg = v,
            GainDomain::Time => w.tau_ns = v,
        }
        c.scene.waves = vec![w];
        let text = serde_json::to_string(&c)?;
        let c = crate::config::parse_config(&text, &format!("gain point {v}"))?;
        let tensor = synthesize(&c, &c.waves())?;
        let wave = c.waves()[0];
        let (spectrum, fixed) = match domain {
            GainDomain::Azimuth | GainDomain::Time => {
                let st = azimuth_stage(&tensor, &ecfg)?;
                let fixed = if domain == GainDomain::Azimuth {
                    CutAxis::Time(st.peak.time)
                } else {
                    CutAxis::Angle(st.peak.angle)
                };
                (st.spectrum, fixed)
            }
            GainDomain::Elevation => {
                let ring = select_phi_ring(&grid, wave.phi);
                let s = elevation_spectrum(&tensor, &ring, ecfg.modes, ecfg.magnitude_cap_db)?;
                let d = tfib_core::phasemode::diagram_2d(&s, ecfg.pad_angle, ecfg.pad_time)?;
                let peak = tfib_core::estimator::peak_find(&d)?;
                (s, CutAxis::Time(peak.time))
            }
        };
        let diagram = tfib_core::phasemode::diagram_2d(&spectrum, ecfg.pad_angle, ecfg.pad_time)?;
        let peak_db = tfib_core::estimator::peak_find(&diagram)?.power_db;
        let cut = array_gain_cut(&spectrum, fixed, ecfg.pad_angle, ecfg.pad_time)?;
        axis = cut.axis;
        peaks.push(peak_db);
        columns.push(cut.gain_db);
    }
    let top = peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let (axis_name, scale) = match domain {
        GainDomain::Azimuth | GainDomain::Elevation => ("angle_deg", 180.0 / std::f64::consts::PI),
        GainDomain::Time => ("time_ns", 1e9),
    };
    let mut header = vec![axis_name.to_string()];
    header.extend(
        values
            .iter()
            .map(|v| format!("{}_{}", domain_label(domain), format_value(*v))),
    );
    let rows: Vec<Vec<String>> = axis
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut r = vec![format!("{:.6}", a * scale)];
            for (col, p) in columns.iter().zip(&peaks) {
                r.push(format!("{:.4}", (col[i] + p - top).max(-300.0)));
            }
            r
        })
        .collect();
    let peak_rows: Vec<Vec<String>> = values
        .iter()
        .zip(&peaks)
        .map(|(v, p)| vec![format_value(*v), format!("{:.4}", p - top)])
        .collect();

    let mut out = OutputDir::create(&dir)?;
    let name = domain_label(domain);
    out.table_csv(&format!("gain_{name}.csv"), &header, &rows)?;
    out.table_csv(
        &format!("gain_{name}_peaks.csv"),
        &[format!("{name}_value"), "peak_db".to_string()],
        &peak_rows,
    )?;
    let arguments = json!({ "domain": domain, "values": values, "out": dir });
    write_manifest(&mut out, manifest_for("gain", arguments, cfg)?)
}

fn domain_label(d: GainDomain) -> &'static str {
    match d {
        GainDomain::Azimuth => "azimuth",
        GainDomain::Elevation => "elevation",
        GainDomain::Time => "time",
    }
}
