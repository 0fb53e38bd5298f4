//! Ground-truth channel synthesis on the torus samples.
//!
//! Every sample `x_p` receives, per wave and frequency,
//! `kappa * g_p * exp(-j 2 pi f t_p)` where `t_p` is the propagation delay
//! to the sample and `g_p` the path-loss factor. The spherical model places a
//! point source at `c * tau` along the arrival direction and uses the exact
//! distance `d_p` (so `t_p = d_p / c`, `g_p = (d / d_p)^(gamma/2)`); the plane
//! model uses `t_p = tau - (u . x_p) / c` and `g_p = 1`.
//!
//! A [`ChannelTensor`] is either materialized, synthesized lazily ring by
//! ring, or read lazily from a cache file, so that a `720² x 200` scene never
//! has to sit in memory at once.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point3, RingKind, RingView, SampleGrid, SPEED_OF_LIGHT};

/// Above this many complex values a tensor is synthesized lazily by default.
pub const STREAMING_THRESHOLD: usize = 1 << 26;

pub const CACHE_MAGIC: [u8; 4] = *b"TFIB";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_HEADER_LEN: u64 = 32;

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    /// Azimuth of arrival, radians.
    pub phi: f64,
    /// Elevation of arrival measured from +z, radians in `[0, pi]`.
    pub theta: f64,
    /// Delay to the torus center, seconds.
    pub tau: f64,
    pub amplitude: Complex64,
}

impl Wave {
    pub fn new(phi: f64, theta: f64, tau: f64, amplitude: Complex64) -> Self {
        Self {
            phi,
            theta,
            tau,
            amplitude,
        }
    }

    /// Unit-amplitude wave.
    pub fn unit(phi: f64, theta: f64, tau: f64) -> Self {
        Self::new(phi, theta, tau, Complex64::new(1.0, 0.0))
    }

    /// Unit vector pointing from the torus center toward the source.
    pub fn direction(&self) -> Point3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    pub fn with_amplitude(mut self, amplitude: Complex64) -> Self {
        self.amplitude = amplitude;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationModel {
    Spherical,
    Plane,
}

/// `K` uniform frequencies `f_k = f_min + k (f_max - f_min) / K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid {
    f_min: f64,
    f_max: f64,
    count: usize,
}

impl FrequencyGrid {
    pub fn new(f_min: f64, f_max: f64, count: usize) -> Result<Self> {
        if !(f_min > 0.0 && f_max > f_min && f_max.is_finite()) {
            return Err(Error::InvalidSampling(format!(
                "need 0 < f_min < f_max, got [{f_min}, {f_max}]"
            )));
        }
        if count == 0 {
            return Err(Error::InvalidSampling("frequency count must be positive".into()));
        }
        Ok(Self { f_min, f_max, count })
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bandwidth(&self) -> f64 {
        self.f_max - self.f_min
    }

    pub fn spacing(&self) -> f64 {
        self.bandwidth() / self.count as f64
    }

    pub fn frequency(&self, k: usize) -> f64 {
        self.f_min + k as f64 * self.spacing()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.frequency(k)).collect()
    }

    pub fn time_resolution(&self) -> f64 {
        1.0 / self.bandwidth()
    }

    pub fn max_observable_time(&self) -> f64 {
        (self.count - 1) as f64 / self.bandwidth()
    }
}

/// Per-sample additive circular Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutChoice {
    /// Materialize below [`STREAMING_THRESHOLD`] values, stream above.
    Auto,
    Materialized,
    Streaming,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub layout: LayoutChoice,
    pub noise: Option<NoiseSpec>,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            layout: LayoutChoice::Auto,
            noise: None,
        }
    }
}

/// A set of waves rendered with one propagation model.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub waves: Vec<Wave>,
    pub model: PropagationModel,
    pub gamma: f64,
}

impl Component {
    fn accumulate(&self, pos: &Point3, freq: &FrequencyGrid, out: &mut [Complex64]) {
        for wave in &self.waves {
            accumulate_wave(pos, wave, self.model, self.gamma, freq, out);
        }
    }
}

/// Adds one wave's response at `pos` to `out` (length `K`).
pub fn accumulate_wave(
    pos: &Point3,
    wave: &Wave,
    model: PropagationModel,
    gamma: f64,
    freq: &FrequencyGrid,
    out: &mut [Complex64],
) {
    let u = wave.direction();
    let (gain, delay) = match model {
        PropagationModel::Spherical => {
            let d = SPEED_OF_LIGHT * wave.tau;
            let dx = d * u[0] - pos[0];
            let dy = d * u[1] - pos[1];
            let dz = d * u[2] - pos[2];
            let dp = (dx * dx + dy * dy + dz * dz).sqrt();
            ((d / dp).powf(0.5 * gamma), dp / SPEED_OF_LIGHT)
        }
        PropagationModel::Plane => {
            let proj = u[0] * pos[0] + u[1] * pos[1] + u[2] * pos[2];
            (1.0, wave.tau - proj / SPEED_OF_LIGHT)
        }
    };
    let start = (freq.f_min() * delay).rem_euclid(1.0);
    let step = (freq.spacing() * delay).rem_euclid(1.0);
    let rot = Complex64::from_polar(1.0, -TAU * step);
    let mut phasor = wave.amplitude * gain * Complex64::from_polar(1.0, -TAU * start);
    for v in out.iter_mut() {
        *v += phasor;
        phasor *= rot;
    }
}

/// Responses of an arbitrary sample set, rows = positions, columns = frequencies.
pub fn synthesize_positions(
    waves: &[Wave],
    positions: &[Point3],
    freq: &FrequencyGrid,
    model: PropagationModel,
    gamma: f64,
) -> Array2<Complex64> {
    let k = freq.count();
    let mut out = Array2::<Complex64>::zeros((positions.len(), k));
    for (pos, mut row) in positions.iter().zip(out.rows_mut()) {
        let row = row.as_slice_mut().expect("standard layout");
        for wave in waves {
            accumulate_wave(pos, wave, model, gamma, freq, row);
        }
    }
    out
}

#[derive(Debug, Clone)]
struct CacheSource {
    path: PathBuf,
}

impl CacheSource {
    fn read_row(
        &self,
        file: &mut File,
        p: usize,
        q: usize,
        samples: usize,
        k: usize,
        out: &mut [Complex64],
    ) -> Result<()> {
        let offset = CACHE_HEADER_LEN + ((p * samples + q) * k * 16) as u64;
        file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; k * 16];
        file.read_exact(&mut buf)?;
        for (v, chunk) in out.iter_mut().zip(buf.chunks_exact(16)) {
            let re = f64::from_le_bytes(chunk[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(chunk[8..].try_into().expect("8 bytes"));
            *v += Complex64::new(re, im);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LazySource {
    base: Option<CacheSource>,
    components: Vec<Component>,
    noise: Option<(f64, u64)>,
}

#[derive(Debug, Clone)]
enum Layout {
    Materialized(Arc<Vec<Complex64>>),
    Lazy(LazySource),
}

/// Complex responses indexed `(p, q, k)`.
#[derive(Debug, Clone)]
pub struct ChannelTensor {
    grid: Arc<SampleGrid>,
    freq: FrequencyGrid,
    layout: Layout,
}

fn validate_waves(waves: &[Wave], grid: &SampleGrid, gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Precondition(format!(
            "path-loss exponent must be >= 0, got {gamma}"
        )));
    }
    let body = grid.geometry().outer_radius();
    for (i, w) in waves.iter().enumerate() {
        if !(w.phi.is_finite() && w.theta.is_finite() && w.tau.is_finite()) {
            return Err(Error::Precondition(format!("wave {i} has non-finite parameters")));
        }
        if !(w.amplitude.re.is_finite() && w.amplitude.im.is_finite()) {
            return Err(Error::Precondition(format!("wave {i} has non-finite amplitude")));
        }
        if !(w.tau * SPEED_OF_LIGHT > body) {
            return Err(Error::Precondition(format!(
                "wave {i}: source at {:.4} m lies inside the array body (R + rho = {body} m)",
                w.tau * SPEED_OF_LIGHT
            )));
        }
    }
    Ok(())
}

pub fn synthesize_channel(
    waves: &[Wave],
    grid: Arc<SampleGrid>,
    freq: FrequencyGrid,
    model: PropagationModel,
    gamma: f64,
) -> Result<ChannelTensor> {
    synthesize_channel_with(waves, grid, freq, model, gamma, &SynthesisOptions::default())
}

pub fn synthesize_channel_with(
    waves: &[Wave],
    grid: Arc<SampleGrid>,
    freq: FrequencyGrid,
    model: PropagationModel,
    gamma: f64,
    options: &SynthesisOptions,
) -> Result<ChannelTensor> {
    validate_waves(waves, &grid, gamma)?;
    let component = Component {
        waves: waves.to_vec(),
        model,
        gamma,
    };
    let lazy = ChannelTensor {
        grid,
        freq,
        layout: Layout::Lazy(LazySource {
            base: None,
            components: vec![component],
            noise: None,
        }),
    };
    let lazy = match options.noise {
        Some(spec) => {
            let power = lazy.energy()? / lazy.len() as f64;
            let noise_power = power / 10f64.powf(spec.snr_db / 10.0);
            let mut t = lazy;
            if let Layout::Lazy(src) = &mut t.layout {
                src.noise = Some((noise_power.sqrt(), spec.seed));
            }
            t
        }
        None => lazy,
    };
    let stream = match options.layout {
        LayoutChoice::Auto => lazy.len() > STREAMING_THRESHOLD,
        LayoutChoice::Materialized => false,
        LayoutChoice::Streaming => true,
    };
    if stream {
        Ok(lazy)
    } else {
        lazy.materialize()
    }
}

impl ChannelTensor {
    /// Wraps explicit data laid out `(p, q, k)` row-major.
    pub fn from_data(grid: Arc<SampleGrid>, freq: FrequencyGrid, data: Vec<Complex64>) -> Result<Self> {
        let p = grid.samples();
        if data.len() != p * p * freq.count() {
            return Err(Error::Usage(format!(
                "expected {} values for P = {p}, K = {}, got {}",
                p * p * freq.count(),
                freq.count(),
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Precondition("tensor values must be finite".into()));
        }
        Ok(Self {
            grid,
            freq,
            layout: Layout::Materialized(Arc::new(data)),
        })
    }

    pub fn zeros(grid: Arc<SampleGrid>, freq: FrequencyGrid) -> Self {
        let n = grid.samples() * grid.samples() * freq.count();
        Self {
            grid,
            freq,
            layout: Layout::Materialized(Arc::new(vec![Complex64::new(0.0, 0.0); n])),
        }
    }

    pub fn grid(&self) -> &Arc<SampleGrid> {
        &self.grid
    }

    pub fn freq(&self) -> &FrequencyGrid {
        &self.freq
    }

    /// Total number of complex values `P² K`.
    pub fn len(&self) -> usize {
        let p = self.grid.samples();
        p * p * self.freq.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_streaming(&self) -> bool {
        matches!(self.layout, Layout::Lazy(_))
    }

    /// Materialized data, if this tensor holds it.
    pub fn data(&self) -> Option<&[Complex64]> {
        match &self.layout {
            Layout::Materialized(d) => Some(d),
            Layout::Lazy(_) => None,
        }
    }

    fn fill_row(
        &self,
        src: &LazySource,
        file: Option<&mut File>,
        p: usize,
        q: usize,
        out: &mut [Complex64],
    ) -> Result<()> {
        let samples = self.grid.samples();
        out.fill(Complex64::new(0.0, 0.0));
        if let (Some(base), Some(file)) = (&src.base, file) {
            base.read_row(file, p, q, samples, self.freq.count(), out)?;
        }
        let pos = self.grid.position(p, q);
        for c in &src.components {
            c.accumulate(&pos, &self.freq, out);
        }
        if let Some((sigma, seed)) = src.noise {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((p * samples + q) as u64);
            let s = sigma * std::f64::consts::FRAC_1_SQRT_2;
            for v in out.iter_mut() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *v += Complex64::new(s * re, s * im);
            }
        }
        Ok(())
    }

    fn fill_rows(&self, indices: &[(usize, usize)], out: &mut Array2<Complex64>) -> Result<()> {
        let k = self.freq.count();
        let samples = self.grid.samples();
        match &self.layout {
            Layout::Materialized(data) => {
                for (&(p, q), mut row) in indices.iter().zip(out.rows_mut()) {
                    let start = (p * samples + q) * k;
                    row.as_slice_mut()
                        .expect("standard layout")
                        .copy_from_slice(&data[start..start + k]);
                }
            }
            Layout::Lazy(src) => {
                let mut file = match &src.base {
                    Some(b) => Some(File::open(&b.path)?),
                    None => None,
                };
                for (&(p, q), mut row) in indices.iter().zip(out.rows_mut()) {
                    let row = row.as_slice_mut().expect("standard layout");
                    self.fill_row(src, file.as_mut(), p, q, row)?;
                }
            }
        }
        Ok(())
    }

    /// Responses of the ring's samples, one row per sample in ring order.
    pub fn ring_slice(&self, ring: &RingView) -> Result<Array2<Complex64>> {
        let samples = self.grid.samples();
        let expected = match ring.kind {
            RingKind::Xy if ring.index < samples => self.grid.xy_ring(ring.index),
            RingKind::Phi if ring.index < samples => self.grid.phi_ring(ring.index),
            _ => {
                return Err(Error::Usage(format!(
                    "ring index {} out of range for P = {samples}",
                    ring.index
                )))
            }
        };
        if expected.sample_indices != ring.sample_indices || expected.radius != ring.radius {
            return Err(Error::Usage("ring does not belong to this tensor's grid".into()));
        }
        let mut out = Array2::zeros((ring.sample_indices.len(), self.freq.count()));
        self.fill_rows(&ring.sample_indices, &mut out)?;
        Ok(out)
    }

    /// Sum of squared magnitudes over all samples and frequencies.
    pub fn energy(&self) -> Result<f64> {
        if let Layout::Materialized(d) = &self.layout {
            return Ok(d.iter().map(|v| v.norm_sqr()).sum());
        }
        let parts = (0..self.grid.samples())
            .into_par_iter()
            .map(|p| {
                let slice = self.ring_slice(&self.grid.phi_ring(p))?;
                Ok(slice.iter().map(|v| v.norm_sqr()).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(parts.iter().sum())
    }

    /// Copies every value into memory.
    pub fn materialize(&self) -> Result<ChannelTensor> {
        if let Layout::Materialized(_) = self.layout {
            return Ok(self.clone());
        }
        let samples = self.grid.samples();
        let k = self.freq.count();
        let rows = (0..samples)
            .into_par_iter()
            .map(|p| self.ring_slice(&self.grid.phi_ring(p)))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(samples * samples * k);
        for r in rows {
            data.extend(r.iter().copied());
        }
        Ok(Self {
            grid: self.grid.clone(),
            freq: self.freq,
            layout: Layout::Materialized(Arc::new(data)),
        })
    }

    /// Same layout kind as `self`, minus the given waves rendered with `model`.
    pub fn minus_waves(&self, waves: &[Wave], model: PropagationModel, gamma: f64) -> Result<ChannelTensor> {
        let negated: Vec<Wave> = waves.iter().map(|w| w.with_amplitude(-w.amplitude)).collect();
        let component = Component {
            waves: negated,
            model,
            gamma,
        };
        match &self.layout {
            Layout::Materialized(data) => {
                let samples = self.grid.samples();
                let k = self.freq.count();
                let mut out = data.as_ref().clone();
                out.par_chunks_mut(samples * k).enumerate().for_each(|(p, block)| {
                    for (q, row) in block.chunks_mut(k).enumerate() {
                        component.accumulate(&self.grid.position(p, q), &self.freq, row);
                    }
                });
                Ok(Self {
                    grid: self.grid.clone(),
                    freq: self.freq,
                    layout: Layout::Materialized(Arc::new(out)),
                })
            }
            Layout::Lazy(src) => {
                let mut src = src.clone();
                src.components.push(component);
                Ok(Self {
                    grid: self.grid.clone(),
                    freq: self.freq,
                    layout: Layout::Lazy(src),
                })
            }
        }
    }

    /// Writes the tensor cache: a 32-byte header (`TFIB`, version, `P`, `K`,
    /// `f_min`, `f_max`, all little-endian) then interleaved `f64` real and
    /// imaginary parts in `(p, q, k)` order. Streams one vertical ring at a
    /// time.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.grid.samples() as u32).to_le_bytes())?;
        w.write_all(&(self.freq.count() as u32).to_le_bytes())?;
        w.write_all(&self.freq.f_min().to_le_bytes())?;
        w.write_all(&self.freq.f_max().to_le_bytes())?;
        for p in 0..self.grid.samples() {
            let slice = self.ring_slice(&self.grid.phi_ring(p))?;
            for v in slice.iter() {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Opens a tensor cache lazily. `grid` supplies the geometry, which the
    /// header does not carry; its `P` must match.
    pub fn open_cache(path: &Path, grid: Arc<SampleGrid>) -> Result<ChannelTensor> {
        let header = read_cache_header(path)?;
        if header.samples != grid.samples() {
            return Err(Error::Format(format!(
                "cache holds P = {}, grid has P = {}",
                header.samples,
                grid.samples()
            )));
        }
        let freq = FrequencyGrid::new(header.f_min, header.f_max, header.frequencies)
            .map_err(|e| Error::Format(e.to_string()))?;
        let expected = CACHE_HEADER_LEN + (header.samples * header.samples * header.frequencies * 16) as u64;
        let actual = std::fs::metadata(path)?.len();
        if actual != expected {
            return Err(Error::Format(format!(
                "cache is {actual} bytes, header implies {expected}"
            )));
        }
        Ok(Self {
            grid,
            freq,
            layout: Layout::Lazy(LazySource {
                base: Some(CacheSource {
                    path: path.to_path_buf(),
                }),
                components: Vec::new(),
                noise: None,
            }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheHeader {
    pub version: u32,
    pub samples: usize,
    pub frequencies: usize,
    pub f_min: f64,
    pub f_max: f64,
}

pub fn read_cache_header(path: &Path) -> Result<CacheHeader> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = [0u8; CACHE_HEADER_LEN as usize];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("file shorter than the 32-byte header".into()))?;
    if buf[..4] != CACHE_MAGIC {
        return Err(Error::Format("bad magic, expected TFIB".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    let f64_at = |i: usize| f64::from_le_bytes(buf[i..i + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(CacheHeader {
        version,
        samples: u32_at(8) as usize,
        frequencies: u32_at(12) as usize,
        f_min: f64_at(16),
        f_max: f64_at(24),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_sample_grid, TorusGeometry};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn small_grid(p: usize) -> Arc<SampleGrid> {
        Arc::new(build_sample_grid(TorusGeometry::new(0.25, 0.125).unwrap(), p).unwrap())
    }

    fn band() -> FrequencyGrid {
        FrequencyGrid::new(58e9, 62e9, 32).unwrap()
    }

    #[test]
    fn frequency_grid_derived_quantities() {
        let f = FrequencyGrid::new(58e9, 62e9, 200).unwrap();
        assert_abs_diff_eq!(f.spacing(), 20e6, epsilon = 1e-3);
        assert_abs_diff_eq!(f.frequency(0), 58e9);
        assert_abs_diff_eq!(f.time_resolution(), 0.25e-9, epsilon = 1e-20);
        assert_abs_diff_eq!(f.max_observable_time(), 199.0 * 0.25e-9, epsilon = 1e-18);
        assert!(FrequencyGrid::new(62e9, 58e9, 10).is_err());
        assert!(FrequencyGrid::new(0.0, 58e9, 10).is_err());
    }

    #[test]
    fn plane_wave_zero_projection_is_bare_delay() {
        let f = band();
        let w = Wave::new(0.3, 1.1, 20e-9, Complex64::new(0.5, -0.2));
        // orthogonal to the arrival direction
        let u = w.direction();
        let pos = [u[1], -u[0], 0.0];
        let mut out = vec![Complex64::new(0.0, 0.0); f.count()];
        accumulate_wave(&pos, &w, PropagationModel::Plane, 2.0, &f, &mut out);
        for (k, v) in out.iter().enumerate() {
            let want = w.amplitude * Complex64::from_polar(1.0, -TAU * f.frequency(k) * w.tau);
            assert_abs_diff_eq!(v.re, want.re, epsilon = 1e-9);
            assert_abs_diff_eq!(v.im, want.im, epsilon = 1e-9);
        }
    }

    #[test]
    fn spherical_distance_and_gain() {
        let w = Wave::unit(0.0, FRAC_PI_2, 15e-9);
        assert_abs_diff_eq!(w.tau * SPEED_OF_LIGHT, 4.5, epsilon = 1e-12);

        // sample halfway to the source: gain (d / d_p)^(gamma/2) = 2 for gamma = 2
        let f = FrequencyGrid::new(1e9, 2e9, 1).unwrap();
        let mut out = vec![Complex64::new(0.0, 0.0); 1];
        accumulate_wave(&[2.25, 0.0, 0.0], &w, PropagationModel::Spherical, 2.0, &f, &mut out);
        assert_abs_diff_eq!(out[0].norm(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn source_inside_body_rejected() {
        let grid = small_grid(8);
        let w = Wave::unit(0.0, FRAC_PI_2, 1e-9); // 0.3 m < R + rho = 0.375 m
        let err = synthesize_channel(&[w], grid, band(), PropagationModel::Spherical, 2.0);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn superposition_is_exact() {
        let grid = small_grid(12);
        let w1 = Wave::new(0.7, 1.2, 20e-9, Complex64::new(1.0, 0.3));
        let w2 = Wave::new(4.1, 2.0, 31e-9, Complex64::new(-0.4, 0.9));
        for model in [PropagationModel::Spherical, PropagationModel::Plane] {
            let both = synthesize_channel(&[w1, w2], grid.clone(), band(), model, 2.0).unwrap();
            let a = synthesize_channel(&[w1], grid.clone(), band(), model, 2.0).unwrap();
            let b = synthesize_channel(&[w2], grid.clone(), band(), model, 2.0).unwrap();
            for ((x, y), z) in both
                .data()
                .unwrap()
                .iter()
                .zip(a.data().unwrap())
                .zip(b.data().unwrap())
            {
                assert_eq!(*x, *y + *z);
            }
        }
    }

    #[test]
    fn far_field_models_agree_in_phase() {
        // the curvature phase k a^2 / (2 d) at d = 100 a stays below 1e-2 rad
        // only while k a <= 2, so the band is chosen electrically small
        let grid = small_grid(16);
        let a = grid.geometry().outer_radius();
        let f_top = 2.0 * SPEED_OF_LIGHT / (TAU * a);
        let f = FrequencyGrid::new(0.5 * f_top, f_top, 8).unwrap();
        let d = 100.0 * a;
        let w = Wave::unit(1.0, 1.3, d / SPEED_OF_LIGHT);
        let sph = synthesize_channel(&[w], grid.clone(), f, PropagationModel::Spherical, 2.0).unwrap();
        let pla = synthesize_channel(&[w], grid, f, PropagationModel::Plane, 2.0).unwrap();
        for (a, b) in sph.data().unwrap().iter().zip(pla.data().unwrap()) {
            assert!((a / b).arg().abs() <= 1e-2);
        }
    }

    #[test]
    fn streaming_equals_materialized_bitwise() {
        let grid = small_grid(90);
        let f = band();
        let waves = [
            Wave::unit(45f64.to_radians(), FRAC_PI_2, 20e-9),
            Wave::new(3.0, 0.8, 33e-9, Complex64::new(0.2, -0.6)),
        ];
        let opts = |layout| SynthesisOptions {
            layout,
            noise: Some(NoiseSpec { snr_db: 10.0, seed: 7 }),
        };
        let m = synthesize_channel_with(
            &waves,
            grid.clone(),
            f,
            PropagationModel::Spherical,
            2.0,
            &opts(LayoutChoice::Materialized),
        )
        .unwrap();
        let s = synthesize_channel_with(
            &waves,
            grid.clone(),
            f,
            PropagationModel::Spherical,
            2.0,
            &opts(LayoutChoice::Streaming),
        )
        .unwrap();
        assert!(s.is_streaming() && !m.is_streaming());
        for idx in [0, 17, 89] {
            for ring in [grid.xy_ring(idx), grid.phi_ring(idx)] {
                assert_eq!(m.ring_slice(&ring).unwrap(), s.ring_slice(&ring).unwrap());
            }
        }
    }

    #[test]
    fn ring_slices_index_the_data() {
        let grid = small_grid(6);
        let f = FrequencyGrid::new(58e9, 62e9, 3).unwrap();
        let data: Vec<Complex64> = (0..6 * 6 * 3).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        let t = ChannelTensor::from_data(grid.clone(), f, data.clone()).unwrap();
        let xy = t.ring_slice(&grid.xy_ring(4)).unwrap();
        for p in 0..6 {
            for k in 0..3 {
                assert_eq!(xy[[p, k]], data[(p * 6 + 4) * 3 + k]);
            }
        }
        let phi = t.ring_slice(&grid.phi_ring(2)).unwrap();
        for q in 0..6 {
            for k in 0..3 {
                assert_eq!(phi[[q, k]], data[(2 * 6 + q) * 3 + k]);
            }
        }
    }

    #[test]
    fn foreign_ring_rejected() {
        let t = ChannelTensor::zeros(small_grid(6), band());
        let other = small_grid(8);
        assert!(matches!(t.ring_slice(&other.xy_ring(1)), Err(Error::Usage(_))));
        let bigger = Arc::new(build_sample_grid(TorusGeometry::new(0.5, 0.125).unwrap(), 6).unwrap());
        assert!(matches!(t.ring_slice(&bigger.xy_ring(1)), Err(Error::Usage(_))));
    }

    #[test]
    fn noise_matches_requested_snr() {
        let grid = small_grid(24);
        let f = band();
        let w = [Wave::unit(1.0, FRAC_PI_2, 20e-9)];
        let clean = synthesize_channel(&w, grid.clone(), f, PropagationModel::Plane, 2.0).unwrap();
        let noisy = synthesize_channel_with(
            &w,
            grid,
            f,
            PropagationModel::Plane,
            2.0,
            &SynthesisOptions {
                layout: LayoutChoice::Materialized,
                noise: Some(NoiseSpec { snr_db: 3.0, seed: 11 }),
            },
        )
        .unwrap();
        let n = clean.len() as f64;
        let signal = clean.energy().unwrap() / n;
        let noise: f64 = noisy
            .data()
            .unwrap()
            .iter()
            .zip(clean.data().unwrap())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / n;
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 3.0).abs() < 0.1, "measured SNR {snr}");
    }

    #[test]
    fn cache_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.tfib");
        let grid = small_grid(10);
        let f = FrequencyGrid::new(58e9, 62e9, 5).unwrap();
        let w = [Wave::new(2.0, 1.0, 25e-9, Complex64::new(0.3, 0.1))];
        let t = synthesize_channel(&w, grid.clone(), f, PropagationModel::Spherical, 2.0).unwrap();
        t.write_cache(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TFIB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 58e9);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 62e9);
        assert_eq!(bytes.len(), 32 + 10 * 10 * 5 * 16);
        // first value is sample (0, 0), k = 0
        let v0 = t.data().unwrap()[0];
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), v0.re);
        assert_eq!(f64::from_le_bytes(bytes[40..48].try_into().unwrap()), v0.im);

        let back = ChannelTensor::open_cache(&path, grid.clone()).unwrap();
        assert_eq!(back.materialize().unwrap().data().unwrap(), t.data().unwrap());
        assert!(ChannelTensor::open_cache(&path, small_grid(9)).is_err());
    }

    #[test]
    fn subtraction_cancels_exactly() {
        let grid = small_grid(16);
        let w = Wave::new(PI / 3.0, 1.9, 22e-9, Complex64::new(0.8, 0.1));
        for layout in [LayoutChoice::Materialized, LayoutChoice::Streaming] {
            let opts = SynthesisOptions { layout, noise: None };
            let t =
                synthesize_channel_with(&[w], grid.clone(), band(), PropagationModel::Spherical, 2.0, &opts).unwrap();
            let r = t.minus_waves(&[w], PropagationModel::Spherical, 2.0).unwrap();
            assert_eq!(r.energy().unwrap(), 0.0);
        }
    }
}
