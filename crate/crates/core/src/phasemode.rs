//! Phase-mode processing: ring expansion, the inverse filter bank, averaging
//! over concentric rings and the angle/time diagram.
//!
//! Modes are indexed `-M/2 ..= M/2 - 1` with even `M`; row `i` of every
//! `M x K` matrix holds mode `i - M/2`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::channel::{ChannelTensor, FrequencyGrid};
use crate::error::{Error, Result};
use crate::geometry::{SampleGrid, SPEED_OF_LIGHT};
use crate::specfun::bessel_j_sequence;

/// Default stability cap: filters more than this many dB above the bank
/// median are dropped.
pub const DEFAULT_MAGNITUDE_CAP_DB: f64 = 40.0;

/// Rings accumulated sequentially per parallel task. Fixed so that the
/// reduction order, and therefore every output bit, is independent of the
/// thread count.
const RING_CHUNK: usize = 16;

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn j_pow(m: i64) -> Complex64 {
    match m.rem_euclid(4) {
        0 => Complex64::new(1.0, 0.0),
        1 => J,
        2 => Complex64::new(-1.0, 0.0),
        _ => -J,
    }
}

fn check_mode_count(modes: usize) -> Result<()> {
    if modes < 2 || !modes.is_multiple_of(2) {
        return Err(Error::Usage(format!(
            "mode count must be even and at least 2, got {modes}"
        )));
    }
    Ok(())
}

/// Mode number held in row `row` of an `M`-row matrix.
pub fn mode_of_row(row: usize, modes: usize) -> i64 {
    row as i64 - (modes / 2) as i64
}

/// Row holding mode `m`, if it is in range.
pub fn row_of_mode(m: i64, modes: usize) -> Option<usize> {
    let row = m + (modes / 2) as i64;
    (0..modes as i64).contains(&row).then_some(row as usize)
}

/// Averaged (or single-ring) filtered phase-mode spectrum `H_m(f_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseModeSpectrum {
    values: Array2<Complex64>,
    freq: FrequencyGrid,
}

impl PhaseModeSpectrum {
    pub fn new(values: Array2<Complex64>, freq: FrequencyGrid) -> Result<Self> {
        check_mode_count(values.nrows())?;
        if values.ncols() != freq.count() {
            return Err(Error::Usage(format!(
                "spectrum has {} frequency columns, grid has {}",
                values.ncols(),
                freq.count()
            )));
        }
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Precondition("spectrum values must be finite".into()));
        }
        Ok(Self { values, freq })
    }

    pub fn zeros(modes: usize, freq: FrequencyGrid) -> Result<Self> {
        Self::new(Array2::zeros((modes, freq.count())), freq)
    }

    pub fn mode_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn modes(&self) -> impl Iterator<Item = i64> {
        let m = self.mode_count() as i64;
        -m / 2..m / 2
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn freq(&self) -> &FrequencyGrid {
        &self.freq
    }

    pub fn value(&self, m: i64, k: usize) -> Option<Complex64> {
        row_of_mode(m, self.mode_count()).map(|row| self.values[[row, k]])
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// `(offset, direction)` if the angles are `offset + direction * 2 pi j / P`.
fn uniform_progression(angles: &[f64]) -> Option<(f64, f64)> {
    let p = angles.len();
    let step = TAU / p as f64;
    let offset = angles[0];
    'dir: for dir in [1.0, -1.0] {
        for (j, &a) in angles.iter().enumerate() {
            let want = offset + dir * step * j as f64;
            let diff = (a - want).rem_euclid(TAU);
            if diff.min(TAU - diff) > 1e-9 {
                continue 'dir;
            }
        }
        return Some((offset, dir));
    }
    None
}

/// `(1/P) sum_j H_j(f) exp(j m psi_j)` for every mode and frequency, via one
/// length-`P` FFT per frequency.
pub fn expand_ring(
    ring_response: ArrayView2<Complex64>,
    node_angles: &[f64],
    modes: usize,
) -> Result<Array2<Complex64>> {
    expand_ring_with(ring_response, node_angles, modes, false)
}

/// [`expand_ring`], optionally allowing `M > P`: mode `m` is then read from
/// the periodic extension of the `P`-point spectrum, so modes beyond `P/2`
/// repeat (alias) lower ones.
pub fn expand_ring_with(
    ring_response: ArrayView2<Complex64>,
    node_angles: &[f64],
    modes: usize,
    allow_aliasing: bool,
) -> Result<Array2<Complex64>> {
    check_mode_count(modes)?;
    let p = ring_response.nrows();
    let k = ring_response.ncols();
    if node_angles.len() != p {
        return Err(Error::Usage(format!(
            "{} node angles for {p} ring samples",
            node_angles.len()
        )));
    }
    if modes > p && !allow_aliasing {
        return Err(Error::Aliasing { modes, samples: p });
    }
    let (offset, dir) = uniform_progression(node_angles)
        .ok_or_else(|| Error::Precondition("ring node angles are not uniformly spaced".into()))?;

    let mut buf: Vec<Complex64> = Vec::with_capacity(p * k);
    for col in ring_response.axis_iter(Axis(1)) {
        buf.extend(col.iter().copied());
    }
    FftPlanner::new().plan_fft_forward(p).process(&mut buf);

    let scale = 1.0 / p as f64;
    let mut out = Array2::zeros((modes, k));
    for row in 0..modes {
        let m = mode_of_row(row, modes);
        // increasing angles read bin -m, decreasing angles bin +m
        let bin = if dir > 0.0 { -m } else { m }.rem_euclid(p as i64) as usize;
        let rot = Complex64::from_polar(scale, m as f64 * offset);
        for kk in 0..k {
            out[[row, kk]] = buf[kk * p + bin] * rot;
        }
    }
    Ok(out)
}

/// Inverse filters `W_m(f) = 2 / (j^m (J_m(x) - j J'_m(x)))`, `x = 2 pi f r / c`.
#[derive(Debug, Clone)]
pub struct FilterBank {
    radius: f64,
    values: Array2<Complex64>,
    mask: Array2<bool>,
    freq: FrequencyGrid,
}

impl FilterBank {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn mode_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn freq(&self) -> &FrequencyGrid {
        &self.freq
    }

    /// Filter values; masked entries are exactly zero.
    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    /// `true` where the filter is kept.
    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&keep| !keep).count()
    }

    pub fn is_masked(&self, m: i64, k: usize) -> bool {
        row_of_mode(m, self.mode_count()).is_some_and(|row| !self.mask[[row, k]])
    }

    pub fn get(&self, m: i64, k: usize) -> Option<Complex64> {
        row_of_mode(m, self.mode_count()).map(|row| self.values[[row, k]])
    }
}

/// Denominator `j^m (J_m - j J'_m) / 2` for `m = 0 ..= max_mode` at one argument.
fn half_denominators(x: f64, max_mode: usize) -> Result<Vec<Complex64>> {
    let seq = bessel_j_sequence(x, max_mode + 1)?;
    Ok((0..=max_mode)
        .map(|m| {
            let jm = seq.get(m);
            let djm = if x == 0.0 {
                if m == 1 {
                    0.5
                } else {
                    0.0
                }
            } else {
                seq.derivative(m)
            };
            0.5 * j_pow(m as i64) * Complex64::new(jm, -djm)
        })
        .collect())
}

pub fn build_filter_bank(radius: f64, freq: &FrequencyGrid, modes: usize, magnitude_cap_db: f64) -> Result<FilterBank> {
    check_mode_count(modes)?;
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Domain(format!("filter radius must be positive, got {radius}")));
    }
    let half = modes / 2;
    let k = freq.count();
    let mut values = Array2::<Complex64>::zeros((modes, k));
    for kk in 0..k {
        let x = TAU * freq.frequency(kk) * radius / SPEED_OF_LIGHT;
        let den = half_denominators(x, half)?;
        for row in 0..modes {
            // W_{-m} = W_m: J_{-m} = (-1)^m J_m and j^{-m} = (-1)^m j^m
            let m = mode_of_row(row, modes).unsigned_abs() as usize;
            values[[row, kk]] = if den[m].norm() > 0.0 {
                Complex64::new(1.0, 0.0) / den[m]
            } else {
                Complex64::new(f64::INFINITY, 0.0)
            };
        }
    }

    let mut mags: Vec<f64> = values.iter().map(|v| v.norm()).filter(|v| v.is_finite()).collect();
    let threshold = if mags.is_empty() {
        0.0
    } else {
        let mid = mags.len() / 2;
        let (_, median, _) = mags.select_nth_unstable_by(mid, f64::total_cmp);
        *median * 10f64.powf(magnitude_cap_db / 20.0)
    };
    let mask = values.mapv(|v| v.norm() <= threshold);
    for (v, keep) in values.iter_mut().zip(mask.iter()) {
        if !keep {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    Ok(FilterBank {
        radius,
        values,
        mask,
        freq: *freq,
    })
}

fn radius_key(r: f64) -> i64 {
    (r * 1e12).round() as i64
}

/// Filter banks for every distinct XY-ring radius of the grid.
pub fn xy_filter_banks(
    grid: &SampleGrid,
    freq: &FrequencyGrid,
    modes: usize,
    magnitude_cap_db: f64,
) -> Result<BTreeMap<i64, Arc<FilterBank>>> {
    let mut radii = BTreeMap::new();
    for q in 0..grid.samples() {
        let r = grid.xy_radius(q);
        radii.entry(radius_key(r)).or_insert(r);
    }
    let banks = radii
        .par_iter()
        .map(|(&key, &r)| Ok((key, Arc::new(build_filter_bank(r, freq, modes, magnitude_cap_db)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(banks.into_iter().collect())
}

fn check_weights(weights: &[f64], rings: usize) -> Result<()> {
    if weights.len() != rings {
        return Err(Error::Usage(format!("{} weights for {rings} rings", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Precondition(
            "ring weights must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("ring weights must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Weighted average over all XY rings of the filtered phase-mode spectra.
/// `weights` defaults to `1/P` per ring.
pub fn azimuth_spectrum(
    tensor: &ChannelTensor,
    modes: usize,
    weights: Option<&[f64]>,
    magnitude_cap_db: f64,
) -> Result<PhaseModeSpectrum> {
    azimuth_spectrum_with(tensor, modes, weights, magnitude_cap_db, false)
}

/// [`azimuth_spectrum`] with the aliasing switch of [`expand_ring_with`].
pub fn azimuth_spectrum_with(
    tensor: &ChannelTensor,
    modes: usize,
    weights: Option<&[f64]>,
    magnitude_cap_db: f64,
    allow_aliasing: bool,
) -> Result<PhaseModeSpectrum> {
    check_mode_count(modes)?;
    let grid = tensor.grid();
    let p = grid.samples();
    if modes > p && !allow_aliasing {
        return Err(Error::Aliasing { modes, samples: p });
    }
    let uniform = vec![1.0 / p as f64; p];
    let weights = weights.unwrap_or(&uniform);
    check_weights(weights, p)?;
    let freq = *tensor.freq();
    let banks = xy_filter_banks(grid, &freq, modes, magnitude_cap_db)?;

    let chunks: Vec<Array2<Complex64>> = (0..p.div_ceil(RING_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Array2::<Complex64>::zeros((modes, freq.count()));
            for q in c * RING_CHUNK..((c + 1) * RING_CHUNK).min(p) {
                let w = weights[q];
                if w == 0.0 {
                    continue;
                }
                let ring = grid.xy_ring(q);
                let slice = tensor.ring_slice(&ring)?;
                let raw = expand_ring_with(slice.view(), &ring.node_angles, modes, allow_aliasing)?;
                let bank = &banks[&radius_key(ring.radius)];
                ndarray::Zip::from(&mut acc)
                    .and(&raw)
                    .and(bank.values())
                    .for_each(|a, &h, &f| *a += h * f * w);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut total = Array2::<Complex64>::zeros((modes, freq.count()));
    for c in chunks {
        total += &c;
    }
    PhaseModeSpectrum::new(total, freq)
}

/// Filtered spectrum of one uniformly sampled circle of radius `radius`;
/// `responses` has one row per sample at azimuth `2 pi p / P`.
pub fn circle_spectrum(
    responses: ArrayView2<Complex64>,
    radius: f64,
    freq: &FrequencyGrid,
    modes: usize,
    magnitude_cap_db: f64,
) -> Result<PhaseModeSpectrum> {
    let p = responses.nrows();
    let angles: Vec<f64> = (0..p).map(|i| TAU * i as f64 / p as f64).collect();
    let raw = expand_ring(responses, &angles, modes)?;
    let bank = build_filter_bank(radius, freq, modes, magnitude_cap_db)?;
    PhaseModeSpectrum::new(raw * bank.values(), *freq)
}

/// Angle/time grid `D(phi_i, tau_n) = sum_m sum_k H_m(f_k) e^{-j m phi_i} e^{+j 2 pi f_k tau_n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagram {
    values: Array2<Complex64>,
    modes: usize,
    pad_angle: usize,
    pad_time: usize,
    freq: FrequencyGrid,
}

impl Diagram {
    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn angle_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn time_bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn mode_count(&self) -> usize {
        self.modes
    }

    pub fn pad_angle(&self) -> usize {
        self.pad_angle
    }

    pub fn pad_time(&self) -> usize {
        self.pad_time
    }

    pub fn freq(&self) -> &FrequencyGrid {
        &self.freq
    }

    /// Width of one angle bin, radians.
    pub fn angle_step(&self) -> f64 {
        TAU / self.angle_bins() as f64
    }

    /// Width of one time bin, seconds.
    pub fn time_step(&self) -> f64 {
        1.0 / (self.pad_time as f64 * self.freq.bandwidth())
    }

    pub fn angle(&self, bin: f64) -> f64 {
        bin * self.angle_step()
    }

    pub fn time(&self, bin: f64) -> f64 {
        bin * self.time_step()
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.angle_bins()).map(|i| self.angle(i as f64)).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.time_bins()).map(|n| self.time(n as f64)).collect()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm())
    }

    /// Magnitude in dB relative to the peak, floored at -300 dB.
    pub fn magnitude_db(&self) -> Array2<f64> {
        let mags = self.magnitudes();
        let peak = mags.iter().copied().fold(0.0, f64::max);
        mags.mapv(|v| {
            if peak > 0.0 && v > 0.0 {
                (20.0 * (v / peak).log10()).max(-300.0)
            } else {
                -300.0
            }
        })
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }
}

pub fn diagram_2d(spectrum: &PhaseModeSpectrum, pad_angle: usize, pad_time: usize) -> Result<Diagram> {
    if pad_angle == 0 || pad_time == 0 {
        return Err(Error::Usage("pad factors must be at least 1".into()));
    }
    let modes = spectrum.mode_count();
    let k = spectrum.freq().count();
    let m_pad = modes * pad_angle;
    let k_pad = k * pad_time;
    let mut planner = FftPlanner::<f64>::new();

    // angle axis: one forward transform per frequency column
    let mut cols = vec![Complex64::new(0.0, 0.0); k * m_pad];
    for row in 0..modes {
        let bin = mode_of_row(row, modes).rem_euclid(m_pad as i64) as usize;
        for kk in 0..k {
            cols[kk * m_pad + bin] = spectrum.values()[[row, kk]];
        }
    }
    planner.plan_fft_forward(m_pad).process(&mut cols);

    // time axis: unnormalized inverse transform per angle row
    let mut rows = vec![Complex64::new(0.0, 0.0); m_pad * k_pad];
    for i in 0..m_pad {
        for kk in 0..k {
            rows[i * k_pad + kk] = cols[kk * m_pad + i];
        }
    }
    planner.plan_fft_inverse(k_pad).process(&mut rows);

    let dt = 1.0 / (pad_time as f64 * spectrum.freq().bandwidth());
    let f_min = spectrum.freq().f_min();
    let shift: Vec<Complex64> = (0..k_pad)
        .map(|n| {
            let cycles = (f_min * n as f64 * dt).rem_euclid(1.0);
            Complex64::from_polar(1.0, TAU * cycles)
        })
        .collect();
    for row in rows.chunks_mut(k_pad) {
        for (v, s) in row.iter_mut().zip(&shift) {
            *v *= s;
        }
    }
    let values = Array2::from_shape_vec((m_pad, k_pad), rows).expect("shape matches buffer");
    Ok(Diagram {
        values,
        modes,
        pad_angle,
        pad_time,
        freq: *spectrum.freq(),
    })
}
