//! Two-stage estimation and the successive-subtraction multipath loop.
//!
//! Per wave: the averaged XY-ring spectrum gives an azimuth/time diagram
//! whose peak fixes `phi`; the vertical ring nearest that azimuth gives an
//! elevation/time diagram whose peak fixes `theta` and the delay to the tube
//! center, which is then shifted to the torus center. The wave is fitted,
//! synthesized and subtracted before the next iteration.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::{ChannelTensor, FrequencyGrid, PropagationModel, Wave};
use crate::error::{Error, Result};
use crate::geometry::{select_phi_ring, Point3, RingKind, RingView, SPEED_OF_LIGHT};
use crate::phasemode::{
    azimuth_spectrum_with, build_filter_bank, diagram_2d, expand_ring_with, Diagram, PhaseModeSpectrum,
    DEFAULT_MAGNITUDE_CAP_DB,
};

/// Upper bound reported by [`delta_metric`] when nothing lies outside the
/// exclusion zone.
pub const DELTA_CAP_DB: f64 = 300.0;

/// Artifacts below this fraction of the peak count as numerically zero.
const NUMERICAL_ZERO: f64 = 1e-14;

/// Level below the azimuth peak that delimits its lobe.
const LOBE_DROP_DB: f64 = 3.0;

/// Rings per parallel task in the projection passes.
const RING_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveEstimate {
    pub phi_hat: f64,
    pub theta_hat: f64,
    /// Delay to the torus center.
    pub tau_hat: f64,
    /// Delay read from the elevation diagram.
    pub tau_at_tube: f64,
    /// Delay read from the azimuth diagram.
    pub tau_azimuth: f64,
    pub amplitude_hat: Complex64,
    pub delta_azimuth: f64,
    pub delta_elevation: f64,
    /// Locally refined parameters and amplitude used for subtraction, when
    /// refinement is enabled and converged near the diagram estimate.
    pub refined: Option<Wave>,
}

impl WaveEstimate {
    /// The wave as read from the diagrams.
    pub fn diagram_wave(&self) -> Wave {
        Wave::new(self.phi_hat, self.theta_hat, self.tau_hat, self.amplitude_hat)
    }

    /// The wave that is subtracted: refined if available.
    pub fn subtraction_wave(&self) -> Wave {
        self.refined.unwrap_or_else(|| self.diagram_wave())
    }
}

/// Half-widths of the zone around a peak that the artifact search skips.
///
/// The zone is a cross: every bin within `angle_bins` of the peak angle (at
/// any time) and every bin within `time_bins` of the peak time (at any
/// angle). Angle wraps, time clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExclusionWindow {
    pub angle_bins: usize,
    pub time_bins: usize,
}

impl ExclusionWindow {
    /// Two resolution cells per axis at the given pad factors.
    pub fn default_for(pad_angle: usize, pad_time: usize) -> Self {
        Self {
            angle_bins: 2 * pad_angle,
            time_bins: 2 * pad_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Mode count `M` (even).
    pub modes: usize,
    /// Number of waves `L` to extract.
    pub waves: usize,
    /// Per-XY-ring weights summing to 1; uniform when `None`.
    pub weights: Option<Vec<f64>>,
    pub pad_angle: usize,
    pub pad_time: usize,
    pub exclusion: ExclusionWindow,
    /// Widen the azimuth-stage time exclusion by the tube delay spread
    /// `2 rho / c`, over which the averaged rings smear the peak.
    pub dispersion_guard: bool,
    pub magnitude_cap_db: f64,
    /// Wave model for reading the vertical ring and for the subtracted wave.
    pub subtraction_model: PropagationModel,
    pub gamma: f64,
    /// Least-squares refinement of each wave before subtraction.
    pub refine: bool,
    /// Accept more modes than ring samples (aliased modes) instead of
    /// failing; used to study undersampled arrays.
    pub allow_mode_aliasing: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            modes: 300,
            waves: 1,
            weights: None,
            pad_angle: 4,
            pad_time: 4,
            exclusion: ExclusionWindow::default_for(4, 4),
            dispersion_guard: true,
            magnitude_cap_db: DEFAULT_MAGNITUDE_CAP_DB,
            subtraction_model: PropagationModel::Spherical,
            gamma: 2.0,
            refine: true,
            allow_mode_aliasing: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.waves == 0 {
            return Err(Error::Usage("wave count L must be at least 1".into()));
        }
        if self.exclusion.angle_bins == 0 || self.exclusion.time_bins == 0 {
            return Err(Error::Usage(
                "exclusion window must cover at least 1 bin per axis".into(),
            ));
        }
        if self.pad_angle == 0 || self.pad_time == 0 {
            return Err(Error::Usage("pad factors must be at least 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Precondition("path-loss exponent must be >= 0".into()));
        }
        Ok(())
    }
}

/// Maximum of a diagram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub angle_bin: usize,
    pub time_bin: usize,
    /// Interpolated angle, radians in `[0, 2 pi)`.
    pub angle: f64,
    /// Interpolated time, seconds.
    pub time: f64,
    /// Bin magnitude in dB (not interpolated).
    pub power_db: f64,
}

fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let curvature = left - 2.0 * center + right;
    if curvature >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / curvature).clamp(-0.5, 0.5)
}

/// Largest-magnitude bin; ties go to the lower time bin, then the lower
/// angle bin. The location is refined by a quadratic through the
/// neighbours along each axis.
pub fn peak_find(diagram: &Diagram) -> Result<Peak> {
    let mags = diagram.magnitudes();
    let (na, nt) = mags.dim();
    let mut best = (0, 0);
    let mut best_val = 0.0;
    for n in 0..nt {
        for i in 0..na {
            if mags[[i, n]] > best_val {
                best_val = mags[[i, n]];
                best = (i, n);
            }
        }
    }
    if !(best_val > 0.0) {
        return Err(Error::NoPeak);
    }
    let (i, n) = best;
    let da = if na >= 3 {
        parabolic_offset(mags[[(i + na - 1) % na, n]], best_val, mags[[(i + 1) % na, n]])
    } else {
        0.0
    };
    let dt = if n > 0 && n + 1 < nt {
        parabolic_offset(mags[[i, n - 1]], best_val, mags[[i, n + 1]])
    } else {
        0.0
    };
    Ok(Peak {
        angle_bin: i,
        time_bin: n,
        angle: diagram.angle(i as f64 + da).rem_euclid(TAU),
        time: diagram.time(n as f64 + dt),
        power_db: 20.0 * best_val.log10(),
    })
}

/// Peak level minus the largest level outside the exclusion zone, in dB.
pub fn delta_metric(diagram: &Diagram, peak: &Peak, exclusion: ExclusionWindow) -> Result<f64> {
    let mags = diagram.magnitudes();
    let (na, nt) = mags.dim();
    if peak.angle_bin >= na || peak.time_bin >= nt {
        return Err(Error::Usage("peak lies outside the diagram".into()));
    }
    let all_times = peak.time_bin <= exclusion.time_bins && peak.time_bin + exclusion.time_bins + 1 >= nt;
    if 2 * exclusion.angle_bins + 1 >= na || all_times {
        return Err(Error::Usage(format!(
            "exclusion (+-{} angle, +-{} time bins) leaves nothing of a {na} x {nt} diagram",
            exclusion.angle_bins, exclusion.time_bins
        )));
    }
    let angle_excluded = |i: usize| {
        let d = (i as isize - peak.angle_bin as isize).rem_euclid(na as isize) as usize;
        d.min(na - d) <= exclusion.angle_bins
    };
    let time_excluded = |n: usize| n.abs_diff(peak.time_bin) <= exclusion.time_bins;
    let mut artifact = 0.0f64;
    for ((i, n), &v) in mags.indexed_iter() {
        if !angle_excluded(i) && !time_excluded(n) {
            artifact = artifact.max(v);
        }
    }
    let top = mags[[peak.angle_bin, peak.time_bin]];
    if artifact <= NUMERICAL_ZERO * top {
        return Ok(DELTA_CAP_DB);
    }
    Ok((20.0 * (top / artifact).log10()).min(DELTA_CAP_DB))
}

/// Center of the lobe around `peak` along the angle axis at the peak time:
/// midpoint of the two crossings of `drop_db` below the peak. For an
/// elevated source the horizontal-ring lobe can split into a symmetric pair;
/// the midpoint then still lands on the arrival azimuth. Falls back to the
/// peak angle if the level never drops that far.
pub fn lobe_center(diagram: &Diagram, peak: &Peak, drop_db: f64) -> f64 {
    let mags = diagram.magnitudes();
    let na = mags.dim().0;
    let n = peak.time_bin;
    let top = mags[[peak.angle_bin, n]];
    let level = top * 10f64.powf(-drop_db / 20.0);
    let at = |k: isize| mags[[k.rem_euclid(na as isize) as usize, n]];
    let crossing = |dir: isize| -> Option<f64> {
        let mut prev = top;
        for step in 1..na as isize {
            let v = at(peak.angle_bin as isize + dir * step);
            if v < level {
                let frac = (prev - level) / (prev - v);
                return Some(dir as f64 * (step as f64 - 1.0 + frac));
            }
            prev = v;
        }
        None
    };
    match (crossing(-1), crossing(1)) {
        (Some(lo), Some(hi)) => diagram.angle(peak.angle_bin as f64 + 0.5 * (lo + hi)).rem_euclid(TAU),
        _ => peak.angle,
    }
}

/// Arrival elevation and torus-center delay from what the vertical ring
/// sees at its center, a distance `R` out along the arrival azimuth.
/// Spherical sources are located exactly (the ring views them with
/// parallax); plane waves only need the delay shift.
pub fn locate_from_ring(
    tau_at_ring: f64,
    theta_at_ring: f64,
    major_radius: f64,
    model: PropagationModel,
) -> (f64, f64) {
    match model {
        PropagationModel::Plane => (theta_at_ring, tau_correction(tau_at_ring, theta_at_ring, major_radius)),
        PropagationModel::Spherical => {
            let d = SPEED_OF_LIGHT * tau_at_ring;
            let horizontal = major_radius + d * theta_at_ring.sin();
            let vertical = d * theta_at_ring.cos();
            (horizontal.atan2(vertical), horizontal.hypot(vertical) / SPEED_OF_LIGHT)
        }
    }
}

/// Filtered phase-mode spectrum of one vertical ring.
pub fn elevation_spectrum(
    tensor: &ChannelTensor,
    ring: &RingView,
    modes: usize,
    magnitude_cap_db: f64,
) -> Result<PhaseModeSpectrum> {
    elevation_spectrum_with(tensor, ring, modes, magnitude_cap_db, false)
}

pub fn elevation_spectrum_with(
    tensor: &ChannelTensor,
    ring: &RingView,
    modes: usize,
    magnitude_cap_db: f64,
    allow_aliasing: bool,
) -> Result<PhaseModeSpectrum> {
    if ring.kind != RingKind::Phi {
        return Err(Error::Usage("elevation stage needs a vertical (phi) ring".into()));
    }
    let slice = tensor.ring_slice(ring)?;
    let raw = expand_ring_with(slice.view(), &ring.node_angles, modes, allow_aliasing)?;
    let bank = build_filter_bank(ring.radius, tensor.freq(), modes, magnitude_cap_db)?;
    PhaseModeSpectrum::new(raw * bank.values(), *tensor.freq())
}

/// Delay at the torus center from the delay at the tube center.
pub fn tau_correction(tau_at_tube: f64, theta_hat: f64, major_radius: f64) -> f64 {
    tau_at_tube + major_radius * theta_hat.sin().abs() / SPEED_OF_LIGHT
}

/// Tube angle folded into arrival elevation `[0, pi]`.
pub fn fold_elevation(psi: f64) -> f64 {
    let psi = psi.rem_euclid(TAU);
    if psi <= PI {
        psi
    } else {
        TAU - psi
    }
}

/// Sums over the tensor needed to project onto one wave's signature and,
/// optionally, to take a Gauss-Newton step in `(phi, theta, tau)`.
#[derive(Debug, Clone, Copy, Default)]
struct ProjectionStats {
    /// `<s, s>`
    ss: f64,
    /// `<s, h>`
    sh: Complex64,
    /// `<ds_i, h>`
    dh: [Complex64; 3],
    /// `<ds_i, s>`
    ds: [Complex64; 3],
    /// `<ds_i, ds_j>`
    dd: [[Complex64; 3]; 3],
}

impl ProjectionStats {
    fn add(&mut self, o: &ProjectionStats) {
        self.ss += o.ss;
        self.sh += o.sh;
        for i in 0..3 {
            self.dh[i] += o.dh[i];
            self.ds[i] += o.ds[i];
            for j in 0..3 {
                self.dd[i][j] += o.dd[i][j];
            }
        }
    }

    fn amplitude(&self) -> Complex64 {
        self.sh / self.ss
    }

    /// `|<s, h>|² / <s, s>`: the energy captured by the best-scaled signature.
    fn captured(&self) -> f64 {
        self.sh.norm_sqr() / self.ss
    }
}

/// Per-sample signature `g exp(-j 2 pi f t)` and its log-derivatives
/// `d ln s / d xi = alpha_xi + beta_xi f` for `xi = (phi, theta, tau)`.
struct SampleModel {
    gain: f64,
    delay: f64,
    alpha: [f64; 3],
    beta: [Complex64; 3],
}

fn sample_model(pos: &Point3, wave: &Wave, model: PropagationModel, gamma: f64) -> SampleModel {
    let (st, ct) = wave.theta.sin_cos();
    let (sp, cp) = wave.phi.sin_cos();
    let u = [st * cp, st * sp, ct];
    let du_dphi = [-st * sp, st * cp, 0.0];
    let du_dtheta = [ct * cp, ct * sp, -st];
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let to_beta = |d_delay: f64| Complex64::new(0.0, -TAU * d_delay);
    match model {
        PropagationModel::Spherical => {
            let d = SPEED_OF_LIGHT * wave.tau;
            let v = [d * u[0] - pos[0], d * u[1] - pos[1], d * u[2] - pos[2]];
            let dp = dot(&v, &v).sqrt();
            // derivatives of d_p along the source displacement
            let ddp = [
                d * dot(&v, &du_dphi) / dp,
                d * dot(&v, &du_dtheta) / dp,
                SPEED_OF_LIGHT * dot(&v, &u) / dp,
            ];
            let h = 0.5 * gamma;
            SampleModel {
                gain: (d / dp).powf(h),
                delay: dp / SPEED_OF_LIGHT,
                alpha: [-h * ddp[0] / dp, -h * ddp[1] / dp, h * (1.0 / wave.tau - ddp[2] / dp)],
                beta: [
                    to_beta(ddp[0] / SPEED_OF_LIGHT),
                    to_beta(ddp[1] / SPEED_OF_LIGHT),
                    to_beta(ddp[2] / SPEED_OF_LIGHT),
                ],
            }
        }
        PropagationModel::Plane => SampleModel {
            gain: 1.0,
            delay: wave.tau - dot(&u, pos) / SPEED_OF_LIGHT,
            alpha: [0.0; 3],
            beta: [
                to_beta(-dot(&du_dphi, pos) / SPEED_OF_LIGHT),
                to_beta(-dot(&du_dtheta, pos) / SPEED_OF_LIGHT),
                to_beta(1.0),
            ],
        },
    }
}

fn projection_stats(
    tensor: &ChannelTensor,
    wave: &Wave,
    model: PropagationModel,
    gamma: f64,
    derivatives: bool,
) -> Result<ProjectionStats> {
    let grid = tensor.grid();
    let freq: FrequencyGrid = *tensor.freq();
    let p = grid.samples();
    let kf = freq.count() as f64;
    let f1: f64 = freq.frequencies().iter().sum();
    let f2: f64 = freq.frequencies().iter().map(|f| f * f).sum();

    let chunks: Vec<ProjectionStats> = (0..p.div_ceil(RING_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = ProjectionStats::default();
            for ip in c * RING_CHUNK..((c + 1) * RING_CHUNK).min(p) {
                let ring = grid.phi_ring(ip);
                let slice = tensor.ring_slice(&ring)?;
                for (row, &(pp, qq)) in slice.rows().into_iter().zip(&ring.sample_indices) {
                    let sm = sample_model(&grid.position(pp, qq), wave, model, gamma);
                    // conj(s_k) = g exp(+j 2 pi f_k t)
                    let start = (freq.f_min() * sm.delay).rem_euclid(1.0);
                    let step = (freq.spacing() * sm.delay).rem_euclid(1.0);
                    let rot = Complex64::from_polar(1.0, TAU * step);
                    let mut ph = Complex64::from_polar(sm.gain, TAU * start);
                    let mut a0 = Complex64::new(0.0, 0.0);
                    let mut a1 = Complex64::new(0.0, 0.0);
                    for (k, h) in row.iter().enumerate() {
                        let t = ph * h;
                        a0 += t;
                        if derivatives {
                            a1 += t * freq.frequency(k);
                        }
                        ph *= rot;
                    }
                    let g2 = sm.gain * sm.gain;
                    acc.ss += g2 * kf;
                    acc.sh += a0;
                    if derivatives {
                        for i in 0..3 {
                            let bi = sm.beta[i].conj();
                            acc.dh[i] += sm.alpha[i] * a0 + bi * a1;
                            acc.ds[i] += g2 * (sm.alpha[i] * kf + bi * f1);
                            for j in 0..3 {
                                let (ai, aj, bj) = (sm.alpha[i], sm.alpha[j], sm.beta[j]);
                                acc.dd[i][j] += g2 * (ai * aj * kf + (ai * bj + bi * aj) * f1 + bi * bj * f2);
                            }
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = ProjectionStats::default();
    for c in &chunks {
        total.add(c);
    }
    Ok(total)
}

/// Least-squares amplitude of `wave` (its own amplitude is ignored):
/// `<s, h> / <s, s>` with `s` the unit-amplitude signature.
pub fn estimate_amplitude(
    tensor: &ChannelTensor,
    wave: &Wave,
    model: PropagationModel,
    gamma: f64,
) -> Result<Complex64> {
    if !(wave.phi.is_finite() && wave.theta.is_finite() && wave.tau.is_finite()) {
        return Err(Error::Precondition("wave parameters must be finite".into()));
    }
    let unit = Wave::unit(wave.phi, wave.theta, wave.tau);
    let stats = projection_stats(tensor, &unit, model, gamma, false)?;
    if !(stats.ss > 0.0) || !stats.ss.is_finite() {
        return Err(Error::Degenerate);
    }
    Ok(stats.amplitude())
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if !(m[piv][col].abs() > 0.0) {
            return None;
        }
        m.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for c in col..4 {
                    m[row][c] -= f * m[col][c];
                }
            }
        }
    }
    let x = [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]];
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Search limits for [`refine_wave`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineLimits {
    pub max_angle_shift: f64,
    pub max_tau_shift: f64,
    pub max_iterations: usize,
}

/// Local least-squares fit of one wave's `(phi, theta, tau)` and amplitude
/// to the tensor, started at `start` (Levenberg-Marquardt on the projected
/// residual). Returns `None` if the fit leaves the allowed neighbourhood or
/// does not improve on the start.
pub fn refine_wave(
    tensor: &ChannelTensor,
    start: &Wave,
    model: PropagationModel,
    gamma: f64,
    limits: RefineLimits,
) -> Result<Option<Wave>> {
    let mut x = [start.phi, start.theta, start.tau];
    let make = |x: &[f64; 3]| Wave::unit(x[0], x[1], x[2]);
    let mut stats = projection_stats(tensor, &make(&x), model, gamma, true)?;
    if !(stats.ss > 0.0) {
        return Err(Error::Degenerate);
    }
    let initial = stats.captured();
    let mut lambda = 1e-3;
    for _ in 0..limits.max_iterations {
        let a = stats.amplitude();
        let mut n = [[0.0; 3]; 3];
        let mut g = [0.0; 3];
        for i in 0..3 {
            g[i] = (a.conj() * (stats.dh[i] - a * stats.ds[i])).re;
            for j in 0..3 {
                let proj = stats.dd[i][j] - stats.ds[i] * stats.ds[j].conj() / stats.ss;
                n[i][j] = a.norm_sqr() * proj.re;
            }
        }
        let mut accepted = false;
        while lambda < 1e6 {
            let mut damped = n;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] = n[i][i] * (1.0 + lambda);
            }
            let Some(step) = solve3(damped, g) else { break };
            let cand = [x[0] + step[0], x[1] + step[1], x[2] + step[2]];
            if !(cand[2] * SPEED_OF_LIGHT > tensor.grid().geometry().outer_radius()) {
                lambda *= 10.0;
                continue;
            }
            let cs = projection_stats(tensor, &make(&cand), model, gamma, true)?;
            if cs.captured() > stats.captured() {
                let small = step[0].abs() < 1e-9 && step[1].abs() < 1e-9 && step[2].abs() < 1e-17;
                x = cand;
                stats = cs;
                lambda = (lambda * 0.1).max(1e-9);
                accepted = true;
                if small {
                    return Ok(finish(x, &stats, start, limits, initial));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(finish(x, &stats, start, limits, initial))
}

fn finish(x: [f64; 3], stats: &ProjectionStats, start: &Wave, limits: RefineLimits, initial: f64) -> Option<Wave> {
    let dphi = (x[0] - start.phi + PI).rem_euclid(TAU) - PI;
    if dphi.abs() > limits.max_angle_shift
        || (x[1] - start.theta).abs() > limits.max_angle_shift
        || (x[2] - start.tau).abs() > limits.max_tau_shift
        || stats.captured() < initial
    {
        return None;
    }
    let (phi, theta) = if x[1] < 0.0 {
        (x[0] + PI, -x[1])
    } else if x[1] > PI {
        (x[0] + PI, TAU - x[1])
    } else {
        (x[0], x[1])
    };
    Some(Wave::new(phi.rem_euclid(TAU), theta, x[2], stats.amplitude()))
}

/// `tensor` minus the synthesized estimate (refined wave when present).
pub fn subtract_wave(
    tensor: &ChannelTensor,
    estimate: &WaveEstimate,
    model: PropagationModel,
    gamma: f64,
) -> Result<ChannelTensor> {
    tensor.minus_waves(&[estimate.subtraction_wave()], model, gamma)
}

/// One stage's spectrum, diagram and peak.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub spectrum: PhaseModeSpectrum,
    pub diagram: Diagram,
    pub peak: Peak,
    pub delta: f64,
}

/// Time-bin half-width covering the delay spread `2 rho / c` of the XY rings.
pub fn dispersion_bins(tube_radius: f64, freq: &FrequencyGrid, pad_time: usize) -> usize {
    (2.0 * tube_radius / SPEED_OF_LIGHT * pad_time as f64 * freq.bandwidth()).ceil() as usize
}

pub fn azimuth_stage(tensor: &ChannelTensor, config: &EstimatorConfig) -> Result<StageResult> {
    let spectrum = azimuth_spectrum_with(
        tensor,
        config.modes,
        config.weights.as_deref(),
        config.magnitude_cap_db,
        config.allow_mode_aliasing,
    )?;
    let diagram = diagram_2d(&spectrum, config.pad_angle, config.pad_time)?;
    let peak = peak_find(&diagram)?;
    let mut window = config.exclusion;
    if config.dispersion_guard {
        window.time_bins += dispersion_bins(tensor.grid().geometry().tube_radius(), tensor.freq(), config.pad_time);
    }
    let delta = delta_metric(&diagram, &peak, window)?;
    Ok(StageResult {
        spectrum,
        diagram,
        peak,
        delta,
    })
}

pub fn elevation_stage(tensor: &ChannelTensor, phi_hat: f64, config: &EstimatorConfig) -> Result<StageResult> {
    let ring = select_phi_ring(tensor.grid(), phi_hat);
    let spectrum = elevation_spectrum_with(
        tensor,
        &ring,
        config.modes,
        config.magnitude_cap_db,
        config.allow_mode_aliasing,
    )?;
    let diagram = diagram_2d(&spectrum, config.pad_angle, config.pad_time)?;
    let peak = peak_find(&diagram)?;
    let delta = delta_metric(&diagram, &peak, config.exclusion)?;
    Ok(StageResult {
        spectrum,
        diagram,
        peak,
        delta,
    })
}

/// One extraction with the diagrams that produced it.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub estimate: WaveEstimate,
    pub azimuth: StageResult,
    pub elevation: StageResult,
}

/// Estimates the strongest wave in `tensor`.
pub fn extract_wave(tensor: &ChannelTensor, config: &EstimatorConfig) -> Result<Extraction> {
    let azimuth = azimuth_stage(tensor, config)?;
    let phi_hat = lobe_center(&azimuth.diagram, &azimuth.peak, LOBE_DROP_DB);
    let elevation = elevation_stage(tensor, phi_hat, config)?;
    let tau_at_tube = elevation.peak.time;
    let major = tensor.grid().geometry().major_radius();
    let (theta_hat, tau_hat) = locate_from_ring(
        tau_at_tube,
        fold_elevation(elevation.peak.angle),
        major,
        config.subtraction_model,
    );
    let diagram_wave = Wave::unit(phi_hat, theta_hat, tau_hat);

    let refined = if config.refine {
        let cell_angle = TAU / config.modes as f64;
        let limits = RefineLimits {
            max_angle_shift: 2.0 * cell_angle,
            max_tau_shift: 2.0 / tensor.freq().bandwidth(),
            max_iterations: 30,
        };
        refine_wave(tensor, &diagram_wave, config.subtraction_model, config.gamma, limits)?
    } else {
        None
    };
    let amplitude_hat = match refined {
        Some(w) => w.amplitude,
        None => estimate_amplitude(tensor, &diagram_wave, config.subtraction_model, config.gamma)?,
    };
    Ok(Extraction {
        estimate: WaveEstimate {
            phi_hat,
            theta_hat,
            tau_hat,
            tau_at_tube,
            tau_azimuth: azimuth.peak.time,
            amplitude_hat,
            delta_azimuth: azimuth.delta,
            delta_elevation: elevation.delta,
            refined,
        },
        azimuth,
        elevation,
    })
}

/// Successive extraction and subtraction of `config.waves` waves. Also
/// returns the residual tensor.
pub fn estimate_multipath_detailed(
    tensor: &ChannelTensor,
    config: &EstimatorConfig,
) -> Result<(Vec<Extraction>, ChannelTensor)> {
    config.validate()?;
    let mut residual = tensor.clone();
    let mut done: Vec<Extraction> = Vec::with_capacity(config.waves);
    for _ in 0..config.waves {
        let ex = match extract_wave(&residual, config) {
            Ok(ex) => ex,
            Err(e) if done.is_empty() => return Err(e),
            Err(e) => {
                return Err(Error::Partial {
                    completed: done.into_iter().map(|x| x.estimate).collect(),
                    source: Box::new(e),
                })
            }
        };
        residual = subtract_wave(&residual, &ex.estimate, config.subtraction_model, config.gamma)?;
        done.push(ex);
    }
    Ok((done, residual))
}

pub fn estimate_multipath(tensor: &ChannelTensor, config: &EstimatorConfig) -> Result<Vec<WaveEstimate>> {
    Ok(estimate_multipath_detailed(tensor, config)?
        .0
        .into_iter()
        .map(|x| x.estimate)
        .collect())
}

/// Which axis of the diagram is held fixed in a gain cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutAxis {
    /// Fixed time (seconds): gain versus angle.
    Time(f64),
    /// Fixed angle (radians): gain versus time.
    Angle(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainCut {
    /// Angles (radians) or times (seconds) along the cut.
    pub axis: Vec<f64>,
    /// Magnitude in dB, 0 dB at the cut maximum, floored at -300 dB.
    pub gain_db: Vec<f64>,
}

/// Row or column of the spectrum's diagram through the bin nearest `fixed`.
pub fn array_gain_cut(
    spectrum: &PhaseModeSpectrum,
    fixed: CutAxis,
    pad_angle: usize,
    pad_time: usize,
) -> Result<GainCut> {
    let diagram = diagram_2d(spectrum, pad_angle, pad_time)?;
    let mags = diagram.magnitudes();
    let (axis, line): (Vec<f64>, Vec<f64>) = match fixed {
        CutAxis::Time(t) => {
            let last = diagram.time((diagram.time_bins() - 1) as f64);
            if !(0.0..=last).contains(&t) {
                return Err(Error::Domain(format!("time {t} s outside [0, {last}] s")));
            }
            let n = (t / diagram.time_step()).round() as usize;
            (diagram.angles(), mags.column(n).to_vec())
        }
        CutAxis::Angle(a) => {
            if !a.is_finite() {
                return Err(Error::Domain("cut angle must be finite".into()));
            }
            let i = (a.rem_euclid(TAU) / diagram.angle_step()).round() as usize % diagram.angle_bins();
            (diagram.times(), mags.row(i).to_vec())
        }
    };
    let peak = line.iter().copied().fold(0.0, f64::max);
    let gain_db = line
        .iter()
        .map(|&v| {
            if peak > 0.0 && v > 0.0 {
                (20.0 * (v / peak).log10()).max(-300.0)
            } else {
                -300.0
            }
        })
        .collect();
    Ok(GainCut { axis, gain_db })
}
