//! Ring-torus sampling geometry.
//!
//! The torus is parameterized by the azimuth `phi` around the main (z) axis
//! and the tube angle `theta`:
//!
//! ```text
//! x = (R + rho sin theta) cos phi
//! y = (R + rho sin theta) sin phi
//! z = -rho cos theta
//! ```
//!
//! A [`SampleGrid`] places `P` uniform nodes on each angle, giving `P²`
//! samples. Fixing `theta` yields a horizontal (XY) ring, fixing `phi` yields
//! a vertical ring around the tube. Both families partition the same samples.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

/// Propagation speed in m/s.
///
/// The rounded value 3e8 is used throughout so that wavelengths, source
/// distances and sampling thresholds agree with the reference scenarios.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusGeometry {
    major_radius: f64,
    tube_radius: f64,
}

impl TorusGeometry {
    /// Ring torus with center-to-tube distance `major_radius` (R) and tube
    /// radius `tube_radius` (rho). Requires `R > rho > 0`.
    pub fn new(major_radius: f64, tube_radius: f64) -> Result<Self> {
        if !(major_radius.is_finite() && tube_radius.is_finite()) {
            return Err(Error::InvalidGeometry("radii must be finite".into()));
        }
        if tube_radius <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "tube radius must be positive, got {tube_radius}"
            )));
        }
        if major_radius <= tube_radius {
            return Err(Error::InvalidGeometry(format!(
                "ring torus needs R > rho, got R = {major_radius}, rho = {tube_radius}"
            )));
        }
        Ok(Self {
            major_radius,
            tube_radius,
        })
    }

    pub fn major_radius(&self) -> f64 {
        self.major_radius
    }

    pub fn tube_radius(&self) -> f64 {
        self.tube_radius
    }

    pub fn outer_radius(&self) -> f64 {
        self.major_radius + self.tube_radius
    }

    pub fn inner_radius(&self) -> f64 {
        self.major_radius - self.tube_radius
    }
}

pub fn torus_point(phi: f64, theta: f64, geom: &TorusGeometry) -> Point3 {
    let r = geom.major_radius + geom.tube_radius * theta.sin();
    [r * phi.cos(), r * phi.sin(), -geom.tube_radius * theta.cos()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Outer,
    Inner,
}

/// Radius of the horizontal ring at height `z` on the chosen branch.
pub fn ring_radius(z: f64, branch: Branch, geom: &TorusGeometry) -> Result<f64> {
    let rho = geom.tube_radius;
    if !(z.abs() <= rho) {
        return Err(Error::Domain(format!(
            "height {z} m outside the tube span [-{rho}, {rho}]"
        )));
    }
    let half_chord = (rho * rho - z * z).sqrt();
    Ok(match branch {
        Branch::Outer => geom.major_radius + half_chord,
        Branch::Inner => geom.major_radius - half_chord,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiusMode {
    Outermost,
    Innermost,
}

/// Smallest per-ring sample count `P` for which adjacent samples on the
/// selected ring are strictly closer than half the shortest wavelength:
/// `2 r sin(pi / P) < c / (2 f_max)`.
pub fn nyquist_min_samples(geom: &TorusGeometry, f_max: f64, mode: RadiusMode) -> Result<usize> {
    if !(f_max > 0.0) || !f_max.is_finite() {
        return Err(Error::Domain(format!("f_max must be positive, got {f_max}")));
    }
    let radius = match mode {
        RadiusMode::Outermost => geom.outer_radius(),
        RadiusMode::Innermost => geom.inner_radius(),
    };
    let half_wavelength = SPEED_OF_LIGHT / (2.0 * f_max);
    let satisfied = |p: usize| 2.0 * radius * (PI / p as f64).sin() < half_wavelength;

    // Estimate from the continuous bound, then settle the integer exactly.
    let ratio = half_wavelength / (2.0 * radius);
    let mut p = if ratio >= 1.0 {
        3
    } else {
        ((PI / ratio.asin()).floor() as usize).max(3)
    };
    while p > 3 && satisfied(p - 1) {
        p -= 1;
    }
    while !satisfied(p) {
        p += 1;
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingKind {
    /// Horizontal ring at fixed tube angle, centered on the z axis.
    Xy,
    /// Vertical ring around the tube at fixed azimuth.
    Phi,
}

/// One circular sub-array of the grid.
///
/// For XY rings `node_angles` are the azimuths `phi_p`. For phi-rings they
/// are polar angles measured from +z inside the half-plane at the ring's
/// azimuth, `(pi - theta_q) mod 2pi`, which is the frame in which arrival
/// elevation is expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct RingView {
    pub kind: RingKind,
    pub index: usize,
    pub radius: f64,
    pub center: Point3,
    pub sample_indices: Vec<(usize, usize)>,
    pub node_angles: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleGrid {
    geometry: TorusGeometry,
    samples: usize,
    phi_nodes: Vec<f64>,
    theta_nodes: Vec<f64>,
    positions: Vec<Point3>,
}

pub fn build_sample_grid(geom: TorusGeometry, samples: usize) -> Result<SampleGrid> {
    SampleGrid::new(geom, samples)
}

impl SampleGrid {
    pub fn new(geometry: TorusGeometry, samples: usize) -> Result<Self> {
        if samples < 3 {
            return Err(Error::InvalidSampling(format!(
                "need at least 3 samples per ring, got {samples}"
            )));
        }
        let nodes: Vec<f64> = (0..samples).map(|i| TAU * i as f64 / samples as f64).collect();
        let mut positions = Vec::with_capacity(samples * samples);
        for &phi in &nodes {
            for &theta in &nodes {
                positions.push(torus_point(phi, theta, &geometry));
            }
        }
        Ok(Self {
            geometry,
            samples,
            phi_nodes: nodes.clone(),
            theta_nodes: nodes,
            positions,
        })
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geometry
    }

    /// Samples per ring (`P`).
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn phi_nodes(&self) -> &[f64] {
        &self.phi_nodes
    }

    pub fn theta_nodes(&self) -> &[f64] {
        &self.theta_nodes
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn position(&self, p: usize, q: usize) -> Point3 {
        self.positions[p * self.samples + q]
    }

    /// Radius of the XY ring at tube node `q`.
    pub fn xy_radius(&self, q: usize) -> f64 {
        self.geometry.major_radius + self.geometry.tube_radius * self.theta_nodes[q].sin()
    }

    pub fn xy_ring(&self, q: usize) -> RingView {
        let z = -self.geometry.tube_radius * self.theta_nodes[q].cos();
        RingView {
            kind: RingKind::Xy,
            index: q,
            radius: self.xy_radius(q),
            center: [0.0, 0.0, z],
            sample_indices: (0..self.samples).map(|p| (p, q)).collect(),
            node_angles: self.phi_nodes.clone(),
        }
    }

    pub fn phi_ring(&self, p: usize) -> RingView {
        let phi = self.phi_nodes[p];
        let r = self.geometry.major_radius;
        RingView {
            kind: RingKind::Phi,
            index: p,
            radius: self.geometry.tube_radius,
            center: [r * phi.cos(), r * phi.sin(), 0.0],
            sample_indices: (0..self.samples).map(|q| (p, q)).collect(),
            node_angles: self
                .theta_nodes
                .iter()
                .map(|&theta| (PI - theta).rem_euclid(TAU))
                .collect(),
        }
    }
}

/// Vertical ring whose azimuth node is nearest to `phi_hat` (mod 2pi).
/// Exact ties go to the lower node index.
pub fn select_phi_ring(grid: &SampleGrid, phi_hat: f64) -> RingView {
    let p_count = grid.samples();
    let pos = phi_hat.rem_euclid(TAU) * p_count as f64 / TAU;
    let lower = (pos.floor() as usize) % p_count;
    let upper = (lower + 1) % p_count;
    let frac = pos - pos.floor();
    let chosen = if frac < 0.5 {
        lower
    } else if frac > 0.5 {
        upper
    } else {
        lower.min(upper)
    };
    grid.phi_ring(chosen)
}
