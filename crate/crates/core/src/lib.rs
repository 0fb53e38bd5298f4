//! Joint azimuth, elevation and time-of-arrival estimation with toric
//! arrays and nearly frequency-invariant phase-mode beamforming.
//!
//! The pipeline runs bottom-up through the modules:
//!
//! - [`geometry`]: torus sampling grid, ring extraction, sampling bound
//! - [`specfun`]: Bessel sequences for the filter bank
//! - [`channel`]: ground-truth synthesis (spherical or plane waves)
//! - [`phasemode`]: ring expansion, inverse filters, angle/time diagrams
//! - [`estimator`]: two-stage estimation and successive subtraction

// `!(x > 0.0)` rejects NaN along with the rest; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod channel;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod phasemode;
pub mod specfun;

pub use channel::{
    synthesize_channel, synthesize_channel_with, ChannelTensor, FrequencyGrid, LayoutChoice, NoiseSpec,
    PropagationModel, SynthesisOptions, Wave,
};
pub use error::{Error, Result};
pub use estimator::{estimate_multipath, estimate_multipath_detailed, EstimatorConfig, ExclusionWindow, WaveEstimate};
pub use geometry::{build_sample_grid, SampleGrid, TorusGeometry, SPEED_OF_LIGHT};
pub use phasemode::{azimuth_spectrum, diagram_2d, Diagram, PhaseModeSpectrum};
