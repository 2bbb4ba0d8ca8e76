//! Phase-only hologram optimization from 4D light fields.
//!
//! The library couples two projection operators that share one defocus and
//! parallax geometry: an incoherent shift-and-add light-field refocus
//! ([`lightfield::project_lightfield`]) and a coherent pupil-filtered
//! angular-spectrum projection ([`wavefield::project_wave`]). Hologram
//! phases are optimized so that, for pupil states drawn from a configurable
//! distribution, the coherent projection matches the incoherent one — and
//! evaluated over sweeps of the full pupil state space.

pub mod error;
pub mod eval;
pub mod farfield;
pub mod fft;
pub mod io;
pub mod lightfield;
pub mod optics;
pub mod optimizer;
pub mod scene;
pub mod supervision;
pub mod wavefield;

pub use error::{Error, Result};
pub use lightfield::{load_lightfield, project_lightfield, LightField, TargetImage};
pub use optics::{
    defocus_alpha, eyebox_width, pupil_mask, FreqGrid, OpticalConfig, PupilRanges, PupilState,
};
pub use optimizer::{optimize, LossDomain, OptimizerSettings, PhaseVariables, TraceRow};
pub use scene::{synthesize_test_scene, SceneSpec};
pub use supervision::{PolicyKind, SupervisionPolicy, SupervisionSample, Supervisor};
pub use wavefield::{
    angular_spectrum_kernel, average_intensity, project_wave, ComplexField, KernelCache,
    KernelOptions, PropagationKernel,
};
