//! Crate-wide error type.

use crate::optics::PupilState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The pupil disc carries no representable frequency content: the mask
    /// would be identically zero.
    #[error("pupil outside representable bandwidth: shift ({x:.4e}, {y:.4e}) m, diameter {d:.4e} m, wavelength {wavelength:.4e} m")]
    EmptyPupil { x: f64, y: f64, d: f64, wavelength: f64 },

    /// No light-field view center lies inside the pupil disc; the photographic
    /// projection is undefined. Widening `d_min` usually resolves this.
    #[error("no light-field views inside aperture: shift ({x:.4e}, {y:.4e}) m, diameter {d:.4e} m")]
    EmptyAperture { x: f64, y: f64, d: f64 },

    #[error("missing light-field view at grid index ({row}, {col}): {path}")]
    MissingView { row: usize, col: usize, path: String },

    #[error("light-field view ({row}, {col}) has resolution {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    ViewResolutionMismatch {
        row: usize,
        col: usize,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },

    #[error("malformed light-field metadata: {0}")]
    Metadata(String),

    #[error("non-finite loss for pupil shift ({x:.4e}, {y:.4e}) m, focus {z:.4e} m, diameter {d:.4e} m")]
    NonFiniteLoss { x: f64, y: f64, z: f64, d: f64 },

    #[error("optimization diverged at iteration {iteration}: loss {loss:.6e} vs initial {initial:.6e}")]
    Diverged { iteration: usize, loss: f64, initial: f64 },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn empty_aperture(p: &PupilState) -> Self {
        Error::EmptyAperture { x: p.shift[0], y: p.shift[1], d: p.diameter }
    }
}
