//! Shared geometry, units, and the pupil-state model.
//!
//! All lengths are meters. The display is a 4f relay at unit magnification:
//! an SLM of pitch `slm_pitch` diffracts into a pupil plane where spatial
//! frequency `q'` (cycles/m) maps to pupil position `q = lambda * f * q'`.
//! The per-wavelength eyebox is therefore `lambda * f / slm_pitch` wide.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::freq_coords;

/// Optical constants of the display: wavelengths, SLM geometry, eyepiece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    /// One wavelength per color channel, meters.
    pub wavelengths: Vec<f64>,
    /// SLM pixel pitch, meters.
    pub slm_pitch: f64,
    /// SLM resolution (rows, cols).
    pub slm_resolution: (usize, usize),
    /// Eyepiece focal length, meters.
    pub focal_length: f64,
    /// Detector/retina sample pitch, meters. Defaults to the SLM pitch.
    pub detector_pitch: f64,
}

impl OpticalConfig {
    pub fn new(
        wavelengths: Vec<f64>,
        slm_pitch: f64,
        slm_resolution: (usize, usize),
        focal_length: f64,
        detector_pitch: Option<f64>,
    ) -> Result<Self> {
        if wavelengths.is_empty() {
            return Err(Error::Config("at least one wavelength required".into()));
        }
        if wavelengths.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("all wavelengths must be > 0".into()));
        }
        if !(slm_pitch > 0.0) {
            return Err(Error::Config("slm_pitch must be > 0".into()));
        }
        if !(focal_length > 0.0) {
            return Err(Error::Config("focal_length must be > 0".into()));
        }
        if slm_resolution.0 == 0 || slm_resolution.1 == 0 {
            return Err(Error::Config("resolution must be nonzero".into()));
        }
        let detector_pitch = detector_pitch.unwrap_or(slm_pitch);
        if !(detector_pitch > 0.0) {
            return Err(Error::Config("detector_pitch must be > 0".into()));
        }
        Ok(Self { wavelengths, slm_pitch, slm_resolution, focal_length, detector_pitch })
    }

    pub fn channels(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelength(&self, channel: usize) -> Result<f64> {
        self.wavelengths
            .get(channel)
            .copied()
            .ok_or_else(|| Error::Config(format!("channel {channel} out of range")))
    }

    /// Eyebox width `lambda * f / slm_pitch` for one channel.
    pub fn eyebox_width(&self, channel: usize) -> Result<f64> {
        Ok(self.wavelength(channel)? * self.focal_length / self.slm_pitch)
    }

    /// Smallest eyebox over all channels (shortest wavelength).
    pub fn min_eyebox_width(&self) -> f64 {
        self.wavelengths
            .iter()
            .map(|&w| w * self.focal_length / self.slm_pitch)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Eyebox width `lambda * f / slm_pitch` for one channel.
pub fn eyebox_width(config: &OpticalConfig, channel: usize) -> Result<f64> {
    config.eyebox_width(channel)
}

/// One viewing condition: lateral pupil shift, focus distance, and diameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PupilState {
    /// Pupil-plane displacement from the optical axis `(x, y)`, meters.
    pub shift: [f64; 2],
    /// Defocus distance, meters; 0 is the rest (in-focus) plane.
    pub focus: f64,
    /// Full aperture diameter, meters.
    pub diameter: f64,
}

impl PupilState {
    pub fn new(shift: [f64; 2], focus: f64, diameter: f64) -> Result<Self> {
        if !(diameter > 0.0) {
            return Err(Error::Config(format!("pupil diameter must be > 0, got {diameter}")));
        }
        if !shift.iter().all(|v| v.is_finite()) || !focus.is_finite() {
            return Err(Error::Config("pupil parameters must be finite".into()));
        }
        Ok(Self { shift, focus, diameter })
    }

    pub fn centered(focus: f64, diameter: f64) -> Result<Self> {
        Self::new([0.0, 0.0], focus, diameter)
    }
}

/// Sampling bounds for pupil states during optimization and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PupilRanges {
    pub z_min: f64,
    pub z_max: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Maximum |shift| per axis. `None` derives, per sample, the largest
    /// shift keeping the drawn diameter inside the smallest eyebox:
    /// `(w_min - d) / 2`.
    pub shift_max: Option<f64>,
}

impl PupilRanges {
    pub fn new(z_min: f64, z_max: f64, d_min: f64, d_max: f64, shift_max: Option<f64>) -> Result<Self> {
        let r = Self { z_min, z_max, d_min, d_max, shift_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z_min <= self.z_max) {
            return Err(Error::Config(format!("z_min {} > z_max {}", self.z_min, self.z_max)));
        }
        if !(self.d_min > 0.0) || !(self.d_min <= self.d_max) {
            return Err(Error::Config(format!(
                "diameter range must satisfy 0 < d_min <= d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if let Some(r) = self.shift_max {
            if !(r >= 0.0) {
                return Err(Error::Config(format!("shift_max must be >= 0, got {r}")));
            }
        }
        Ok(())
    }

    /// Largest |shift| per axis for a pupil of diameter `d` against the
    /// smallest eyebox `w_min`, clamped at zero when the disc cannot fit.
    pub fn effective_shift_max(&self, d: f64, w_min: f64) -> f64 {
        match self.shift_max {
            Some(r) => r,
            None => ((w_min - d) / 2.0).max(0.0),
        }
    }
}

/// Defocus parameter `alpha = f / (z + f)`.
pub fn defocus_alpha(z: f64, f: f64) -> Result<f64> {
    let denom = z + f;
    if denom.abs() < 1e-15 * f.abs().max(1.0) {
        return Err(Error::Config(format!("degenerate defocus: z = -f = {z}")));
    }
    Ok(f / denom)
}

/// FFT-native frequency coordinates of a field grid, cycles/meter.
///
/// Layout matches the FFT index order (DC first, negative half second);
/// the representable band is `[-1/(2*pitch), 1/(2*pitch))` per axis.
#[derive(Debug, Clone)]
pub struct FreqGrid {
    /// Row-axis frequencies, length = rows.
    pub qy: Vec<f64>,
    /// Column-axis frequencies, length = cols.
    pub qx: Vec<f64>,
    /// Frequency cell size per axis.
    pub dq: (f64, f64),
}

impl FreqGrid {
    pub fn new(shape: (usize, usize), pitch: f64) -> Self {
        let qy = freq_coords(shape.0, pitch);
        let qx = freq_coords(shape.1, pitch);
        let dq = (1.0 / (shape.0 as f64 * pitch), 1.0 / (shape.1 as f64 * pitch));
        Self { qy, qx, dq }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.qy.len(), self.qx.len())
    }
}

/// Binary (optionally edge-smoothed) pupil disc in frequency space.
///
/// The disc is centered at `s / (lambda f)` with radius `d / (2 lambda f)`;
/// `d` is the full diameter. Frequencies beyond the grid are clipped, which
/// mirrors the SLM diffraction limit; a fully clipped pupil is an error.
/// `edge_width` > 0 applies a raised-cosine roll-off of that width (meters,
/// pupil-plane units) straddling the rim instead of a hard edge.
pub fn pupil_mask(
    grid: &FreqGrid,
    p: &PupilState,
    wavelength: f64,
    focal_length: f64,
    edge_width: f64,
) -> Result<Array2<f64>> {
    let lf = wavelength * focal_length;
    let cx = p.shift[0] / lf;
    let cy = p.shift[1] / lf;
    let radius = p.diameter / (2.0 * lf);
    let half_edge = edge_width / (2.0 * lf);

    let (rows, cols) = grid.shape();
    let mut mask = Array2::zeros((rows, cols));
    let mut nonzero = 0usize;
    for i in 0..rows {
        let dy = grid.qy[i] - cy;
        for j in 0..cols {
            let dx = grid.qx[j] - cx;
            let r = (dx * dx + dy * dy).sqrt();
            let v = if half_edge > 0.0 {
                raised_cosine(r, radius, half_edge)
            } else if r < radius {
                1.0
            } else {
                0.0
            };
            if v > 0.0 {
                nonzero += 1;
            }
            mask[[i, j]] = v;
        }
    }

    if nonzero == 0 {
        return Err(Error::EmptyPupil {
            x: p.shift[0],
            y: p.shift[1],
            d: p.diameter,
            wavelength,
        });
    }

    // Warn when the disc extends past the representable band and got clipped.
    let nyq_y = grid.dq.0 * grid.qy.len() as f64 / 2.0;
    let nyq_x = grid.dq.1 * grid.qx.len() as f64 / 2.0;
    if cx.abs() + radius > nyq_x || cy.abs() + radius > nyq_y {
        log::warn!(
            "pupil (shift [{:.3e}, {:.3e}] m, d {:.3e} m) exceeds the representable band; clipped",
            p.shift[0],
            p.shift[1],
            p.diameter
        );
    }

    Ok(mask)
}

fn raised_cosine(r: f64, radius: f64, half_edge: f64) -> f64 {
    if r <= radius - half_edge {
        1.0
    } else if r >= radius + half_edge {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (r - radius + half_edge) / (2.0 * half_edge)).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_config() -> OpticalConfig {
        OpticalConfig::new(vec![440e-9, 520e-9], 8e-6, (128, 128), 0.4, None).unwrap()
    }

    #[test]
    fn eyebox_paper_constants() {
        let cfg = test_config();
        // 440 nm, f = 400 mm, pitch = 8 um -> 22 mm
        assert_relative_eq!(cfg.eyebox_width(0).unwrap(), 0.022, max_relative = 1e-12);
        // 520 nm -> 26 mm
        assert_relative_eq!(cfg.eyebox_width(1).unwrap(), 0.026, max_relative = 1e-12);
        // doubling the pitch halves the eyebox
        let cfg2 = OpticalConfig::new(vec![440e-9], 16e-6, (128, 128), 0.4, None).unwrap();
        assert_relative_eq!(cfg2.eyebox_width(0).unwrap(), 0.011, max_relative = 1e-12);
        assert_relative_eq!(cfg.min_eyebox_width(), 0.022, max_relative = 1e-12);
    }

    #[test]
    fn eyebox_invalid_channel() {
        assert!(test_config().eyebox_width(5).is_err());
    }

    #[test]
    fn alpha_examples() {
        assert_relative_eq!(defocus_alpha(0.0, 0.4).unwrap(), 1.0);
        assert_relative_eq!(defocus_alpha(0.015, 0.4).unwrap(), 400.0 / 415.0, max_relative = 1e-12);
        assert_relative_eq!(defocus_alpha(0.4, 0.4).unwrap(), 0.5);
        assert!(defocus_alpha(-0.4, 0.4).is_err());
    }

    #[test]
    fn alpha_strictly_decreasing() {
        let f = 0.4;
        let mut prev = f64::INFINITY;
        let mut z = -f + 1e-3;
        while z < 0.1 {
            let a = defocus_alpha(z, f).unwrap();
            assert!(a < prev, "alpha not decreasing at z = {z}");
            prev = a;
            z += 1e-3;
        }
    }

    #[test]
    fn mask_full_aperture_covers_band() {
        let cfg = test_config();
        let grid = FreqGrid::new((64, 64), cfg.slm_pitch);
        // Diameter well beyond the eyebox diagonal: every cell inside.
        let p = PupilState::centered(0.0, 2.0 * cfg.eyebox_width(0).unwrap()).unwrap();
        let mask = pupil_mask(&grid, &p, 440e-9, 0.4, 0.0).unwrap();
        assert!(mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_tiny_aperture_dc_only() {
        let cfg = test_config();
        let grid = FreqGrid::new((64, 64), cfg.slm_pitch);
        let p = PupilState::centered(0.0, 1e-9).unwrap();
        let mask = pupil_mask(&grid, &p, 440e-9, 0.4, 0.0).unwrap();
        assert_eq!(mask.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(mask[[0, 0]], 1.0); // DC sample in FFT-native order
    }

    #[test]
    fn mask_shifted_center_and_radius() {
        // s = (11 mm, 0), d = 2 mm, 440 nm, f = 400 mm:
        // center 62_500 cycles/m, radius 5_681.8 cycles/m.
        let lf = 440e-9 * 0.4;
        assert_relative_eq!(0.011 / lf, 62_500.0, max_relative = 1e-9);
        assert_relative_eq!(0.002 / (2.0 * lf), 5_681.818_181, max_relative = 1e-6);

        // Brute-force pixel count against the analytic disc area. The 256-cell
        // grid at 8 um pitch spans exactly the 22 mm eyebox in pupil units.
        let grid = FreqGrid::new((256, 256), 8e-6);
        let p = PupilState::new([0.0, 0.0], 0.0, 0.008).unwrap();
        let mask = pupil_mask(&grid, &p, 440e-9, 0.4, 0.0).unwrap();
        let cell = grid.dq.0 * grid.dq.1;
        let area: f64 = mask.sum() * cell;
        let radius = 0.008 / (2.0 * lf);
        let exact = std::f64::consts::PI * radius * radius;
        // one boundary-cell ring of tolerance
        let ring = 4.0 * std::f64::consts::PI * radius * grid.dq.0;
        assert!((area - exact).abs() <= ring, "area {area} vs {exact} (ring {ring})");
    }

    #[test]
    fn mask_shift_is_circular_shift_on_grid_multiples() {
        let grid = FreqGrid::new((64, 64), 8e-6);
        let lf = 440e-9 * 0.4;
        let shift_cells = 5i64;
        let s = shift_cells as f64 * grid.dq.1 * lf;
        let base = pupil_mask(&grid, &PupilState::centered(0.0, 0.006).unwrap(), 440e-9, 0.4, 0.0).unwrap();
        let shifted = pupil_mask(
            &grid,
            &PupilState::new([s, 0.0], 0.0, 0.006).unwrap(),
            440e-9,
            0.4,
            0.0,
        )
        .unwrap();
        let n = 64i64;
        for i in 0..64usize {
            for j in 0..64usize {
                let src = ((j as i64 - shift_cells).rem_euclid(n)) as usize;
                assert_eq!(shifted[[i, j]], base[[i, src]], "cell ({i}, {j})");
            }
        }
    }

    #[test]
    fn mask_outside_band_errors() {
        let grid = FreqGrid::new((64, 64), 8e-6);
        // 10x the eyebox half-width: disc entirely beyond Nyquist.
        let p = PupilState::new([0.11, 0.0], 0.0, 0.001).unwrap();
        let err = pupil_mask(&grid, &p, 440e-9, 0.4, 0.0);
        assert!(matches!(err, Err(Error::EmptyPupil { .. })));
    }

    #[test]
    fn raised_cosine_edge_bounded() {
        let grid = FreqGrid::new((64, 64), 8e-6);
        let p = PupilState::centered(0.0, 0.008).unwrap();
        let mask = pupil_mask(&grid, &p, 440e-9, 0.4, 0.001).unwrap();
        assert!(mask.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(mask.iter().any(|&v| v > 0.0 && v < 1.0), "edge should be smoothed");
    }
}
