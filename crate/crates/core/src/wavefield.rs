//! Coherent forward model: pupil-filtered angular-spectrum projection of an
//! SLM field onto perceived intensity, plus the exact adjoint of its linear
//! part for gradient computation.
//!
//! The perceived field under pupil state `p` is
//! `v = IFFT( K(q, p) .* FFT(u) )` with `K = mask(q - s/(lambda f)) * H(q; z)`
//! and `H` the angular-spectrum transfer function. Transforms are unitary, so
//! `|K| = 1` on the pupil support makes the projection energy-preserving
//! there, and the adjoint is `IFFT( conj(K) .* FFT(g) )`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2_owned};
use crate::optics::{pupil_mask, FreqGrid, OpticalConfig, PupilState};

/// A sampled complex field at the SLM plane.
#[derive(Debug, Clone)]
pub struct ComplexField {
    pub values: Array2<Complex<f64>>,
    /// Sample spacing, meters.
    pub pitch: f64,
    /// Wavelength, meters.
    pub wavelength: f64,
}

impl ComplexField {
    pub fn new(values: Array2<Complex<f64>>, pitch: f64, wavelength: f64) -> Self {
        Self { values, pitch, wavelength }
    }

    /// `u = exp(j * phi)` for a real phase grid.
    pub fn from_phase(phase: &Array2<f64>, pitch: f64, wavelength: f64) -> Self {
        let values = phase.mapv(|p| Complex::from_polar(1.0, p));
        Self { values, pitch, wavelength }
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Angular-spectrum transfer function
/// `H(q; z) = exp(j * 2 pi z / lambda * sqrt(1 - |lambda q|^2))` inside the
/// propagating band `|lambda q| < 1`, zero beyond (evanescent cutoff).
/// Negative `z` propagates backward.
pub fn angular_spectrum_kernel(grid: &FreqGrid, z: f64, wavelength: f64) -> Array2<Complex<f64>> {
    let (rows, cols) = grid.shape();
    let k = 2.0 * std::f64::consts::PI / wavelength;
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let ly = wavelength * grid.qy[i];
        for j in 0..cols {
            let lx = wavelength * grid.qx[j];
            let s = 1.0 - ly * ly - lx * lx;
            if s > 0.0 {
                out[[i, j]] = Complex::from_polar(1.0, k * z * s.sqrt());
            }
        }
    }
    out
}

/// Extra kernel shaping: raised-cosine pupil edge and/or a band-pass that
/// attenuates the kernel outside a central fraction of the Nyquist band
/// (the no-care-area fix used by fixed-pupil supervision policies).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    /// Raised-cosine pupil edge width in pupil-plane meters; 0 = hard edge.
    pub edge_width: f64,
    /// Pass-band radius as a fraction of the Nyquist frequency; kernel rolls
    /// off to zero between this radius and Nyquist. `None` disables.
    pub bandpass: Option<f64>,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { edge_width: 0.0, bandpass: None }
    }
}

/// Frequency-domain kernel for one (pupil, wavelength) pair.
#[derive(Debug, Clone)]
pub struct PropagationKernel {
    pub values: Array2<Complex<f64>>,
    pub pupil: PupilState,
    pub wavelength: f64,
}

impl PropagationKernel {
    pub fn build(
        grid: &FreqGrid,
        p: &PupilState,
        wavelength: f64,
        focal_length: f64,
        options: KernelOptions,
    ) -> Result<Self> {
        let mask = pupil_mask(grid, p, wavelength, focal_length, options.edge_width)?;
        let mut values = angular_spectrum_kernel(grid, p.focus, wavelength);
        let (rows, cols) = grid.shape();
        for i in 0..rows {
            for j in 0..cols {
                values[[i, j]] *= mask[[i, j]];
            }
        }
        if let Some(fraction) = options.bandpass {
            apply_bandpass(&mut values, grid, fraction);
        }
        Ok(Self { values, pupil: *p, wavelength })
    }
}

fn apply_bandpass(values: &mut Array2<Complex<f64>>, grid: &FreqGrid, fraction: f64) {
    let nyq = (grid.dq.0 * grid.qy.len() as f64).min(grid.dq.1 * grid.qx.len() as f64) / 2.0;
    let inner = fraction.clamp(0.0, 1.0) * nyq;
    let (rows, cols) = grid.shape();
    for i in 0..rows {
        for j in 0..cols {
            let r = (grid.qy[i] * grid.qy[i] + grid.qx[j] * grid.qx[j]).sqrt();
            if r <= inner {
                continue;
            }
            let t = ((r - inner) / (nyq - inner).max(f64::MIN_POSITIVE)).min(1.0);
            values[[i, j]] *= 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        }
    }
}

/// Linear part of the projection: `v = IFFT( K .* FFT(u) )`.
pub fn apply_kernel(u: &ComplexField, kernel: &PropagationKernel) -> ComplexField {
    let mut spectrum = fft2(&u.values);
    spectrum.zip_mut_with(&kernel.values, |s, k| *s *= k);
    ComplexField::new(ifft2_owned(spectrum), u.pitch, u.wavelength)
}

/// Same as [`apply_kernel`] when the field spectrum is already available.
pub fn apply_kernel_spectrum(
    spectrum: &Array2<Complex<f64>>,
    kernel: &PropagationKernel,
) -> Array2<Complex<f64>> {
    let mut filtered = spectrum.clone();
    filtered.zip_mut_with(&kernel.values, |s, k| *s *= k);
    ifft2_owned(filtered)
}

/// Perceived intensity `|v|^2` under one pupil state.
pub fn project_wave(u: &ComplexField, kernel: &PropagationKernel) -> Array2<f64> {
    apply_kernel(u, kernel).values.mapv(|v| v.norm_sqr())
}

/// Convenience wrapper building the kernel from a pupil state and config.
pub fn project_wave_pupil(
    u: &ComplexField,
    p: &PupilState,
    config: &OpticalConfig,
    channel: usize,
) -> Result<Array2<f64>> {
    let grid = FreqGrid::new(u.values.dim(), u.pitch);
    let kernel = PropagationKernel::build(
        &grid,
        p,
        config.wavelength(channel)?,
        config.focal_length,
        KernelOptions::default(),
    )?;
    Ok(project_wave(u, &kernel))
}

/// Exact adjoint of the linear map in [`apply_kernel`]:
/// `A* g = IFFT( conj(K) .* FFT(g) )`, satisfying `<A u, g> = <u, A* g>`.
pub fn adjoint_apply_kernel(
    g: &Array2<Complex<f64>>,
    kernel: &PropagationKernel,
) -> Array2<Complex<f64>> {
    let mut spectrum = fft2(g);
    spectrum.zip_mut_with(&kernel.values, |s, k| *s *= k.conj());
    ifft2_owned(spectrum)
}

/// Adjoint contribution left in the frequency domain: `conj(K) .* FFT(g)`.
/// Contributions from several pupil samples can be accumulated spectrally and
/// transformed back once.
pub fn adjoint_spectrum(
    g: &Array2<Complex<f64>>,
    kernel: &PropagationKernel,
) -> Array2<Complex<f64>> {
    let mut spectrum = fft2(g);
    spectrum.zip_mut_with(&kernel.values, |s, k| *s *= k.conj());
    spectrum
}

/// Incoherent speckle averaging: mean over temporal frames followed by a
/// non-overlapping 2x2 spatial mean-pool (output is half resolution per axis).
pub fn average_intensity(frames: &[Array2<f64>]) -> Result<Array2<f64>> {
    if frames.is_empty() {
        return Err(Error::Config("average_intensity requires at least one frame".into()));
    }
    let dim = frames[0].dim();
    if frames.iter().any(|f| f.dim() != dim) {
        return Err(Error::Config("average_intensity frames must share a resolution".into()));
    }
    if dim.0 % 2 != 0 || dim.1 % 2 != 0 {
        return Err(Error::Config(format!(
            "average_intensity requires even dimensions for 2x2 pooling, got {}x{}",
            dim.0, dim.1
        )));
    }
    let mut mean = Array2::zeros(dim);
    for f in frames {
        mean.zip_mut_with(f, |m, &v| *m += v);
    }
    let inv = 1.0 / frames.len() as f64;
    mean.mapv_inplace(|v| v * inv);
    Ok(pool2(&mean))
}

/// Non-overlapping 2x2 mean-pool.
pub fn pool2(x: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    debug_assert!(rows % 2 == 0 && cols % 2 == 0);
    let mut out = Array2::zeros((rows / 2, cols / 2));
    for i in 0..rows / 2 {
        for j in 0..cols / 2 {
            out[[i, j]] = 0.25
                * (x[[2 * i, 2 * j]]
                    + x[[2 * i, 2 * j + 1]]
                    + x[[2 * i + 1, 2 * j]]
                    + x[[2 * i + 1, 2 * j + 1]]);
        }
    }
    out
}

/// Cache of built kernels keyed by quantized pupil parameters.
///
/// The key quantizes the pupil center and radius to frequency cells and the
/// focus to nanometers, so lookups are exact for the repeated fixed pupils of
/// grid/focal-stack supervision. The cache is cleared wholesale when full;
/// stochastic policies produce fresh pupils every iteration and gain nothing
/// from retention.
pub struct KernelCache {
    map: Mutex<HashMap<KernelKey, Arc<PropagationKernel>>>,
    capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct KernelKey {
    shape: (usize, usize),
    cx_cells: i64,
    cy_cells: i64,
    radius_cells: i64,
    z_nm: i64,
    lambda_pm: i64,
    edge_nm: i64,
    bandpass_ppm: i64,
}

impl KernelCache {
    pub fn new(capacity: usize) -> Self {
        Self { map: Mutex::new(HashMap::new()), capacity: capacity.max(1) }
    }

    pub fn get_or_build(
        &self,
        grid: &FreqGrid,
        p: &PupilState,
        wavelength: f64,
        focal_length: f64,
        options: KernelOptions,
    ) -> Result<Arc<PropagationKernel>> {
        let lf = wavelength * focal_length;
        let key = KernelKey {
            shape: grid.shape(),
            cx_cells: (p.shift[0] / lf / grid.dq.1 * 1e6).round() as i64,
            cy_cells: (p.shift[1] / lf / grid.dq.0 * 1e6).round() as i64,
            radius_cells: (p.diameter / (2.0 * lf) / grid.dq.0 * 1e6).round() as i64,
            z_nm: (p.focus * 1e9).round() as i64,
            lambda_pm: (wavelength * 1e12).round() as i64,
            edge_nm: (options.edge_width * 1e9).round() as i64,
            bandpass_ppm: options.bandpass.map_or(-1, |b| (b * 1e6).round() as i64),
        };
        {
            let map = self.map.lock().unwrap();
            if let Some(k) = map.get(&key) {
                return Ok(k.clone());
            }
        }
        let built = Arc::new(PropagationKernel::build(grid, p, wavelength, focal_length, options)?);
        let mut map = self.map.lock().unwrap();
        if map.len() >= self.capacity {
            map.clear();
        }
        map.insert(key, built.clone());
        Ok(built)
    }
}

impl Default for KernelCache {
    fn default() -> Self {
        Self::new(256)
    }
}
