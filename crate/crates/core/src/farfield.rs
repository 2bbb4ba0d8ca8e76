//! Fourier-CGH configuration for large space-bandwidth-product holograms.
//!
//! The SLM sits in the pupil plane: a pupil state masks the field spatially,
//! a quadratic lens phase applies defocus, and a single Fourier transform
//! forms the image. Each pupil sample therefore touches only its disc of the
//! hologram, so per-sample gradient buffers scale with pupil area rather
//! than hologram area — which is what makes very large holograms tractable.
//!
//! Defocus phase: `Q(r; z) = exp(+j pi z |r|^2 / (lambda f^2))`. The sign is
//! pinned by the parallax-consistency oracle against the light-field
//! projection (`tests/` exercise it): with this sign a single hologram can
//! satisfy the light-field shift rule `r -> r + ((z - z0)/f) q` jointly over
//! focus and shift.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2_owned, fftshift, ifft2_owned, ifftshift};
use crate::lightfield::{project_lightfield, LightField};
use crate::optics::{OpticalConfig, PupilState};
use crate::optimizer::{AdamState, OptimizerSettings, PhaseVariables, TraceRow};
use crate::supervision::{batch_seed, sample_slfh_pupils, fixed_pupils, SupervisionPolicy};
use crate::wavefield::pool2;

/// Far-field display geometry: the hologram in the pupil plane plus the
/// retina crop window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarFieldConfig {
    pub optics: OpticalConfig,
    /// Hologram resolution (rows, cols); may exceed the near-field SLM size.
    pub hologram_resolution: (usize, usize),
    /// Tile granularity for sparse gradient buffers; must divide the
    /// resolution.
    pub tile: usize,
    /// Centered retina crop (rows, cols) of the full Fourier plane.
    pub retina_window: (usize, usize),
}

impl FarFieldConfig {
    pub fn new(
        optics: OpticalConfig,
        hologram_resolution: (usize, usize),
        tile: usize,
        retina_window: (usize, usize),
    ) -> Result<Self> {
        let cfg = Self { optics, hologram_resolution, tile, retina_window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.hologram_resolution;
        if rows * cols < 256 * 256 {
            return Err(Error::Config(format!(
                "hologram resolution {rows}x{cols} below the 256^2 minimum"
            )));
        }
        if self.tile == 0 || rows % self.tile != 0 || cols % self.tile != 0 {
            return Err(Error::Config(format!(
                "tile {} must divide the hologram resolution {rows}x{cols}",
                self.tile
            )));
        }
        if self.retina_window.0 > rows || self.retina_window.1 > cols {
            return Err(Error::Config("retina window exceeds the hologram resolution".into()));
        }
        if self.retina_window.0 % 2 != 0 || self.retina_window.1 % 2 != 0 {
            return Err(Error::Config("retina window must be even for 2x2 pooling".into()));
        }
        Ok(())
    }

    /// Physical extent of the hologram (the pupil-plane eyebox equivalent).
    pub fn extent(&self) -> f64 {
        self.hologram_resolution.0.min(self.hologram_resolution.1) as f64 * self.optics.slm_pitch
    }

    /// Retina sample pitch for one channel: `lambda f / (N pitch)`.
    pub fn retina_pitch(&self, channel: usize) -> Result<f64> {
        let lambda = self.optics.wavelength(channel)?;
        let n = self.hologram_resolution.0.min(self.hologram_resolution.1) as f64;
        Ok(lambda * self.optics.focal_length / (n * self.optics.slm_pitch))
    }

    /// Optical config whose detector pitch matches this channel's retina
    /// sampling, for rendering light-field targets in retina coordinates.
    pub fn target_config(&self, channel: usize) -> Result<OpticalConfig> {
        let mut cfg = self.optics.clone();
        cfg.detector_pitch = self.retina_pitch(channel)?;
        Ok(cfg)
    }
}

/// Spatial pupil mask times defocus phase on the hologram plane, restricted
/// to the disc's tile-aligned bounding box.
struct SpatialPupil {
    /// Row/col range of the tile-aligned bounding box.
    rows: (usize, usize),
    cols: (usize, usize),
    /// `A * Q` values inside the bounding box.
    values: Array2<Complex<f64>>,
}

fn spatial_coord(i: usize, n: usize, pitch: f64) -> f64 {
    (i as f64 - n as f64 / 2.0) * pitch
}

fn build_spatial_pupil(
    p: &PupilState,
    cfg: &FarFieldConfig,
    wavelength: f64,
) -> Result<SpatialPupil> {
    let (rows, cols) = cfg.hologram_resolution;
    let pitch = cfg.optics.slm_pitch;
    let f = cfg.optics.focal_length;
    let half = p.diameter / 2.0;
    let extent_y = rows as f64 * pitch / 2.0;
    let extent_x = cols as f64 * pitch / 2.0;
    if p.shift[0].abs() - half > extent_x || p.shift[1].abs() - half > extent_y {
        return Err(Error::Config(format!(
            "pupil at ({:.4e}, {:.4e}) m with diameter {:.4e} m lies outside the hologram extent",
            p.shift[0], p.shift[1], p.diameter
        )));
    }

    // Tile-aligned bounding box of the disc, clipped to the hologram.
    let to_index = |coord: f64, n: usize| -> f64 { coord / pitch + n as f64 / 2.0 };
    let tile = cfg.tile as f64;
    let r0 = ((to_index(p.shift[1] - half, rows) / tile).floor() * tile).max(0.0) as usize;
    let r1 = (((to_index(p.shift[1] + half, rows) / tile).ceil() * tile) as usize).min(rows);
    let c0 = ((to_index(p.shift[0] - half, cols) / tile).floor() * tile).max(0.0) as usize;
    let c1 = (((to_index(p.shift[0] + half, cols) / tile).ceil() * tile) as usize).min(cols);
    if r0 >= r1 || c0 >= c1 {
        return Err(Error::EmptyPupil { x: p.shift[0], y: p.shift[1], d: p.diameter, wavelength });
    }

    let mut values = Array2::zeros((r1 - r0, c1 - c0));
    let mut nonzero = 0usize;
    for i in r0..r1 {
        let y = spatial_coord(i, rows, pitch) - p.shift[1];
        for j in c0..c1 {
            let x = spatial_coord(j, cols, pitch) - p.shift[0];
            if (x * x + y * y).sqrt() < half {
                let yy = spatial_coord(i, rows, pitch);
                let xx = spatial_coord(j, cols, pitch);
                let phase = std::f64::consts::PI * p.focus * (xx * xx + yy * yy)
                    / (wavelength * f * f);
                values[[i - r0, j - c0]] = Complex::from_polar(1.0, phase);
                nonzero += 1;
            }
        }
    }
    if nonzero == 0 {
        return Err(Error::EmptyPupil { x: p.shift[0], y: p.shift[1], d: p.diameter, wavelength });
    }
    Ok(SpatialPupil { rows: (r0, r1), cols: (c0, c1), values })
}

fn centered_crop(full: &Array2<f64>, window: (usize, usize)) -> Array2<f64> {
    let (rows, cols) = full.dim();
    let r0 = rows / 2 - window.0 / 2;
    let c0 = cols / 2 - window.1 / 2;
    full.slice(s![r0..r0 + window.0, c0..c0 + window.1]).to_owned()
}

fn centered_embed(win: &Array2<Complex<f64>>, full_dim: (usize, usize)) -> Array2<Complex<f64>> {
    let mut full = Array2::zeros(full_dim);
    let r0 = full_dim.0 / 2 - win.dim().0 / 2;
    let c0 = full_dim.1 / 2 - win.dim().1 / 2;
    full.slice_mut(s![r0..r0 + win.dim().0, c0..c0 + win.dim().1]).assign(win);
    full
}

/// Far-field image under one pupil state:
/// `|FFT( A(r; s, d) * Q(r; z) * u )|^2` cropped to the retina window.
pub fn project_farfield(
    u: &Array2<Complex<f64>>,
    p: &PupilState,
    cfg: &FarFieldConfig,
    channel: usize,
) -> Result<Array2<f64>> {
    let wavelength = cfg.optics.wavelength(channel)?;
    let pupil = build_spatial_pupil(p, cfg, wavelength)?;
    let mut masked = Array2::zeros(cfg.hologram_resolution);
    let (r0, _) = pupil.rows;
    let (c0, _) = pupil.cols;
    for ((i, j), &v) in pupil.values.indexed_iter() {
        masked[[r0 + i, c0 + j]] = v * u[[r0 + i, c0 + j]];
    }
    let v = fftshift(&fft2_owned(masked));
    Ok(centered_crop(&v.mapv(|z| z.norm_sqr()), cfg.retina_window))
}

/// Complex far-field image (linear map only), full Fourier plane, centered.
fn forward_field(
    u: &Array2<Complex<f64>>,
    pupil: &SpatialPupil,
    cfg: &FarFieldConfig,
) -> Array2<Complex<f64>> {
    let mut masked = Array2::zeros(cfg.hologram_resolution);
    let (r0, _) = pupil.rows;
    let (c0, _) = pupil.cols;
    for ((i, j), &v) in pupil.values.indexed_iter() {
        masked[[r0 + i, c0 + j]] = v * u[[r0 + i, c0 + j]];
    }
    fftshift(&fft2_owned(masked))
}

/// Adjoint of the linear map in [`project_farfield`] restricted to the
/// retina window: embeds `g`, inverts the transform and mask, and returns
/// only the pupil's bounding-box block (everything else is zero).
fn adjoint_field(
    g: &Array2<Complex<f64>>,
    pupil: &SpatialPupil,
    cfg: &FarFieldConfig,
) -> Array2<Complex<f64>> {
    let full = centered_embed(g, cfg.hologram_resolution);
    let back = ifft2_owned(ifftshift(&full));
    let (r0, r1) = pupil.rows;
    let (c0, c1) = pupil.cols;
    let mut block = Array2::zeros((r1 - r0, c1 - c0));
    for i in 0..(r1 - r0) {
        for j in 0..(c1 - c0) {
            block[[i, j]] = pupil.values[[i, j]].conj() * back[[r0 + i, c0 + j]];
        }
    }
    block
}

/// Exposed for the adjoint-identity tests: full-grid forward and adjoint of
/// the far-field linear map for one pupil.
pub fn farfield_linear_pair(
    u: &Array2<Complex<f64>>,
    g: &Array2<Complex<f64>>,
    p: &PupilState,
    cfg: &FarFieldConfig,
    channel: usize,
) -> Result<(Array2<Complex<f64>>, Array2<Complex<f64>>)> {
    let wavelength = cfg.optics.wavelength(channel)?;
    let pupil = build_spatial_pupil(p, cfg, wavelength)?;
    let fwd = centered_crop_c(&forward_field(u, &pupil, cfg), cfg.retina_window);
    let adj_block = adjoint_field(g, &pupil, cfg);
    let mut adj = Array2::zeros(cfg.hologram_resolution);
    let (r0, _) = pupil.rows;
    let (c0, _) = pupil.cols;
    for ((i, j), &v) in adj_block.indexed_iter() {
        adj[[r0 + i, c0 + j]] = v;
    }
    Ok((fwd, adj))
}

fn centered_crop_c(full: &Array2<Complex<f64>>, window: (usize, usize)) -> Array2<Complex<f64>> {
    let (rows, cols) = full.dim();
    let r0 = rows / 2 - window.0 / 2;
    let c0 = cols / 2 - window.1 / 2;
    full.slice(s![r0..r0 + window.0, c0..c0 + window.1]).to_owned()
}

/// Far-field supervision target: light-field projection rendered in retina
/// coordinates for the channel.
pub fn render_farfield_target(
    lf: &LightField,
    p: &PupilState,
    channel: usize,
    cfg: &FarFieldConfig,
) -> Result<Array2<f64>> {
    let target_cfg = cfg.target_config(channel)?;
    if lf.resolution() != cfg.retina_window {
        return Err(Error::Config(format!(
            "far-field light field resolution {:?} must match the retina window {:?}",
            lf.resolution(),
            cfg.retina_window
        )));
    }
    Ok(project_lightfield(lf, p, channel, &target_cfg)?.intensity)
}

/// Memory instrumentation from a far-field optimization run.
#[derive(Debug, Clone, Copy, Default)]
pub struct FarFieldStats {
    /// Largest per-sample adjoint buffer, in complex elements.
    pub max_sample_buffer: usize,
    /// Full hologram size, in complex elements.
    pub full_field: usize,
}

/// Far-field phase optimization. Mirrors the near-field loop with
/// [`project_farfield`] and its adjoint; per-sample gradient work writes only
/// into the pupil's tile-aligned bounding box, merged in fixed batch order.
pub fn optimize_farfield(
    lf: &LightField,
    policy: &SupervisionPolicy,
    cfg: &FarFieldConfig,
    settings: &OptimizerSettings,
    seed: u64,
) -> Result<(PhaseVariables, Vec<TraceRow>, FarFieldStats)> {
    cfg.validate()?;
    if settings.iterations == 0 {
        return Err(Error::Config("iterations must be >= 1".into()));
    }
    let channels = cfg.optics.channels();
    if lf.channels() != channels {
        return Err(Error::Config(format!(
            "light field has {} channels but the optical config has {}",
            lf.channels(),
            channels
        )));
    }
    let eyebox = cfg.extent();
    policy.validate(eyebox)?;

    let shape = cfg.hologram_resolution;
    let mut phi = PhaseVariables::random(channels, settings.frames, shape, batch_seed(seed, 0));
    let mut adam =
        AdamState::new(&phi, settings.lr, settings.betas.0, settings.betas.1, settings.epsilon);
    let mut stats =
        FarFieldStats { max_sample_buffer: 0, full_field: shape.0 * shape.1 };

    let fixed = fixed_pupils(policy, eyebox);
    let fixed_targets: Option<Vec<Vec<Array2<f64>>>> = match &fixed {
        Some(pupils) => Some(
            pupils
                .iter()
                .map(|p| {
                    (0..channels)
                        .map(|c| render_farfield_target(lf, p, c, cfg))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let mut trace = Vec::with_capacity(settings.iterations);
    let mut initial_loss = f64::NAN;
    let mut high_loss_streak = 0usize;

    for iter in 0..settings.iterations {
        let t0 = Instant::now();
        let (pupils, targets, seed_used): (Vec<PupilState>, Vec<Vec<Array2<f64>>>, u64) =
            match (&fixed, &fixed_targets) {
                (Some(p), Some(t)) => (p.clone(), t.clone(), policy.rng_seed),
                _ => {
                    let pupils = sample_slfh_pupils(policy, lf, iter as u64, eyebox)?;
                    let targets = pupils
                        .par_iter()
                        .map(|p| {
                            (0..channels)
                                .map(|c| render_farfield_target(lf, p, c, cfg))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (pupils, targets, batch_seed(policy.rng_seed, iter as u64))
                }
            };

        let mut loss_total = 0.0;
        let mut grads: Vec<Array3<f64>> =
            phi.phases.iter().map(|p| Array3::zeros(p.dim())).collect();

        for c in 0..channels {
            let wavelength = cfg.optics.wavelength(c)?;
            let fields: Vec<Array2<Complex<f64>>> = (0..settings.frames)
                .into_par_iter()
                .map(|t| {
                    phi.phases[c]
                        .index_axis(ndarray::Axis(0), t)
                        .mapv(|p| Complex::from_polar(1.0, p))
                })
                .collect();

            for (p, target_set) in pupils.iter().zip(targets.iter()) {
                let pupil = Arc::new(build_spatial_pupil(p, cfg, wavelength)?);
                stats.max_sample_buffer =
                    stats.max_sample_buffer.max(pupil.values.len());

                let projected: Vec<Array2<Complex<f64>>> = fields
                    .par_iter()
                    .map(|u| {
                        centered_crop_c(&forward_field(u, &pupil, cfg), cfg.retina_window)
                    })
                    .collect();
                let mut mean = Array2::<f64>::zeros(cfg.retina_window);
                for v in &projected {
                    mean.zip_mut_with(v, |m, z| *m += z.norm_sqr());
                }
                mean.mapv_inplace(|x| x / settings.frames as f64);
                let pooled = pool2(&mean);
                let target_pooled = pool2(&target_set[c]);

                let (_, a, rho, loss) =
                    crate::optimizer::scale_and_residual(&pooled, &target_pooled, settings.loss_domain);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        x: p.shift[0],
                        y: p.shift[1],
                        z: p.focus,
                        d: p.diameter,
                    });
                }
                loss_total += loss;

                let g_pooled = crate::optimizer::residual_to_intensity_grad(&a, &rho, settings.loss_domain);
                let g_intensity = crate::optimizer::unpool_grad(&g_pooled);

                let blocks: Vec<Array2<Complex<f64>>> = projected
                    .par_iter()
                    .map(|v| {
                        let mut gv = v.clone();
                        gv.zip_mut_with(&g_intensity, |z, &g| {
                            *z *= g / settings.frames as f64
                        });
                        adjoint_field(&gv, &pupil, cfg)
                    })
                    .collect();

                let (r0, _) = pupil.rows;
                let (c0, _) = pupil.cols;
                for (t, block) in blocks.iter().enumerate() {
                    let u = &fields[t];
                    let mut frame = grads[c].index_axis_mut(ndarray::Axis(0), t);
                    for ((bi, bj), &g) in block.indexed_iter() {
                        let (gi, gj) = (r0 + bi, c0 + bj);
                        frame[[gi, gj]] += 2.0 * (u[[gi, gj]].conj() * g).im;
                    }
                }
            }
        }

        adam.update(&mut phi, &grads);

        if iter == 0 {
            initial_loss = loss_total;
        }
        if loss_total > 1e3 * initial_loss {
            high_loss_streak += 1;
            if high_loss_streak >= 50 {
                return Err(Error::Diverged {
                    iteration: iter,
                    loss: loss_total,
                    initial: initial_loss,
                });
            }
        } else {
            high_loss_streak = 0;
        }
        trace.push(TraceRow {
            iteration: iter,
            loss: loss_total,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            batch_seed: seed_used,
        });
    }
    Ok((phi, trace, stats))
}
