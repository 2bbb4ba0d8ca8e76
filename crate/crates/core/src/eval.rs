//! Image-quality metrics and the pupil-sweep evaluation protocol.
//!
//! Reconstructions are compared against light-field targets over four sweep
//! categories: varying aperture (focus and position fixed), focal stack
//! (diameter and position fixed), light-field grid (diameter and focus
//! fixed), and random pupils. Per-state rows are retained so worst-case
//! statistics stay checkable, not just the aggregates.

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::farfield::{project_farfield, render_farfield_target, FarFieldConfig};
use crate::lightfield::{project_lightfield, LightField};
use crate::optics::{FreqGrid, OpticalConfig, PupilRanges, PupilState};
use crate::optimizer::PhaseVariables;
use crate::wavefield::{average_intensity, pool2, KernelCache, KernelOptions};

/// SSIM parameters, recorded in every report header.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB with the peak taken from the reference
/// `b`. Identical images return the `+inf` sentinel.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "psnr requires equal shapes");
    let mse: f64 =
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let peak = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    10.0 * (peak * peak / mse).log10()
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), k1 = 0.01,
/// k2 = 0.03, and the dynamic range taken from the reference `b`.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "ssim requires equal shapes");
    let range = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-12);
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);

    let mu_a = gaussian_filter(a);
    let mu_b = gaussian_filter(b);
    let aa = gaussian_filter(&(a * a));
    let bb = gaussian_filter(&(b * b));
    let ab = gaussian_filter(&(a * b));

    let mut sum = 0.0;
    for ((i, j), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[[i, j]];
        let va = (aa[[i, j]] - ma * ma).max(0.0);
        let vb = (bb[[i, j]] - mb * mb).max(0.0);
        let cov = ab[[i, j]] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        sum += s;
    }
    sum / mu_a.len() as f64
}

/// Separable Gaussian filter with reflected borders.
fn gaussian_filter(x: &Array2<f64>) -> Array2<f64> {
    let half = SSIM_WINDOW / 2;
    let kernel: Vec<f64> = {
        let mut k: Vec<f64> = (0..SSIM_WINDOW)
            .map(|i| {
                let d = i as f64 - half as f64;
                (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    };
    let (rows, cols) = x.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - i - 1;
            }
        }
        i as usize
    };
    let mut tmp = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                acc += w * x[[i, reflect(j as isize + k as isize - half as isize, cols)]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                acc += w * tmp[[reflect(i as isize + k as isize - half as isize, rows), j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// The four sweep categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    VaryingAperture,
    FocalStack,
    LightField,
    Random,
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweepKind::VaryingAperture => "varying_aperture",
            SweepKind::FocalStack => "focal_stack",
            SweepKind::LightField => "light_field",
            SweepKind::Random => "random",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub kind: SweepKind,
    pub pupil: PupilState,
    pub channel: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
}

fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    let variance =
        finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / finite.len().max(1) as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    Aggregate { n, mean, variance, min }
}

/// Per-state PSNR/SSIM records for one sweep plus its aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PupilSweepReport {
    pub kind: SweepKind,
    pub records: Vec<SweepRecord>,
    pub ssim_aggregate: Aggregate,
    pub psnr_aggregate: Aggregate,
}

impl PupilSweepReport {
    fn from_records(kind: SweepKind, records: Vec<SweepRecord>) -> Self {
        let ssims: Vec<f64> = records.iter().map(|r| r.ssim).collect();
        let psnrs: Vec<f64> = records.iter().map(|r| r.psnr).collect();
        Self {
            kind,
            ssim_aggregate: aggregate(&ssims),
            psnr_aggregate: aggregate(&psnrs),
            records,
        }
    }
}

/// Rendering backend for reconstructions and targets: near-field (SLM in the
/// image plane) or far-field (SLM in the pupil plane).
pub enum Projector<'a> {
    Near(&'a OpticalConfig),
    Far(&'a FarFieldConfig),
}

impl<'a> Projector<'a> {
    /// The smallest supervising eyebox of the geometry.
    pub fn eyebox_min(&self) -> f64 {
        match self {
            Projector::Near(cfg) => cfg.min_eyebox_width(),
            Projector::Far(cfg) => cfg.extent(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Projector::Near(cfg) => cfg.channels(),
            Projector::Far(cfg) => cfg.optics.channels(),
        }
    }

    /// Speckle-averaged (temporal mean + 2x2 pooled) reconstruction of the
    /// phase stack under one pupil state.
    pub fn reconstruct(
        &self,
        phi: &PhaseVariables,
        p: &PupilState,
        channel: usize,
    ) -> Result<Array2<f64>> {
        match self {
            Projector::Near(cfg) => {
                let grid = FreqGrid::new(phi.shape(), cfg.slm_pitch);
                let cache = KernelCache::default();
                let kernel = cache.get_or_build(
                    &grid,
                    p,
                    cfg.wavelength(channel)?,
                    cfg.focal_length,
                    KernelOptions::default(),
                )?;
                let frames: Vec<Array2<f64>> = (0..phi.frames())
                    .into_par_iter()
                    .map(|t| {
                        let u = phi.phases[channel]
                            .index_axis(ndarray::Axis(0), t)
                            .mapv(|ph| Complex::from_polar(1.0, ph));
                        let mut spec = crate::fft::fft2(&u);
                        spec.zip_mut_with(&kernel.values, |s, k| *s *= k);
                        crate::fft::ifft2_owned(spec).mapv(|z| z.norm_sqr())
                    })
                    .collect();
                average_intensity(&frames)
            }
            Projector::Far(cfg) => {
                let frames: Vec<Array2<f64>> = (0..phi.frames())
                    .map(|t| {
                        let u = phi.phases[channel]
                            .index_axis(ndarray::Axis(0), t)
                            .mapv(|ph| Complex::from_polar(1.0, ph));
                        project_farfield(&u, p, cfg, channel)
                    })
                    .collect::<Result<Vec<_>>>()?;
                average_intensity(&frames)
            }
        }
    }

    /// Light-field target pooled to the reconstruction resolution.
    pub fn target(&self, lf: &LightField, p: &PupilState, channel: usize) -> Result<Array2<f64>> {
        let full = match self {
            Projector::Near(cfg) => project_lightfield(lf, p, channel, cfg)?.intensity,
            Projector::Far(cfg) => render_farfield_target(lf, p, channel, cfg)?,
        };
        Ok(pool2(&full))
    }
}

/// Least-squares amplitude scale of `recon` onto `target`, mirroring the
/// training loss; reconstruction intensity is divided by `kappa^2` before
/// scoring so metrics ignore the unobservable global gain.
pub fn scale_to_target(recon: &Array2<f64>, target: &Array2<f64>) -> Array2<f64> {
    let num: f64 = recon
        .iter()
        .zip(target.iter())
        .map(|(&r, &t)| r.max(0.0).sqrt() * t.max(0.0).sqrt())
        .sum();
    let den: f64 = target.iter().map(|&t| t.max(0.0)).sum();
    let kappa = if den > 0.0 { num / den } else { 0.0 };
    if kappa > 1e-12 {
        recon.mapv(|r| r / (kappa * kappa))
    } else {
        recon.clone()
    }
}

fn score(recon: &Array2<f64>, target: &Array2<f64>) -> (f64, f64) {
    let scaled = scale_to_target(recon, target);
    (psnr(&scaled, target), ssim(&scaled, target))
}

/// Pupil states of one sweep category.
///
/// Frozen parameters: varying-aperture fixes `s = 0, z = z_min` and scans
/// diameters; focal-stack fixes `s = 0, d = eyebox` and scans focus;
/// light-field fixes `d = eyebox/4, z = z_min` and scans shifts on a grid
/// (`n_states` rounded down to a square); random draws from the ranges.
pub fn sweep_pupils(
    kind: SweepKind,
    n_states: usize,
    ranges: &PupilRanges,
    eyebox_min: f64,
    seed: u64,
) -> Vec<PupilState> {
    match kind {
        SweepKind::VaryingAperture => (0..n_states)
            .map(|i| {
                let t = if n_states == 1 { 0.0 } else { i as f64 / (n_states - 1) as f64 };
                PupilState {
                    shift: [0.0, 0.0],
                    focus: ranges.z_min,
                    diameter: ranges.d_min + t * (ranges.d_max - ranges.d_min),
                }
            })
            .collect(),
        SweepKind::FocalStack => (0..n_states)
            .map(|i| {
                let t = if n_states == 1 { 0.0 } else { i as f64 / (n_states - 1) as f64 };
                PupilState {
                    shift: [0.0, 0.0],
                    focus: ranges.z_min + t * (ranges.z_max - ranges.z_min),
                    diameter: eyebox_min,
                }
            })
            .collect(),
        SweepKind::LightField => {
            let g = (n_states as f64).sqrt().floor().max(1.0) as usize;
            let d = eyebox_min / 4.0;
            let half = (eyebox_min - d) / 2.0;
            let pos = |i: usize| -> f64 {
                if g == 1 {
                    0.0
                } else {
                    -half + 2.0 * half * i as f64 / (g - 1) as f64
                }
            };
            let mut out = Vec::with_capacity(g * g);
            for iy in 0..g {
                for ix in 0..g {
                    out.push(PupilState {
                        shift: [pos(ix), pos(iy)],
                        focus: ranges.z_min,
                        diameter: d,
                    });
                }
            }
            out
        }
        SweepKind::Random => random_pupils(n_states, ranges, eyebox_min, seed, None),
    }
}

/// Random pupil states from the configured ranges. With a light field given,
/// draws whose aperture holds no view are rejected and redrawn so exactly
/// `n_states` scoreable states come back.
pub fn random_pupils(
    n_states: usize,
    ranges: &PupilRanges,
    eyebox_min: f64,
    seed: u64,
    lf: Option<&LightField>,
) -> Vec<PupilState> {
    // Stream offset keeps evaluation draws disjoint from any training
    // stream built from the same numeric seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xE7A1);
    let mut out = Vec::with_capacity(n_states);
    let mut rejected = 0usize;
    while out.len() < n_states {
        let ux: f64 = rng.random_range(-1.0..=1.0);
        let uy: f64 = rng.random_range(-1.0..=1.0);
        let z: f64 = rng.random_range(ranges.z_min..=ranges.z_max);
        let d: f64 = rng.random_range(ranges.d_min..=ranges.d_max);
        let r_max = ranges.effective_shift_max(d, eyebox_min);
        let p = PupilState { shift: [ux * r_max, uy * r_max], focus: z, diameter: d };
        if let Some(lf) = lf {
            if lf.views_in_aperture(&p).is_empty() {
                rejected += 1;
                if rejected > 100_000 {
                    break;
                }
                continue;
            }
        }
        out.push(p);
    }
    out
}

/// Scores the phase stack against light-field targets over one sweep.
/// States whose aperture holds no view are skipped with a warning (the
/// random category can draw them on sparse view grids).
pub fn run_sweep(
    phi: &PhaseVariables,
    lf: &LightField,
    kind: SweepKind,
    n_states: usize,
    seed: u64,
    ranges: &PupilRanges,
    projector: &Projector<'_>,
) -> Result<PupilSweepReport> {
    let pupils = if kind == SweepKind::Random {
        random_pupils(n_states, ranges, projector.eyebox_min(), seed, Some(lf))
    } else {
        sweep_pupils(kind, n_states, ranges, projector.eyebox_min(), seed)
    };
    let mut records = Vec::new();
    for p in &pupils {
        for c in 0..projector.channels() {
            let target = match projector.target(lf, p, c) {
                Ok(t) => t,
                Err(Error::EmptyAperture { .. }) => {
                    log::warn!("sweep {kind}: skipping empty-aperture pupil {p:?}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let recon = projector.reconstruct(phi, p, c)?;
            let (psnr_db, ssim_v) = score(&recon, &target);
            records.push(SweepRecord { kind, pupil: *p, channel: c, psnr: psnr_db, ssim: ssim_v });
        }
    }
    Ok(PupilSweepReport::from_records(kind, records))
}

/// Epipolar slices: the central row of the reconstruction stacked over a
/// horizontal pupil trajectory, one strip per focus value, plus the same
/// strips built from the light-field targets.
#[derive(Debug, Clone)]
pub struct EpipolarSet {
    pub z_values: Vec<f64>,
    /// Per z: `(n_positions, cols)` reconstruction strip.
    pub recon: Vec<Array2<f64>>,
    /// Per z: matching target strip.
    pub target: Vec<Array2<f64>>,
    /// Shift positions along x, meters.
    pub positions: Vec<f64>,
}

pub fn epipolar_slice(
    phi: &PhaseVariables,
    lf: &LightField,
    n_positions: usize,
    diameter: f64,
    z_values: &[f64],
    channel: usize,
    projector: &Projector<'_>,
) -> Result<EpipolarSet> {
    let w = projector.eyebox_min();
    let half = (w - diameter) / 2.0;
    let positions: Vec<f64> = (0..n_positions)
        .map(|i| {
            if n_positions == 1 {
                0.0
            } else {
                -half + 2.0 * half * i as f64 / (n_positions - 1) as f64
            }
        })
        .collect();

    let mut recon_strips = Vec::with_capacity(z_values.len());
    let mut target_strips = Vec::with_capacity(z_values.len());
    for &z in z_values {
        let mut recon_strip: Option<Array2<f64>> = None;
        let mut target_strip: Option<Array2<f64>> = None;
        for (row, &x) in positions.iter().enumerate() {
            let p = PupilState { shift: [x, 0.0], focus: z, diameter };
            let recon = projector.reconstruct(phi, &p, channel)?;
            let target = projector.target(lf, &p, channel)?;
            let scaled = scale_to_target(&recon, &target);
            let mid = recon.dim().0 / 2;
            let rs = recon_strip
                .get_or_insert_with(|| Array2::zeros((n_positions, scaled.dim().1)));
            let ts = target_strip
                .get_or_insert_with(|| Array2::zeros((n_positions, target.dim().1)));
            for j in 0..scaled.dim().1 {
                rs[[row, j]] = scaled[[mid, j]];
                ts[[row, j]] = target[[mid, j]];
            }
        }
        recon_strips.push(recon_strip.unwrap_or_else(|| Array2::zeros((0, 0))));
        target_strips.push(target_strip.unwrap_or_else(|| Array2::zeros((0, 0))));
    }
    Ok(EpipolarSet {
        z_values: z_values.to_vec(),
        recon: recon_strips,
        target: target_strips,
        positions: positions,
    })
}

/// Least-squares slope of the brightest feature through an epipolar strip:
/// columns of the per-row intensity peak (parabolic subpixel refinement)
/// regressed against the row index. Returns pixels per row step.
pub fn epipolar_peak_slope(strip: &Array2<f64>) -> f64 {
    let (rows, cols) = strip.dim();
    let mut xs = Vec::with_capacity(rows);
    let mut ys = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut pj = 0usize;
        let mut pv = f64::NEG_INFINITY;
        for j in 0..cols {
            if strip[[i, j]] > pv {
                pv = strip[[i, j]];
                pj = j;
            }
        }
        let mut x = pj as f64;
        if pj > 0 && pj + 1 < cols {
            let (l, c, r) = (strip[[i, pj - 1]], strip[[i, pj]], strip[[i, pj + 1]]);
            let denom = l - 2.0 * c + r;
            if denom.abs() > 1e-12 {
                x += 0.5 * (l - r) / denom;
            }
        }
        xs.push(i as f64);
        ys.push(x);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
