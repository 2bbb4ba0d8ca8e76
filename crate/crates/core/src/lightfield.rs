//! 4D light fields and the incoherent photographic projection operator.
//!
//! A light field is a regular grid of views indexed by pupil-plane position.
//! Refocusing follows the shift-and-add rule: focusing at distance `z`
//! samples view `q` at `r - (z/f) q`, so content rendered at depth `z0`
//! (displaced by `-(z0/f) q` in view `q`) aligns exactly when `z = z0`.
//! This is the same defocus geometry the wave-optics projection realizes,
//! which is what makes the two operators photo-consistent.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::optics::{OpticalConfig, PupilState};

/// Discrete 4D radiance: `V_y x V_x` views of `rows x cols x channels`
/// non-negative linear intensity, each tagged with its pupil-plane
/// coordinate in meters.
#[derive(Debug, Clone)]
pub struct LightField {
    views: Vec<Array3<f64>>,
    view_coords: Vec<[f64; 2]>,
    grid: (usize, usize),
    channels: usize,
    resolution: (usize, usize),
}

impl LightField {
    /// `views` are row-major over the `(row, col)` view grid; each view is
    /// `(channels, rows, cols)`.
    pub fn new(views: Vec<Array3<f64>>, view_coords: Vec<[f64; 2]>, grid: (usize, usize)) -> Result<Self> {
        if views.is_empty() || views.len() != grid.0 * grid.1 {
            return Err(Error::Metadata(format!(
                "expected {} views for a {}x{} grid, got {}",
                grid.0 * grid.1,
                grid.0,
                grid.1,
                views.len()
            )));
        }
        if view_coords.len() != views.len() {
            return Err(Error::Metadata("view_coords length must match view count".into()));
        }
        let shape = views[0].dim();
        for (k, v) in views.iter().enumerate() {
            if v.dim() != shape {
                return Err(Error::ViewResolutionMismatch {
                    row: k / grid.1,
                    col: k % grid.1,
                    got_rows: v.dim().1,
                    got_cols: v.dim().2,
                    want_rows: shape.1,
                    want_cols: shape.2,
                });
            }
            if v.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Metadata(format!("view {k} contains negative or NaN intensity")));
            }
        }
        Ok(Self {
            views,
            view_coords,
            grid,
            channels: shape.0,
            resolution: (shape.1, shape.2),
        })
    }

    /// Uniform symmetric view coordinates spanning `eyebox` (meters),
    /// row-major; a single view per axis sits on the axis.
    pub fn grid_coords(grid: (usize, usize), eyebox: (f64, f64)) -> Vec<[f64; 2]> {
        let axis = |n: usize, width: f64, i: usize| -> f64 {
            if n <= 1 {
                0.0
            } else {
                -width / 2.0 + i as f64 * (width / (n - 1) as f64)
            }
        };
        let mut coords = Vec::with_capacity(grid.0 * grid.1);
        for row in 0..grid.0 {
            for col in 0..grid.1 {
                coords.push([axis(grid.1, eyebox.1, col), axis(grid.0, eyebox.0, row)]);
            }
        }
        coords
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, index: usize, channel: usize) -> ArrayView2<'_, f64> {
        self.views[index].index_axis(ndarray::Axis(0), channel)
    }

    pub fn view_coord(&self, index: usize) -> [f64; 2] {
        self.view_coords[index]
    }

    pub fn view_coords(&self) -> &[[f64; 2]] {
        &self.view_coords
    }

    /// Indices of views whose center lies strictly inside the pupil disc.
    pub fn views_in_aperture(&self, p: &PupilState) -> Vec<usize> {
        let r = p.diameter / 2.0;
        self.view_coords
            .iter()
            .enumerate()
            .filter(|(_, q)| {
                let dx = q[0] - p.shift[0];
                let dy = q[1] - p.shift[1];
                (dx * dx + dy * dy).sqrt() < r
            })
            .map(|(k, _)| k)
            .collect()
    }
}

/// Photographic projection of a light field under one pupil state.
#[derive(Debug, Clone)]
pub struct TargetImage {
    pub intensity: Array2<f64>,
    pub pupil: PupilState,
    pub channel: usize,
}

/// Shift-and-add refocus: the normalized average over views inside the pupil
/// disc, each sampled at `r - (z/f) q_k` with bilinear interpolation.
///
/// Shifted views are zero-padded outside their footprint and a per-pixel
/// validity count normalizes edge pixels by the views actually covering them.
pub fn project_lightfield(
    lf: &LightField,
    p: &PupilState,
    channel: usize,
    config: &OpticalConfig,
) -> Result<TargetImage> {
    if channel >= lf.channels {
        return Err(Error::Config(format!(
            "channel {channel} out of range for light field with {} channels",
            lf.channels
        )));
    }
    let included = lf.views_in_aperture(p);
    if included.is_empty() {
        return Err(Error::empty_aperture(p));
    }

    let (rows, cols) = lf.resolution;
    let mut acc = Array2::<f64>::zeros((rows, cols));
    let mut weight = Array2::<f64>::zeros((rows, cols));
    let shear = p.focus / config.focal_length;

    for &k in &included {
        let q = lf.view_coord(k);
        // Sample position offset in detector pixels.
        let dx = shear * q[0] / config.detector_pitch;
        let dy = shear * q[1] / config.detector_pitch;
        accumulate_shifted(lf.view(k, channel), dy, dx, &mut acc, &mut weight);
    }

    let mut intensity = acc;
    intensity.zip_mut_with(&weight, |v, &w| {
        *v = if w > 1e-12 { *v / w } else { 0.0 };
    });
    Ok(TargetImage { intensity, pupil: *p, channel })
}

/// Pinhole photograph through a single view: the view shifted by the refocus
/// rule for its own coordinate. Used by fixed-grid supervision when a grid
/// pupil captures no view center.
pub fn project_single_view(
    lf: &LightField,
    view_index: usize,
    p: &PupilState,
    channel: usize,
    config: &OpticalConfig,
) -> TargetImage {
    let (rows, cols) = lf.resolution;
    let mut acc = Array2::<f64>::zeros((rows, cols));
    let mut weight = Array2::<f64>::zeros((rows, cols));
    let q = lf.view_coord(view_index);
    let shear = p.focus / config.focal_length;
    let dx = shear * q[0] / config.detector_pitch;
    let dy = shear * q[1] / config.detector_pitch;
    accumulate_shifted(lf.view(view_index, channel), dy, dx, &mut acc, &mut weight);
    acc.zip_mut_with(&weight, |v, &w| {
        *v = if w > 1e-12 { *v / w } else { 0.0 };
    });
    TargetImage { intensity: acc, pupil: *p, channel }
}

impl LightField {
    /// Index of the view whose coordinate is closest to the pupil center.
    pub fn nearest_view(&self, p: &PupilState) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, q) in self.view_coords.iter().enumerate() {
            let dx = q[0] - p.shift[0];
            let dy = q[1] - p.shift[1];
            let d = dx * dx + dy * dy;
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Adds `view` sampled at `(i - dy, j - dx)` into `acc`, accumulating the
/// bilinear in-bounds weight into `weight`.
fn accumulate_shifted(
    view: ArrayView2<'_, f64>,
    dy: f64,
    dx: f64,
    acc: &mut Array2<f64>,
    weight: &mut Array2<f64>,
) {
    let (rows, cols) = view.dim();
    for i in 0..rows {
        let sy = i as f64 - dy;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0 = y0 as isize;
        for j in 0..cols {
            let sx = j as f64 - dx;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0 = x0 as isize;

            let mut v = 0.0;
            let mut w = 0.0;
            for (dyi, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                let y = y0 + dyi;
                if y < 0 || y >= rows as isize || wy == 0.0 {
                    continue;
                }
                for (dxi, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let x = x0 + dxi;
                    if x < 0 || x >= cols as isize || wx == 0.0 {
                        continue;
                    }
                    let wgt = wy * wx;
                    v += wgt * view[[y as usize, x as usize]];
                    w += wgt;
                }
            }
            acc[[i, j]] += v;
            weight[[i, j]] += w;
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LightFieldMeta {
    grid: [usize; 2],
    eyebox_mm: [f64; 2],
    image_pattern: String,
    #[serde(default = "default_gamma")]
    gamma: String,
}

fn default_gamma() -> String {
    "srgb".into()
}

/// Loads a light field from a directory holding `meta.json` plus one PNG per
/// view. Views are ordered row-major by `(row, col)` grid index; 8/16-bit
/// samples are linearized per the declared gamma (sRGB by default).
pub fn load_lightfield(dir: &Path) -> Result<LightField> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::Metadata(format!("{} not found", meta_path.display())));
    }
    let meta: LightFieldMeta = serde_json::from_reader(std::fs::File::open(&meta_path)?)
        .map_err(|e| Error::Metadata(format!("{}: {e}", meta_path.display())))?;
    let grid = (meta.grid[0], meta.grid[1]);
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Metadata("grid dimensions must be nonzero".into()));
    }
    let srgb = match meta.gamma.as_str() {
        "srgb" => true,
        "linear" => false,
        other => return Err(Error::Metadata(format!("unknown gamma '{other}'"))),
    };

    let mut views = Vec::with_capacity(grid.0 * grid.1);
    for row in 0..grid.0 {
        for col in 0..grid.1 {
            let name = meta
                .image_pattern
                .replace("{row}", &row.to_string())
                .replace("{col}", &col.to_string());
            let path = dir.join(&name);
            if !path.exists() {
                return Err(Error::MissingView { row, col, path: path.display().to_string() });
            }
            let img = image::open(&path)?;
            views.push(decode_view(img, srgb));
        }
    }

    let eyebox = (meta.eyebox_mm[0] * 1e-3, meta.eyebox_mm[1] * 1e-3);
    let coords = LightField::grid_coords(grid, eyebox);
    LightField::new(views, coords, grid)
}

fn decode_view(img: image::DynamicImage, srgb: bool) -> Array3<f64> {
    use image::DynamicImage::*;
    let lin = |v: f64| if srgb { srgb_to_linear(v) } else { v };
    match img {
        ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, i, j)| {
                lin(buf.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0)
            })
        }
        ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, i, j)| {
                lin(buf.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0)
            })
        }
        other => {
            let buf = other.to_rgb16();
            let (w, h) = buf.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
                lin(buf.get_pixel(j as u32, i as u32).0[c] as f64 / 65535.0)
            })
        }
    }
}

pub(crate) fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub(crate) fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}
