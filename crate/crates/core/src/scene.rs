//! Procedural multi-plane test scenes rendered into light fields.
//!
//! A scene is a list of textured fronto-parallel planes with occlusion masks
//! plus optional point sources. Each view renders every plane shifted by
//! `-(depth/f) q_k` and composites back-to-front (ascending depth; larger
//! depth is nearer the viewer and occludes). Point sources are splatted
//! additively after the planes.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::lightfield::LightField;
use crate::optics::OpticalConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// View resolution (rows, cols).
    pub resolution: [usize; 2],
    /// View grid (rows, cols).
    pub views: [usize; 2],
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Eyebox spanned by the view grid, millimeters; `None` uses the
    /// smallest per-channel eyebox of the optical config.
    #[serde(default)]
    pub eyebox_mm: Option<[f64; 2]>,
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub points: Vec<PointSpec>,
}

fn default_channels() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub depth_mm: f64,
    /// Procedural pattern id (`constant:v`, `checker:cells`, `stripes:cells`,
    /// `noise:seed`, `gradient:x|y`, `rings:cells`) or a PNG path.
    pub texture: String,
    /// Occlusion mask: `full`, `rect:x0,y0,x1,y1` or `circle:cx,cy,r`
    /// (fractional coordinates), `half:left|right|top|bottom`, or a PNG path.
    #[serde(default = "default_mask")]
    pub mask: String,
    /// Per-channel intensity gains; padded with the last value.
    #[serde(default)]
    pub gain: Vec<f64>,
}

fn default_mask() -> String {
    "full".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    pub depth_mm: f64,
    /// (row, col) position in pixels.
    pub position_px: [f64; 2],
    pub intensity: f64,
}

impl SceneSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_reader(std::fs::File::open(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution[0] == 0 || self.resolution[1] == 0 {
            return Err(Error::Config("scene resolution must be nonzero".into()));
        }
        if self.views[0] == 0 || self.views[1] == 0 {
            return Err(Error::Config("scene view grid must be nonzero".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("scene channel count must be nonzero".into()));
        }
        if self.points.iter().any(|p| p.intensity < 0.0) {
            return Err(Error::Config("point intensities must be non-negative".into()));
        }
        if self.planes.iter().any(|p| p.gain.iter().any(|&g| g < 0.0)) {
            return Err(Error::Config("plane gains must be non-negative".into()));
        }
        Ok(())
    }
}

/// Renders the scene into a light field on the view grid spanning the
/// configured eyebox.
pub fn synthesize_test_scene(spec: &SceneSpec, config: &OpticalConfig) -> Result<LightField> {
    spec.validate()?;
    let res = (spec.resolution[0], spec.resolution[1]);
    let grid = (spec.views[0], spec.views[1]);
    let eyebox = match spec.eyebox_mm {
        Some([h, w]) => (h * 1e-3, w * 1e-3),
        None => {
            let w = config.min_eyebox_width();
            (w, w)
        }
    };
    let coords = LightField::grid_coords(grid, eyebox);

    // Resolve textures/masks once; stable sort by depth keeps listing order
    // for coincident planes.
    let mut planes: Vec<(f64, Array2<f64>, Array2<f64>, Vec<f64>)> = spec
        .planes
        .iter()
        .map(|p| {
            let tex = pattern(&p.texture, res)?;
            let mask = mask_pattern(&p.mask, res)?;
            if tex.iter().any(|&v| v < 0.0) {
                return Err(Error::Config(format!("texture '{}' has negative values", p.texture)));
            }
            let mut gain = p.gain.clone();
            if gain.is_empty() {
                gain.push(1.0);
            }
            while gain.len() < spec.channels {
                gain.push(*gain.last().unwrap());
            }
            Ok((p.depth_mm * 1e-3, tex, mask, gain))
        })
        .collect::<Result<_>>()?;
    planes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let views = coords
        .iter()
        .map(|q| {
            let mut canvas = Array3::<f64>::zeros((spec.channels, res.0, res.1));
            for (depth, tex, mask, gain) in &planes {
                // Content at depth z appears displaced by -(z/f) q in view q,
                // i.e. sampled at r + (z/f) q.
                let shear = depth / config.focal_length;
                let dx = shear * q[0] / config.detector_pitch;
                let dy = shear * q[1] / config.detector_pitch;
                let tex_s = sample_shifted(tex, dy, dx);
                let mask_s = sample_shifted(mask, dy, dx);
                for c in 0..spec.channels {
                    let g = gain[c];
                    for i in 0..res.0 {
                        for j in 0..res.1 {
                            let m = mask_s[[i, j]];
                            canvas[[c, i, j]] =
                                canvas[[c, i, j]] * (1.0 - m) + m * g * tex_s[[i, j]];
                        }
                    }
                }
            }
            for point in &spec.points {
                let shear = point.depth_mm * 1e-3 / config.focal_length;
                let py = point.position_px[0] - shear * q[1] / config.detector_pitch;
                let px = point.position_px[1] - shear * q[0] / config.detector_pitch;
                for c in 0..spec.channels {
                    splat(&mut canvas, c, py, px, point.intensity);
                }
            }
            canvas
        })
        .collect();

    LightField::new(views, coords, grid)
}

/// Bilinear sample of `img` at `(i + dy, j + dx)`, zero outside: the content
/// appears translated by `(-dy, -dx)`.
fn sample_shifted(img: &Array2<f64>, dy: f64, dx: f64) -> Array2<f64> {
    let (rows, cols) = img.dim();
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let sy = i as f64 + dy;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0 = y0 as isize;
        for j in 0..cols {
            let sx = j as f64 + dx;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0 = x0 as isize;
            let mut v = 0.0;
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
                    v += wy * wx * img[[y as usize, x as usize]];
                }
            }
            out[[i, j]] = v;
        }
    }
    out
}

fn splat(canvas: &mut Array3<f64>, c: usize, y: f64, x: f64, val: f64) {
    let (y0, x0) = (y.floor() as isize, x.floor() as isize);
    let (fy, fx) = (y - y.floor(), x - x.floor());
    let (rows, cols) = (canvas.dim().1, canvas.dim().2);
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < rows && (xx as usize) < cols {
                canvas[[c, yy as usize, xx as usize]] += wy * wx * val;
            }
        }
    }
}

fn pattern(id: &str, res: (usize, usize)) -> Result<Array2<f64>> {
    let (kind, arg) = id.split_once(':').unwrap_or((id, ""));
    let (rows, cols) = res;
    let arr = match kind {
        "constant" => {
            let v: f64 = parse_arg(arg, 1.0)?;
            Array2::from_elem(res, v)
        }
        "checker" => {
            let cell: f64 = parse_arg(arg, 16.0)?;
            Array2::from_shape_fn(res, |(i, j)| {
                let a = (i as f64 / cell).floor() as i64 + (j as f64 / cell).floor() as i64;
                if a % 2 == 0 {
                    1.0
                } else {
                    0.05
                }
            })
        }
        "stripes" => {
            let cell: f64 = parse_arg(arg, 8.0)?;
            Array2::from_shape_fn(res, |(_, j)| {
                if (j as f64 / cell).floor() as i64 % 2 == 0 {
                    1.0
                } else {
                    0.05
                }
            })
        }
        "noise" => {
            use rand::{Rng, SeedableRng};
            let seed: u64 = parse_arg(arg, 0.0)? as u64;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_fn(res, |_| rng.random_range(0.05..1.0))
        }
        "gradient" => {
            if arg == "y" {
                Array2::from_shape_fn(res, |(i, _)| i as f64 / (rows.max(2) - 1) as f64)
            } else {
                Array2::from_shape_fn(res, |(_, j)| j as f64 / (cols.max(2) - 1) as f64)
            }
        }
        "rings" => {
            let cell: f64 = parse_arg(arg, 12.0)?;
            let (cy, cx) = (rows as f64 / 2.0, cols as f64 / 2.0);
            Array2::from_shape_fn(res, |(i, j)| {
                let r = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                if (r / cell).floor() as i64 % 2 == 0 {
                    1.0
                } else {
                    0.1
                }
            })
        }
        _ => return load_gray_png(id, res),
    };
    Ok(arr)
}

fn mask_pattern(id: &str, res: (usize, usize)) -> Result<Array2<f64>> {
    let (rows, cols) = res;
    let (kind, arg) = id.split_once(':').unwrap_or((id, ""));
    let arr = match kind {
        "full" => Array2::from_elem(res, 1.0),
        "rect" => {
            let v = parse_floats(arg, 4)?;
            Array2::from_shape_fn(res, |(i, j)| {
                let x = j as f64 / cols as f64;
                let y = i as f64 / rows as f64;
                if x >= v[0] && y >= v[1] && x < v[2] && y < v[3] {
                    1.0
                } else {
                    0.0
                }
            })
        }
        "circle" => {
            let v = parse_floats(arg, 3)?;
            Array2::from_shape_fn(res, |(i, j)| {
                let x = j as f64 / cols as f64;
                let y = i as f64 / rows as f64;
                if ((x - v[0]).powi(2) + (y - v[1]).powi(2)).sqrt() < v[2] {
                    1.0
                } else {
                    0.0
                }
            })
        }
        "half" => Array2::from_shape_fn(res, |(i, j)| {
            let inside = match arg {
                "left" => j < cols / 2,
                "right" => j >= cols / 2,
                "top" => i < rows / 2,
                "bottom" => i >= rows / 2,
                _ => true,
            };
            if inside {
                1.0
            } else {
                0.0
            }
        }),
        _ => return load_gray_png(id, res),
    };
    Ok(arr)
}

fn load_gray_png(path: &str, res: (usize, usize)) -> Result<Array2<f64>> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != res {
        return Err(Error::Config(format!(
            "image '{path}' is {h}x{w}, scene expects {}x{}",
            res.0, res.1
        )));
    }
    Ok(Array2::from_shape_fn(res, |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0
    }))
}

fn parse_arg(arg: &str, default: f64) -> Result<f64> {
    if arg.is_empty() {
        return Ok(default);
    }
    arg.parse().map_err(|_| Error::Config(format!("bad pattern argument '{arg}'")))
}

fn parse_floats(arg: &str, n: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = arg
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad pattern arguments '{arg}'")))?;
    if vals.len() != n {
        return Err(Error::Config(format!("expected {n} arguments in '{arg}'")));
    }
    Ok(vals)
}
