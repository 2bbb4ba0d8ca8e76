//! Binary grid dumps and PNG export.
//!
//! Float grids use a 16-byte header of four little-endian u32 words:
//! `{rows, cols, dtype, endian}` with dtype 1 = f32 and 2 = interleaved
//! complex f32, endian tag fixed at 0x01020304. Data follows row-major as
//! little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::lightfield::linear_to_srgb;

pub const DTYPE_F32: u32 = 1;
pub const DTYPE_C32: u32 = 2;
pub const ENDIAN_TAG: u32 = 0x0102_0304;

fn write_header(w: &mut impl Write, rows: u32, cols: u32, dtype: u32) -> Result<()> {
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    w.write_all(&dtype.to_le_bytes())?;
    w.write_all(&ENDIAN_TAG.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(u32, u32, u32)> {
    let mut buf = [0u8; 16];
    r.read_exact(&mut buf)?;
    let word = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap());
    if word(3) != ENDIAN_TAG {
        return Err(Error::Config(format!("bad endianness tag {:#010x}", word(3))));
    }
    Ok((word(0), word(1), word(2)))
}

/// Writes a real grid as f32 with the standard header.
pub fn write_f32_grid(path: &Path, grid: &Array2<f64>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut file, grid.nrows() as u32, grid.ncols() as u32, DTYPE_F32)?;
    for &v in grid.iter() {
        file.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32_grid(path: &Path) -> Result<Array2<f64>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let (rows, cols, dtype) = read_header(&mut file)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Config(format!("expected dtype {DTYPE_F32}, got {dtype}")));
    }
    let mut data = vec![0u8; rows as usize * cols as usize * 4];
    file.read_exact(&mut data)?;
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows as usize, cols as usize), values)
        .map_err(|e| Error::Config(e.to_string()))
}

/// Writes a complex grid as interleaved (re, im) f32.
pub fn write_c32_grid(path: &Path, grid: &Array2<Complex<f64>>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut file, grid.nrows() as u32, grid.ncols() as u32, DTYPE_C32)?;
    for v in grid.iter() {
        file.write_all(&(v.re as f32).to_le_bytes())?;
        file.write_all(&(v.im as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_c32_grid(path: &Path) -> Result<Array2<Complex<f64>>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let (rows, cols, dtype) = read_header(&mut file)?;
    if dtype != DTYPE_C32 {
        return Err(Error::Config(format!("expected dtype {DTYPE_C32}, got {dtype}")));
    }
    let mut data = vec![0u8; rows as usize * cols as usize * 8];
    file.read_exact(&mut data)?;
    let values: Vec<Complex<f64>> = data
        .chunks_exact(8)
        .map(|c| {
            Complex::new(
                f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64,
                f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64,
            )
        })
        .collect();
    Array2::from_shape_vec((rows as usize, cols as usize), values)
        .map_err(|e| Error::Config(e.to_string()))
}

/// SLM-ready phase export: `phi mod 2pi` quantized linearly onto `[0, 255]`.
pub fn write_phase_png(path: &Path, phase: &Array2<f64>) -> Result<()> {
    let (rows, cols) = phase.dim();
    let mut img = image::GrayImage::new(cols as u32, rows as u32);
    for ((i, j), &p) in phase.indexed_iter() {
        let wrapped = p.rem_euclid(std::f64::consts::TAU);
        let level = ((wrapped / std::f64::consts::TAU) * 256.0).floor().min(255.0) as u8;
        img.put_pixel(j as u32, i as u32, image::Luma([level]));
    }
    img.save(path)?;
    Ok(())
}

/// Intensity export: scaled by `1/scale` (pass the target peak to keep a
/// reconstruction/target pair comparable), sRGB-encoded, 8-bit grayscale.
pub fn write_intensity_png(path: &Path, intensity: &Array2<f64>, scale: f64) -> Result<()> {
    let (rows, cols) = intensity.dim();
    let s = if scale > 0.0 { scale } else { 1.0 };
    let mut img = image::GrayImage::new(cols as u32, rows as u32);
    for ((i, j), &v) in intensity.indexed_iter() {
        let level = (linear_to_srgb((v / s).clamp(0.0, 1.0)) * 255.0).round() as u8;
        img.put_pixel(j as u32, i as u32, image::Luma([level]));
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.f32");
        let grid = Array2::from_shape_fn((5, 7), |(i, j)| (i as f64 - j as f64) * 0.25);
        write_f32_grid(&path, &grid).unwrap();
        let back = read_f32_grid(&path).unwrap();
        assert_eq!(back.dim(), (5, 7));
        for (a, b) in grid.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // header is exactly 16 bytes + payload
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 16 + 5 * 7 * 4);
    }

    #[test]
    fn c32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.c32");
        let grid =
            Array2::from_shape_fn((3, 4), |(i, j)| Complex::new(i as f64, -(j as f64)));
        write_c32_grid(&path, &grid).unwrap();
        let back = read_c32_grid(&path).unwrap();
        for (a, b) in grid.iter().zip(back.iter()) {
            assert_eq!(a.re as f32, b.re as f32);
            assert_eq!(a.im as f32, b.im as f32);
        }
    }

    #[test]
    fn phase_png_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phase.png");
        let mut phase = Array2::zeros((2, 2));
        phase[[0, 0]] = 0.0;
        phase[[0, 1]] = std::f64::consts::PI; // mid-scale
        phase[[1, 0]] = std::f64::consts::TAU - 1e-9; // top bin
        phase[[1, 1]] = -std::f64::consts::FRAC_PI_2; // wraps to 3pi/2
        write_phase_png(&path, &phase).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(1, 0).0[0], 128);
        assert_eq!(img.get_pixel(0, 1).0[0], 255);
        assert_eq!(img.get_pixel(1, 1).0[0], 192);
    }
}
