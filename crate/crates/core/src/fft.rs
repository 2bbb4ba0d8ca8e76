//! Unitary 2D FFTs on `ndarray` grids.
//!
//! Both directions scale by `1/sqrt(rows*cols)` so the transform pair is
//! unitary and forward/adjoint pairs of frequency-domain multipliers stay
//! symmetric. Plans are cached per length behind a process-wide lock. The
//! 2D transform runs row passes around a blocked transpose, with the
//! normalization fused into the transpose back.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

type PlanKey = (usize, bool);

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = plans.lock().unwrap();
    guard
        .entry((len, forward))
        .or_insert_with(|| {
            let dir = if forward { FftDirection::Forward } else { FftDirection::Inverse };
            FftPlanner::new().plan_fft(len, dir)
        })
        .clone()
}

fn transform_rows(data: &mut Array2<Complex<f64>>, forward: bool) {
    let cols = data.ncols();
    let fft = plan(cols, forward);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("row-major layout");
        fft.process_with_scratch(slice, &mut scratch);
    }
}

const TRANSPOSE_BLOCK: usize = 32;

fn transpose_scaled_into(
    src: &Array2<Complex<f64>>,
    dst: &mut Array2<Complex<f64>>,
    scale: f64,
) {
    let (rows, cols) = src.dim();
    debug_assert_eq!(dst.dim(), (cols, rows));
    let s = src.as_slice().expect("row-major layout");
    let d = dst.as_slice_mut().expect("row-major layout");
    for bi in (0..rows).step_by(TRANSPOSE_BLOCK) {
        let bi_end = (bi + TRANSPOSE_BLOCK).min(rows);
        for bj in (0..cols).step_by(TRANSPOSE_BLOCK) {
            let bj_end = (bj + TRANSPOSE_BLOCK).min(cols);
            for i in bi..bi_end {
                for j in bj..bj_end {
                    d[j * rows + i] = s[i * cols + j] * scale;
                }
            }
        }
    }
}

fn transform2_owned(mut work: Array2<Complex<f64>>, forward: bool) -> Array2<Complex<f64>> {
    let (rows, cols) = work.dim();
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    transform_rows(&mut work, forward);
    let mut t = Array2::default((cols, rows));
    transpose_scaled_into(&work, &mut t, 1.0);
    transform_rows(&mut t, forward);
    transpose_scaled_into(&t, &mut work, scale);
    work
}

/// Forward unitary 2D FFT.
pub fn fft2(data: &Array2<Complex<f64>>) -> Array2<Complex<f64>> {
    transform2_owned(data.to_owned(), true)
}

/// Inverse unitary 2D FFT.
pub fn ifft2(data: &Array2<Complex<f64>>) -> Array2<Complex<f64>> {
    transform2_owned(data.to_owned(), false)
}

/// Forward unitary 2D FFT consuming its input (saves one copy).
pub fn fft2_owned(data: Array2<Complex<f64>>) -> Array2<Complex<f64>> {
    transform2_owned(data, true)
}

/// Inverse unitary 2D FFT consuming its input.
pub fn ifft2_owned(data: Array2<Complex<f64>>) -> Array2<Complex<f64>> {
    transform2_owned(data, false)
}

/// FFT-native frequency coordinates in cycles/meter for `n` samples at
/// spacing `pitch`: `[0, 1, .., n/2-1, -n/2, .., -1] / (n*pitch)`.
pub fn freq_coords(n: usize, pitch: f64) -> Vec<f64> {
    let dq = 1.0 / (n as f64 * pitch);
    (0..n)
        .map(|k| {
            if k < n.div_ceil(2) {
                k as f64 * dq
            } else {
                (k as f64 - n as f64) * dq
            }
        })
        .collect()
}

/// Swap quadrants so the DC sample moves to the grid center `(n/2, m/2)`.
pub fn fftshift<T: Clone + Default>(data: &Array2<T>) -> Array2<T> {
    let (rows, cols) = data.dim();
    let mut out = Array2::default((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            out[[(i + rows / 2) % rows, (j + cols / 2) % cols]] = data[[i, j]].clone();
        }
    }
    out
}

/// Inverse of [`fftshift`] (differs for odd dimensions).
pub fn ifftshift<T: Clone + Default>(data: &Array2<T>) -> Array2<T> {
    let (rows, cols) = data.dim();
    let mut out = Array2::default((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            out[[i, j]] = data[[(i + rows / 2) % rows, (j + cols / 2) % cols]].clone();
        }
    }
    out
}
