//! Run-directory layout and artifact round-trips.
//!
//! A run directory is self-describing: the frozen config plus the phase
//! float dumps are enough to re-evaluate or re-render without external
//! state beyond the light field itself.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use lfholo_core::eval::{PupilSweepReport, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use lfholo_core::io::{read_f32_grid, write_f32_grid, write_intensity_png, write_phase_png};
use lfholo_core::optimizer::{PhaseVariables, TraceRow};
use ndarray::Array3;

use crate::config::RunConfig;

/// Creates `<output>/run-<timestamp>[-k]/`.
pub fn create_run_dir(output: &Path) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(output)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for k in 0..1000 {
        let name = if k == 0 { format!("run-{stamp}") } else { format!("run-{stamp}-{k}") };
        let dir = output.join(name);
        if !dir.exists() {
            std::fs::create_dir(&dir)?;
            return Ok(dir);
        }
    }
    Err(anyhow!("could not find a free run directory under {}", output.display()))
}

pub fn write_frozen_config(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    let file = std::fs::File::create(dir.join("config.json"))?;
    serde_json::to_writer_pretty(file, config)?;
    Ok(())
}

pub fn load_frozen_config(dir: &Path) -> anyhow::Result<RunConfig> {
    let path = dir.join("config.json");
    if !path.exists() {
        return Err(anyhow!("missing artifact: {}", path.display()));
    }
    RunConfig::load(&path)
}

fn phase_stem(channel: usize, frame: usize) -> String {
    format!("phase_c{channel}_f{frame}")
}

/// Phase exports: SLM-ready 8-bit PNG plus lossless 32-bit float binary per
/// channel and frame.
pub fn write_phases(dir: &Path, phi: &PhaseVariables) -> anyhow::Result<()> {
    for c in 0..phi.channels() {
        for t in 0..phi.frames() {
            let frame = phi.frame(c, t);
            let stem = phase_stem(c, t);
            write_phase_png(&dir.join(format!("{stem}.png")), &frame)?;
            write_f32_grid(&dir.join(format!("{stem}.f32")), &frame)?;
        }
    }
    Ok(())
}

pub fn load_phases(dir: &Path, channels: usize, frames: usize) -> anyhow::Result<PhaseVariables> {
    let mut stacks = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut stack: Option<Array3<f64>> = None;
        for t in 0..frames {
            let path = dir.join(format!("{}.f32", phase_stem(c, t)));
            if !path.exists() {
                return Err(anyhow!("missing artifact: {}", path.display()));
            }
            let grid = read_f32_grid(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let stack = stack.get_or_insert_with(|| {
                Array3::zeros((frames, grid.nrows(), grid.ncols()))
            });
            stack.index_axis_mut(ndarray::Axis(0), t).assign(&grid);
        }
        stacks.push(stack.ok_or_else(|| anyhow!("no frames found for channel {c}"))?);
    }
    Ok(PhaseVariables { phases: stacks })
}

pub fn write_trace(dir: &Path, trace: &[TraceRow]) -> anyhow::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join("trace.csv"))?);
    writeln!(file, "iteration,loss,wall_ms,batch_seed")?;
    for row in trace {
        writeln!(file, "{},{:.17e},{:.3},{}", row.iteration, row.loss, row.wall_ms, row.batch_seed)?;
    }
    Ok(())
}

/// One sweep report as CSV: comment header with the metric constants and any
/// warnings, one row per state, and a trailing summary line.
pub fn write_report(
    dir: &Path,
    report: &PupilSweepReport,
    seed: u64,
    warnings: &[String],
) -> anyhow::Result<PathBuf> {
    let path = dir.join(format!("report_{}.csv", report.kind));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(
        file,
        "# ssim: window={SSIM_WINDOW} sigma={SSIM_SIGMA} k1={SSIM_K1} k2={SSIM_K2} range=reference_max"
    )?;
    writeln!(file, "# psnr: peak=reference_max; identical pair reported as inf")?;
    writeln!(file, "# eval_seed={seed}")?;
    for w in warnings {
        writeln!(file, "# warning: {w}")?;
    }
    writeln!(file, "index,channel,s_x_mm,s_y_mm,z_mm,d_mm,psnr_db,ssim")?;
    for (i, r) in report.records.iter().enumerate() {
        writeln!(
            file,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            i,
            r.channel,
            r.pupil.shift[0] * 1e3,
            r.pupil.shift[1] * 1e3,
            r.pupil.focus * 1e3,
            r.pupil.diameter * 1e3,
            r.psnr,
            r.ssim
        )?;
    }
    writeln!(
        file,
        "# summary kind={} n={} ssim_mean={:.6} ssim_var={:.6e} ssim_min={:.6} psnr_mean={:.3} psnr_min={:.3}",
        report.kind,
        report.records.len(),
        report.ssim_aggregate.mean,
        report.ssim_aggregate.variance,
        report.ssim_aggregate.min,
        report.psnr_aggregate.mean,
        report.psnr_aggregate.min
    )?;
    Ok(path)
}

pub fn append_summary(dir: &Path, reports: &[&PupilSweepReport]) -> anyhow::Result<()> {
    let path = dir.join("summary.csv");
    let fresh = !path.exists();
    let mut file =
        std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(&path)?);
    if fresh {
        writeln!(file, "kind,n,ssim_mean,ssim_var,ssim_min,psnr_mean,psnr_min")?;
    }
    for r in reports {
        writeln!(
            file,
            "{},{},{:.6},{:.6e},{:.6},{:.3},{:.3}",
            r.kind,
            r.records.len(),
            r.ssim_aggregate.mean,
            r.ssim_aggregate.variance,
            r.ssim_aggregate.min,
            r.psnr_aggregate.mean,
            r.psnr_aggregate.min
        )?;
    }
    Ok(())
}

/// Side-by-side reconstruction/target export scaled by the target peak.
pub fn write_image_pair(
    dir: &Path,
    stem: &str,
    recon: &ndarray::Array2<f64>,
    target: &ndarray::Array2<f64>,
) -> anyhow::Result<()> {
    let peak = target.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-12);
    write_intensity_png(&dir.join(format!("{stem}_recon.png")), recon, peak)?;
    write_intensity_png(&dir.join(format!("{stem}_target.png")), target, peak)?;
    write_f32_grid(&dir.join(format!("{stem}_recon.f32")), recon)?;
    write_f32_grid(&dir.join(format!("{stem}_target.f32")), target)?;
    Ok(())
}
