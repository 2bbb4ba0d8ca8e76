//! `lfholo`: optimize phase-only holograms from 4D light fields under
//! sampled pupil states, evaluate them over the pupil state space, and
//! render individual viewing conditions.

mod config;
mod runs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use lfholo_core::eval::{epipolar_slice, run_sweep, scale_to_target, Projector, SweepKind};
use lfholo_core::farfield::optimize_farfield;
use lfholo_core::lightfield::{load_lightfield, LightField};
use lfholo_core::optics::PupilState;
use lfholo_core::optimizer::{optimize, PhaseVariables};
use lfholo_core::scene::{synthesize_test_scene, SceneSpec};
use lfholo_core::supervision::Supervisor;

use config::{parse_length, Resolved, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_MISSING: u8 = 4;

#[derive(Parser)]
#[command(name = "lfholo", version, about = "Light-field hologram optimization")]
struct Cli {
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a hologram from a run configuration.
    Optimize {
        /// Path to the JSON run configuration.
        config: PathBuf,
    },
    /// Evaluate a finished run over pupil-state sweeps.
    Evaluate(EvaluateArgs),
    /// Render one reconstruction/target pair at a given pupil state.
    Render(RenderArgs),
    /// Optimize the same scene under slfh, lf2fs, and stft supervision and
    /// print a joint random-pupil sweep table.
    Compare {
        config: PathBuf,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory produced by `optimize`.
    run: PathBuf,
    /// Sweep kind: random, aperture, focal, lightfield, or all.
    #[arg(long, default_value = "random")]
    sweep: String,
    /// States per sweep (random default 32, structured default 16).
    #[arg(long)]
    n: Option<usize>,
    /// Also extract an epipolar slice with this many pupil positions.
    #[arg(long)]
    epipolar: Option<usize>,
    /// Evaluate against a different light field (recorded as a warning).
    #[arg(long)]
    lightfield: Option<PathBuf>,
    /// Export reconstruction/target PNGs per state.
    #[arg(long, default_value_t = false)]
    images: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Run directory produced by `optimize`.
    run: PathBuf,
    /// Pupil shift "x,y" (millimeters by default; um/mm/m suffixes).
    #[arg(long, default_value = "0,0")]
    s: String,
    /// Focus distance (millimeters by default).
    #[arg(long, default_value = "0")]
    z: String,
    /// Aperture diameter, or "full" for the smallest eyebox.
    #[arg(long, default_value = "full")]
    d: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
        {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    let result = match cli.command {
        Command::Optimize { config } => cmd_optimize(&config).map(|_| ()),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Render(args) => cmd_render(&args),
        Command::Compare { config } => cmd_compare(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

fn classify(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<lfholo_core::Error>() {
        return match core {
            lfholo_core::Error::Diverged { .. } => EXIT_DIVERGED,
            lfholo_core::Error::MissingArtifact(_) => EXIT_MISSING,
            lfholo_core::Error::Config(_)
            | lfholo_core::Error::Metadata(_)
            | lfholo_core::Error::MissingView { .. }
            | lfholo_core::Error::ViewResolutionMismatch { .. } => EXIT_CONFIG,
            _ => 1,
        };
    }
    let text = format!("{err:#}");
    if text.contains("missing artifact") {
        EXIT_MISSING
    } else if err.downcast_ref::<serde_json::Error>().is_some()
        || text.contains("parsing")
        || text.contains("unknown")
        || text.contains("expected")
        || text.contains("does not exist")
        || text.contains("invalid configuration")
        || text.contains("must")
        || text.contains("requires")
    {
        EXIT_CONFIG
    } else {
        1
    }
}

fn load_resolved(config_path: &Path) -> anyhow::Result<Resolved> {
    let dir = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    RunConfig::load(config_path)?.resolve(&dir)
}

fn load_input_lightfield(resolved: &Resolved) -> anyhow::Result<LightField> {
    let io = &resolved.config.io;
    let lf = if let Some(dir) = &io.lightfield {
        load_lightfield(dir)?
    } else {
        let path = io.scene.as_ref().expect("resolve() guarantees one source");
        let spec = SceneSpec::from_path(path)?;
        match &resolved.farfield {
            Some(ff) => synthesize_test_scene(&spec, &ff.target_config(0)?)?,
            None => synthesize_test_scene(&spec, &resolved.optics)?,
        }
    };
    let want = match &resolved.farfield {
        Some(ff) => ff.retina_window,
        None => resolved.optics.slm_resolution,
    };
    if lf.resolution() != want {
        bail!(
            "invalid configuration: light field resolution {:?} must match {:?}",
            lf.resolution(),
            want
        );
    }
    if lf.channels() != resolved.optics.channels() {
        bail!(
            "invalid configuration: light field has {} channels, optics declare {}",
            lf.channels(),
            resolved.optics.channels()
        );
    }
    Ok(lf)
}

fn cmd_optimize(config_path: &Path) -> anyhow::Result<PathBuf> {
    let resolved = load_resolved(config_path)?;
    let lf = load_input_lightfield(&resolved)?;
    let run_dir = runs::create_run_dir(&resolved.config.io.output)?;
    log::info!("run directory: {}", run_dir.display());
    runs::write_frozen_config(&run_dir, &resolved.config)?;

    let (phi, trace) = run_optimization(&resolved, &lf)?;
    runs::write_phases(&run_dir, &phi)?;
    runs::write_trace(&run_dir, &trace)?;
    log::info!(
        "finished {} iterations, final loss {:.6e}",
        trace.len(),
        trace.last().map_or(f64::NAN, |r| r.loss)
    );
    println!("{}", run_dir.display());
    Ok(run_dir)
}

fn run_optimization(
    resolved: &Resolved,
    lf: &LightField,
) -> anyhow::Result<(PhaseVariables, Vec<lfholo_core::optimizer::TraceRow>)> {
    let seed = resolved.config.seeds.train;
    match &resolved.farfield {
        Some(ff) => {
            let (phi, trace, stats) =
                optimize_farfield(lf, &resolved.policy, ff, &resolved.settings, seed)?;
            log::info!(
                "far-field peak per-sample buffer: {} of {} field elements",
                stats.max_sample_buffer,
                stats.full_field
            );
            Ok((phi, trace))
        }
        None => {
            let supervisor = Supervisor::new(
                resolved.policy.clone(),
                lf,
                &resolved.optics,
                resolved.optics.min_eyebox_width(),
            )?;
            Ok(optimize(lf, &supervisor, &resolved.optics, &resolved.settings, seed)?)
        }
    }
}

fn projector_for<'a>(resolved: &'a Resolved) -> Projector<'a> {
    match &resolved.farfield {
        Some(ff) => Projector::Far(ff),
        None => Projector::Near(&resolved.optics),
    }
}

fn load_run(run_dir: &Path) -> anyhow::Result<(Resolved, PhaseVariables)> {
    let frozen = runs::load_frozen_config(run_dir)?;
    let resolved = frozen.resolve(run_dir)?;
    let channels = resolved.optics.channels();
    let phi = runs::load_phases(run_dir, channels, resolved.settings.frames)?;
    Ok((resolved, phi))
}

fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let (mut resolved, phi) = load_run(&args.run)?;
    let mut warnings = Vec::new();
    if let Some(alt) = &args.lightfield {
        warnings.push(format!(
            "evaluated against {} instead of the training light field",
            alt.display()
        ));
        resolved.config.io.lightfield = Some(alt.clone());
        resolved.config.io.scene = None;
    }
    let lf = load_input_lightfield(&resolved)?;
    let projector = projector_for(&resolved);
    let eval_seed = resolved.config.seeds.eval;

    let kinds: Vec<SweepKind> = match args.sweep.as_str() {
        "random" => vec![SweepKind::Random],
        "aperture" => vec![SweepKind::VaryingAperture],
        "focal" => vec![SweepKind::FocalStack],
        "lightfield" => vec![SweepKind::LightField],
        "all" => vec![
            SweepKind::VaryingAperture,
            SweepKind::FocalStack,
            SweepKind::LightField,
            SweepKind::Random,
        ],
        other => bail!("unknown sweep '{other}' (random, aperture, focal, lightfield, all)"),
    };

    let mut reports = Vec::new();
    for kind in kinds {
        let n = args.n.unwrap_or(if kind == SweepKind::Random { 32 } else { 16 });
        let report = run_sweep(&phi, &lf, kind, n, eval_seed, &resolved.ranges, &projector)?;
        println!(
            "{kind}: n={} ssim mean {:.4} var {:.2e} min {:.4} | psnr mean {:.2} dB",
            report.records.len(),
            report.ssim_aggregate.mean,
            report.ssim_aggregate.variance,
            report.ssim_aggregate.min,
            report.psnr_aggregate.mean
        );
        let path = runs::write_report(&args.run, &report, eval_seed, &warnings)?;
        log::info!("wrote {}", path.display());
        if args.images {
            let img_dir = args.run.join(format!("images_{kind}"));
            std::fs::create_dir_all(&img_dir)?;
            for (i, rec) in report.records.iter().enumerate() {
                let target = projector.target(&lf, &rec.pupil, rec.channel)?;
                let recon = projector.reconstruct(&phi, &rec.pupil, rec.channel)?;
                let scaled = scale_to_target(&recon, &target);
                runs::write_image_pair(&img_dir, &format!("state{i:03}_c{}", rec.channel), &scaled, &target)?;
            }
        }
        reports.push(report);
    }
    runs::append_summary(&args.run, &reports.iter().collect::<Vec<_>>())?;

    if let Some(n_positions) = args.epipolar {
        let eyebox = projector.eyebox_min();
        let d = eyebox / 8.0;
        let z_values = [resolved.ranges.z_min, resolved.ranges.z_max];
        for c in 0..resolved.optics.channels() {
            let set = epipolar_slice(&phi, &lf, n_positions, d, &z_values, c, &projector)?;
            for (zi, &z) in set.z_values.iter().enumerate() {
                let stem = format!("epipolar_c{c}_z{:.1}mm", z * 1e3);
                runs::write_image_pair(&args.run, &stem, &set.recon[zi], &set.target[zi])?;
            }
        }
        log::info!("wrote epipolar slices ({n_positions} positions, d = eyebox/8)");
    }
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> anyhow::Result<()> {
    let (resolved, phi) = load_run(&args.run)?;
    let lf = load_input_lightfield(&resolved)?;
    let projector = projector_for(&resolved);

    let shift: Vec<f64> = args
        .s
        .split(',')
        .map(parse_length)
        .collect::<anyhow::Result<_>>()
        .with_context(|| format!("parsing --s '{}'", args.s))?;
    if shift.len() != 2 {
        bail!("--s expects 'x,y'");
    }
    let z = parse_length(&args.z)?;
    let d = if args.d == "full" { projector.eyebox_min() } else { parse_length(&args.d)? };
    let pupil = PupilState::new([shift[0], shift[1]], z, d)
        .map_err(|e| anyhow!("invalid configuration: {e}"))?;

    let eyebox = projector.eyebox_min();
    if pupil.shift[0].abs() + d / 2.0 > eyebox / 2.0
        || pupil.shift[1].abs() + d / 2.0 > eyebox / 2.0
    {
        log::warn!("pupil extends outside the eyebox; the render is clipped to the band limit");
    }

    for c in 0..resolved.optics.channels() {
        let target = projector.target(&lf, &pupil, c)?;
        let recon = projector.reconstruct(&phi, &pupil, c)?;
        let scaled = scale_to_target(&recon, &target);
        let stem = format!(
            "render_c{c}_s{:.2}_{:.2}_z{:.2}_d{:.2}",
            pupil.shift[0] * 1e3,
            pupil.shift[1] * 1e3,
            z * 1e3,
            d * 1e3
        );
        runs::write_image_pair(&args.run, &stem, &scaled, &target)?;
        println!("{}", args.run.join(format!("{stem}_recon.png")).display());
    }
    Ok(())
}

fn cmd_compare(config_path: &Path) -> anyhow::Result<()> {
    let base = load_resolved(config_path)?;
    let lf = load_input_lightfield(&base)?;
    if base.farfield.is_some() {
        bail!("compare runs the near-field policy set");
    }
    let out = base.config.io.output.join(format!(
        "compare-{}",
        chrono::Local::now().format("%Y%m%d-%H%M%S")
    ));
    std::fs::create_dir_all(&out)?;

    let mut rows = Vec::new();
    for kind in ["slfh", "lf2fs", "stft"] {
        let mut cfg = RunConfig::load(config_path)?;
        cfg.policy.policy = kind.into();
        cfg.io.output = out.join(kind);
        let dir = config_path.parent().unwrap_or(Path::new("."));
        let resolved = cfg.resolve(dir)?;
        log::info!("optimizing with {kind} supervision");
        let (phi, trace) = run_optimization(&resolved, &lf)?;
        let run_dir = runs::create_run_dir(&resolved.config.io.output)?;
        runs::write_frozen_config(&run_dir, &resolved.config)?;
        runs::write_phases(&run_dir, &phi)?;
        runs::write_trace(&run_dir, &trace)?;

        let projector = projector_for(&resolved);
        let eval_seed = resolved.config.seeds.eval;
        let random =
            run_sweep(&phi, &lf, SweepKind::Random, 32, eval_seed, &resolved.ranges, &projector)?;
        let focal = run_sweep(
            &phi,
            &lf,
            SweepKind::FocalStack,
            16,
            eval_seed,
            &resolved.ranges,
            &projector,
        )?;
        runs::write_report(&run_dir, &random, eval_seed, &[])?;
        runs::write_report(&run_dir, &focal, eval_seed, &[])?;
        rows.push((kind, random, focal));
    }

    println!("policy   | random ssim mean/min | random psnr | focal ssim mean");
    let mut table = String::from("policy,random_ssim_mean,random_ssim_min,random_psnr_mean,focal_ssim_mean\n");
    for (kind, random, focal) in &rows {
        println!(
            "{kind:<8} | {:.4} / {:.4}      | {:>8.2} dB | {:.4}",
            random.ssim_aggregate.mean,
            random.ssim_aggregate.min,
            random.psnr_aggregate.mean,
            focal.ssim_aggregate.mean
        );
        table.push_str(&format!(
            "{kind},{:.6},{:.6},{:.3},{:.6}\n",
            random.ssim_aggregate.mean,
            random.ssim_aggregate.min,
            random.psnr_aggregate.mean,
            focal.ssim_aggregate.mean
        ));
    }
    std::fs::write(out.join("comparison.csv"), table)?;
    println!("{}", out.display());
    Ok(())
}
