use lfholo_core::eval::{epipolar_peak_slope, epipolar_slice, Projector};
use lfholo_core::farfield::{optimize_farfield, FarFieldConfig};
use lfholo_core::fft::fft2;
use lfholo_core::optics::{FreqGrid, OpticalConfig, PupilRanges, PupilState};
use lfholo_core::optimizer::{optimize, OptimizerSettings};
use lfholo_core::scene::{PlaneSpec, PointSpec, SceneSpec};
use lfholo_core::supervision::{SupervisionPolicy, Supervisor};
use lfholo_core::wavefield::{average_intensity, KernelOptions, PropagationKernel};
use ndarray::s;
use num_complex::Complex;
use std::time::Instant;

fn main() {
    speckle();
    farfield();
}

fn speckle() {
    let n = 128;
    let cfg = OpticalConfig::new(vec![520e-9], 8e-6, (n, n), 0.4, None).unwrap();
    let scene = SceneSpec {
        resolution: [n, n],
        views: [5, 5],
        channels: 1,
        eyebox_mm: None,
        planes: vec![PlaneSpec { depth_mm: 0.0, texture: "constant:0.8".into(), mask: "full".into(), gain: vec![] }],
        points: vec![],
    };
    let lf = lfholo_core::scene::synthesize_test_scene(&scene, &cfg).unwrap();
    let w = cfg.min_eyebox_width();
    let ranges = PupilRanges::new(0.0, 0.010, 0.008, 0.016, None).unwrap();
    let policy = SupervisionPolicy::slfh(ranges, 4, 9);
    let sup = Supervisor::new(policy, &lf, &cfg, w).unwrap();
    let settings = OptimizerSettings { iterations: 200, frames: 8, ..Default::default() };
    let (phi, _) = optimize(&lf, &sup, &cfg, &settings, 55).unwrap();

    // Render frames at a medium pupil.
    let p = PupilState::centered(0.0, 0.010).unwrap();
    let grid = FreqGrid::new((n, n), cfg.slm_pitch);
    let kernel = PropagationKernel::build(&grid, &p, 520e-9, 0.4, KernelOptions::default()).unwrap();
    let frames: Vec<_> = (0..8)
        .map(|t| {
            let u = phi.phases[0].index_axis(ndarray::Axis(0), t).mapv(|ph| Complex::from_polar(1.0, ph));
            let mut spec = fft2(&u);
            spec.zip_mut_with(&kernel.values, |s, k| *s *= k);
            lfholo_core::fft::ifft2_owned(spec).mapv(|z| z.norm_sqr())
        })
        .collect();
    let contrast = |x: &ndarray::Array2<f64>| {
        let v = x.slice(s![x.nrows()/4..3*x.nrows()/4, x.ncols()/4..3*x.ncols()/4]);
        let mean = v.sum() / v.len() as f64;
        let var = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / v.len() as f64;
        var.sqrt() / mean
    };
    let single = contrast(&frames[0]);
    let averaged = contrast(&average_intensity(&frames).unwrap());
    println!("speckle: single {single:.4}, averaged {averaged:.4}, ratio {:.4}", averaged / single);
}

fn farfield() {
    let t0 = Instant::now();
    let n = 512;
    let retina = 256;
    let optics = OpticalConfig::new(vec![520e-9], 8e-6, (n, n), 0.4, None).unwrap();
    let cfg = FarFieldConfig::new(optics, (n, n), 16, (retina, retina)).unwrap();
    let extent = cfg.extent();
    // two points at different depths, offset vertically
    let z1 = 0.06;
    let z2 = 0.12;
    let scene = SceneSpec {
        resolution: [retina, retina],
        views: [7, 7],
        channels: 1,
        eyebox_mm: Some([extent * 1e3, extent * 1e3]),
        planes: vec![],
        points: vec![
            PointSpec { depth_mm: z1 * 1e3, position_px: [96.0, 128.0], intensity: 1.0 },
            PointSpec { depth_mm: z2 * 1e3, position_px: [160.0, 128.0], intensity: 1.0 },
        ],
    };
    let target_cfg = cfg.target_config(0).unwrap();
    let lf = lfholo_core::scene::synthesize_test_scene(&scene, &target_cfg).unwrap();
    let ranges = PupilRanges::new(0.0, 0.0, extent / 4.0, extent / 2.0, None).unwrap();
    let policy = SupervisionPolicy::slfh(ranges, 4, 3);
    let settings = OptimizerSettings { iterations: 120, frames: 4, ..Default::default() };
    let (phi, trace, stats) = optimize_farfield(&lf, &policy, &cfg, &settings, 77).unwrap();
    println!(
        "farfield: {:.0}s, loss {:.3e} -> {:.3e}, max buffer {} / {}",
        t0.elapsed().as_secs_f64(),
        trace.first().unwrap().loss,
        trace.last().unwrap().loss,
        stats.max_sample_buffer,
        stats.full_field
    );

    let projector = Projector::Far(&cfg);
    let d = extent / 4.0;
    let set = epipolar_slice(&phi, &lf, 15, d, &[0.0], 0, &projector).unwrap();
    // split the strip into top half (point at z1's row?) - the epipolar rows are the
    // CENTRAL image row; our points are off-center vertically... need points ON the
    // central row horizontally separated instead!
    let slope = epipolar_peak_slope(&set.recon[0]);
    let tslope = epipolar_peak_slope(&set.target[0]);
    println!("epipolar recon slope {slope:.3}, target slope {tslope:.3}");
}
