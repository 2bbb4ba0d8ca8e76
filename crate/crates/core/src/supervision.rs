//! Pupil-state sampling policies pairing each sampled state with its
//! light-field target.
//!
//! Three policies share one interface: `slfh` draws pupils uniformly at
//! random each iteration, `lf2fs` uses a fixed full-aperture focal stack,
//! and `stft_grid` uses a fixed grid of shifted pupils at constant diameter
//! and focus. The fixed policies are degenerate cases of the stochastic one,
//! and their targets are precomputed once; stochastic targets are rendered
//! on the fly and never cached.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lightfield::{project_lightfield, LightField, TargetImage};
use crate::optics::{OpticalConfig, PupilRanges, PupilState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Slfh,
    Lf2fs,
    StftGrid,
}

/// Fixed-grid parameters for the `stft_grid` policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftGridSpec {
    /// Shift positions per axis.
    pub shifts_per_axis: usize,
    /// Fixed aperture diameter, meters.
    pub diameter: f64,
    /// Fixed focus distance, meters.
    pub focus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionPolicy {
    pub kind: PolicyKind,
    pub ranges: PupilRanges,
    /// Pupils per iteration for `slfh`; fixed policies use their own count.
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Focal-stack layer count for `lf2fs`.
    pub lf2fs_layers: usize,
    pub stft_grid: StftGridSpec,
    /// Band-pass fraction applied to propagation kernels during optimization
    /// (no-care-area attenuation); `None` disables.
    pub bandpass: Option<f64>,
}

impl SupervisionPolicy {
    pub fn slfh(ranges: PupilRanges, batch_size: usize, rng_seed: u64) -> Self {
        Self {
            kind: PolicyKind::Slfh,
            ranges,
            batch_size,
            rng_seed,
            lf2fs_layers: 5,
            stft_grid: StftGridSpec { shifts_per_axis: 8, diameter: 0.0, focus: 0.0 },
            bandpass: None,
        }
    }

    pub fn lf2fs(ranges: PupilRanges, layers: usize, rng_seed: u64) -> Self {
        Self {
            kind: PolicyKind::Lf2fs,
            ranges,
            batch_size: layers.max(1),
            rng_seed,
            lf2fs_layers: layers,
            stft_grid: StftGridSpec { shifts_per_axis: 8, diameter: 0.0, focus: 0.0 },
            bandpass: Some(DEFAULT_BASELINE_BANDPASS),
        }
    }

    pub fn stft_grid(ranges: PupilRanges, grid: StftGridSpec, rng_seed: u64) -> Self {
        Self {
            kind: PolicyKind::StftGrid,
            ranges,
            batch_size: grid.shifts_per_axis * grid.shifts_per_axis,
            rng_seed,
            lf2fs_layers: 5,
            stft_grid: grid,
            bandpass: Some(DEFAULT_BASELINE_BANDPASS),
        }
    }

    /// STFT-grid diameter default when unset: a quarter of the eyebox.
    pub fn resolve_stft_defaults(&mut self, eyebox_min: f64) {
        if self.stft_grid.diameter <= 0.0 {
            self.stft_grid.diameter = eyebox_min / 4.0;
        }
    }

    pub fn validate(&self, eyebox_min: f64) -> Result<()> {
        self.ranges.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        match self.kind {
            PolicyKind::Slfh => {
                if self.ranges.d_min > eyebox_min {
                    return Err(Error::Config(format!(
                        "d_min {:.4e} m exceeds the smallest eyebox {:.4e} m: every pupil would exceed it",
                        self.ranges.d_min, eyebox_min
                    )));
                }
                if let Some(r) = self.ranges.shift_max {
                    if r >= eyebox_min / 2.0 + self.ranges.d_min / 2.0 {
                        return Err(Error::Config(format!(
                            "shift_max {r:.4e} m places pupils fully outside the eyebox {eyebox_min:.4e} m"
                        )));
                    }
                }
            }
            PolicyKind::Lf2fs => {
                if self.lf2fs_layers < 1 {
                    return Err(Error::Config("lf2fs needs at least one layer".into()));
                }
            }
            PolicyKind::StftGrid => {
                let g = &self.stft_grid;
                if g.shifts_per_axis < 1 {
                    return Err(Error::Config("stft grid needs at least one shift".into()));
                }
                if g.diameter > eyebox_min {
                    return Err(Error::Config(format!(
                        "stft grid diameter {:.4e} m exceeds the eyebox {:.4e} m",
                        g.diameter, eyebox_min
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Kernel band-pass fraction used by fixed-pupil policies.
pub const DEFAULT_BASELINE_BANDPASS: f64 = 0.9;

/// One supervised pupil state with its per-channel light-field targets.
#[derive(Debug, Clone)]
pub struct SupervisionSample {
    pub pupil: PupilState,
    /// One target per color channel, full resolution.
    pub targets: Vec<TargetImage>,
    /// Seed value recorded for the batch this sample came from.
    pub batch_seed: u64,
}

/// SplitMix64 of `(seed, iteration)`: the per-iteration stream seed.
pub fn batch_seed(seed: u64, iteration: u64) -> u64 {
    let mut z = seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The fixed pupil list of a policy, or `None` for stochastic ones.
pub fn fixed_pupils(policy: &SupervisionPolicy, eyebox_min: f64) -> Option<Vec<PupilState>> {
    match policy.kind {
        PolicyKind::Slfh => None,
        PolicyKind::Lf2fs => {
            let n = policy.lf2fs_layers.max(1);
            let (z0, z1) = (policy.ranges.z_min, policy.ranges.z_max);
            Some(
                (0..n)
                    .map(|i| {
                        let z = if n == 1 {
                            z0
                        } else {
                            z0 + (z1 - z0) * i as f64 / (n - 1) as f64
                        };
                        PupilState { shift: [0.0, 0.0], focus: z, diameter: eyebox_min }
                    })
                    .collect(),
            )
        }
        PolicyKind::StftGrid => {
            let g = policy.stft_grid;
            let n = g.shifts_per_axis;
            // Grid spans the eyebox without the disc exceeding it.
            let half = (eyebox_min - g.diameter) / 2.0;
            let pos = |i: usize| -> f64 {
                if n == 1 {
                    0.0
                } else {
                    -half + 2.0 * half * i as f64 / (n - 1) as f64
                }
            };
            let mut pupils = Vec::with_capacity(n * n);
            for iy in 0..n {
                for ix in 0..n {
                    pupils.push(PupilState {
                        shift: [pos(ix), pos(iy)],
                        focus: g.focus,
                        diameter: g.diameter,
                    });
                }
            }
            Some(pupils)
        }
    }
}

/// Draws the `slfh` pupil batch for one iteration. Draw order per pupil is
/// `x, y, z, d`; draws whose aperture contains no light-field view are
/// rejected and redrawn from the same stream so every sample has a target.
pub fn sample_slfh_pupils(
    policy: &SupervisionPolicy,
    lf: &LightField,
    iteration: u64,
    eyebox_min: f64,
) -> Result<Vec<PupilState>> {
    let seed = batch_seed(policy.rng_seed, iteration);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges = &policy.ranges;
    let mut pupils = Vec::with_capacity(policy.batch_size);
    let mut rejected = 0usize;
    while pupils.len() < policy.batch_size {
        // x, y drawn against the largest admissible shift for this draw's d;
        // d is drawn last per the stated order, so draw all four then apply
        // the shift bound by rescaling the unit draws.
        let ux: f64 = rng.random_range(-1.0..=1.0);
        let uy: f64 = rng.random_range(-1.0..=1.0);
        let z: f64 = rng.random_range(ranges.z_min..=ranges.z_max);
        let d: f64 = rng.random_range(ranges.d_min..=ranges.d_max);
        let r_max = ranges.effective_shift_max(d, eyebox_min);
        let p = PupilState { shift: [ux * r_max, uy * r_max], focus: z, diameter: d };
        if lf.views_in_aperture(&p).is_empty() {
            rejected += 1;
            if rejected > 10_000 {
                return Err(Error::Config(format!(
                    "pupil ranges are incompatible with the view grid: {rejected} consecutive draws \
                     contained no view (d range [{:.4e}, {:.4e}] m vs view spacing)",
                    ranges.d_min, ranges.d_max
                )));
            }
            continue;
        }
        rejected = 0;
        pupils.push(p);
    }
    Ok(pupils)
}

fn render_targets(
    pupils: &[PupilState],
    lf: &LightField,
    config: &OpticalConfig,
    seed: u64,
    nearest_fallback: bool,
) -> Result<Vec<SupervisionSample>> {
    pupils
        .par_iter()
        .map(|p| {
            let targets = (0..lf.channels())
                .map(|c| match project_lightfield(lf, p, c, config) {
                    // A fixed grid cannot redraw; a window position between
                    // view centers supervises against its nearest view.
                    Err(Error::EmptyAperture { .. }) if nearest_fallback => {
                        let k = lf.nearest_view(p);
                        Ok(crate::lightfield::project_single_view(lf, k, p, c, config))
                    }
                    other => other,
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SupervisionSample { pupil: *p, targets, batch_seed: seed })
        })
        .collect()
}

/// One batch of supervision samples for the given iteration.
///
/// Deterministic in `(policy.rng_seed, iteration)`; fixed policies return
/// their full pupil list every iteration.
pub fn sample_batch(
    policy: &SupervisionPolicy,
    lf: &LightField,
    iteration: u64,
    config: &OpticalConfig,
    eyebox_min: f64,
) -> Result<Vec<SupervisionSample>> {
    policy.validate(eyebox_min)?;
    let fallback = policy.kind == PolicyKind::StftGrid;
    match fixed_pupils(policy, eyebox_min) {
        Some(pupils) => render_targets(&pupils, lf, config, policy.rng_seed, fallback),
        None => {
            let pupils = sample_slfh_pupils(policy, lf, iteration, eyebox_min)?;
            render_targets(&pupils, lf, config, batch_seed(policy.rng_seed, iteration), false)
        }
    }
}

/// Batch provider for the optimization loop: fixed-policy targets are
/// rendered once and shared, stochastic targets are rendered per iteration.
pub struct Supervisor {
    policy: SupervisionPolicy,
    eyebox_min: f64,
    cached: Option<std::sync::Arc<Vec<SupervisionSample>>>,
}

impl Supervisor {
    pub fn new(
        policy: SupervisionPolicy,
        lf: &LightField,
        config: &OpticalConfig,
        eyebox_min: f64,
    ) -> Result<Self> {
        policy.validate(eyebox_min)?;
        let fallback = policy.kind == PolicyKind::StftGrid;
        let cached = match fixed_pupils(&policy, eyebox_min) {
            Some(pupils) => Some(std::sync::Arc::new(render_targets(
                &pupils,
                lf,
                config,
                policy.rng_seed,
                fallback,
            )?)),
            None => None,
        };
        Ok(Self { policy, eyebox_min, cached })
    }

    pub fn policy(&self) -> &SupervisionPolicy {
        &self.policy
    }

    pub fn eyebox_min(&self) -> f64 {
        self.eyebox_min
    }

    pub fn batch(
        &self,
        lf: &LightField,
        iteration: u64,
        config: &OpticalConfig,
    ) -> Result<std::sync::Arc<Vec<SupervisionSample>>> {
        match &self.cached {
            Some(samples) => Ok(samples.clone()),
            None => {
                let pupils = sample_slfh_pupils(&self.policy, lf, iteration, self.eyebox_min)?;
                Ok(std::sync::Arc::new(render_targets(
                    &pupils,
                    lf,
                    config,
                    batch_seed(self.policy.rng_seed, iteration),
                    false,
                )?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synthesize_test_scene, PlaneSpec, SceneSpec};
    use approx::assert_relative_eq;

    fn config() -> OpticalConfig {
        OpticalConfig::new(vec![440e-9], 8e-6, (64, 64), 0.4, None).unwrap()
    }

    fn test_lf(cfg: &OpticalConfig) -> LightField {
        let spec = SceneSpec {
            resolution: [32, 32],
            views: [5, 5],
            channels: 1,
            eyebox_mm: None,
            planes: vec![PlaneSpec {
                depth_mm: 4.0,
                texture: "checker:8".into(),
                mask: "full".into(),
                gain: vec![],
            }],
            points: vec![],
        };
        synthesize_test_scene(&spec, cfg).unwrap()
    }

    fn ranges() -> PupilRanges {
        PupilRanges::new(0.0, 0.015, 0.004, 0.020, None).unwrap()
    }

    #[test]
    fn lf2fs_layers_are_evenly_spaced_full_aperture() {
        let policy = SupervisionPolicy::lf2fs(
            PupilRanges::new(0.0, 0.012, 0.002, 0.020, None).unwrap(),
            5,
            7,
        );
        let pupils = fixed_pupils(&policy, 0.022).unwrap();
        assert_eq!(pupils.len(), 5);
        for (i, p) in pupils.iter().enumerate() {
            assert_relative_eq!(p.focus, 0.003 * i as f64, max_relative = 1e-12);
            assert_eq!(p.shift, [0.0, 0.0]);
            assert_relative_eq!(p.diameter, 0.022);
        }
    }

    #[test]
    fn stft_grid_positions_stay_inside_eyebox() {
        // 5x5 over a 22 mm eyebox at d = 5.5 mm: extremes +-8.25 mm,
        // spacing (22 - 5.5)/4 mm.
        let policy = SupervisionPolicy::stft_grid(
            ranges(),
            StftGridSpec { shifts_per_axis: 5, diameter: 0.0055, focus: 0.0 },
            7,
        );
        let pupils = fixed_pupils(&policy, 0.022).unwrap();
        assert_eq!(pupils.len(), 25);
        assert_relative_eq!(pupils[0].shift[0], -0.00825, max_relative = 1e-12);
        assert_relative_eq!(pupils[1].shift[0] - pupils[0].shift[0], 0.0165 / 4.0, max_relative = 1e-12);
        for p in &pupils {
            for axis in 0..2 {
                assert!(p.shift[axis].abs() + p.diameter / 2.0 <= 0.011 + 1e-12);
            }
        }
    }

    #[test]
    fn slfh_batches_are_deterministic() {
        let cfg = config();
        let lf = test_lf(&cfg);
        let policy = SupervisionPolicy::slfh(ranges(), 4, 99);
        let w = cfg.min_eyebox_width();
        let a = sample_batch(&policy, &lf, 0, &cfg, w).unwrap();
        let b = sample_batch(&policy, &lf, 0, &cfg, w).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.pupil, y.pupil);
            for (tx, ty) in x.targets.iter().zip(y.targets.iter()) {
                assert_eq!(tx.intensity, ty.intensity);
            }
        }
        let c = sample_batch(&policy, &lf, 1, &cfg, w).unwrap();
        assert_ne!(a[0].pupil, c[0].pupil, "different iterations must differ");
    }

    #[test]
    fn slfh_marginals_cover_ranges_uniformly() {
        let cfg = config();
        let lf = test_lf(&cfg);
        // Fixed shift bound so the x marginal is a plain uniform.
        let r = PupilRanges::new(0.0, 0.015, 0.011, 0.020, Some(0.003)).unwrap();
        let policy = SupervisionPolicy::slfh(r, 10, 123);
        let w = cfg.min_eyebox_width();
        let mut zs = Vec::new();
        let mut ds = Vec::new();
        let mut xs = Vec::new();
        for iter in 0..1000u64 {
            for s in sample_slfh_pupils(&policy, &lf, iter, w).unwrap() {
                zs.push(s.focus);
                ds.push(s.diameter);
                xs.push(s.shift[0]);
            }
        }
        let check = |vals: &mut Vec<f64>, lo: f64, hi: f64, name: &str| {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = vals.len() as f64;
            let span = hi - lo;
            assert!(vals[0] <= lo + 0.01 * span, "{name} min {}", vals[0]);
            assert!(vals[vals.len() - 1] >= hi - 0.01 * span, "{name} max");
            // Kolmogorov-Smirnov statistic against the uniform CDF.
            let mut ks: f64 = 0.0;
            for (i, &v) in vals.iter().enumerate() {
                let cdf = (v - lo) / span;
                let emp_hi = (i + 1) as f64 / n;
                let emp_lo = i as f64 / n;
                ks = ks.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
            }
            assert!(ks < 0.02, "{name} KS statistic {ks}");
        };
        check(&mut zs, 0.0, 0.015, "z");
        check(&mut ds, 0.011, 0.020, "d");
        check(&mut xs, -0.003, 0.003, "x");
    }

    #[test]
    fn degenerate_slfh_matches_lf2fs_bit_exactly() {
        let cfg = config();
        let lf = test_lf(&cfg);
        let w = cfg.min_eyebox_width();

        let lf2fs = SupervisionPolicy::lf2fs(
            PupilRanges::new(0.0, 0.012, 0.002, 0.020, None).unwrap(),
            4,
            7,
        );
        let stack = sample_batch(&lf2fs, &lf, 0, &cfg, w).unwrap();

        for (layer, sample) in stack.iter().enumerate() {
            let z = sample.pupil.focus;
            let degenerate = SupervisionPolicy::slfh(
                PupilRanges::new(z, z, w, w, Some(0.0)).unwrap(),
                1,
                31 + layer as u64,
            );
            let drawn = sample_batch(&degenerate, &lf, 0, &cfg, w).unwrap();
            assert_eq!(drawn[0].pupil.focus, sample.pupil.focus);
            assert_eq!(drawn[0].pupil.diameter, sample.pupil.diameter);
            assert_eq!(drawn[0].pupil.shift[0].abs(), 0.0);
            assert_eq!(drawn[0].targets[0].intensity, sample.targets[0].intensity);
        }
    }

    #[test]
    fn targets_match_direct_projection_bit_exactly() {
        let cfg = config();
        let lf = test_lf(&cfg);
        let w = cfg.min_eyebox_width();
        let policy = SupervisionPolicy::slfh(ranges(), 3, 5);
        let batch = sample_batch(&policy, &lf, 7, &cfg, w).unwrap();
        for s in &batch {
            let direct = project_lightfield(&lf, &s.pupil, 0, &cfg).unwrap();
            assert_eq!(s.targets[0].intensity, direct.intensity);
        }
    }

    #[test]
    fn incompatible_ranges_rejected() {
        let cfg = config();
        let w = cfg.min_eyebox_width();
        // d_min above the eyebox: validation error.
        let policy = SupervisionPolicy::slfh(
            PupilRanges::new(0.0, 0.01, 0.030, 0.031, None).unwrap(),
            2,
            1,
        );
        assert!(policy.validate(w).is_err());
        // Fixed shift bound far outside the eyebox: validation error.
        let policy = SupervisionPolicy::slfh(
            PupilRanges::new(0.0, 0.01, 0.002, 0.004, Some(0.05)).unwrap(),
            2,
            1,
        );
        assert!(policy.validate(w).is_err());
    }
}
