//! Phase retrieval: per-channel multi-frame phase variables, a scale-fitted
//! amplitude loss against supervision targets, the analytic gradient through
//! the wave projection adjoint, and Adam updates.
//!
//! Loss for one sample and channel: the temporal frames are projected under
//! the sample's pupil, averaged, 2x2 pooled, and compared in amplitude
//! against the equally pooled target with a closed-form least-squares scale
//! `kappa` absorbing the unobservable global gain:
//!
//!   rho = sqrt(pool(mean_t |v_t|^2)) - kappa * sqrt(pool(T)),
//!   loss = sum_i mean(rho_i^2).
//!
//! Because `kappa` satisfies the normal equation, its dependence on the
//! phases drops out of the gradient, which backpropagates through the sqrt,
//! pool, frame average, `|.|^2`, the linear propagation adjoint, and
//! `u = exp(j phi)`.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array3};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, fft2_owned, ifft2, ifft2_owned};
use crate::lightfield::LightField;
use crate::optics::{FreqGrid, OpticalConfig};
use crate::supervision::{batch_seed, SupervisionSample, Supervisor};
use crate::wavefield::{pool2, KernelCache, KernelOptions, PropagationKernel};

const AMP_EPS: f64 = 1e-12;

/// Loss residual domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDomain {
    /// Residual between sqrt-intensities (default).
    Amplitude,
    /// Residual between intensities.
    Intensity,
}

/// SLM phase stacks: one `(frames, rows, cols)` grid per color channel,
/// stored unwrapped; wrapping to `[0, 2pi)` happens only at export.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVariables {
    pub phases: Vec<Array3<f64>>,
}

impl PhaseVariables {
    /// I.i.d. uniform random phases in `[0, 2pi)`, deterministic in `seed`.
    pub fn random(channels: usize, frames: usize, shape: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = (0..channels)
            .map(|_| {
                Array3::from_shape_fn((frames, shape.0, shape.1), |_| {
                    rng.random_range(0.0..std::f64::consts::TAU)
                })
            })
            .collect();
        Self { phases }
    }

    pub fn channels(&self) -> usize {
        self.phases.len()
    }

    pub fn frames(&self) -> usize {
        self.phases.first().map_or(0, |p| p.dim().0)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.phases.first().map_or((0, 0), |p| (p.dim().1, p.dim().2))
    }

    pub fn frame(&self, channel: usize, frame: usize) -> Array2<f64> {
        self.phases[channel].index_axis(ndarray::Axis(0), frame).to_owned()
    }
}

/// Adam state over all phase grids.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array3<f64>>,
    v: Vec<Array3<f64>>,
    step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(like: &PhaseVariables, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Array3<f64>> =
            like.phases.iter().map(|p| Array3::zeros(p.dim())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, lr, beta1, beta2, epsilon }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, phi: &mut PhaseVariables, grads: &[Array3<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let lr_t = self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        for c in 0..phi.phases.len() {
            let (m, v) = (&mut self.m[c], &mut self.v[c]);
            let g = &grads[c];
            let p = &mut phi.phases[c];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + self.epsilon);
                });
        }
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub iterations: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    /// Temporal frame count S.
    pub frames: usize,
    pub loss_domain: LossDomain,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 2e-2,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            frames: 8,
            loss_domain: LossDomain::Amplitude,
        }
    }
}

/// Per-sample diagnostics from a forward pass.
#[derive(Debug, Clone)]
pub struct SampleDiag {
    pub channel: usize,
    pub loss: f64,
    pub kappa: f64,
}

/// One loss-trace row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub batch_seed: u64,
}

/// Pooled model intensity for one (sample, channel): frames projected under
/// the pupil, averaged in fixed frame order, then 2x2 pooled.
fn pooled_model_intensity(
    spectra: &[Array2<Complex<f64>>],
    kernel: &PropagationKernel,
) -> (Vec<Array2<Complex<f64>>>, Array2<f64>) {
    let projected: Vec<Array2<Complex<f64>>> = spectra
        .par_iter()
        .map(|spec| {
            let mut filtered = spec.clone();
            filtered.zip_mut_with(&kernel.values, |s, k| *s *= k);
            ifft2_owned(filtered)
        })
        .collect();
    let shape = projected[0].dim();
    let mut mean = Array2::<f64>::zeros(shape);
    for v in &projected {
        mean.zip_mut_with(v, |m, z| *m += z.norm_sqr());
    }
    mean.mapv_inplace(|x| x / projected.len() as f64);
    (projected, pool2(&mean))
}

/// Closed-form scale and residual for one pooled model/target pair.
/// Returns `(kappa, residual, loss)` where `residual = model - kappa*target`
/// in the requested domain.
pub(crate) fn scale_and_residual(
    model_pooled: &Array2<f64>,
    target_pooled: &Array2<f64>,
    domain: LossDomain,
) -> (f64, Array2<f64>, Array2<f64>, f64) {
    let (a, b): (Array2<f64>, Array2<f64>) = match domain {
        LossDomain::Amplitude => (
            model_pooled.mapv(|x| x.max(0.0).sqrt()),
            target_pooled.mapv(|x| x.max(0.0).sqrt()),
        ),
        LossDomain::Intensity => (model_pooled.clone(), target_pooled.clone()),
    };
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    let kappa = if den > 0.0 { num / den } else { 0.0 };
    let rho = ndarray::Zip::from(&a).and(&b).map_collect(|&x, &y| x - kappa * y);
    let loss = rho.iter().map(|r| r * r).sum::<f64>() / rho.len() as f64;
    (kappa, a, rho, loss)
}

/// Gradient of the per-sample loss with respect to the pooled model
/// intensity (guarded where the amplitude vanishes).
pub(crate) fn residual_to_intensity_grad(
    a: &Array2<f64>,
    rho: &Array2<f64>,
    domain: LossDomain,
) -> Array2<f64> {
    let m = rho.len() as f64;
    match domain {
        // dL/dI_pooled = (2 rho / M) * (1 / (2 a)) = rho / (M a)
        LossDomain::Amplitude => ndarray::Zip::from(a).and(rho).map_collect(|&a, &r| {
            if a > 0.0 {
                r / (m * a.max(AMP_EPS))
            } else {
                0.0
            }
        }),
        LossDomain::Intensity => rho.mapv(|r| 2.0 * r / m),
    }
}

/// Spread a pooled gradient back to full resolution (x 1/4 per pixel).
pub(crate) fn unpool_grad(g: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = g.dim();
    let mut out = Array2::zeros((rows * 2, cols * 2));
    for i in 0..rows {
        for j in 0..cols {
            let v = 0.25 * g[[i, j]];
            out[[2 * i, 2 * j]] = v;
            out[[2 * i, 2 * j + 1]] = v;
            out[[2 * i + 1, 2 * j]] = v;
            out[[2 * i + 1, 2 * j + 1]] = v;
        }
    }
    out
}


struct EvalContext<'a> {
    config: &'a OpticalConfig,
    grid: FreqGrid,
    cache: &'a KernelCache,
    options: KernelOptions,
    domain: LossDomain,
}

impl<'a> EvalContext<'a> {
    fn kernel(&self, sample: &SupervisionSample, channel: usize) -> Result<Arc<PropagationKernel>> {
        self.cache.get_or_build(
            &self.grid,
            &sample.pupil,
            self.config.wavelength(channel)?,
            self.config.focal_length,
            self.options,
        )
    }
}

fn field_spectra(phi: &PhaseVariables, channel: usize) -> Vec<(Array2<Complex<f64>>, Array2<Complex<f64>>)> {
    (0..phi.frames())
        .into_par_iter()
        .map(|t| {
            let u = phi.phases[channel]
                .index_axis(ndarray::Axis(0), t)
                .mapv(|p| Complex::from_polar(1.0, p));
            let spectrum = fft2(&u);
            (u, spectrum)
        })
        .collect()
}

/// Loss of a batch without gradients.
pub fn forward_loss(
    phi: &PhaseVariables,
    batch: &[SupervisionSample],
    config: &OpticalConfig,
    domain: LossDomain,
    options: KernelOptions,
) -> Result<(f64, Vec<SampleDiag>)> {
    let cache = KernelCache::default();
    let ctx = EvalContext {
        config,
        grid: FreqGrid::new(phi.shape(), config.slm_pitch),
        cache: &cache,
        options,
        domain,
    };
    let mut total = 0.0;
    let mut diags = Vec::new();
    for c in 0..phi.channels() {
        let spectra: Vec<_> = field_spectra(phi, c).into_iter().map(|(_, s)| s).collect();
        for sample in batch {
            let kernel = ctx.kernel(sample, c)?;
            let (_, pooled) = pooled_model_intensity(&spectra, &kernel);
            let target_pooled = pool2(&sample.targets[c].intensity);
            let (kappa, _, _, loss) = scale_and_residual(&pooled, &target_pooled, ctx.domain);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    x: sample.pupil.shift[0],
                    y: sample.pupil.shift[1],
                    z: sample.pupil.focus,
                    d: sample.pupil.diameter,
                });
            }
            total += loss;
            diags.push(SampleDiag { channel: c, loss, kappa });
        }
    }
    Ok((total, diags))
}

/// Loss and analytic gradient of a batch with respect to every phase pixel.
/// Per-sample contributions accumulate in fixed batch order.
pub fn gradient(
    phi: &PhaseVariables,
    batch: &[SupervisionSample],
    config: &OpticalConfig,
    domain: LossDomain,
    options: KernelOptions,
    cache: &KernelCache,
) -> Result<(f64, Vec<Array3<f64>>, Vec<SampleDiag>)> {
    let ctx = EvalContext {
        config,
        grid: FreqGrid::new(phi.shape(), config.slm_pitch),
        cache,
        options,
        domain,
    };
    let frames = phi.frames();
    let shape = phi.shape();
    let mut grads: Vec<Array3<f64>> =
        phi.phases.iter().map(|p| Array3::zeros(p.dim())).collect();
    let mut total = 0.0;
    let mut diags = Vec::new();

    for c in 0..phi.channels() {
        let fields_spectra = field_spectra(phi, c);
        let spectra: Vec<_> = fields_spectra.iter().map(|(_, s)| s.clone()).collect();
        // Adjoint contributions accumulate in the frequency domain; one
        // inverse transform per frame at the end.
        let mut grad_spectra: Vec<Array2<Complex<f64>>> =
            (0..frames).map(|_| Array2::zeros(shape)).collect();

        for sample in batch {
            let kernel = ctx.kernel(sample, c)?;
            let (projected, pooled) = pooled_model_intensity(&spectra, &kernel);
            let target_pooled = pool2(&sample.targets[c].intensity);
            let (kappa, a, rho, loss) = scale_and_residual(&pooled, &target_pooled, ctx.domain);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    x: sample.pupil.shift[0],
                    y: sample.pupil.shift[1],
                    z: sample.pupil.focus,
                    d: sample.pupil.diameter,
                });
            }
            total += loss;
            diags.push(SampleDiag { channel: c, loss, kappa });

            let g_pooled = residual_to_intensity_grad(&a, &rho, ctx.domain);
            let g_intensity = unpool_grad(&g_pooled);

            // dL/d(conj u) per frame: (g_I / S) * v through the adjoint map.
            let contributions: Vec<Array2<Complex<f64>>> = projected
                .par_iter()
                .map(|v| {
                    let mut gv = v.clone();
                    gv.zip_mut_with(&g_intensity, |z, &g| *z *= g / frames as f64);
                    let mut spec = fft2_owned(gv);
                    spec.zip_mut_with(&kernel.values, |s, k| *s *= k.conj());
                    spec
                })
                .collect();
            for (acc, contrib) in grad_spectra.iter_mut().zip(contributions.iter()) {
                acc.zip_mut_with(contrib, |a, &b| *a += b);
            }
        }

        let frame_grads: Vec<Array2<f64>> = grad_spectra
            .par_iter()
            .enumerate()
            .map(|(t, spec)| {
                let gu = ifft2(spec);
                let u = &fields_spectra[t].0;
                // dL/dphi = 2 Re[ j u conj(dL/d conj u) ] = 2 Im[ conj(u) dL/d conj u ]
                ndarray::Zip::from(u).and(&gu).map_collect(|&u, &g| 2.0 * (u.conj() * g).im)
            })
            .collect();
        for (t, fg) in frame_grads.into_iter().enumerate() {
            grads[c].index_axis_mut(ndarray::Axis(0), t).assign(&fg);
        }
    }
    Ok((total, grads, diags))
}

/// Full optimization loop: sample, evaluate, step. Deterministic given the
/// seed; phases are initialized i.i.d. uniform in `[0, 2pi)`.
pub fn optimize(
    lf: &LightField,
    supervisor: &Supervisor,
    config: &OpticalConfig,
    settings: &OptimizerSettings,
    seed: u64,
) -> Result<(PhaseVariables, Vec<TraceRow>)> {
    if settings.iterations == 0 {
        return Err(Error::Config("iterations must be >= 1".into()));
    }
    if lf.channels() != config.channels() {
        return Err(Error::Config(format!(
            "light field has {} channels but the optical config has {}",
            lf.channels(),
            config.channels()
        )));
    }
    let shape = config.slm_resolution;
    if shape.0 % 2 != 0 || shape.1 % 2 != 0 {
        return Err(Error::Config("resolution must be even for 2x2 pooling".into()));
    }
    if lf.resolution() != shape {
        return Err(Error::Config(format!(
            "light-field resolution {:?} must match the SLM resolution {:?}",
            lf.resolution(),
            shape
        )));
    }

    let mut phi =
        PhaseVariables::random(config.channels(), settings.frames, shape, batch_seed(seed, 0));
    let mut adam =
        AdamState::new(&phi, settings.lr, settings.betas.0, settings.betas.1, settings.epsilon);
    let cache = KernelCache::default();
    let options = KernelOptions {
        edge_width: 0.0,
        bandpass: supervisor.policy().bandpass,
    };

    let mut trace = Vec::with_capacity(settings.iterations);
    let mut initial_loss = f64::NAN;
    let mut high_loss_streak = 0usize;

    for iter in 0..settings.iterations {
        let t0 = Instant::now();
        let batch = supervisor.batch(lf, iter as u64, config)?;
        let (loss, grads, _) =
            gradient(&phi, &batch, config, settings.loss_domain, options, &cache)?;
        adam.update(&mut phi, &grads);

        if iter == 0 {
            initial_loss = loss;
        }
        if loss > 1e3 * initial_loss {
            high_loss_streak += 1;
            if high_loss_streak >= 50 {
                return Err(Error::Diverged { iteration: iter, loss, initial: initial_loss });
            }
        } else {
            high_loss_streak = 0;
        }

        trace.push(TraceRow {
            iteration: iter,
            loss,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            batch_seed: batch.first().map_or(0, |s| s.batch_seed),
        });
    }
    Ok((phi, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{PupilRanges, PupilState};
    use crate::scene::{PlaneSpec, SceneSpec};
    use crate::supervision::SupervisionPolicy;
    use approx::assert_abs_diff_eq;

    fn config(n: usize) -> OpticalConfig {
        OpticalConfig::new(vec![440e-9], 8e-6, (n, n), 0.4, None).unwrap()
    }

    fn flat_scene(n: usize) -> SceneSpec {
        SceneSpec {
            resolution: [n, n],
            views: [3, 3],
            channels: 1,
            eyebox_mm: None,
            planes: vec![PlaneSpec {
                depth_mm: 0.0,
                texture: "checker:4".into(),
                mask: "full".into(),
                gain: vec![],
            }],
            points: vec![],
        }
    }

    fn random_batch(
        n: usize,
        cfg: &OpticalConfig,
        pupils: &[PupilState],
        seed: u64,
    ) -> Vec<SupervisionSample> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pupils
            .iter()
            .map(|p| {
                let target = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0));
                SupervisionSample {
                    pupil: *p,
                    targets: vec![crate::lightfield::TargetImage {
                        intensity: target,
                        pupil: *p,
                        channel: 0,
                    }],
                    batch_seed: seed,
                }
            })
            .collect()
    }

    fn test_pupils() -> Vec<PupilState> {
        vec![
            PupilState::new([0.001, -0.002], 0.004, 0.012).unwrap(),
            PupilState::new([-0.003, 0.000], 0.011, 0.008).unwrap(),
            PupilState::new([0.000, 0.002], 0.000, 0.016).unwrap(),
        ]
    }

    #[test]
    fn gradient_matches_finite_differences_both_domains() {
        let n = 16;
        let cfg = config(n);
        let batch = random_batch(n, &cfg, &test_pupils(), 17);
        let phi = PhaseVariables::random(1, 2, (n, n), 3);
        let cache = KernelCache::default();
        let opts = KernelOptions::default();

        for domain in [LossDomain::Amplitude, LossDomain::Intensity] {
            let (_, grads, _) = gradient(&phi, &batch, &cfg, domain, opts, &cache).unwrap();
            let h = 1e-4;
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut max_rel: f64 = 0.0;
            for _ in 0..100 {
                let t = rng.random_range(0..2usize);
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                let mut plus = phi.clone();
                plus.phases[0][[t, i, j]] += h;
                let mut minus = phi.clone();
                minus.phases[0][[t, i, j]] -= h;
                let (lp, _) = forward_loss(&plus, &batch, &cfg, domain, opts).unwrap();
                let (lm, _) = forward_loss(&minus, &batch, &cfg, domain, opts).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[0][[t, i, j]];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-3, "{domain:?}: max relative error {max_rel}");
        }
    }

    #[test]
    fn loss_matches_straight_line_reimplementation() {
        // Independent oracle: no shared code with the implementation path.
        // Naive DFT, naive pooling, explicit kappa fit.
        let n = 16;
        let cfg = config(n);
        let pupils = vec![
            PupilState::new([0.002, 0.001], 0.006, 0.010).unwrap(),
            PupilState::new([-0.001, -0.004], 0.013, 0.014).unwrap(),
        ];
        let batch = random_batch(n, &cfg, &pupils, 29);
        let phi = PhaseVariables::random(1, 2, (n, n), 41);
        let (loss, _) =
            forward_loss(&phi, &batch, &cfg, LossDomain::Amplitude, KernelOptions::default())
                .unwrap();

        let oracle = oracle_loss(&phi, &batch, &cfg);
        assert_abs_diff_eq!(loss, oracle, epsilon = 1e-10 * loss.abs().max(1.0));
    }

    /// Textbook reimplementation of the forward model used only as a test
    /// oracle: O(n^4) DFTs and explicit loops throughout.
    fn oracle_loss(phi: &PhaseVariables, batch: &[SupervisionSample], cfg: &OpticalConfig) -> f64 {
        let n = phi.shape().0;
        let frames = phi.frames();
        let lambda = cfg.wavelengths[0];
        let f = cfg.focal_length;
        let freqs: Vec<f64> = (0..n)
            .map(|k| {
                let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
                k / (n as f64 * cfg.slm_pitch)
            })
            .collect();

        let dft = |input: &Vec<Vec<Complex<f64>>>, sign: f64| -> Vec<Vec<Complex<f64>>> {
            let mut out = vec![vec![Complex::new(0.0, 0.0); n]; n];
            for ky in 0..n {
                for kx in 0..n {
                    let mut acc = Complex::new(0.0, 0.0);
                    for y in 0..n {
                        for x in 0..n {
                            let ph = sign
                                * std::f64::consts::TAU
                                * (ky as f64 * y as f64 + kx as f64 * x as f64)
                                / n as f64;
                            acc += input[y][x] * Complex::from_polar(1.0, ph);
                        }
                    }
                    out[ky][kx] = acc / (n as f64);
                }
            }
            out
        };

        let mut total = 0.0;
        for s in batch {
            // kernel
            let cx = s.pupil.shift[0] / (lambda * f);
            let cy = s.pupil.shift[1] / (lambda * f);
            let radius = s.pupil.diameter / (2.0 * lambda * f);
            let mut kern = vec![vec![Complex::new(0.0, 0.0); n]; n];
            for iy in 0..n {
                for ix in 0..n {
                    let dy = freqs[iy] - cy;
                    let dx = freqs[ix] - cx;
                    if (dy * dy + dx * dx).sqrt() < radius {
                        let arg = 1.0
                            - (lambda * freqs[iy]).powi(2)
                            - (lambda * freqs[ix]).powi(2);
                        if arg > 0.0 {
                            kern[iy][ix] = Complex::from_polar(
                                1.0,
                                std::f64::consts::TAU / lambda * s.pupil.focus * arg.sqrt(),
                            );
                        }
                    }
                }
            }
            // mean intensity over frames
            let mut mean = vec![vec![0.0; n]; n];
            for t in 0..frames {
                let mut u = vec![vec![Complex::new(0.0, 0.0); n]; n];
                for y in 0..n {
                    for x in 0..n {
                        u[y][x] = Complex::from_polar(1.0, phi.phases[0][[t, y, x]]);
                    }
                }
                let mut spec = dft(&u, -1.0);
                for y in 0..n {
                    for x in 0..n {
                        spec[y][x] *= kern[y][x];
                    }
                }
                let v = dft(&spec, 1.0);
                for y in 0..n {
                    for x in 0..n {
                        mean[y][x] += v[y][x].norm_sqr() / frames as f64;
                    }
                }
            }
            // pool, amplitude, kappa, residual
            let m = n / 2;
            let mut a = vec![0.0; m * m];
            let mut b = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    let pm = 0.25
                        * (mean[2 * i][2 * j]
                            + mean[2 * i][2 * j + 1]
                            + mean[2 * i + 1][2 * j]
                            + mean[2 * i + 1][2 * j + 1]);
                    let tgt = &s.targets[0].intensity;
                    let pt = 0.25
                        * (tgt[[2 * i, 2 * j]]
                            + tgt[[2 * i, 2 * j + 1]]
                            + tgt[[2 * i + 1, 2 * j]]
                            + tgt[[2 * i + 1, 2 * j + 1]]);
                    a[i * m + j] = pm.sqrt();
                    b[i * m + j] = pt.max(0.0).sqrt();
                }
            }
            let num: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let den: f64 = b.iter().map(|y| y * y).sum();
            let kappa = if den > 0.0 { num / den } else { 0.0 };
            let loss: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - kappa * y) * (x - kappa * y))
                .sum::<f64>()
                / (m * m) as f64;
            total += loss;
        }
        total
    }

    #[test]
    fn exact_fit_has_zero_loss_and_unit_kappa() {
        // A plane wave through a full-aperture in-focus pupil reproduces the
        // constant target exactly.
        let n = 16;
        let cfg = config(n);
        let p = PupilState::centered(0.0, 2.0 * 0.022).unwrap();
        let target = Array2::from_elem((n, n), 1.0);
        let batch = vec![SupervisionSample {
            pupil: p,
            targets: vec![crate::lightfield::TargetImage { intensity: target, pupil: p, channel: 0 }],
            batch_seed: 0,
        }];
        let mut phi = PhaseVariables::random(1, 1, (n, n), 5);
        phi.phases[0].fill(0.3);
        let (loss, diags) =
            forward_loss(&phi, &batch, &cfg, LossDomain::Amplitude, KernelOptions::default())
                .unwrap();
        assert!(loss < 1e-20, "loss {loss}");
        assert_abs_diff_eq!(diags[0].kappa, 1.0, epsilon = 1e-9);

        // Stationary point: gradient vanishes at the global minimum.
        let cache = KernelCache::default();
        let (_, grads, _) = gradient(
            &phi,
            &batch,
            &cfg,
            LossDomain::Amplitude,
            KernelOptions::default(),
            &cache,
        )
        .unwrap();
        let norm: f64 = grads[0].iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
    }

    #[test]
    fn zero_target_gives_zero_kappa() {
        let n = 8;
        let cfg = config(n);
        let p = PupilState::centered(0.0, 0.010).unwrap();
        let batch = vec![SupervisionSample {
            pupil: p,
            targets: vec![crate::lightfield::TargetImage {
                intensity: Array2::zeros((n, n)),
                pupil: p,
                channel: 0,
            }],
            batch_seed: 0,
        }];
        let phi = PhaseVariables::random(1, 1, (n, n), 5);
        let (loss, diags) =
            forward_loss(&phi, &batch, &cfg, LossDomain::Amplitude, KernelOptions::default())
                .unwrap();
        assert_eq!(diags[0].kappa, 0.0);
        // loss = mean model amplitude energy
        assert!(loss > 0.0);
    }

    #[test]
    fn target_scaling_leaves_gradient_direction_unchanged() {
        let n = 16;
        let cfg = config(n);
        let batch = random_batch(n, &cfg, &test_pupils(), 91);
        let mut scaled = batch.clone();
        for s in &mut scaled {
            for t in &mut s.targets {
                t.intensity.mapv_inplace(|v| 2.0 * v);
            }
        }
        let phi = PhaseVariables::random(1, 2, (n, n), 3);
        let cache = KernelCache::default();
        let (_, g1, _) = gradient(
            &phi,
            &batch,
            &cfg,
            LossDomain::Amplitude,
            KernelOptions::default(),
            &cache,
        )
        .unwrap();
        let (_, g2, _) = gradient(
            &phi,
            &scaled,
            &cfg,
            LossDomain::Amplitude,
            KernelOptions::default(),
            &cache,
        )
        .unwrap();
        let dot: f64 = g1[0].iter().zip(g2[0].iter()).map(|(a, b)| a * b).sum();
        let n1: f64 = g1[0].iter().map(|a| a * a).sum::<f64>().sqrt();
        let n2: f64 = g2[0].iter().map(|a| a * a).sum::<f64>().sqrt();
        let cosine = dot / (n1 * n2);
        assert!(cosine > 1.0 - 1e-9, "cosine {cosine}");
    }

    #[test]
    fn global_phase_offset_leaves_loss_unchanged() {
        let n = 16;
        let cfg = config(n);
        let batch = random_batch(n, &cfg, &test_pupils(), 55);
        let phi = PhaseVariables::random(1, 2, (n, n), 77);
        let mut shifted = phi.clone();
        shifted.phases[0].index_axis_mut(ndarray::Axis(0), 1).mapv_inplace(|p| p + 1.234);
        let (l0, _) =
            forward_loss(&phi, &batch, &cfg, LossDomain::Amplitude, KernelOptions::default())
                .unwrap();
        let (l1, _) =
            forward_loss(&shifted, &batch, &cfg, LossDomain::Amplitude, KernelOptions::default())
                .unwrap();
        assert_abs_diff_eq!(l0, l1, epsilon = 1e-10 * l0.max(1.0));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let phi0 = PhaseVariables::random(1, 2, (8, 8), 1);
        let mut phi = phi0.clone();
        let mut adam = AdamState::new(&phi, 0.02, 0.9, 0.999, 1e-8);
        let zeros = vec![Array3::zeros(phi.phases[0].dim())];
        adam.update(&mut phi, &zeros);
        assert_eq!(phi, phi0);
    }

    #[test]
    fn batch_order_is_enforced_and_bit_stable() {
        let n = 16;
        let cfg = config(n);
        let batch = random_batch(n, &cfg, &test_pupils(), 13);
        let phi = PhaseVariables::random(1, 2, (n, n), 7);
        let cache = KernelCache::default();
        let run = || {
            gradient(&phi, &batch, &cfg, LossDomain::Amplitude, KernelOptions::default(), &cache)
                .unwrap()
        };
        let (l1, g1, _) = run();
        let (l2, g2, _) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1[0], g2[0]);
        // Permuting the batch is NOT bit-stable in general (floating-point
        // reassociation); the contract is fixed-order summation only.
    }

    #[test]
    fn optimize_is_deterministic() {
        let n = 32;
        let cfg = config(n);
        let lf = crate::scene::synthesize_test_scene(&flat_scene(n), &cfg).unwrap();
        let ranges = PupilRanges::new(0.0, 0.01, 0.010, 0.020, None).unwrap();
        let policy = SupervisionPolicy::slfh(ranges, 2, 3);
        let w = cfg.min_eyebox_width();
        let supervisor = Supervisor::new(policy, &lf, &cfg, w).unwrap();
        let settings = OptimizerSettings { iterations: 5, frames: 2, ..Default::default() };
        let (phi1, trace1) = optimize(&lf, &supervisor, &cfg, &settings, 42).unwrap();
        let (phi2, trace2) = optimize(&lf, &supervisor, &cfg, &settings, 42).unwrap();
        assert_eq!(phi1, phi2);
        for (a, b) in trace1.iter().zip(trace2.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }
}
