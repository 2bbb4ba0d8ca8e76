//! Run configuration: strict JSON with millimeter/micrometer keys at the
//! boundary, meters internally. Unknown keys are rejected — silent typos in
//! optical constants are the dominant failure mode in this domain.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use lfholo_core::farfield::FarFieldConfig;
use lfholo_core::optics::{OpticalConfig, PupilRanges};
use lfholo_core::optimizer::{LossDomain, OptimizerSettings};
use lfholo_core::supervision::{PolicyKind, StftGridSpec, SupervisionPolicy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub optics: OpticsBlock,
    pub policy: PolicyBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub farfield: Option<FarFieldBlock>,
    pub io: IoBlock,
    #[serde(default)]
    pub seeds: SeedsBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Nearfield,
    Farfield,
}

fn default_mode() -> Mode {
    Mode::Nearfield
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsBlock {
    pub wavelengths_nm: Vec<f64>,
    pub slm_pitch_um: f64,
    pub resolution: [usize; 2],
    pub focal_length_mm: f64,
    #[serde(default)]
    pub detector_pitch_um: Option<f64>,
    #[serde(default)]
    pub z_min_mm: f64,
    #[serde(default = "default_z_max")]
    pub z_max_mm: f64,
    #[serde(default = "default_d_min")]
    pub d_min_mm: f64,
    #[serde(default = "default_d_max")]
    pub d_max_mm: f64,
    #[serde(default)]
    pub shift_max_mm: Option<f64>,
}

fn default_z_max() -> f64 {
    15.0
}
fn default_d_min() -> f64 {
    2.0
}
fn default_d_max() -> f64 {
    20.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBlock {
    pub policy: String,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_grid")]
    pub grid: [usize; 2],
    #[serde(default)]
    pub fixed_d_mm: Option<f64>,
    #[serde(default)]
    pub fixed_z_mm: f64,
    #[serde(default)]
    pub preset: Option<String>,
    /// Kernel band-pass fraction; unset uses the per-policy default
    /// (off for slfh, 0.9 for the fixed-pupil baselines).
    #[serde(default)]
    pub bandpass: Option<f64>,
}

fn default_batch() -> usize {
    4
}
fn default_layers() -> usize {
    5
}
fn default_grid() -> [usize; 2] {
    [8, 8]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_loss_domain")]
    pub loss_domain: String,
}

fn default_iterations() -> usize {
    500
}
fn default_lr() -> f64 {
    2e-2
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_frames() -> usize {
    8
}
fn default_loss_domain() -> String {
    "amplitude".into()
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            lr: default_lr(),
            betas: default_betas(),
            frames: default_frames(),
            loss_domain: default_loss_domain(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FarFieldBlock {
    pub hologram_resolution: [usize; 2],
    #[serde(default = "default_tile")]
    pub tile: usize,
    pub retina_window: [usize; 2],
}

fn default_tile() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoBlock {
    #[serde(default)]
    pub lightfield: Option<PathBuf>,
    #[serde(default)]
    pub scene: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsBlock {
    #[serde(default = "default_train_seed")]
    pub train: u64,
    #[serde(default = "default_eval_seed")]
    pub eval: u64,
}

fn default_train_seed() -> u64 {
    1
}
fn default_eval_seed() -> u64 {
    2
}

impl Default for SeedsBlock {
    fn default() -> Self {
        Self { train: default_train_seed(), eval: default_eval_seed() }
    }
}

/// Everything the pipeline needs, in meters, with defaults materialized.
pub struct Resolved {
    pub config: RunConfig,
    pub optics: OpticalConfig,
    pub ranges: PupilRanges,
    pub policy: SupervisionPolicy,
    pub settings: OptimizerSettings,
    pub farfield: Option<FarFieldConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    /// Validates, applies presets, converts units, and anchors relative
    /// paths at the config file's directory.
    pub fn resolve(mut self, config_dir: &Path) -> anyhow::Result<Resolved> {
        let optics = OpticalConfig::new(
            self.optics.wavelengths_nm.iter().map(|w| w * 1e-9).collect(),
            self.optics.slm_pitch_um * 1e-6,
            (self.optics.resolution[0], self.optics.resolution[1]),
            self.optics.focal_length_mm * 1e-3,
            self.optics.detector_pitch_um.map(|p| p * 1e-6),
        )?;

        let farfield = match (self.mode, &self.farfield) {
            (Mode::Nearfield, _) => None,
            (Mode::Farfield, Some(block)) => Some(FarFieldConfig::new(
                optics.clone(),
                (block.hologram_resolution[0], block.hologram_resolution[1]),
                block.tile,
                (block.retina_window[0], block.retina_window[1]),
            )?),
            (Mode::Farfield, None) => {
                bail!("mode \"farfield\" requires a \"farfield\" block")
            }
        };
        let eyebox_min = match &farfield {
            Some(ff) => ff.extent(),
            None => optics.min_eyebox_width(),
        };

        // Presets override the pupil ranges before unit-checked assembly.
        match self.policy.preset.as_deref() {
            None => {}
            Some("paper-hw") => {
                self.optics.z_min_mm = 0.0;
                self.optics.z_max_mm = 15.0;
                self.optics.d_min_mm = 2.0;
                self.optics.d_max_mm = 20.0;
            }
            Some("paper-sim") => {
                self.optics.d_min_mm = 0.10 * eyebox_min * 1e3;
                self.optics.d_max_mm = 0.40 * eyebox_min * 1e3;
            }
            Some(other) => bail!("unknown preset '{other}' (expected paper-sim or paper-hw)"),
        }

        let ranges = PupilRanges::new(
            self.optics.z_min_mm * 1e-3,
            self.optics.z_max_mm * 1e-3,
            self.optics.d_min_mm * 1e-3,
            self.optics.d_max_mm * 1e-3,
            self.optics.shift_max_mm.map(|r| r * 1e-3),
        )?;

        let seed = self.policy.seed.unwrap_or(self.seeds.train);
        self.policy.seed = Some(seed);
        let kind = match self.policy.policy.as_str() {
            "slfh" => PolicyKind::Slfh,
            "lf2fs" => PolicyKind::Lf2fs,
            "stft" | "stft_grid" => PolicyKind::StftGrid,
            other => bail!("unknown policy '{other}' (expected slfh, lf2fs, or stft)"),
        };
        if self.policy.grid[0] != self.policy.grid[1] {
            bail!("policy.grid must be square, got {:?}", self.policy.grid);
        }
        let mut policy = match kind {
            PolicyKind::Slfh => SupervisionPolicy::slfh(ranges, self.policy.batch, seed),
            PolicyKind::Lf2fs => SupervisionPolicy::lf2fs(ranges, self.policy.layers, seed),
            PolicyKind::StftGrid => SupervisionPolicy::stft_grid(
                ranges,
                StftGridSpec {
                    shifts_per_axis: self.policy.grid[0],
                    diameter: self.policy.fixed_d_mm.map_or(0.0, |d| d * 1e-3),
                    focus: self.policy.fixed_z_mm * 1e-3,
                },
                seed,
            ),
        };
        policy.resolve_stft_defaults(eyebox_min);
        if let Some(b) = self.policy.bandpass {
            policy.bandpass = if b > 0.0 && b < 1.0 { Some(b) } else { None };
        }
        self.policy.bandpass = policy.bandpass;
        self.policy.fixed_d_mm = Some(policy.stft_grid.diameter * 1e3);
        policy.validate(eyebox_min)?;

        let loss_domain = match self.optimizer.loss_domain.as_str() {
            "amplitude" => LossDomain::Amplitude,
            "intensity" => LossDomain::Intensity,
            other => bail!("unknown loss_domain '{other}' (expected amplitude or intensity)"),
        };
        if self.optimizer.iterations == 0 {
            bail!("optimizer.iterations must be >= 1");
        }
        if self.optimizer.frames == 0 {
            bail!("optimizer.frames must be >= 1");
        }
        let settings = OptimizerSettings {
            iterations: self.optimizer.iterations,
            lr: self.optimizer.lr,
            betas: (self.optimizer.betas[0], self.optimizer.betas[1]),
            epsilon: 1e-8,
            frames: self.optimizer.frames,
            loss_domain,
        };

        // Anchor input paths relative to the config file and require them
        // to exist now; the frozen copy records absolute paths.
        let anchor = |p: &PathBuf| -> anyhow::Result<PathBuf> {
            let joined = if p.is_absolute() { p.clone() } else { config_dir.join(p) };
            joined
                .canonicalize()
                .map_err(|e| anyhow!("io path {} does not exist: {e}", joined.display()))
        };
        match (&self.io.lightfield, &self.io.scene) {
            (Some(_), Some(_)) => bail!("io: specify either lightfield or scene, not both"),
            (None, None) => bail!("io: one of lightfield or scene is required"),
            (Some(p), None) => self.io.lightfield = Some(anchor(p)?),
            (None, Some(p)) => self.io.scene = Some(anchor(p)?),
        }

        Ok(Resolved { config: self, optics, ranges, policy, settings, farfield })
    }
}

/// Parses a CLI length: bare numbers are millimeters; `um`/`µm`, `mm`, `m`
/// suffixes are accepted.
pub fn parse_length(s: &str) -> anyhow::Result<f64> {
    let t = s.trim();
    let (num, scale) = if let Some(v) = t.strip_suffix("um").or_else(|| t.strip_suffix("µm")) {
        (v, 1e-6)
    } else if let Some(v) = t.strip_suffix("mm") {
        (v, 1e-3)
    } else if let Some(v) = t.strip_suffix('m') {
        (v, 1.0)
    } else {
        (t, 1e-3)
    };
    num.trim()
        .parse::<f64>()
        .map(|v| v * scale)
        .map_err(|_| anyhow!("cannot parse length '{s}'"))
}
