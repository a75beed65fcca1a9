//! Run configuration: a sectioned `key = value` file (TOML syntax). Every
//! field has a default, unknown keys are rejected, and `section.key=value`
//! overrides are applied on top of the file before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aperture::{make_aperture, Aperture, ShapeTag};
use crate::control::{Estimators, LoopConfig};
use crate::error::{AoError, Result};
use crate::estimators::{BlindOptions, DiversityOptions, RetrievalOptions};
use crate::zernike::{build_basis, BasisSpec, ModeSelection, SampleOptions, ZernikeBasis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Pupil grid side.
    pub n: usize,
    pub pad_factor: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 256, pad_factor: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApertureConfig {
    pub shape: ShapeTag,
    pub size_fraction: f64,
    /// 8-bit image read when `shape = "bitmap"`.
    pub bitmap: Option<String>,
}

impl Default for ApertureConfig {
    fn default() -> Self {
        Self {
            shape: ShapeTag::Triangle,
            size_fraction: 0.4,
            bitmap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZernikeConfig {
    pub max_order: u32,
    /// Use the first this many non-piston modes instead of all modes up to
    /// `max_order`.
    pub first_modes: Option<usize>,
    pub disk_fraction: f64,
    /// Coefficient-vector norm of sampled aberrations, rad.
    pub rms: f64,
    pub decay: f64,
    pub exclude_tilt: bool,
}

impl Default for ZernikeConfig {
    fn default() -> Self {
        Self {
            max_order: 6,
            first_modes: None,
            disk_fraction: 0.9,
            rms: 1.0,
            decay: 2.0,
            exclude_tilt: true,
        }
    }
}

impl ZernikeConfig {
    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            rms_target: self.rms,
            decay: self.decay,
            exclude_tilt: self.exclude_tilt,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// 8-bit scene image; a synthetic dead-leaves scene is drawn when absent.
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub runs: usize,
    pub first_seed: u64,
    /// Aberration RMS is spread evenly over `[rms_min, rms_max]`.
    pub rms_min: f64,
    pub rms_max: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            first_seed: 0,
            rms_min: 0.5,
            rms_max: 1.5,
        }
    }
}

impl BatchConfig {
    /// RMS of run `k`: midpoints of `runs` equal bins over the range.
    pub fn rms_of(&self, k: usize) -> f64 {
        self.rms_min + (self.rms_max - self.rms_min) * (k as f64 + 0.5) / self.runs.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmbiguityConfig {
    /// Random phases per aperture.
    pub phases: usize,
    /// Minimum RMS of the even-parity part of each phase, rad.
    pub min_even_rms: f64,
    /// Replace the random phases by a pure tilt of this many radians RMS.
    pub tilt_override: Option<f64>,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        Self {
            phases: 100,
            min_even_rms: 0.5,
            tilt_override: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; falls back to the environment, then `runs`.
    pub output_dir: Option<String>,
    pub grid: GridConfig,
    pub aperture: ApertureConfig,
    pub zernike: ZernikeConfig,
    pub scene: SceneConfig,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub blind: BlindOptions,
    pub retrieval: RetrievalOptions,
    pub diversity: DiversityOptions,
    pub batch: BatchConfig,
    pub ambiguity: AmbiguityConfig,
}

impl RunConfig {
    /// Parses `text` (empty for all defaults), applies `overrides` of the form
    /// `section.key=value`, and validates. Keys left out keep the values of
    /// [`RunConfig::default`], also inside partially given sub-sections.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| AoError::Config(e.to_string()))?;
        let mut table: toml::Table = RunConfig::default()
            .to_toml()
            .parse()
            .expect("default config parses");
        merge(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| AoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::load(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AoError::Config(m));
        if self.grid.n < 16 || !self.grid.n.is_power_of_two() {
            return bad(format!("grid.n must be a power of two >= 16, got {}", self.grid.n));
        }
        if self.grid.pad_factor == 0 {
            return bad("grid.pad_factor must be >= 1".into());
        }
        for (name, pad) in [
            ("retrieval.refine", self.retrieval.pad_factor()),
            ("diversity.refine", self.diversity.refine.pad_factor),
        ] {
            if pad != self.grid.pad_factor {
                return bad(format!(
                    "{name}.pad_factor = {pad} differs from grid.pad_factor = {}",
                    self.grid.pad_factor
                ));
            }
        }
        if self.aperture.shape == ShapeTag::Bitmap && self.aperture.bitmap.is_none() {
            return bad("aperture.shape = \"bitmap\" needs aperture.bitmap".into());
        }
        if !(self.zernike.rms >= 0.0) {
            return bad(format!("zernike.rms must be >= 0, got {}", self.zernike.rms));
        }
        if !(self.batch.rms_min >= 0.0 && self.batch.rms_max >= self.batch.rms_min) {
            return bad("batch needs 0 <= rms_min <= rms_max".into());
        }
        self.loop_config().validate()
    }

    /// Loop settings with the grid padding filled in.
    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            pad_factor: self.grid.pad_factor,
            ..self.loop_config.clone()
        }
    }

    /// Synthesized aperture; bitmap apertures are loaded by the caller.
    pub fn aperture(&self) -> Result<Aperture> {
        make_aperture(self.aperture.shape, self.grid.n, self.aperture.size_fraction)
    }

    pub fn basis(&self) -> Result<ZernikeBasis> {
        match self.zernike.first_modes {
            Some(count) => ZernikeBasis::new(BasisSpec {
                grid_n: self.grid.n,
                disk_radius_fraction: self.zernike.disk_fraction,
                selection: ModeSelection::FirstModes(count),
            }),
            None => build_basis(self.grid.n, self.zernike.disk_fraction, self.zernike.max_order),
        }
    }

    pub fn estimators(&self, basis: ZernikeBasis) -> Estimators {
        Estimators::from_config(
            basis,
            &self.loop_config(),
            self.blind.clone(),
            self.retrieval.clone(),
            self.diversity.clone(),
        )
    }

    /// The fully resolved configuration, loadable by [`RunConfig::load`].
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and otherwise taken
/// as a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AoError::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AoError::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| AoError::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::load("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load("sed = 3", &[]).is_err());
        assert!(RunConfig::load("[grid]\nside = 3", &[]).is_err());
        assert!(RunConfig::load("", &["loop.lops=2".into()]).is_err());
    }

    #[test]
    fn overrides_beat_the_file() {
        let text = "seed = 4\n[loop]\nloops = 2\nmeasurements_budget = 3\n";
        let cfg = RunConfig::load(text, &["seed=9".into(), "aperture.shape=disk".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loop_config.loops, 2);
        assert_eq!(cfg.aperture.shape, ShapeTag::Disk);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::load("[zernike]\nrms = 0.7\n[retrieval.refine]\nmax_iterations = 12\n", &[]).unwrap();
        let again = RunConfig::load(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn partial_subsections_keep_their_own_defaults() {
        let cfg = RunConfig::load("[diversity.refine]\ntolerance = 0.01\n", &[]).unwrap();
        let expected = DiversityOptions::default().refine;
        assert_eq!(cfg.diversity.refine.tolerance, 0.01);
        assert_eq!(cfg.diversity.refine.max_iterations, expected.max_iterations);
    }

    #[test]
    fn mode_count_can_replace_radial_order() {
        assert_eq!(RunConfig::load("[grid]\nn = 32\n", &[]).unwrap().basis().unwrap().len(), 27);
        let cfg = RunConfig::load("[grid]\nn = 32\n[zernike]\nfirst_modes = 6\n", &[]).unwrap();
        assert_eq!(cfg.basis().unwrap().len(), 6);
    }

    #[test]
    fn inconsistent_padding_is_rejected() {
        assert!(RunConfig::load("[grid]\npad_factor = 3\n", &[]).is_err());
    }
}
