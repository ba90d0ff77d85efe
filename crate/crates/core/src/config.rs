//! TOML run configuration. Units: lengths in cm, times in ms, diffusivities
//! in cm^2/ms, stimulus amplitudes in mV/ms, angles in degrees.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ionic::model_by_name;
use crate::mesh::{RegionSelector, TissueTag};
use crate::splitting::{Scheme, SchemeConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub mesh: MeshConfig,
    pub tissue: TissueConfig,
    #[serde(default)]
    pub fibrosis: Option<FibrosisConfig>,
    /// Applied in order before fibrosis; later entries win.
    #[serde(default)]
    pub tag_regions: Vec<TagRegion>,
    /// Cell model for every tissue tag present in the mesh.
    pub models: BTreeMap<TissueTag, String>,
    #[serde(default)]
    pub prepace: Option<PrepaceConfig>,
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub stimulus: Vec<StimulusConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
    #[serde(default)]
    pub dts: Option<DtsConfig>,
    #[serde(default)]
    pub threshold: Option<ThresholdConfig>,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub lx: Option<f64>,
    pub ly: Option<f64>,
    pub h: Option<f64>,
    #[serde(default)]
    pub fiber_angle_deg: f64,
    /// Mesh in the text format instead of a generated sheet.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueConfig {
    pub d0_myocyte: f64,
    /// Defaults to `d0_myocyte`.
    pub d0_fibrotic: Option<f64>,
    /// Transverse-to-longitudinal ratio.
    pub rho: f64,
}

impl TissueConfig {
    pub fn d0_fibrotic(&self) -> f64 {
        self.d0_fibrotic.unwrap_or(self.d0_myocyte)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FibrosisConfig {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagRegion {
    pub tag: TissueTag,
    pub region: RegionSelector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepaceConfig {
    pub cycle_length: f64,
    pub beats: usize,
    /// Defaults to each model's own pacing stimulus.
    pub stim_amplitude: Option<f64>,
    pub stim_duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusConfig {
    pub region: RegionSelector,
    pub t_start: f64,
    pub duration: f64,
    pub amplitude: f64,
    pub period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: Option<PathBuf>,
    /// Probe points; each maps to its nearest node.
    #[serde(default)]
    pub probes: Vec<[f64; 2]>,
    /// Two points whose LAT difference gives the conduction velocity.
    pub cv_probes: Option<[[f64; 2]; 2]>,
    pub snapshot_interval: Option<f64>,
    #[serde(default = "yes")]
    pub track_apd: bool,
    #[serde(default)]
    pub lat_threshold: f64,
    #[serde(default = "yes")]
    pub write_maps: bool,
    pub progress_every: Option<usize>,
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: None,
            probes: Vec::new(),
            cv_probes: None,
            snapshot_interval: None,
            track_apd: true,
            lat_threshold: 0.0,
            write_maps: true,
            progress_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub schemes: Vec<Scheme>,
    pub reference: Scheme,
    /// Per-scheme global step; schemes not listed use their default step.
    #[serde(default)]
    pub dt: BTreeMap<Scheme, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtsConfig {
    /// Mesh spacings (cm); sheets use `floor(l / h)` cells per axis.
    pub spacings: Vec<f64>,
    /// Also report the power-iteration bound.
    #[serde(default)]
    pub spectral: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Point where propagation is detected (>= 1 cm from the stimulus).
    pub probe: [f64; 2],
    #[serde(default = "default_window")]
    pub window: f64,
    pub initial_guess: f64,
}

fn default_window() -> f64 {
    50.0
}

fn finite_pos(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }

    /// Every violation, so that one run reports all of them.
    pub fn errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            e.push(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        let m = &self.mesh;
        if m.file.is_none() {
            for (name, v) in [("mesh.lx", m.lx), ("mesh.ly", m.ly), ("mesh.h", m.h)] {
                match v {
                    Some(x) if finite_pos(x) => {}
                    Some(x) => e.push(format!("{name}: must be positive, got {x}")),
                    None => e.push(format!("{name}: required unless mesh.file is given")),
                }
            }
        }
        if !m.fiber_angle_deg.is_finite() {
            e.push("mesh.fiber_angle_deg: must be finite".into());
        }
        let t = &self.tissue;
        if !finite_pos(t.d0_myocyte) {
            e.push(format!("tissue.d0_myocyte: must be positive, got {}", t.d0_myocyte));
        }
        if !finite_pos(t.d0_fibrotic()) {
            e.push(format!("tissue.d0_fibrotic: must be positive, got {}", t.d0_fibrotic()));
        }
        if !(t.rho > 0.0 && t.rho <= 1.0) {
            e.push(format!("tissue.rho: must be in (0, 1], got {}", t.rho));
        }
        if let Some(f) = &self.fibrosis {
            if !(0.0..=1.0).contains(&f.fraction) {
                e.push(format!("fibrosis.fraction: must be in [0, 1], got {}", f.fraction));
            }
            if f.fraction > 0.0 && !self.models.contains_key(&TissueTag::Fibroblast) {
                e.push("models.fibroblast: required when fibrosis.fraction > 0".into());
            }
        }
        if m.file.is_none() && !self.models.contains_key(&TissueTag::MyocyteEpi) {
            e.push("models.myocyte_epi: required (generated sheets start as myocyte_epi)".into());
        }
        for region in &self.tag_regions {
            if !self.models.contains_key(&region.tag) {
                e.push(format!("models.{}: required by tag_regions", region.tag.as_str()));
            }
        }
        for (tag, name) in &self.models {
            if model_by_name(name).is_none() {
                e.push(format!("models.{}: unknown cell model '{name}'", tag.as_str()));
            }
        }
        if let Some(p) = &self.prepace {
            if !finite_pos(p.cycle_length) {
                e.push(format!("prepace.cycle_length: must be positive, got {}", p.cycle_length));
            }
            if p.beats == 0 {
                e.push("prepace.beats: must be >= 1".into());
            }
            if let Some(d) = p.stim_duration {
                if !finite_pos(d) {
                    e.push(format!("prepace.stim_duration: must be positive, got {d}"));
                }
            }
        }
        e.extend(self.scheme.errors().into_iter().map(|m| format!("scheme: {m}")));
        for (i, s) in self.stimulus.iter().enumerate() {
            if !finite_pos(s.duration) {
                e.push(format!("stimulus[{i}].duration: must be positive, got {}", s.duration));
            }
            if !(s.t_start >= 0.0 && s.t_start.is_finite()) {
                e.push(format!("stimulus[{i}].t_start: must be >= 0, got {}", s.t_start));
            }
            if !s.amplitude.is_finite() {
                e.push(format!("stimulus[{i}].amplitude: must be finite"));
            }
            if let Some(p) = s.period {
                if !(p > s.duration && p.is_finite()) {
                    e.push(format!("stimulus[{i}].period: must exceed the duration, got {p}"));
                }
            }
        }
        let o = &self.output;
        for (i, p) in o.probes.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                e.push(format!("output.probes[{i}]: must be finite"));
            }
        }
        if let Some(si) = o.snapshot_interval {
            if !finite_pos(si) {
                e.push(format!("output.snapshot_interval: must be positive, got {si}"));
            }
        }
        if let Some(c) = &self.compare {
            if c.schemes.len() < 2 {
                e.push("compare.schemes: need at least two schemes".into());
            }
            if !c.schemes.contains(&c.reference) {
                e.push(format!("compare.reference: '{}' is not among compare.schemes", c.reference));
            }
            for (s, dt) in &c.dt {
                if !finite_pos(*dt) {
                    e.push(format!("compare.dt.{s}: must be positive, got {dt}"));
                }
            }
        }
        if let Some(d) = &self.dts {
            if d.spacings.is_empty() {
                e.push("dts.spacings: must not be empty".into());
            }
            if let Some(h) = d.spacings.iter().find(|h| !finite_pos(**h)) {
                e.push(format!("dts.spacings: must be positive, got {h}"));
            }
        }
        if let Some(t) = &self.threshold {
            if !finite_pos(t.window) {
                e.push(format!("threshold.window: must be positive, got {}", t.window));
            }
            if !finite_pos(t.initial_guess) {
                e.push(format!("threshold.initial_guess: must be positive, got {}", t.initial_guess));
            }
            if self.stimulus.is_empty() {
                e.push("threshold: needs a [[stimulus]] entry as the template".into());
            }
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.errors();
        if e.is_empty() { Ok(()) } else { Err(Error::Validation(e)) }
    }

    /// Output directory: explicit override, then the config, then
    /// `$MONODOMAIN_OUTPUT_DIR`, then `./output/<name>`.
    pub fn output_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        if let Some(d) = override_dir {
            return d.to_path_buf();
        }
        if let Some(d) = &self.output.directory {
            return self.resolve(d);
        }
        let base = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("output"));
        if self.name.is_empty() { base } else { base.join(&self.name) }
    }
}

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "MONODOMAIN_OUTPUT_DIR";

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "tiny"

[mesh]
lx = 0.5
ly = 0.2
h = 0.05

[tissue]
d0_myocyte = 0.001
rho = 0.25

[models]
myocyte_epi = "aliev_panfilov"

[scheme]
scheme = "daeti"
dt = 0.1
t_end = 20.0

[[stimulus]]
region = { kind = "half_plane_x", bound = 0.05, side = "below" }
t_start = 0.0
duration = 1.0
amplitude = 50.0
"#;

    #[test]
    fn parses_minimal() {
        let c = RunConfig::from_toml_str(MINIMAL, Path::new("/x/tiny.toml")).unwrap();
        assert_eq!(c.scheme.k0_up, 5);
        assert_eq!(c.tissue.d0_fibrotic(), 0.001);
        assert!(c.output.track_apd);
        assert_eq!(c.base_dir, Path::new("/x"));
        let echo = RunConfig::from_toml_str(&c.to_toml(), Path::new("/x/echo.toml")).unwrap();
        assert_eq!(echo, c);
    }

    #[test]
    fn unknown_model_is_named() {
        let text = MINIMAL.replace("\"aliev_panfilov\"", "\"luo_rudy\"");
        match RunConfig::from_toml_str(&text, Path::new("c.toml")) {
            Err(Error::Validation(e)) => assert!(e.iter().any(|m| m.contains("models.myocyte_epi") && m.contains("luo_rudy"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_violations_reported() {
        let text = MINIMAL
            .replace("lx = 0.5", "lx = -0.5")
            .replace("rho = 0.25", "rho = 0.0")
            .replace("dt = 0.1", "dt = 0.0")
            .replace("duration = 1.0", "duration = 0.0");
        match RunConfig::from_toml_str(&text, Path::new("c.toml")) {
            Err(Error::Validation(e)) => {
                for key in ["mesh.lx", "tissue.rho", "scheme: dt", "stimulus[0].duration"] {
                    assert!(e.iter().any(|m| m.starts_with(key)), "missing {key} in {e:?}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let text = MINIMAL.replace("rho = 0.25", "rho = 0.25\nsigma = 1.0");
        assert!(matches!(
            RunConfig::from_toml_str(&text, Path::new("c.toml")),
            Err(Error::Parse { .. })
        ));
    }
}
