//! Run configuration: a TOML file with every section optional except where
//! noted. Unknown keys are rejected so typos fail loudly.
//!
//! ```toml
//! output_dir = "report"              # optional; --out on the command line wins
//! segment_length_m = 100.0
//! segment_length_frames = 1000
//! cat1_flag_threshold = 0.5
//!
//! [thi_weights]                      # replaces the defaults when present
//! sunkink = 1.0
//! loose_ballast = 0.5
//!
//! [plugins]                          # class -> heuristic | replay:<path> | exec:<command>
//! loose_ballast = "heuristic"
//! switch = "heuristic"
//! signal = "replay:signals.det"
//!
//! [calibration]   [trackscan]   [signal_colors]   [association]
//! [heuristics.ballast]   [heuristics.switch]
//! ```
//!
//! Relative paths inside the file resolve against the file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detecthub::heuristics::{LOOSE_BALLAST, SWITCH};
use crate::detecthub::{BallastParams, SwitchParams};
use crate::error::{Error, Result};
use crate::health::{defect_category, ClassWeightTable};
use crate::railgeom::CalibrationProfile;
use crate::signalstate::{AssetType, AssociationParams, ColorMaskParams};
use crate::trackscan::ScanParams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicParams {
    pub ballast: BallastParams,
    pub switch: SwitchParams,
}

/// Where a class's detections come from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum PluginSource {
    Heuristic,
    Replay(PathBuf),
    Exec(String),
}

impl PluginSource {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "heuristic" {
            Ok(Self::Heuristic)
        } else if let Some(p) = s.strip_prefix("replay:") {
            Ok(Self::Replay(PathBuf::from(p)))
        } else if let Some(c) = s.strip_prefix("exec:") {
            Ok(Self::Exec(c.to_string()))
        } else {
            Err(Error::Config(format!(
                "plugin source {s:?} must be \"heuristic\", \"replay:<path>\" or \"exec:<command>\""
            )))
        }
    }
}

impl std::fmt::Display for PluginSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Heuristic => write!(f, "heuristic"),
            Self::Replay(p) => write!(f, "replay:{}", p.display()),
            Self::Exec(c) => write!(f, "exec:{c}"),
        }
    }
}

fn default_plugins() -> BTreeMap<String, String> {
    [(LOOSE_BALLAST, "heuristic"), (SWITCH, "heuristic")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub segment_length_m: f64,
    pub segment_length_frames: u64,
    pub cat1_flag_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thi_weights: Option<BTreeMap<String, f64>>,
    pub plugins: BTreeMap<String, String>,
    pub calibration: CalibrationProfile,
    pub trackscan: ScanParams,
    pub signal_colors: ColorMaskParams,
    pub association: AssociationParams,
    pub heuristics: HeuristicParams,
    /// Directory of the config file; anchors relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            segment_length_m: 100.0,
            segment_length_frames: 1000,
            cat1_flag_threshold: 0.5,
            thi_weights: None,
            plugins: default_plugins(),
            calibration: CalibrationProfile::default(),
            trackscan: ScanParams::default(),
            signal_colors: ColorMaskParams::default(),
            association: AssociationParams::default(),
            heuristics: HeuristicParams::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// A class accepted in plugin bindings: a defect class or an asset type.
pub fn is_known_class(class_name: &str) -> bool {
    defect_category(class_name).is_some() || AssetType::from_class(class_name).is_some()
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.segment_length_m > 0.0 && self.segment_length_m.is_finite()) {
            return Err(Error::Config("segment_length_m must be positive".into()));
        }
        if self.segment_length_frames == 0 {
            return Err(Error::Config("segment_length_frames must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cat1_flag_threshold) {
            return Err(Error::Config("cat1_flag_threshold must lie in [0, 1]".into()));
        }
        let weights = self.weight_table()?;
        if !weights.contains("sunkink") {
            return Err(Error::Config("thi_weights must weight sunkink (the rail scanner emits it)".into()));
        }
        for (_, classes) in self.plugin_bindings()? {
            if let Some(c) = classes.iter().find(|c| defect_category(c).is_some() && !weights.contains(c)) {
                return Err(Error::Config(format!("plugins: defect class {c:?} has no thi_weights entry")));
            }
        }
        self.calibration.validate()?;
        self.trackscan.validate()?;
        self.signal_colors.validate()?;
        if !(0.0..=1.0).contains(&self.association.iou_min) {
            return Err(Error::Config("association.iou_min must lie in [0, 1]".into()));
        }
        self.heuristics.ballast.validate()?;
        self.heuristics.switch.validate()?;
        Ok(())
    }

    pub fn weight_table(&self) -> Result<ClassWeightTable> {
        match &self.thi_weights {
            None => Ok(ClassWeightTable::default()),
            Some(w) => ClassWeightTable::from_weights(w),
        }
    }

    /// Bindings grouped by source, in first-appearance order over the
    /// sorted class names; each group becomes one plugin declaring those
    /// classes.
    pub fn plugin_bindings(&self) -> Result<Vec<(PluginSource, Vec<String>)>> {
        let mut groups: Vec<(PluginSource, Vec<String>)> = Vec::new();
        for (class, source) in &self.plugins {
            if !is_known_class(class) {
                return Err(Error::Config(format!("plugins: unknown class {class:?}")));
            }
            let mut source = PluginSource::parse(source)?;
            match &mut source {
                PluginSource::Heuristic if class != LOOSE_BALLAST && class != SWITCH => {
                    return Err(Error::Config(format!(
                        "plugins: no built-in heuristic for class {class:?}"
                    )))
                }
                PluginSource::Replay(p) => *p = self.resolve(p),
                _ => {}
            }
            match groups.iter_mut().find(|(s, _)| *s == source && source != PluginSource::Heuristic) {
                Some((_, classes)) => classes.push(class.clone()),
                None => groups.push((source, vec![class.clone()])),
            }
        }
        Ok(groups)
    }

    /// Replace or add bindings from a `class=source,class=source` list.
    pub fn apply_plugin_overrides(&mut self, spec: &str) -> Result<()> {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (class, source) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--plugins entry {item:?} is not class=source")))?;
            let class = class.trim();
            if source.trim() == "none" {
                self.plugins.remove(class);
            } else {
                self.plugins.insert(class.to_string(), source.trim().to_string());
            }
        }
        self.plugin_bindings().map(|_| ())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Read, default-fill and validate a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    RunConfig::from_toml_str(&text, &base).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(s, Path::new("/cfg"))
    }

    #[test]
    fn empty_file_takes_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, RunConfig { base_dir: "/cfg".into(), ..RunConfig::default() });
        let w = c.weight_table().unwrap();
        assert_eq!(w.get("sunkink").unwrap().weight, 1.0);
        assert_eq!(w.get("loose_ballast").unwrap().weight, 0.5);
        assert_eq!(c.segment_length_m, 100.0);
    }

    #[test]
    fn zero_weight_names_class() {
        let e = parse("[thi_weights]\nloose_ballast = 0.0\n").unwrap_err().to_string();
        assert!(e.contains("loose_ballast"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse("segment_lenght_m = 5\n").is_err());
        assert!(parse("[trackscan]\nkink_threshold = 3\n").is_err());
        assert!(parse("[thi_weights]\nrust = 0.5\n").is_err());
        assert!(parse("[plugins]\nrust = \"heuristic\"\n").is_err());
        assert!(parse("[plugins]\nsignal = \"heuristic\"\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = parse("segment_length_frames = 250\n[trackscan]\nkink_threshold_px = 4.5\n").unwrap();
        c.thi_weights = Some([("sunkink".to_string(), 0.9), ("loose_ballast".to_string(), 0.4)].into());
        let back = parse(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.thi_weights = Some([("sunkink".to_string(), 0.9)].into());
        assert!(c.validate().is_err(), "bound loose_ballast heuristic needs a weight");
    }

    #[test]
    fn replay_sources_group_and_resolve() {
        let c = parse("[plugins]\nsignal = \"replay:d.det\"\nswitch = \"replay:d.det\"\nloose_ballast = \"heuristic\"\n")
            .unwrap();
        let b = c.plugin_bindings().unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0], (PluginSource::Heuristic, vec!["loose_ballast".to_string()]));
        assert_eq!(
            b[1],
            (PluginSource::Replay("/cfg/d.det".into()), vec!["signal".to_string(), "switch".to_string()])
        );
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_plugin_overrides("switch=none, signal=exec:cat").unwrap();
        assert!(!c.plugins.contains_key("switch"));
        assert_eq!(c.plugins["signal"], "exec:cat");
        assert!(c.apply_plugin_overrides("signal").is_err());
    }
}
