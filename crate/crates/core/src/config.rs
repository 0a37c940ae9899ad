//! Pipeline configuration: a TOML document layered over the shipped
//! defaults, then over `PIDGRAPH__SECTION__KEY` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crossings::CrossingParams;
use crate::detect::{ClassRegistry, TemplateParams};
use crate::export::{BudoOptions, ClassMapping, TurtleOptions};
use crate::lines::{HoughParams, MergeParams};
use crate::topology::DeriveParams;

/// The annotated default configuration shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

pub const ENV_PREFIX: &str = "PIDGRAPH__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Range(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Templates,
    Annotations,
    External,
}

impl std::str::FromStr for DetectorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "templates" => Ok(Self::Templates),
            "annotations" => Ok(Self::Annotations),
            "external" => Ok(Self::External),
            _ => Err(format!("unknown detector mode {s:?} (templates, annotations, external)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingConfig {
    pub tile_size: u32,
    pub overlap: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub mode: DetectorMode,
    pub classes: Vec<String>,
    pub threshold: f64,
    pub nms_iou: f64,
    pub scales: Vec<f64>,
    pub quarter_turns: Vec<u8>,
    pub templates_dir: String,
    pub template_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinesConfig {
    pub mask_inflate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachConfig {
    pub inflate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    pub namespace: String,
    pub predicate: String,
    pub budo_template: String,
    pub building: String,
    pub system: String,
    pub class_map: ClassMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub debug_dumps: bool,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub tiling: TilingConfig,
    pub detector: DetectorConfig,
    pub lines: LinesConfig,
    pub hough: HoughParams,
    pub merge: MergeParams,
    pub crossing: CrossingParams,
    pub attach: AttachConfig,
    pub export: ExportConfig,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        toml::from_str(DEFAULT_CONFIG).expect("shipped default config parses")
    }
}

/// Recursively overlays `over` onto `base`.
fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn env_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl PipelineConfig {
    /// Layers `text` over the defaults and applies `env` overrides.
    pub fn from_layers<I>(text: Option<&str>, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut base: toml::Table = DEFAULT_CONFIG.parse().expect("shipped default config parses");
        if let Some(text) = text {
            let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
            merge_tables(&mut base, user);
        }
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::Parse(format!("malformed override {key}")));
            }
            let mut table = &mut base;
            for part in &path[..path.len() - 1] {
                table = match table.entry(part.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
                    toml::Value::Table(t) => t,
                    _ => return Err(ConfigError::Parse(format!("override {key} descends into a value"))),
                };
            }
            table.insert(path[path.len() - 1].clone(), env_value(&raw));
        }
        let cfg: PipelineConfig =
            toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any) and applies process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Unreadable { path: p.to_path_buf(), reason: e.to_string() })?,
            ),
            None => None,
        };
        Self::from_layers(text.as_deref(), std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Range(m));
        let t = &self.tiling;
        if t.tile_size == 0 || t.tile_size <= 2 * t.overlap {
            return bad(format!("tiling: tile_size {} must exceed 2 * overlap {}", t.tile_size, t.overlap));
        }
        let d = &self.detector;
        self.registry()?;
        if !(d.threshold > 0.0 && d.threshold < 1.0) {
            return bad(format!("detector.threshold {} not in (0, 1)", d.threshold));
        }
        if !(d.nms_iou > 0.0 && d.nms_iou <= 1.0) {
            return bad(format!("detector.nms_iou {} not in (0, 1]", d.nms_iou));
        }
        if d.scales.is_empty() || d.scales.iter().any(|s| !(*s > 0.0 && *s <= 8.0)) {
            return bad("detector.scales must be non-empty, each in (0, 8]".into());
        }
        if d.quarter_turns.is_empty() || d.quarter_turns.iter().any(|q| *q > 3) {
            return bad("detector.quarter_turns must be non-empty, each in 0..=3".into());
        }
        if d.template_size < 4 {
            return bad(format!("detector.template_size {} below 4", d.template_size));
        }
        if !(self.lines.mask_inflate >= 0.0 && self.lines.mask_inflate.is_finite()) {
            return bad(format!("lines.mask_inflate {} must be >= 0", self.lines.mask_inflate));
        }
        self.hough.validate().map_err(|m| ConfigError::Range(format!("hough: {m}")))?;
        let m = &self.merge;
        for (name, v) in [("angle_tol", m.angle_tol), ("gap_tol", m.gap_tol), ("offset_tol", m.offset_tol)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("merge.{name} {v} must be >= 0"));
            }
        }
        let c = &self.crossing;
        for (name, v) in [("eps", c.eps), ("cluster_radius", c.cluster_radius), ("angle_tol", c.angle_tol)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("crossing.{name} {v} must be >= 0"));
            }
        }
        if c.angle_tol >= 90.0 {
            return bad(format!("crossing.angle_tol {} must be below 90", c.angle_tol));
        }
        if !(self.attach.inflate >= 0.0 && self.attach.inflate.is_finite()) {
            return bad(format!("attach.inflate {} must be >= 0", self.attach.inflate));
        }
        let missing = self.export.class_map.missing(&d.classes);
        if !missing.is_empty() {
            return bad(format!("export.class_map lacks {missing:?}"));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<ClassRegistry, ConfigError> {
        ClassRegistry::new(&self.detector.classes).map_err(|m| ConfigError::Range(format!("detector.classes: {m}")))
    }

    pub fn template_params(&self) -> TemplateParams {
        let d = &self.detector;
        TemplateParams {
            threshold: d.threshold,
            scales: d.scales.clone(),
            quarter_turns: d.quarter_turns.clone(),
            nms_iou: d.nms_iou,
        }
    }

    pub fn derive_params(&self) -> DeriveParams {
        DeriveParams { inflate: self.attach.inflate, angle_tol: self.crossing.angle_tol }
    }

    pub fn turtle_options(&self) -> TurtleOptions {
        TurtleOptions { namespace: self.export.namespace.clone(), predicate: self.export.predicate.clone() }
    }

    pub fn budo_options(&self) -> BudoOptions {
        BudoOptions {
            template: self.export.budo_template.clone(),
            building: self.export.building.clone(),
            system: self.export.system.clone(),
        }
    }

    /// SHA-256 over the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn shipped_defaults_match_code_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.hough, HoughParams::default());
        assert_eq!(c.merge, MergeParams::default());
        assert_eq!(c.crossing, CrossingParams::default());
        assert_eq!(c.derive_params(), DeriveParams::default());
        assert_eq!(c.template_params(), TemplateParams::default());
        assert_eq!(c.export.class_map, ClassMapping::default());
        assert_eq!(c.turtle_options(), TurtleOptions::default());
        assert_eq!(c.budo_options(), BudoOptions::default());
        assert_eq!((c.tiling.tile_size, c.tiling.overlap), (800, 100));
        assert_eq!(c.lines.mask_inflate, 2.0);
        assert!(c.attach.inflate > c.lines.mask_inflate);
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_layer_over_defaults() {
        let c = PipelineConfig::from_layers(Some("[hough]\nvotes = 40\n"), no_env()).unwrap();
        assert_eq!(c.hough.votes, 40);
        assert_eq!(c.hough.min_len, 20.0);
        assert_ne!(c.hash(), PipelineConfig::default().hash());
        assert_eq!(PipelineConfig::from_layers(Some(""), no_env()).unwrap().hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            PipelineConfig::from_layers(Some("[hough]\nvote = 3\n"), no_env()),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(PipelineConfig::from_layers(Some("[extra]\na = 1\n"), no_env()), Err(ConfigError::Parse(_))));
        assert!(matches!(PipelineConfig::from_layers(Some("not toml ["), no_env()), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn ranges_checked() {
        for text in [
            "[tiling]\ntile_size = 200\noverlap = 100\n",
            "[detector]\nthreshold = 1.5\n",
            "[hough]\nvotes = 1\n",
            "[crossing]\neps = -1.0\n",
            "[detector]\nclasses = [\"Pump\", \"pump\"]\n",
            "[detector]\nclasses = [\"Tank\"]\n",
        ] {
            assert!(matches!(PipelineConfig::from_layers(Some(text), no_env()), Err(ConfigError::Range(_))), "{text}");
        }
    }

    #[test]
    fn environment_overrides() {
        let env = vec![
            ("PIDGRAPH__HOUGH__VOTES".to_string(), "44".to_string()),
            ("PIDGRAPH__DETECTOR__MODE".to_string(), "templates".to_string()),
            ("PIDGRAPH__CROSSING__FOUR_WAY_RULE".to_string(), "junction".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = PipelineConfig::from_layers(None, env).unwrap();
        assert_eq!(c.hough.votes, 44);
        assert_eq!(c.detector.mode, DetectorMode::Templates);
        assert_eq!(c.crossing.four_way_rule, crate::crossings::FourWayRule::Junction);
        let bad = vec![("PIDGRAPH__HOUGH__NOPE".to_string(), "1".to_string())];
        assert!(PipelineConfig::from_layers(None, bad).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let a = PipelineConfig::default().hash();
        assert_eq!(a, PipelineConfig::default().hash());
        assert_eq!(a.len(), 64);
    }
}
