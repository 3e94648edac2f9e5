//! Pipeline configuration: one TOML file with per-module sections plus the
//! variant toggles that drive the ablation grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_fit::FitConfig;
use crate::flatten::FlattenConfig;
use crate::render::{RenderConfig, RenderMode};
use crate::vlm::BackendConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
}

/// Render/flatten/knowledge toggles for one pipeline variant. Defaults to
/// the full configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantToggles {
    pub render_mode: RenderMode,
    pub flatten: bool,
    pub dkb: bool,
}

impl Default for VariantToggles {
    fn default() -> Self {
        VariantToggles { render_mode: RenderMode::Ssp, flatten: true, dkb: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decimal places in emitted CSV values.
    pub decimals: usize,
    /// Exclude zero ground-truth cases from RE/Acc means and count them
    /// separately instead of poisoning the aggregate.
    pub exclude_zero_gt: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { decimals: 3, exclude_zero_gt: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Seed for the deterministic mock backend; the geometric pipeline has
    /// no randomness.
    pub seed: u64,
    pub render_mode: RenderMode,
    pub flatten_enabled: bool,
    pub dkb_enabled: bool,
    pub arch_fit: FitConfig,
    pub flatten: FlattenConfig,
    pub render: RenderConfig,
    pub backend: BackendConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input_dir: None,
            output_dir: None,
            seed: 42,
            render_mode: RenderMode::Ssp,
            flatten_enabled: true,
            dkb_enabled: true,
            arch_fit: FitConfig::default(),
            flatten: FlattenConfig::default(),
            render: RenderConfig::default(),
            backend: BackendConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn toggles(&self) -> VariantToggles {
        VariantToggles {
            render_mode: self.render_mode,
            flatten: self.flatten_enabled,
            dkb: self.dkb_enabled,
        }
    }

    pub fn with_toggles(&self, toggles: VariantToggles) -> PipelineConfig {
        let mut out = self.clone();
        out.render_mode = toggles.render_mode;
        out.flatten_enabled = toggles.flatten;
        out.dkb_enabled = toggles.dkb;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_variant() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.toggles(), VariantToggles::default());
        assert_eq!(cfg.arch_fit.coarse_step, 1.0);
        assert_eq!(cfg.arch_fit.refine_half_window, 5.0);
        assert_eq!(cfg.arch_fit.refine_iterations, 2);
        assert_eq!(cfg.arch_fit.clip_quantile, 0.95);
        assert_eq!(cfg.flatten.samples, 4096);
        assert_eq!((cfg.render.width, cfg.render.height), (1024, 768));
    }

    #[test]
    fn parses_sectioned_toml() {
        let text = r#"
            seed = 7
            render_mode = "uvp"
            flatten_enabled = false

            [arch_fit]
            coarse_step = 2.0
            clip_quantile = 0.9

            [render]
            width = 640
            height = 480

            [backend]
            kind = "mock"
            max_concurrency = 2
        "#;
        let cfg = PipelineConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.render_mode, RenderMode::Uvp);
        assert!(!cfg.flatten_enabled);
        assert!(cfg.dkb_enabled);
        assert_eq!(cfg.arch_fit.coarse_step, 2.0);
        assert_eq!(cfg.arch_fit.refine_half_window, 5.0);
        assert_eq!(cfg.render.width, 640);
        assert_eq!(cfg.backend.max_concurrency, 2);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(text, back.to_toml_string());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("not_a_key = 3").is_err());
    }
}
