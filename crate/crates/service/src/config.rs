use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// When overlays are rendered for a new case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    /// Before the submit response returns.
    #[default]
    Sync,
    /// By a background worker; the case shows no heatmap until it is ready.
    Queued,
}

impl std::str::FromStr for HeatmapMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sync" => Ok(HeatmapMode::Sync),
            "queued" => Ok(HeatmapMode::Queued),
            _ => Err(format!("unknown heatmap mode {s:?}; expected sync or queued")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
    /// Fine-tuned checkpoint; without one the service answers submissions
    /// with 503.
    pub checkpoint: Option<PathBuf>,
    /// Event log, stored images and rendered heatmaps.
    pub data_dir: PathBuf,
    /// Review UI bundle served at `/`.
    pub static_dir: Option<PathBuf>,
    pub heatmap_mode: HeatmapMode,
    /// Used when a request carries no `threshold`.
    pub default_threshold: f64,
    pub overlay_alpha: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint: None,
            data_dir: PathBuf::from("tbscreen-data"),
            static_dir: None,
            heatmap_mode: HeatmapMode::Sync,
            default_threshold: 0.5,
            overlay_alpha: 0.5,
        }
    }
}

pub const ENV_PREFIX: &str = "TBSCREEN_";

impl ServiceConfig {
    /// Read a TOML file (when given), then apply `TBSCREEN_*` environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides: `TBSCREEN_HOST`, `TBSCREEN_PORT`, `TBSCREEN_CHECKPOINT`,
    /// `TBSCREEN_DATA_DIR`, `TBSCREEN_STATIC_DIR`, `TBSCREEN_HEATMAP_MODE`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        let get = |k: &str| var(&format!("{ENV_PREFIX}{k}")).filter(|v| !v.is_empty());
        if let Some(v) = get("HOST") {
            self.host = v;
        }
        if let Some(v) = get("PORT") {
            self.port = v.parse().map_err(|_| ServiceError::Config(format!("{ENV_PREFIX}PORT: bad port {v:?}")))?;
        }
        if let Some(v) = get("CHECKPOINT") {
            self.checkpoint = Some(v.into());
        }
        if let Some(v) = get("DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("STATIC_DIR") {
            self.static_dir = Some(v.into());
        }
        if let Some(v) = get("HEATMAP_MODE") {
            self.heatmap_mode = v.parse().map_err(ServiceError::Config)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(0.0..=1.0).contains(&self.default_threshold) {
            return Err(ServiceError::Config("default_threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(ServiceError::Config("overlay_alpha must lie in [0, 1]".into()));
        }
        self.addr()?;
        Ok(())
    }

    pub fn addr(&self) -> Result<SocketAddr, ServiceError> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .map_err(|_| ServiceError::Config(format!("bad listen address {}:{}", self.host, self.port)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_then_env() {
        let mut cfg: ServiceConfig = toml::from_str("port = 9000\ndata_dir = \"/tmp/x\"\nheatmap_mode = \"queued\"").unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.heatmap_mode, HeatmapMode::Queued);
        cfg.apply_env(|k| match k {
            "TBSCREEN_PORT" => Some("9100".into()),
            "TBSCREEN_CHECKPOINT" => Some("/m/best.safetensors".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.port, 9100);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.checkpoint, Some(PathBuf::from("/m/best.safetensors")));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(toml::from_str::<ServiceConfig>("prot = 1").is_err());
        let mut cfg = ServiceConfig::default();
        assert!(cfg.apply_env(|_| Some("x".into())).is_err());
        let cfg = ServiceConfig {
            default_threshold: 2.0,
            ..ServiceConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
