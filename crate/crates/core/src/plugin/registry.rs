//! Detector descriptors and the registry that holds them.
//!
//! The registry file (`detectors.json`) is a JSON array of descriptors. Plugin
//! directories hold one descriptor each in `<dir>/manifest.json`; a plugin's
//! launch arguments may refer to `{plugin_dir}` and `{self}` (the host
//! executable), which are substituted at spawn time.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::MediaKind;
use crate::plugin::wire::PROTOCOL_VERSION;

/// The registry shipped with the crate: metadata for the integrated
/// detection methods. Their container images are not part of this crate.
pub const SHIPPED_REGISTRY: &str = include_str!("../../detectors.json");

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("io-error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse-error: {0}")]
    Parse(String),
    #[error("duplicate-id: {0}")]
    DuplicateId(String),
    #[error("bad-protocol-version: {id} declares {version}")]
    BadProtocolVersion { id: String, version: u32 },
    #[error("invalid descriptor {id}: {reason}")]
    Invalid { id: String, reason: String },
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::Io { .. } => "io-error",
            RegistryError::Parse(_) => "parse-error",
            RegistryError::DuplicateId(_) => "duplicate-id",
            RegistryError::BadProtocolVersion { .. } => "bad-protocol-version",
            RegistryError::Invalid { .. } => "parse-error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub media_kinds: Vec<MediaKind>,
    #[serde(default)]
    pub needs_face_crop: bool,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorDescriptor {
    pub detector_id: String,
    pub display_name: String,
    pub version: String,
    pub description: String,
    pub source_repo: String,
    /// `YYYY-MM`.
    pub release_date: String,
    pub launch: LaunchSpec,
    pub capabilities: Capabilities,
    pub protocol_version: u32,
    /// Soft labels below this are labelled fake.
    #[serde(default = "default_threshold")]
    pub hard_label_threshold: f64,
    /// Directory of the manifest this descriptor came from, if any.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl DetectorDescriptor {
    pub fn validate(&self) -> Result<(), RegistryError> {
        let invalid = |reason: &str| RegistryError::Invalid {
            id: self.detector_id.clone(),
            reason: reason.to_string(),
        };
        if !is_slug(&self.detector_id) {
            return Err(invalid("detector_id must be a lowercase slug"));
        }
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(RegistryError::BadProtocolVersion {
                id: self.detector_id.clone(),
                version: self.protocol_version,
            });
        }
        if !is_year_month(&self.release_date) {
            return Err(invalid("release_date must be YYYY-MM"));
        }
        if self.launch.program.is_empty() {
            return Err(invalid("launch.program is empty"));
        }
        if !(0.0..=1.0).contains(&self.hard_label_threshold) {
            return Err(invalid("hard_label_threshold must be in [0, 1]"));
        }
        if self.capabilities.media_kinds.is_empty() {
            return Err(invalid("capabilities.media_kinds is empty"));
        }
        Ok(())
    }

    pub fn accepts(&self, kind: MediaKind) -> bool {
        self.capabilities.media_kinds.contains(&kind)
    }
}

fn is_slug(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('-')
        && !s.ends_with('-')
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

fn is_year_month(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 7
        && b[..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5..].iter().all(u8::is_ascii_digit)
        && matches!(&s[5..], "01" | "02" | "03" | "04" | "05" | "06" | "07" | "08" | "09" | "10" | "11" | "12")
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: Vec<DetectorDescriptor>,
}

impl Registry {
    pub fn from_descriptors(entries: Vec<DetectorDescriptor>) -> Result<Self, RegistryError> {
        let mut seen = HashSet::new();
        for d in &entries {
            d.validate()?;
            if !seen.insert(d.detector_id.clone()) {
                return Err(RegistryError::DuplicateId(d.detector_id.clone()));
            }
        }
        Ok(Registry { entries })
    }

    pub fn parse(json: &str) -> Result<Self, RegistryError> {
        let entries: Vec<DetectorDescriptor> =
            serde_json::from_str(json).map_err(|e| RegistryError::Parse(e.to_string()))?;
        Self::from_descriptors(entries)
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_REGISTRY).expect("shipped registry is valid")
    }

    /// Adds every `<dir>/*/manifest.json` found under `plugins_dir`, in
    /// directory-name order.
    pub fn with_plugin_dir(mut self, plugins_dir: &Path) -> Result<Self, RegistryError> {
        let io = |source| RegistryError::Io {
            path: plugins_dir.to_path_buf(),
            source,
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(plugins_dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        dirs.sort();
        let mut entries = std::mem::take(&mut self.entries);
        for dir in dirs {
            entries.push(load_manifest(&dir.join("manifest.json"))?);
        }
        Self::from_descriptors(entries)
    }

    pub fn get(&self, detector_id: &str) -> Option<&DetectorDescriptor> {
        self.entries.iter().find(|d| d.detector_id == detector_id)
    }

    pub fn entries(&self) -> &[DetectorDescriptor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Loads and validates a registry file.
pub fn load_registry(path: &Path) -> Result<Vec<DetectorDescriptor>, RegistryError> {
    let text = fs::read_to_string(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Registry::parse(&text)?.entries)
}

/// Loads a single plugin manifest and remembers its directory.
pub fn load_manifest(path: &Path) -> Result<DetectorDescriptor, RegistryError> {
    let text = fs::read_to_string(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut d: DetectorDescriptor =
        serde_json::from_str(&text).map_err(|e| RegistryError::Parse(format!("{}: {e}", path.display())))?;
    d.validate()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    d.base_dir = Some(fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf()));
    Ok(d)
}
