//! The detector plugin contract.
//!
//! A detector is an external process. The host starts it in a sandbox
//! ([`session::spawn`]), greets it, then streams frame requests and reads
//! back one [`FrameScore`] per frame. Any face cropping or preprocessing
//! happens inside the plugin and is invisible to the host.

pub mod conformance;
pub mod registry;
pub mod session;
pub mod wire;

pub use conformance::{verify_conformance, Check, ConformanceOptions, ConformanceReport};
pub use registry::{load_registry, DetectorDescriptor, Registry, RegistryError};
pub use session::{spawn, PluginError, PluginSession, ProcessGauge, SandboxConfig, ShutdownOutcome};
pub use wire::{FrameScore, HardLabel, PROTOCOL_VERSION};
