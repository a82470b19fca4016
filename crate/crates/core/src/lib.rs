//! Job orchestration for media-forensics detectors.
//!
//! A front-end [`gateway`] takes video submissions over HTTP and hands them
//! to a back-end [`scheduler`] through two shared folders ([`exchange`]).
//! The scheduler runs each selected detector as a sandboxed plugin process
//! speaking NDJSON over stdio ([`plugin`]), turns the per-frame scores into
//! curves and a summary score ([`analysis`]) and sends back a zip bundle,
//! which the gateway releases only against the job's PIN. [`notifier`]
//! sends the e-mail style messages along the way.
//!
//! Media travels as FrameSeq zips ([`frameseq`]): a `meta.json` plus one
//! binary PPM per frame. [`mock`] provides reference detectors that need no
//! model weights.

pub mod analysis;
pub mod cli;
pub mod client;
pub mod exchange;
pub mod frameseq;
pub mod gateway;
pub mod mock;
pub mod model;
pub mod notifier;
pub mod plugin;
pub mod scheduler;
