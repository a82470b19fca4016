//! Runs the conformance suite against every mock plugin shipped in
//! `plugins/`.

use std::path::Path;

use fmeter::plugin::registry::load_manifest;
use fmeter::plugin::{verify_conformance, ConformanceOptions, SandboxConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // mock plugins launch `{self} mock-plugin ...`, i.e. this example
    fmeter::mock::maybe_run_as_plugin();

    let plugins = Path::new(env!("CARGO_MANIFEST_DIR")).join("plugins");
    let scratch = tempfile::tempdir()?;
    let sandbox = SandboxConfig::new(scratch.path());
    let options = ConformanceOptions::default();

    let mut dirs: Vec<_> = std::fs::read_dir(&plugins)?.filter_map(Result::ok).map(|e| e.path()).collect();
    dirs.sort();
    for dir in dirs {
        let descriptor = load_manifest(&dir.join("manifest.json"))?;
        let report = verify_conformance(&descriptor, &sandbox, &options);
        let failed: Vec<&str> = report.failed_checks().iter().map(|c| c.name()).collect();
        println!(
            "{:<18} {}/{}  failed: {:?}  violations: {}",
            report.detector_id,
            report.passed_count(),
            report.checks.len(),
            failed,
            report.sandbox_violations.len()
        );
    }
    Ok(())
}
