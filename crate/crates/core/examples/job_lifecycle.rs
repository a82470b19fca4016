//! One process playing both roles: the gateway accepts a job, the scheduler
//! runs three mock detectors over it and the gateway releases the bundle
//! only for the right PIN.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use fmeter::analysis::{read_bundle, verify_bundle};
use fmeter::exchange::{ExchangeDirs, FrontEndExchange};
use fmeter::frameseq::{generate, write_zip, Pattern};
use fmeter::gateway::{Gateway, GatewayConfig, StagedVideo};
use fmeter::model::VideoOrigin;
use fmeter::notifier::{FileTransport, Notifier, RetryPolicy};
use fmeter::plugin::{Registry, SandboxConfig};
use fmeter::scheduler::{Scheduler, SchedulerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    fmeter::mock::maybe_run_as_plugin();

    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let plugins = Path::new(env!("CARGO_MANIFEST_DIR")).join("plugins");
    let registry = Arc::new(Registry::shipped().with_plugin_dir(&plugins)?);
    let dirs = ExchangeDirs::under(&root.join("exchange"))?;

    let mail = root.join("mail");
    let notifier = Notifier::start(
        Arc::new(FileTransport::new(&mail)?),
        RetryPolicy::default(),
        root.join("dead-letter.jsonl"),
    );
    let gateway = Gateway::new(
        GatewayConfig::new(root.join("gateway")),
        FrontEndExchange::new(&dirs),
        registry.clone(),
        notifier,
    )?;
    let scheduler = Scheduler::new(
        &dirs,
        registry,
        SandboxConfig::new(root.join("scratch")),
        SchedulerConfig::default(),
        &root.join("backend"),
    )?;

    // stage an upload the way the HTTP layer would
    let clip = write_zip(&generate(24, Pattern::Gradient, 32, 24), 25.0)?;
    let staged = gateway.upload_dir().join("upload-example");
    std::fs::write(&staged, &clip)?;
    let job_id = gateway.submit(
        StagedVideo {
            path: staged,
            byte_size: clip.len() as u64,
            origin: VideoOrigin::DirectUpload,
        },
        vec!["mock-constant".into(), "mock-sinusoid".into(), "mock-luminance".into()],
        "analyst@example.org",
        "2468",
    )?;
    println!("submitted {job_id}: {:?}", gateway.status(job_id.as_str())?.state);

    scheduler.drain()?;
    gateway.sync_outbox();
    println!("after processing: {:?}", gateway.status(job_id.as_str())?.state);

    println!("wrong PIN: {}", gateway.download(job_id.as_str(), "1111").unwrap_err().code());
    let bundle = gateway.download(job_id.as_str(), "2468")?;
    let summary = verify_bundle(&bundle)?;
    for d in &summary.detectors {
        println!("  {:<15} {:<10} aggregate {:?}", d.detector_id, d.outcome, d.aggregate_score);
    }
    let names: Vec<String> = read_bundle(&bundle)?.into_iter().map(|(n, _)| n).collect();
    println!("bundle entries: {names:?}");

    gateway.notifier().wait_for(2, Duration::from_secs(5));
    let mut sent: Vec<_> = std::fs::read_dir(&mail)?.filter_map(Result::ok).map(|e| e.file_name()).collect();
    sent.sort();
    println!("mail sent: {sent:?}");
    Ok(())
}
