//! Serves the HTTP API on an ephemeral port with a scheduler thread behind
//! it, then drives it with the blocking client.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fmeter::client::{Client, VideoSource};
use fmeter::exchange::{ExchangeDirs, FrontEndExchange};
use fmeter::frameseq::{generate, write_zip, Pattern};
use fmeter::gateway::http::{bind, serve};
use fmeter::gateway::{Gateway, GatewayConfig};
use fmeter::notifier::{FileTransport, Notifier, RetryPolicy};
use fmeter::plugin::{Registry, SandboxConfig};
use fmeter::scheduler::{Scheduler, SchedulerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    fmeter::mock::maybe_run_as_plugin();

    let tmp = tempfile::tempdir()?;
    let root = tmp.path().to_path_buf();
    let plugins = Path::new(env!("CARGO_MANIFEST_DIR")).join("plugins");
    let registry = Arc::new(Registry::shipped().with_plugin_dir(&plugins)?);
    let dirs = ExchangeDirs::under(&root.join("exchange"))?;

    let stop = Arc::new(AtomicBool::new(false));
    let scheduler = Scheduler::new(
        &dirs,
        registry.clone(),
        SandboxConfig::new(root.join("scratch")),
        SchedulerConfig {
            poll_interval: Duration::from_millis(50),
            ..SchedulerConfig::default()
        },
        &root.join("backend"),
    )?;
    let backend = {
        let stop = stop.clone();
        std::thread::spawn(move || scheduler.run_until(&stop))
    };

    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime.block_on(bind("127.0.0.1:0".parse()?))?;
    let url = format!("http://{}", listener.local_addr()?);
    let notifier = Notifier::start(
        Arc::new(FileTransport::new(root.join("mail"))?),
        RetryPolicy::default(),
        root.join("dead-letter.jsonl"),
    );
    let mut config = GatewayConfig::new(root.join("gateway"));
    config.public_url = url.clone();
    config.sync_interval = Duration::from_millis(100);
    let gateway = Arc::new(Gateway::new(config, FrontEndExchange::new(&dirs), registry, notifier)?);
    let (quit, quit_rx) = tokio::sync::oneshot::channel::<()>();
    let server = runtime.spawn(serve(gateway, listener, async {
        let _ = quit_rx.await;
    }));
    println!("listening on {url}");

    let client = Client::new(&url);
    println!("{} detectors available", client.detectors()?.len());
    let clip = root.join("clip.zip");
    std::fs::write(&clip, write_zip(&generate(16, Pattern::Gradient, 32, 24), 25.0)?)?;
    let id = client.submit(
        VideoSource::File(&clip),
        &["mock-luminance".into(), "nope".into()],
        "analyst@example.org",
        "13579",
    )?;
    println!("submitted {id}");
    let status = client.wait_terminal(&id, Duration::from_secs(30), Duration::from_millis(100))?;
    println!("terminal state: {:?}", status.state);
    let fetched = client.fetch(&id, "13579")?;
    println!("bundle {} bytes, sha256 {}", fetched.bytes.len(), fetched.sha256);
    for d in fetched.summary.failures() {
        println!("  {} failed: {}", d.detector_id, d.error_note.as_deref().unwrap_or(""));
    }

    let _ = quit.send(());
    runtime.block_on(server)??;
    stop.store(true, Ordering::SeqCst);
    backend.join().expect("scheduler thread")?;
    Ok(())
}
