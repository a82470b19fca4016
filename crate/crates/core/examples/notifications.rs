//! Renders and delivers the two messages a submitter receives, with a
//! flaky transport to show retries and the dead-letter log.

use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use fmeter::model::{JobId, JobState};
use fmeter::notifier::{notify, render_message, FileTransport, Notification, RetryPolicy, Transport, TransportError};

/// Fails the first `failures` deliveries.
struct Flaky {
    inner: FileTransport,
    failures: AtomicU32,
}

impl Transport for Flaky {
    fn id(&self) -> &str {
        "flaky-file"
    }

    fn deliver(&self, n: &Notification) -> Result<(), TransportError> {
        if self.failures.load(Ordering::SeqCst) > 0 {
            self.failures.fetch_sub(1, Ordering::SeqCst);
            return Err(TransportError("mail relay busy".into()));
        }
        self.inner.deliver(n)
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let job = JobId::generate();
    let detectors = vec!["mock-constant".to_string(), "xception".to_string()];

    let received = Notification::received("analyst@example.org", &job, &detectors, "http://127.0.0.1:8080/api/v1/jobs");
    let done = Notification::terminal(
        "analyst@example.org",
        &job,
        JobState::PartiallyCompleted,
        &[("xception".into(), "spawn-failed: program not found".into())],
        "http://127.0.0.1:8080/api/v1/jobs",
    );
    println!("{}", render_message(&done, chrono::Utc::now()));

    let transport = Flaky {
        inner: FileTransport::new(tmp.path().join("mail"))?,
        failures: AtomicU32::new(2),
    };
    let policy = RetryPolicy {
        max_retries: 3,
        base_backoff: Duration::from_millis(10),
    };
    let dead = tmp.path().join("dead-letter.jsonl");
    for n in [&received, &done] {
        match notify(&transport, n, &policy, &dead) {
            Ok(receipt) => println!(
                "{:?} delivered via {} after {} retries",
                n.kind,
                receipt.transport,
                receipt.retries.len()
            ),
            Err(letter) => println!("{:?} dead-lettered: {letter:?}", n.kind),
        }
    }
    Ok(())
}
