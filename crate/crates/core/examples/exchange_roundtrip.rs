//! Publishes a submission through the shared folders, survives an injected
//! crash and consumes it exactly once on the other side.

use std::collections::HashSet;
use std::path::PathBuf;

use fmeter::exchange::{is_injected_crash, BackEndExchange, ExchangeDirs, FaultInjector, FrontEndExchange};
use fmeter::model::{create_job, MediaKind, VideoOrigin, VideoRef};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let dirs = ExchangeDirs::under(&tmp.path().join("exchange"))?;
    let video = tmp.path().join("video.bin");
    std::fs::write(&video, vec![7u8; 4096])?;

    let job = create_job(
        VideoRef {
            origin: VideoOrigin::DirectUpload,
            content_path: PathBuf::from("video.bin"),
            byte_size: 4096,
            media_kind: MediaKind::OpaqueVideo,
        },
        vec!["mock-constant".into()],
        "analyst@example.org",
        "2468",
    )?;

    // crash while the payload is half written
    let faults = FaultInjector::crash_at(2);
    let front = FrontEndExchange::with_faults(&dirs, Some(faults.clone()));
    let err = front.publish_submission(&job, &video).unwrap_err();
    assert!(is_injected_crash(&err));
    let back = BackEndExchange::new(&dirs);
    println!("after crash, inbox shows {} envelopes", back.poll_inbox(&HashSet::new())?.envelopes.len());

    // the retry publishes cleanly; a second publish is refused
    faults.disarm();
    let id = front.publish_submission(&job, &video)?;
    println!("published {id}");
    println!("republish: {}", front.publish_submission(&job, &video).unwrap_err().code());

    let polled = back.poll_inbox(&HashSet::new())?;
    println!("inbox: {:?}", polled.envelopes.iter().map(|e| &e.id).collect::<Vec<_>>());
    let envelope = back.consume(&id)?;
    println!("consumed into {}", envelope.dir.display());
    for (name, digest) in &envelope.manifest.payload_digest {
        println!("  {name}  sha256 {}", &digest[..16]);
    }
    println!("second consume: {}", back.consume(&id).unwrap_err().code());
    Ok(())
}
