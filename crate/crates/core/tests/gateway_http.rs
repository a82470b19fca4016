mod common;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::Path as UrlPath;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::get;
use axum::Router;
use reqwest::blocking::multipart::Form;
use serde_json::Value;

use common::{frames_zip, Server, Stack};
use fmeter::exchange::{EnvelopeState, FaultInjector, FrontEndExchange};
use fmeter::frameseq::Pattern;
use fmeter::gateway::{Gateway, GatewayConfig};
use fmeter::model::{JobId, JobState, MAX_VIDEO_BYTES};
use fmeter::notifier::{FileTransport, Notifier, RetryPolicy};

const MB: usize = 1024 * 1024;

/// A throwaway origin server for URL submissions.
fn origin() -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/small", get(|| async { vec![7u8; MB] }))
                .route("/clip", get(|| async { frames_zip(6, Pattern::Gradient) }))
                .route("/exact", get(|| async { vec![0u8; MAX_VIDEO_BYTES as usize] }))
                .route("/big", get(|| async { vec![0u8; 55 * MB] }))
                .route("/big-chunked", get(chunked_big))
                .route("/missing", get(|| async { StatusCode::NOT_FOUND }))
                .route("/hop/{n}", get(hop));
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

async fn chunked_big() -> Response {
    let chunks = futures::stream::iter((0..55).map(|_| Ok::<_, std::io::Error>(vec![0u8; MB])));
    let resp = Response::new(Body::from_stream(chunks));
    assert!(resp.headers().get(header::CONTENT_LENGTH).is_none());
    resp
}

async fn hop(UrlPath(n): UrlPath<u32>) -> Response {
    if n <= 1 {
        Redirect::temporary("/small").into_response()
    } else {
        Redirect::temporary(&format!("/hop/{}", n - 1)).into_response()
    }
}

fn form(pin: &str) -> Form {
    Form::new()
        .text("detectors", "mock-constant")
        .text("email", "analyst@example.org")
        .text("pin", pin.to_string())
}

fn post(server: &Server, form: Form) -> (u16, Value) {
    let resp = reqwest::blocking::Client::new()
        .post(format!("{}/api/v1/jobs", server.url))
        .multipart(form)
        .send()
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().unwrap_or(Value::Null))
}

fn job_file(server: &Server, id: &str) -> Value {
    let raw = std::fs::read(server.state.join("gateway/jobs").join(format!("{id}.json"))).unwrap();
    serde_json::from_slice(&raw).unwrap()
}

#[test]
fn url_submissions_follow_the_size_and_scheme_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let server = Server::start(tmp.path(), &["--role", "gateway"]);
    let origin = origin();
    let by_url = |path: &str| post(&server, form("1234").text("video_url", format!("http://{origin}{path}")));

    for path in ["/small", "/exact", "/clip", "/hop/5"] {
        let (status, body) = by_url(path);
        assert_eq!(status, 201, "{path}: {body}");
        let job = job_file(&server, body["job_id"].as_str().unwrap());
        assert_eq!(job["video"]["origin"], "remote-url");
    }
    let (_, body) = by_url("/exact");
    let job = job_file(&server, body["job_id"].as_str().unwrap());
    assert_eq!(job["video"]["byte_size"], MAX_VIDEO_BYTES);
    let (_, body) = by_url("/clip");
    assert_eq!(job_file(&server, body["job_id"].as_str().unwrap())["video"]["media_kind"], "frame-sequence");

    for path in ["/big", "/big-chunked"] {
        let (status, body) = by_url(path);
        assert_eq!((status, body["error"].as_str()), (413, Some("oversize-video")), "{path}");
    }
    for path in ["/hop/6", "/missing"] {
        let (status, body) = by_url(path);
        assert_eq!((status, body["error"].as_str()), (422, Some("fetch-failed")), "{path}: {body}");
    }
    let (status, body) = post(&server, form("1234").text("video_url", "ftp://example.org/clip.zip"));
    assert_eq!((status, body["error"].as_str()), (400, Some("unsupported-scheme")));
    let (status, body) = post(&server, form("1234").text("video_url", "http://127.0.0.1:1/clip.zip"));
    assert_eq!((status, body["error"].as_str()), (422, Some("fetch-failed")));

    // nothing from the rejected fetches is left in the upload area
    let uploads: Vec<_> = std::fs::read_dir(server.state.join("gateway/uploads"))
        .unwrap()
        .filter_map(Result::ok)
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("fetch-") || n.starts_with("upload-"))
        .collect();
    assert!(uploads.is_empty(), "leftover staging files {uploads:?}");
}

/// A well-formed zip that is not a frame sequence.
fn zip_without_meta() -> Vec<u8> {
    use std::io::Write;
    let mut w = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    w.start_file("notes.txt", zip::write::SimpleFileOptions::default()).unwrap();
    w.write_all(b"hello").unwrap();
    w.finish().unwrap().into_inner()
}

#[test]
fn submit_validation_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let server = Server::start(tmp.path(), &["--role", "gateway"]);
    let clip = frames_zip(3, Pattern::Black);
    let video = || reqwest::blocking::multipart::Part::bytes(clip.clone()).file_name("clip.zip");

    let cases: Vec<(Form, u16, &str, Option<&str>)> = vec![
        (form("12").part("video", video()), 400, "invalid-pin", Some("pin")),
        (form("1234567").part("video", video()), 400, "invalid-pin", Some("pin")),
        (form("12a4").part("video", video()), 400, "invalid-pin", Some("pin")),
        (
            Form::new().text("detectors", "mock-constant").text("email", "nobody").text("pin", "1234").part("video", video()),
            400,
            "invalid-email",
            Some("email"),
        ),
        (
            Form::new().text("detectors", " , ").text("email", "a@b.org").text("pin", "1234").part("video", video()),
            400,
            "empty-detector-list",
            Some("detectors"),
        ),
        (
            Form::new().text("detectors", "mock-constant,mock-constant").text("email", "a@b.org").text("pin", "1234").part("video", video()),
            400,
            "duplicate-detector",
            Some("detectors"),
        ),
        (form("1234"), 400, "bad-request", None),
        (form("1234").part("video", video()).text("video_url", "http://127.0.0.1:1/x"), 400, "bad-request", None),
        (form("1234").part("video", video()).part("video", video()), 400, "bad-request", None),
        (
            form("1234").part("video", reqwest::blocking::multipart::Part::bytes(zip_without_meta())),
            400,
            "invalid-media",
            None,
        ),
    ];
    for (i, (f, status, code, field)) in cases.into_iter().enumerate() {
        let (got, body) = post(&server, f);
        assert_eq!((got, body["error"].as_str()), (status, Some(code)), "case {i}: {body}");
        assert_eq!(body["field"].as_str(), field, "case {i}");
    }
    let leftovers = std::fs::read_dir(server.state.join("gateway/uploads")).unwrap().count();
    assert_eq!(leftovers, 0);
    let jobs = std::fs::read_dir(server.state.join("gateway/jobs")).unwrap().count();
    assert_eq!(jobs, 0);
}

#[test]
fn status_and_download_before_results() {
    let tmp = tempfile::tempdir().unwrap();
    let server = Server::start(tmp.path(), &["--role", "gateway"]);
    let clip = tmp.path().join("clip.zip");
    std::fs::write(&clip, frames_zip(4, Pattern::Gradient)).unwrap();
    let client = fmeter::client::Client::new(&server.url);
    let id = client
        .submit(fmeter::client::VideoSource::File(&clip), &["mock-constant".into()], "a@b.org", "1234")
        .unwrap();

    assert_eq!(client.status(&id).unwrap().state, JobState::Received);
    let err = client.download_raw(&id, "1234").unwrap_err();
    assert_eq!(err.code(), "not-ready");
    let err = client.download_raw(&id, "9999").unwrap_err();
    assert_eq!(err.code(), "wrong-pin");
    let err = client.status(&JobId::generate().to_string()).unwrap_err();
    assert_eq!(err.code(), "not-found");
    let err = client.status("../../etc/passwd").unwrap_err();
    assert_eq!(err.code(), "not-found");
    let err = client.download_raw(&JobId::generate().to_string(), "1234").unwrap_err();
    assert_eq!(err.code(), "not-found");

    // the envelope sits in the inbox until a back end takes it
    let inbox = server.exchange.join("inbox").join(&id);
    assert!(inbox.join("manifest.json").is_file());
}

#[test]
fn detectors_endpoint_lists_registry_and_plugins() {
    let tmp = tempfile::tempdir().unwrap();
    let server = Server::start(tmp.path(), &["--role", "gateway"]);
    let list = fmeter::client::Client::new(&server.url).detectors().unwrap();
    let ids: Vec<&str> = list.iter().map(|d| d.detector_id.as_str()).collect();
    assert!(ids.contains(&"mesonet") && ids.contains(&"selim"), "{ids:?}");
    assert!(ids.contains(&"mock-constant") && ids.contains(&"mock-py-luminance"), "{ids:?}");
    let meso = list.iter().find(|d| d.detector_id == "mesonet").unwrap();
    assert_eq!(meso.name, "MesoNet");
    assert_eq!(meso.source_repo, "https://github.com/DariusAf/MesoNet");
    assert_eq!(meso.release_date, "2018-09");
}

#[test]
fn completed_download_carries_its_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let server = Server::start(tmp.path(), &["--role", "both"]);
    let clip = tmp.path().join("clip.zip");
    std::fs::write(&clip, frames_zip(4, Pattern::Gradient)).unwrap();
    let client = fmeter::client::Client::new(&server.url);
    let id = client
        .submit(fmeter::client::VideoSource::File(&clip), &["mock-luminance".into()], "a@b.org", "55555")
        .unwrap();
    let status = client.wait_terminal(&id, Duration::from_secs(30), Duration::from_millis(50)).unwrap();
    assert_eq!(status.state, JobState::Completed);
    let fetched = client.fetch(&id, "55555").unwrap();
    assert_eq!(fetched.summary.job_id.as_str(), id);
    let scores = &fetched.summary.detectors[0];
    // gradient frames: luminance 0, 85, 170, 255 of 255
    let want = (0.0 + 1.0 / 3.0 + 2.0 / 3.0 + 1.0) / 4.0;
    let got = scores.aggregate_score.unwrap();
    assert!((got - want).abs() < 1e-6, "aggregate {got}, expected about {want}");
    // the uploaded video is discarded once results arrive
    assert!(!server.state.join("gateway/uploads").join(format!("{id}.zip")).exists());
}

fn gateway_with_faults(root: &Path, faults: Arc<FaultInjector>, janitor_after: Duration) -> (Stack, Gateway) {
    let stack = Stack::new(root);
    let mut config = GatewayConfig::new(root.join("gateway-faulty"));
    config.janitor_after = janitor_after;
    let notifier = Notifier::start(
        Arc::new(FileTransport::new(root.join("mail-faulty")).unwrap()),
        RetryPolicy::default(),
        root.join("dl.jsonl"),
    );
    let gateway = Gateway::new(
        config,
        FrontEndExchange::with_faults(&stack.dirs, Some(faults)),
        common::registry(),
        notifier,
    )
    .unwrap();
    (stack, gateway)
}

#[test]
fn janitor_republishes_after_a_crash_between_record_and_envelope() {
    let tmp = tempfile::tempdir().unwrap();
    for crash_at in 0..5 {
        let root = tmp.path().join(format!("crash-{crash_at}"));
        let faults = FaultInjector::crash_at(crash_at);
        let (stack, gateway) = gateway_with_faults(&root, faults.clone(), Duration::from_millis(200));
        let video = stack.stage(&frames_zip(4, Pattern::Gradient));
        let id = gateway
            .submit(video, vec!["mock-constant".into()], "a@b.org", "1234")
            .expect("the job record is the commit point");
        faults.disarm();

        let front = FrontEndExchange::new(&stack.dirs);
        assert_eq!(front.submission_state(&id), EnvelopeState::Absent, "crash at {crash_at}");
        assert_eq!(gateway.status(id.as_str()).unwrap().state, JobState::Received);

        // too young: left alone
        assert_eq!(gateway.janitor(), 0);
        std::thread::sleep(Duration::from_millis(250));
        assert_eq!(gateway.janitor(), 1);
        assert_eq!(gateway.janitor(), 0, "published once");
        assert_eq!(front.submission_state(&id), EnvelopeState::Published);

        stack.scheduler.drain().unwrap();
        gateway.sync_outbox();
        assert_eq!(gateway.status(id.as_str()).unwrap().state, JobState::Completed);
        // once answered the janitor has nothing to do
        assert_eq!(gateway.janitor(), 0);
    }
}

#[test]
fn janitor_leaves_consumed_and_answered_jobs_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let stack = Stack::with(tmp.path(), |g| g.janitor_after = Duration::ZERO, |_| {});
    let id = stack.submit(&frames_zip(3, Pattern::White), &["mock-constant"], "1234");
    assert_eq!(stack.gateway.janitor(), 0, "envelope already in the inbox");
    stack.scheduler.drain().unwrap();
    // results are waiting in the outbox but not yet ingested
    assert_eq!(stack.gateway.janitor(), 0);
    stack.gateway.sync_outbox();
    assert_eq!(stack.gateway.status(&id).unwrap().state, JobState::Completed);
    let entries = std::fs::read_dir(&stack.dirs.inbox_root).unwrap().count();
    assert_eq!(entries, 2, "staging dir plus one consumed envelope");
}
