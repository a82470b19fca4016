//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::{fmeter, frames_zip, plugins_dir, sandbox, Server, Stack};
use fmeter::analysis::{aggregate_score, read_bundle, verify_bundle, ScoreSeries};
use fmeter::exchange::{
    file_digest, is_injected_crash, BackEndExchange, Envelope, ExchangeDirs, ExchangeError, FaultInjector,
    FrontEndExchange, RESULTS_SUFFIX, STAGING_DIR,
};
use fmeter::frameseq::Pattern;
use fmeter::model::{create_job, JobId, JobState, MediaKind, VideoOrigin, VideoRef, MAX_VIDEO_BYTES};
use fmeter::plugin::registry::load_manifest;
use fmeter::plugin::{verify_conformance, Check, ConformanceOptions, FrameScore, HardLabel, Registry};
use fmeter::scheduler::{read_journal, JournalReplay};

type Outcome = Result<String, String>;
type Criterion = Box<dyn Fn(u64) -> Outcome>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let seed: u64 = std::env::var("ACCEPTANCE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0x5eed_f00d);
    println!("acceptance seed {seed}");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("end-to-end via serve --role both and the CLI", Box::new(|_| end_to_end())),
        ("aggregate score matches trapezoid oracle", Box::new(aggregate_oracle)),
        ("50 MB boundary at gateway and CLI", Box::new(|_| size_boundary())),
        ("PIN gate fuzz and lock-out", Box::new(pin_gate)),
        ("exchange atomicity under crash injection", Box::new(crash_injection)),
        ("soak: 100 concurrent jobs x 2 detectors", Box::new(|_| soak())),
        ("plugin conformance of shipped mocks", Box::new(|_| conformance())),
        ("registry matches published detector table", Box::new(|_| registry_table())),
        ("partial failure is PartiallyCompleted", Box::new(|_| partial_failure())),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(seed))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
        let _ = std::io::stdout().flush();
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("tempdir")
}

fn run(cmd: &mut std::process::Command) -> (i32, String, String) {
    let out = cmd.output().expect("run fmeter");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn end_to_end() -> Outcome {
    let tmp = tempdir();
    let server = Server::start(tmp.path(), &["--role", "both"]);
    let video = tmp.path().join("clip.zip");
    let (code, _, err) = run(fmeter()
        .args(["genmedia", "--frames", "20", "--pattern", "gradient", "--out"])
        .arg(&video));
    ensure!(code == 0, "genmedia exited {code}: {err}");

    let start = Instant::now();
    let (code, out, err) = run(fmeter()
        .arg("submit")
        .arg(&video)
        .args(["--detectors", "mock-constant,mock-sinusoid"])
        .args(["--email", "analyst@example.org", "--pin", "4821"])
        .args(["--gateway", &server.url]));
    ensure!(code == 0, "submit exited {code}: {err}");
    let job_id = out.trim().to_string();

    let mut state = String::new();
    while start.elapsed() < Duration::from_secs(30) {
        let (code, out, err) = run(fmeter().args(["status", &job_id, "--gateway", &server.url]));
        ensure!(code == 0, "status exited {code}: {err}");
        state = out.lines().next().unwrap_or_default().to_string();
        if state != "Received" && state != "Queued" && state != "Running" {
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let elapsed = start.elapsed();
    ensure!(state == "Completed", "state after {elapsed:?} is {state}");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");

    let bundle = tmp.path().join("bundle.zip");
    let (code, _, err) = run(fmeter()
        .args(["fetch", &job_id, "--pin", "4821", "--gateway", &server.url, "--out"])
        .arg(&bundle));
    ensure!(code == 0, "fetch exited {code}: {err}");
    let bytes = std::fs::read(&bundle).map_err(|e| e.to_string())?;
    let names: Vec<String> = read_bundle(&bytes)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let expected = [
        "summary.json",
        "overlay.json",
        "scores/mock-constant.csv",
        "scores/mock-sinusoid.csv",
        "README.txt",
    ];
    ensure!(names == expected, "bundle entries {names:?}");
    Ok(format!("Completed in {:.2}s; entries {}", elapsed.as_secs_f64(), names.join(", ")))
}

/// Trapezoid rule over the ascending scores on an explicit grid
/// x_i = i / (N - 1).
fn trapezoid_oracle(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    if s.len() == 1 {
        return s[0];
    }
    let n = (s.len() - 1) as f64;
    let mut area = 0.0;
    for i in 0..s.len() - 1 {
        let dx = (i + 1) as f64 / n - i as f64 / n;
        area += dx * (s[i] + s[i + 1]) / 2.0;
    }
    area
}

fn series(scores: &[f64]) -> ScoreSeries {
    let frames = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| FrameScore {
            frame_index: i as u32,
            soft_label: s,
            hard_label: HardLabel::from_soft(s, 0.5),
            face_found: true,
        })
        .collect();
    ScoreSeries::new("oracle", frames).unwrap()
}

fn aggregate_oracle(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(1..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let got = aggregate_score(&series(&scores)).map_err(|e| e.to_string())?;
        let want = trapezoid_oracle(&scores);
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-12, "case {case}: {scores:?} gave {got}, oracle {want}");
    }
    for _ in 0..200 {
        let c: f64 = rng.random_range(0.0..=1.0);
        let n = rng.random_range(1..=50);
        let got = aggregate_score(&series(&vec![c; n])).unwrap();
        ensure!(got == c, "constant {c} x {n} gave {got}");
    }
    for c in [0.0, 1.0, 0.1, 0.3, 1.0 / 3.0] {
        let got = aggregate_score(&series(&[c; 7])).unwrap();
        ensure!(got == c, "constant {c} gave {got}");
    }
    let half = aggregate_score(&series(&[0.0, 1.0])).unwrap();
    ensure!(half == 0.5, "[0,1] gave {half}");
    Ok(format!("1000 random series, max error {worst:.2e}; constants exact; [0,1] = 0.5"))
}

fn sized_file(dir: &Path, name: &str, size: u64) -> PathBuf {
    let path = dir.join(name);
    let f = std::fs::File::create(&path).unwrap();
    f.set_len(size).unwrap();
    path
}

fn http_upload(url: &str, path: &Path) -> (u16, serde_json::Value) {
    let form = reqwest::blocking::multipart::Form::new()
        .text("detectors", "mock-constant")
        .text("email", "analyst@example.org")
        .text("pin", "1234")
        .file("video", path)
        .unwrap();
    let resp = reqwest::blocking::Client::new()
        .post(format!("{url}/api/v1/jobs"))
        .multipart(form)
        .send()
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().unwrap_or(serde_json::Value::Null))
}

fn size_boundary() -> Outcome {
    let tmp = tempdir();
    let server = Server::start(tmp.path(), &["--role", "gateway"]);
    let at = sized_file(tmp.path(), "at-limit.bin", MAX_VIDEO_BYTES);
    let over = sized_file(tmp.path(), "over-limit.bin", MAX_VIDEO_BYTES + 1);

    let (status, body) = http_upload(&server.url, &at);
    ensure!(status == 201, "gateway: {MAX_VIDEO_BYTES} bytes answered {status} {body}");
    let (status, body) = http_upload(&server.url, &over);
    ensure!(
        status == 413 && body["error"] == "oversize-video",
        "gateway: {} bytes answered {status} {body}",
        MAX_VIDEO_BYTES + 1
    );

    let submit = |file: &Path| {
        run(fmeter()
            .arg("submit")
            .arg(file)
            .args(["--detectors", "mock-constant", "--email", "analyst@example.org", "--pin", "1234"])
            .args(["--gateway", &server.url]))
    };
    let (code, out, err) = submit(&at);
    ensure!(code == 0 && !out.trim().is_empty(), "cli: at limit exited {code}: {err}");
    let (code, _, err) = submit(&over);
    ensure!(code == 2 && err.contains("oversize-video"), "cli: over limit exited {code}: {err}");
    Ok(format!(
        "{MAX_VIDEO_BYTES} accepted (201, exit 0); {} rejected (413 oversize-video, exit 2)",
        MAX_VIDEO_BYTES + 1
    ))
}

/// Submits a small job through HTTP and waits for it to finish.
fn completed_job(server: &Server, pin: &str) -> Result<String, String> {
    let client = fmeter::client::Client::new(&server.url);
    let tmp = tempdir();
    let video = tmp.path().join("v.zip");
    std::fs::write(&video, frames_zip(4, Pattern::Gradient)).unwrap();
    let id = client
        .submit(
            fmeter::client::VideoSource::File(&video),
            &["mock-constant".to_string()],
            "analyst@example.org",
            pin,
        )
        .map_err(|e| e.to_string())?;
    let status = client
        .wait_terminal(&id, Duration::from_secs(30), Duration::from_millis(50))
        .map_err(|e| e.to_string())?;
    ensure!(status.state == JobState::Completed, "setup job ended {:?}", status.state);
    Ok(id)
}

fn random_pin_guess(rng: &mut StdRng, pin: &str) -> serde_json::Value {
    loop {
        let guess: serde_json::Value = match rng.random_range(0..10) {
            0..=4 => {
                let len = rng.random_range(4..=6);
                (0..len)
                    .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
                    .collect::<String>()
                    .into()
            }
            5 => {
                let len = rng.random_range(0..12);
                (0..len)
                    .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
                    .collect::<String>()
                    .into()
            }
            6 => format!("{pin}{}", rng.random_range(0..10)).into(),
            7 => pin[..pin.len() - 1].to_string().into(),
            8 => (0..rng.random_range(0..8))
                .map(|_| char::from_u32(rng.random_range(0x20..0x3000)).unwrap_or('?'))
                .collect::<String>()
                .into(),
            _ => serde_json::Value::from(rng.random_range(0..1_000_000u32)),
        };
        if guess.as_str() != Some(pin) {
            return guess;
        }
    }
}

fn is_bundle(resp_ct: Option<&str>, body: &[u8]) -> bool {
    resp_ct.is_some_and(|c| c.starts_with("application/zip")) || body.starts_with(b"PK\x03\x04")
}

fn pin_gate(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x9111);
    let tmp = tempdir();
    let pin = "730415";

    // A huge attempt limit keeps the PIN check itself in the path for every
    // fuzzed request.
    let server = Server::start(tmp.path(), &["--role", "both", "--attempt-limit", "1000000"]);
    let job = completed_job(&server, pin)?;
    let http = reqwest::blocking::Client::new();
    let mut leaked = 0usize;
    let mut codes: BTreeMap<u16, usize> = BTreeMap::new();
    for _ in 0..10_000 {
        let target = match rng.random_range(0..10) {
            0 => JobId::generate().to_string(),
            _ => job.clone(),
        };
        let url = format!("{}/api/v1/jobs/{target}/download", server.url);
        let req = match rng.random_range(0..20) {
            0 => http.get(&url),
            1 => http.post(&url).body("not json"),
            2 => http.post(&url).json(&serde_json::json!({})),
            3 => http.post(&url).json(&serde_json::json!({"pin": [pin]})),
            4 => http.get(format!("{}/api/v1/jobs/{target}", server.url)),
            _ => http.post(&url).json(&serde_json::json!({"pin": random_pin_guess(&mut rng, pin)})),
        };
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let ct = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let body = resp.bytes().map_err(|e| e.to_string())?;
        if is_bundle(ct.as_deref(), &body) {
            leaked += body.len();
        }
        *codes.entry(status).or_default() += 1;
    }
    ensure!(leaked == 0, "{leaked} bundle bytes returned without the PIN");
    let (bytes, _) = fmeter::client::Client::new(&server.url)
        .download_raw(&job, pin)
        .map_err(|e| format!("correct PIN refused after fuzz: {e}"))?;
    ensure!(is_bundle(None, &bytes), "correct PIN did not return a bundle");
    drop(server);

    // Default limit: ten wrong PINs, then lock-out.
    let tmp2 = tempdir();
    let server = Server::start(tmp2.path(), &["--role", "both"]);
    let job = completed_job(&server, pin)?;
    let url = format!("{}/api/v1/jobs/{job}/download", server.url);
    for attempt in 1..=10u32 {
        let resp = http.post(&url).json(&serde_json::json!({"pin": "0000"})).send().unwrap();
        let status = resp.status().as_u16();
        let body: serde_json::Value = resp.json().unwrap();
        ensure!(
            status == 403 && body["error"] == "wrong-pin" && body["remaining_attempts"] == 10 - attempt,
            "wrong attempt {attempt}: {status} {body}"
        );
    }
    let resp = http.post(&url).json(&serde_json::json!({"pin": "0000"})).send().unwrap();
    let status = resp.status().as_u16();
    let retry_after = resp.headers().contains_key(reqwest::header::RETRY_AFTER);
    let body: serde_json::Value = resp.json().unwrap();
    ensure!(
        status == 429 && body["error"] == "locked-out" && retry_after,
        "11th wrong attempt: {status} {body}"
    );
    let resp = http.post(&url).json(&serde_json::json!({"pin": pin})).send().unwrap();
    ensure!(resp.status().as_u16() == 429, "correct PIN during lock-out: {}", resp.status());
    Ok(format!(
        "10000 requests, 0 bundle bytes, statuses {codes:?}; 11th wrong attempt locked-out"
    ))
}

/// Re-hashes every payload and compares with the manifest.
fn digests_match(env: &Envelope) -> Result<(), String> {
    for (name, want) in &env.manifest.payload_digest {
        let got = file_digest(&env.dir.join(name)).map_err(|e| format!("{}: {name}: {e}", env.id))?;
        ensure!(&got == want, "{}: {name} digest {got} != manifest {want}", env.id);
    }
    Ok(())
}

fn crash_injection(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed ^ 0xc4a5);
    let tmp = tempdir();
    let dirs = ExchangeDirs::under(&tmp.path().join("exchange")).unwrap();
    let faults = FaultInjector::disarmed();
    let front = FrontEndExchange::with_faults(&dirs, Some(faults.clone()));
    let back = BackEndExchange::with_faults(&dirs, Some(faults.clone()));
    let video = tmp.path().join("video.zip");
    std::fs::write(&video, frames_zip(6, Pattern::Gradient)).unwrap();
    let video_len = std::fs::metadata(&video).unwrap().len();

    // A reader polls both directions the whole time the writers publish.
    let stop = Arc::new(AtomicBool::new(false));
    let watcher = {
        let stop = stop.clone();
        let reader_front = FrontEndExchange::new(&dirs);
        let reader_back = BackEndExchange::new(&dirs);
        std::thread::spawn(move || -> Result<usize, String> {
            let mut polls = 0;
            while !stop.load(Ordering::SeqCst) {
                let inbox = reader_back.poll_inbox(&HashSet::new()).map_err(|e| e.to_string())?;
                let outbox = reader_front.poll_outbox(&HashSet::new()).map_err(|e| e.to_string())?;
                for o in [&inbox, &outbox] {
                    ensure!(o.corrupt.is_empty(), "poll saw corrupt envelopes {:?}", o.corrupt);
                    for env in &o.envelopes {
                        digests_match(env)?;
                    }
                }
                polls += 1;
            }
            Ok(polls)
        })
    };

    const TRIALS: usize = 300;
    let mut published: Vec<String> = Vec::new();
    let mut crashes = 0usize;
    let mut crash_ordinals: BTreeMap<usize, usize> = BTreeMap::new();
    let mut max_boundaries = 0;
    for trial in 0..TRIALS {
        let job = create_job(
            VideoRef {
                origin: VideoOrigin::DirectUpload,
                content_path: video.clone(),
                byte_size: video_len,
                media_kind: MediaKind::FrameSequence,
            },
            vec!["mock-constant".into()],
            "analyst@example.org",
            "1234",
        )
        .unwrap();
        let results = trial % 2 == 1;
        let bundle: Vec<u8> = (0..rng.random_range(1..4096)).map(|_| rng.random()).collect();
        let publish = || {
            if results {
                back.publish_results(&job.job_id, &bundle)
            } else {
                front.publish_submission(&job, &video)
            }
        };
        // Submissions pass 5 boundaries, results 4; ordinals past the end
        // mean the attempt completes.
        let mut attempts = 0;
        let id = loop {
            attempts += 1;
            let ordinal = if attempts > 5 { usize::MAX } else { rng.random_range(0..6) };
            faults.arm(ordinal);
            let result = publish();
            max_boundaries = max_boundaries.max(faults.boundaries_seen());
            faults.disarm();
            match result {
                Ok(id) => {
                    // The writer may also die after the rename but before it
                    // learns of success; the retry must see a duplicate.
                    if rng.random_bool(0.2) {
                        match publish() {
                            Err(ExchangeError::Duplicate(_)) => {}
                            other => return Err(format!("re-publish after success gave {other:?}")),
                        }
                    }
                    break id;
                }
                Err(e) if is_injected_crash(&e) => {
                    crashes += 1;
                    *crash_ordinals.entry(ordinal).or_default() += 1;
                }
                Err(e) => return Err(format!("trial {trial}: publish failed: {e}")),
            }
        };
        published.push(id);
    }
    stop.store(true, Ordering::SeqCst);
    let polls = watcher.join().map_err(|_| "watcher panicked".to_string())??;

    // Consume everything, with crashes at the consume rename.
    let mut delivered: HashMap<String, usize> = HashMap::new();
    let mut consume_crashes = 0;
    for _round in 0..50 {
        let inbox = back.poll_inbox(&HashSet::new()).map_err(|e| e.to_string())?;
        let outbox = front.poll_outbox(&HashSet::new()).map_err(|e| e.to_string())?;
        ensure!(inbox.corrupt.is_empty() && outbox.corrupt.is_empty(), "corrupt after publishing");
        if inbox.envelopes.is_empty() && outbox.envelopes.is_empty() {
            break;
        }
        for env in inbox.envelopes.iter().chain(&outbox.envelopes) {
            digests_match(env)?;
            faults.arm(if rng.random_bool(0.3) { 0 } else { usize::MAX });
            let result = if env.id.ends_with(RESULTS_SUFFIX) {
                front.consume_results(&env.id)
            } else {
                back.consume(&env.id)
            };
            faults.disarm();
            match result {
                Ok(consumed) => {
                    digests_match(&consumed)?;
                    *delivered.entry(env.id.clone()).or_default() += 1;
                }
                Err(e) if is_injected_crash(&e) => consume_crashes += 1,
                Err(e) => return Err(format!("consume {}: {e}", env.id)),
            }
        }
    }
    for id in &published {
        let n = delivered.get(id).copied().unwrap_or(0);
        ensure!(n == 1, "{id} delivered {n} times");
        let again = if id.ends_with(RESULTS_SUFFIX) {
            front.consume_results(id)
        } else {
            back.consume(id)
        };
        ensure!(matches!(again, Err(ExchangeError::NotFound(_))), "{id} consumable twice: {again:?}");
    }
    ensure!(delivered.len() == published.len(), "delivered {} ids for {} published", delivered.len(), published.len());
    let staging_left = [&dirs.inbox_root, &dirs.outbox_root]
        .iter()
        .map(|r| std::fs::read_dir(r.join(STAGING_DIR)).map(|d| d.count()).unwrap_or(0))
        .sum::<usize>();
    Ok(format!(
        "{TRIALS} trials, {crashes} publish crashes over ordinals {crash_ordinals:?} (max {max_boundaries} boundaries), \
         {consume_crashes} consume crashes, {polls} concurrent polls clean, {} envelopes delivered once, \
         {staging_left} staging leftovers ignored",
        published.len()
    ))
}

fn soak() -> Outcome {
    const JOBS: usize = 100;
    let tmp = tempdir();
    let stack = Stack::with(
        tmp.path(),
        |_| {},
        |s| {
            s.max_parallel_jobs = 4;
            s.max_parallel_detectors_per_job = 2;
        },
    );
    let bound = 4 * 2;
    let video = frames_zip(5, Pattern::Gradient);
    let stop = AtomicBool::new(false);
    let start = Instant::now();
    let ids: Vec<String> = std::thread::scope(|scope| {
        let sched = scope.spawn(|| stack.scheduler.run_until(&stop));
        let submitters: Vec<_> = (0..JOBS)
            .map(|i| {
                let stack = &stack;
                let video = &video;
                scope.spawn(move || stack.submit(video, &["mock-constant", "mock-sinusoid"], &format!("{:04}", i)))
            })
            .collect();
        let ids: Vec<String> = submitters.into_iter().map(|h| h.join().unwrap()).collect();
        let done = common::wait_until(Duration::from_secs(240), || {
            stack.gateway.sync_outbox();
            ids.iter().all(|id| stack.gateway.status(id).is_ok_and(|s| s.state.is_terminal()))
        });
        stop.store(true, Ordering::SeqCst);
        sched.join().unwrap().unwrap();
        assert!(done, "not all jobs finished");
        ids
    });
    let elapsed = start.elapsed();

    let states: Vec<JobState> = ids.iter().map(|id| stack.gateway.status(id).unwrap().state).collect();
    ensure!(states.iter().all(|s| *s == JobState::Completed), "states {states:?}");
    let mut envelopes: Vec<String> = std::fs::read_dir(&stack.dirs.outbox_root)
        .unwrap()
        .filter_map(Result::ok)
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    envelopes.sort();
    let job_of: HashSet<String> = envelopes
        .iter()
        .map(|n| n.split('.').next().unwrap().to_string())
        .collect();
    ensure!(
        envelopes.len() == JOBS && job_of == ids.iter().cloned().collect(),
        "{} results envelopes for {} jobs",
        envelopes.len(),
        JOBS
    );
    let replay = JournalReplay::from_entries(&read_journal(stack.scheduler.journal_path()).unwrap());
    let problems = replay.inconsistencies();
    ensure!(problems.is_empty(), "journal inconsistencies: {problems:?}");
    ensure!(replay.answered().len() == JOBS, "{} answered", replay.answered().len());
    ensure!(replay.unanswered().is_empty(), "unanswered {:?}", replay.unanswered());
    let gauge = &stack.sandbox.gauge;
    ensure!(gauge.peak() <= bound, "peak {} live plugin processes > {bound}", gauge.peak());
    ensure!(gauge.spawned() == JOBS * 2, "{} plugin processes spawned", gauge.spawned());
    Ok(format!(
        "{JOBS} results envelopes in {:.1}s, journal clean, peak {} of {bound} plugin processes",
        elapsed.as_secs_f64(),
        gauge.peak()
    ))
}

fn conformance() -> Outcome {
    let tmp = tempdir();
    let expectations: [(&str, &[Check]); 7] = [
        ("mock-constant", &[]),
        ("mock-sinusoid", &[]),
        ("mock-luminance", &[]),
        ("mock-py-luminance", &[]),
        ("mock-jitter", &[Check::Determinism]),
        ("mock-sleeper", &[Check::CleanShutdown]),
        ("mock-crasher", &[Check::ProbeRange]),
    ];
    let reports: Vec<_> = std::thread::scope(|scope| {
        expectations
            .iter()
            .map(|(id, _)| {
                let root = tmp.path().join(id);
                scope.spawn(move || {
                    let descriptor = load_manifest(&plugins_dir().join(id).join("manifest.json")).unwrap();
                    verify_conformance(
                        &descriptor,
                        &sandbox(&root),
                        &ConformanceOptions {
                            check_timeout: Duration::from_secs(20),
                            work_dir: Some(root.join("work")),
                        },
                    )
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect()
    });
    let mut lines = Vec::new();
    for ((id, expected_failures), report) in expectations.iter().zip(&reports) {
        let failed = report.failed_checks();
        ensure!(report.checks.len() == 6, "{id}: {} checks ran", report.checks.len());
        ensure!(failed == *expected_failures, "{id}: failed {failed:?}, expected {expected_failures:?}\n{report}");
        ensure!(report.sandbox_violations.is_empty(), "{id}: sandbox violations {:?}", report.sandbox_violations);
        lines.push(format!("{id} {}/6", report.passed_count()));
    }
    Ok(lines.join(", "))
}

fn registry_table() -> Outcome {
    let table = std::fs::read_to_string(common::fixture("table1.tsv")).map_err(|e| e.to_string())?;
    let mut rows = table.lines();
    ensure!(rows.next() == Some("Methods\tRepositories\tRelease Date"), "unexpected header");
    let expected: Vec<&str> = rows.filter(|l| !l.is_empty()).collect();
    let registry = Registry::shipped();
    let actual: Vec<String> = registry
        .entries()
        .iter()
        .map(|d| format!("{}\t{}\t{}", d.display_name, d.source_repo, d.release_date.replace('-', ".")))
        .collect();
    ensure!(expected.len() == 11, "fixture has {} rows", expected.len());
    ensure!(actual.len() == expected.len(), "registry has {} entries", actual.len());
    for (a, e) in actual.iter().zip(&expected) {
        ensure!(a.as_bytes() == e.as_bytes(), "registry row {a:?} != table row {e:?}");
    }
    Ok(format!("{} rows identical", actual.len()))
}

fn partial_failure() -> Outcome {
    let tmp = tempdir();
    let stack = Stack::new(tmp.path());
    let id = stack.submit(&frames_zip(8, Pattern::Gradient), &["mock-constant", "nope"], "2468");
    stack.process();
    let status = stack.gateway.status(&id).map_err(|e| e.to_string())?;
    ensure!(status.state == JobState::PartiallyCompleted, "state {:?}", status.state);
    let bytes = stack.gateway.download(&id, "2468").map_err(|e| e.to_string())?;
    let summary = verify_bundle(&bytes).map_err(|e| e.to_string())?;
    let failures: Vec<_> = summary.failures().collect();
    ensure!(failures.len() == 1 && failures[0].detector_id == "nope", "failures {failures:?}");
    let note = failures[0].error_note.clone().unwrap_or_default();
    ensure!(note.contains("unknown-detector"), "note {note:?}");
    let names: Vec<String> = read_bundle(&bytes).unwrap().into_iter().map(|(n, _)| n).collect();
    ensure!(
        names.contains(&"scores/mock-constant.csv".to_string()) && !names.iter().any(|n| n.contains("nope")),
        "entries {names:?}"
    );
    Ok(format!("PartiallyCompleted; summary failure: nope ({note}); detail {:?}", status.detail.unwrap_or_default()))
}
