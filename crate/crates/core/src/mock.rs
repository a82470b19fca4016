//! Deterministic stand-in detectors that speak the plugin protocol.
//!
//! The well-behaved mocks are `constant`, `sinusoid` and `luminance`. The
//! rest misbehave on purpose, each in one way, to exercise the host and
//! the conformance suite:
//!
//! | kind      | misbehaviour                                          |
//! |-----------|-------------------------------------------------------|
//! | `sleeper` | stalls before its first answer, ignores `shutdown`    |
//! | `crasher` | exits abruptly when asked for one frame index         |
//! | `jitter`  | returns a different random score on every call        |
//! | `escaper` | writes a file next to the frames, outside its scratch |
//!
//! Mocks run as `fmeter mock-plugin <kind> [param]`. Any host binary can
//! serve them by calling [`maybe_run_as_plugin`] first thing in `main`.

use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use rand::Rng;

use crate::frameseq::Frame;
use crate::plugin::wire::{encode, FrameScore, HardLabel, HostMessage, PluginMessage, PROTOCOL_VERSION};

/// First argument that switches a host binary into plugin mode.
pub const PLUGIN_MODE_ARG: &str = "mock-plugin";
const THRESHOLD: f64 = 0.5;
const MISBEHAVING_BASE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MockSpec {
    Constant(f64),
    Sinusoid { period: u32 },
    Luminance,
    Sleeper { delay: Duration },
    Crasher { at_frame: u32 },
    Jitter,
    Escaper,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MockError {
    #[error("bad-frame: {0}")]
    BadFrame(String),
    #[error("bad mock spec: {0}")]
    BadSpec(String),
}

impl MockSpec {
    pub fn from_args(args: &[String]) -> Result<Self, MockError> {
        let bad = |m: &str| MockError::BadSpec(m.to_string());
        let param = |i: usize| args.get(i).map(String::as_str);
        let spec = match param(0) {
            Some("constant") => {
                let c: f64 = param(1).unwrap_or("0.25").parse().map_err(|_| bad("constant value"))?;
                MockSpec::Constant(c)
            }
            Some("sinusoid") => MockSpec::Sinusoid {
                period: param(1).unwrap_or("10").parse().map_err(|_| bad("sinusoid period"))?,
            },
            Some("luminance") => MockSpec::Luminance,
            Some("sleeper") => MockSpec::Sleeper {
                delay: Duration::from_millis(
                    param(1).unwrap_or("500").parse().map_err(|_| bad("sleeper delay (ms)"))?,
                ),
            },
            Some("crasher") => MockSpec::Crasher {
                at_frame: param(1).unwrap_or("7").parse().map_err(|_| bad("crasher frame"))?,
            },
            Some("jitter") => MockSpec::Jitter,
            Some("escaper") => MockSpec::Escaper,
            Some(other) => return Err(bad(&format!("unknown kind `{other}`"))),
            None => return Err(bad("missing kind")),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MockError> {
        match *self {
            MockSpec::Constant(c) if !(0.0..=1.0).contains(&c) => {
                Err(MockError::BadSpec(format!("constant {c} outside [0, 1]")))
            }
            MockSpec::Sinusoid { period: 0 } => Err(MockError::BadSpec("period must be ≥ 1".into())),
            _ => Ok(()),
        }
    }
}

impl FromStr for MockSpec {
    type Err = MockError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let args: Vec<String> = s.split_whitespace().map(String::from).collect();
        Self::from_args(&args)
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// The soft label a mock assigns to one frame. Only `luminance` looks at
/// the pixels; it returns mean Rec.601 luma / 255, so darker frames score
/// as more likely forged.
pub fn mock_score(spec: &MockSpec, frame: Option<&Frame>, frame_index: u32) -> Result<f64, MockError> {
    Ok(match *spec {
        MockSpec::Constant(c) => c,
        MockSpec::Sinusoid { period } => {
            let phase = 2.0 * std::f64::consts::PI * frame_index as f64 / period as f64;
            round6((1.0 + phase.sin()) / 2.0)
        }
        MockSpec::Luminance => {
            let frame = frame.ok_or_else(|| MockError::BadFrame("no frame data".into()))?;
            round6(frame.mean_luma())
        }
        MockSpec::Jitter => round6(rand::rng().random_range(0.0..=1.0)),
        MockSpec::Sleeper { .. } | MockSpec::Crasher { .. } | MockSpec::Escaper => MISBEHAVING_BASE,
    })
}

/// Runs the plugin side of the protocol over the given streams and returns
/// the process exit code.
pub fn serve(spec: &MockSpec, input: impl BufRead, mut output: impl Write) -> i32 {
    let mut greeted = false;
    let mut answered_any = false;
    for line in input.lines() {
        let Ok(line) = line else { return 1 };
        if line.trim().is_empty() {
            continue;
        }
        let msg: HostMessage = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("mock: unparseable request: {e}");
                return 2;
            }
        };
        let reply = match msg {
            HostMessage::Hello { protocol_version, .. } => {
                if protocol_version != PROTOCOL_VERSION {
                    eprintln!("mock: unsupported protocol {protocol_version}");
                    return 2;
                }
                greeted = true;
                PluginMessage::HelloAck {
                    protocol_version: Some(PROTOCOL_VERSION),
                }
            }
            HostMessage::AnalyzeFrame { .. } if !greeted => {
                eprintln!("mock: analyze_frame before hello");
                return 2;
            }
            HostMessage::AnalyzeFrame {
                frame_path,
                frame_index,
            } => {
                match *spec {
                    MockSpec::Sleeper { delay } if !answered_any => thread::sleep(delay),
                    MockSpec::Crasher { at_frame } if frame_index == at_frame => {
                        eprintln!("mock crasher: giving up at frame {frame_index}");
                        return 101;
                    }
                    MockSpec::Escaper if !answered_any => escape(Path::new(&frame_path)),
                    _ => {}
                }
                answered_any = true;
                analyze(spec, &frame_path, frame_index)
            }
            HostMessage::Shutdown => {
                if let MockSpec::Sleeper { .. } = spec {
                    loop {
                        thread::sleep(Duration::from_secs(3600));
                    }
                }
                return 0;
            }
        };
        if output
            .write_all(encode(&reply).as_bytes())
            .and_then(|_| output.flush())
            .is_err()
        {
            return 1;
        }
    }
    0
}

fn analyze(spec: &MockSpec, frame_path: &str, frame_index: u32) -> PluginMessage {
    let frame = match spec {
        MockSpec::Luminance => match std::fs::read(frame_path)
            .map_err(|e| MockError::BadFrame(e.to_string()))
            .and_then(|b| Frame::parse_ppm(&b).map_err(|e| MockError::BadFrame(e.to_string())))
        {
            Ok(f) => Some(f),
            Err(e) => {
                return PluginMessage::Error {
                    frame_index: Some(frame_index),
                    message: e.to_string(),
                }
            }
        },
        _ => None,
    };
    match mock_score(spec, frame.as_ref(), frame_index) {
        Ok(soft_label) => PluginMessage::FrameScore(FrameScore {
            frame_index,
            soft_label,
            hard_label: HardLabel::from_soft(soft_label, THRESHOLD),
            face_found: true,
        }),
        Err(e) => PluginMessage::Error {
            frame_index: Some(frame_index),
            message: e.to_string(),
        },
    }
}

fn escape(frame_path: &Path) {
    let target = frame_path
        .parent()
        .and_then(Path::parent)
        .unwrap_or_else(|| Path::new("/tmp"))
        .join("escaped-by-mock.txt");
    let _ = std::fs::write(target, b"written outside the scratch directory\n");
}

/// If the process was started as `<exe> mock-plugin <kind> [param]`, serves
/// the protocol on stdio and exits. Otherwise returns.
pub fn maybe_run_as_plugin() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.first().map(String::as_str) != Some(PLUGIN_MODE_ARG) {
        return;
    }
    std::process::exit(run_plugin(&args[1..]));
}

/// Serves a mock described by `args` on stdin/stdout and returns the exit
/// code.
pub fn run_plugin(args: &[String]) -> i32 {
    match MockSpec::from_args(args) {
        Ok(spec) => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            serve(&spec, stdin.lock(), stdout.lock())
        }
        Err(e) => {
            eprintln!("{e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores() {
        assert_eq!(mock_score(&MockSpec::Constant(0.25), None, 9).unwrap(), 0.25);
        assert_eq!(mock_score(&MockSpec::Sinusoid { period: 4 }, None, 1).unwrap(), 1.0);
        assert_eq!(mock_score(&MockSpec::Sinusoid { period: 4 }, None, 2).unwrap(), 0.5);
        let black = Frame::uniform(4, 4, 0);
        let white = Frame::uniform(4, 4, 255);
        assert_eq!(mock_score(&MockSpec::Luminance, Some(&black), 0).unwrap(), 0.0);
        assert_eq!(mock_score(&MockSpec::Luminance, Some(&white), 0).unwrap(), 1.0);
        assert!(mock_score(&MockSpec::Luminance, None, 0).is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("constant 0.25".parse::<MockSpec>().unwrap(), MockSpec::Constant(0.25));
        assert_eq!(
            "sinusoid 10".parse::<MockSpec>().unwrap(),
            MockSpec::Sinusoid { period: 10 }
        );
        assert!("constant 1.5".parse::<MockSpec>().is_err());
        assert!("sinusoid 0".parse::<MockSpec>().is_err());
        assert!("warp".parse::<MockSpec>().is_err());
    }

    fn transcript(spec: MockSpec, requests: &str) -> (i32, String) {
        let mut out = Vec::new();
        let code = serve(&spec, requests.as_bytes(), &mut out);
        (code, String::from_utf8(out).unwrap())
    }

    #[test]
    fn serves_protocol() {
        let req = "{\"type\":\"hello\",\"protocol_version\":1,\"detector_id\":\"m\"}\n\
                   {\"type\":\"analyze_frame\",\"frame_path\":\"/none\",\"frame_index\":0}\n\
                   {\"type\":\"shutdown\"}\n";
        let (code, out) = transcript(MockSpec::Constant(0.25), req);
        assert_eq!(code, 0);
        let lines: Vec<_> = out.lines().collect();
        assert_eq!(lines[0], "{\"type\":\"hello_ack\",\"protocol_version\":1}");
        assert_eq!(
            lines[1],
            "{\"type\":\"frame_score\",\"frame_index\":0,\"soft_label\":0.25,\"hard_label\":\"fake\",\"face_found\":true}"
        );
    }

    #[test]
    fn crasher_exits_at_its_frame() {
        let req = "{\"type\":\"hello\",\"protocol_version\":1,\"detector_id\":\"m\"}\n\
                   {\"type\":\"analyze_frame\",\"frame_path\":\"/none\",\"frame_index\":0}\n\
                   {\"type\":\"analyze_frame\",\"frame_path\":\"/none\",\"frame_index\":1}\n";
        let (code, out) = transcript(MockSpec::Crasher { at_frame: 1 }, req);
        assert_eq!(code, 101);
        assert_eq!(out.lines().count(), 2);
    }

    #[test]
    fn luminance_reports_bad_frames() {
        let req = "{\"type\":\"hello\",\"protocol_version\":1,\"detector_id\":\"m\"}\n\
                   {\"type\":\"analyze_frame\",\"frame_path\":\"/definitely/missing.ppm\",\"frame_index\":0}\n";
        let (_, out) = transcript(MockSpec::Luminance, req);
        assert!(out.lines().nth(1).unwrap().contains("\"type\":\"error\""));
    }

    #[test]
    fn requires_hello_first() {
        let req = "{\"type\":\"analyze_frame\",\"frame_path\":\"/none\",\"frame_index\":0}\n";
        assert_eq!(transcript(MockSpec::Constant(0.5), req).0, 2);
    }

    proptest::proptest! {
        #[test]
        fn sinusoid_in_range_and_pure(index in 0u32..100_000, period in 1u32..1000) {
            let spec = MockSpec::Sinusoid { period };
            let a = mock_score(&spec, None, index).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&a));
            proptest::prop_assert_eq!(a.to_bits(), mock_score(&spec, None, index).unwrap().to_bits());
        }
    }
}
