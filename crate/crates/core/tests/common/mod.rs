//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use fmeter::exchange::{ExchangeDirs, FrontEndExchange};
use fmeter::frameseq::{generate, write_zip, Pattern};
use fmeter::gateway::{Gateway, GatewayConfig, StagedVideo};
use fmeter::model::VideoOrigin;
use fmeter::notifier::{FileTransport, Notifier, RetryPolicy};
use fmeter::plugin::{Registry, SandboxConfig};
use fmeter::scheduler::{Scheduler, SchedulerConfig};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_fmeter"))
}

pub fn plugins_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/plugins"))
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures")).join(name)
}

/// The binary with a clean `FMETER_*` environment.
pub fn fmeter() -> Command {
    let mut cmd = Command::new(bin());
    for (k, _) in std::env::vars_os() {
        if k.to_string_lossy().starts_with("FMETER_") {
            cmd.env_remove(k);
        }
    }
    cmd.env("FMETER_LOG", "warn");
    cmd
}

pub fn registry() -> Arc<Registry> {
    Arc::new(Registry::shipped().with_plugin_dir(&plugins_dir()).expect("plugins load"))
}

pub fn sandbox(root: &Path) -> SandboxConfig {
    SandboxConfig::new(root.join("scratch")).with_self_exe(bin())
}

pub fn frames_zip(frames: u32, pattern: Pattern) -> Vec<u8> {
    write_zip(&generate(frames, pattern, 16, 12), 25.0).unwrap()
}

/// A `serve` child process; killed on drop.
pub struct Server {
    child: Child,
    pub url: String,
    pub exchange: PathBuf,
    pub state: PathBuf,
}

impl Server {
    /// Starts `serve --listen 127.0.0.1:0` under `root` and waits until it
    /// reports ready. `url` is empty for `--role backend`.
    pub fn start(root: &Path, extra: &[&str]) -> Server {
        Self::start_with_exchange(root, &root.join("exchange"), extra)
    }

    pub fn start_with_exchange(root: &Path, exchange: &Path, extra: &[&str]) -> Server {
        let exchange = exchange.to_path_buf();
        let state = root.join("state");
        let log = std::fs::File::create(root.join("serve.log")).unwrap();
        let mut child = fmeter()
            .env("FMETER_LOG", "info")
            .arg("serve")
            .arg("--exchange")
            .arg(&exchange)
            .arg("--state-dir")
            .arg(&state)
            .args(["--listen", "127.0.0.1:0", "--poll-interval-ms", "100"])
            .arg("--plugins")
            .arg(plugins_dir())
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(log)
            .spawn()
            .expect("spawn serve");
        let stdout = child.stdout.take().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(Result::ok) {
                if let Some(url) = line.split("listening on ").nth(1) {
                    let _ = tx.send(url.trim().to_string());
                } else if line.contains("backend polling") {
                    let _ = tx.send(String::new());
                }
            }
        });
        let url = match rx.recv_timeout(Duration::from_secs(30)) {
            Ok(u) => u,
            Err(_) => {
                let _ = child.kill();
                let log = std::fs::read_to_string(root.join("serve.log")).unwrap_or_default();
                panic!("server did not start:\n{log}");
            }
        };
        Server {
            child,
            url,
            exchange,
            state,
        }
    }

    /// Kills the process without any shutdown.
    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn mail_dir(&self) -> PathBuf {
        self.state.join("gateway").join("mail")
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Gateway and scheduler in one process, sharing an exchange.
pub struct Stack {
    pub root: PathBuf,
    pub dirs: ExchangeDirs,
    pub gateway: Arc<Gateway>,
    pub scheduler: Scheduler,
    pub sandbox: SandboxConfig,
    pub mail_dir: PathBuf,
}

impl Stack {
    pub fn new(root: &Path) -> Stack {
        Self::with(root, |_| {}, |_| {})
    }

    pub fn with(
        root: &Path,
        gw: impl FnOnce(&mut GatewayConfig),
        sc: impl FnOnce(&mut SchedulerConfig),
    ) -> Stack {
        Self::build(root, registry(), gw, sc)
    }

    pub fn build(
        root: &Path,
        registry: Arc<Registry>,
        gw: impl FnOnce(&mut GatewayConfig),
        sc: impl FnOnce(&mut SchedulerConfig),
    ) -> Stack {
        let dirs = ExchangeDirs::under(&root.join("exchange")).unwrap();
        let mut gconf = GatewayConfig::new(root.join("gateway"));
        gconf.sync_interval = Duration::from_millis(50);
        gw(&mut gconf);
        let mut sconf = SchedulerConfig {
            poll_interval: Duration::from_millis(20),
            ..SchedulerConfig::default()
        };
        sc(&mut sconf);
        let mail_dir = root.join("mail");
        let transport = Arc::new(FileTransport::new(&mail_dir).unwrap());
        let policy = RetryPolicy {
            base_backoff: Duration::from_millis(1),
            ..RetryPolicy::default()
        };
        let notifier = Notifier::start(transport, policy, root.join("dead-letter.jsonl"));
        let gateway = Arc::new(Gateway::new(gconf, FrontEndExchange::new(&dirs), registry.clone(), notifier).unwrap());
        let sandbox = sandbox(root);
        let scheduler = Scheduler::new(&dirs, registry, sandbox.clone(), sconf, &root.join("backend")).unwrap();
        Stack {
            root: root.to_path_buf(),
            dirs,
            gateway,
            scheduler,
            sandbox,
            mail_dir,
        }
    }

    /// Writes `bytes` into the gateway's upload area as an uploaded video.
    pub fn stage(&self, bytes: &[u8]) -> StagedVideo {
        let tmp = tempfile::Builder::new()
            .prefix("upload-")
            .tempfile_in(self.gateway.upload_dir())
            .unwrap();
        std::fs::write(tmp.path(), bytes).unwrap();
        let (_, path) = tmp.keep().unwrap();
        StagedVideo {
            path,
            byte_size: bytes.len() as u64,
            origin: VideoOrigin::DirectUpload,
        }
    }

    pub fn submit(&self, bytes: &[u8], detectors: &[&str], pin: &str) -> String {
        self.gateway
            .submit(
                self.stage(bytes),
                detectors.iter().map(|s| s.to_string()).collect(),
                "analyst@example.org",
                pin,
            )
            .unwrap()
            .to_string()
    }

    /// Runs the scheduler until the inbox is empty, then syncs the gateway.
    pub fn process(&self) {
        self.scheduler.drain().unwrap();
        self.gateway.sync_outbox();
    }
}

/// Every file the file transport wrote, as (name, contents), sorted.
pub fn mail_files(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = match std::fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(Result::ok)
            .filter(|e| e.path().is_file())
            .map(|e| {
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read_to_string(e.path()).unwrap(),
                )
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    out.sort();
    out
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = std::time::Instant::now() + timeout;
    while std::time::Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    f()
}
