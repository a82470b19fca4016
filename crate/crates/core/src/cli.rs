//! The `fmeter` command line.
//!
//! Settings come from flags, then `FMETER_*` environment variables, then a
//! `key = value` config file named by `--config` (or `FMETER_CONFIG`). Keys
//! in the file are flag names, with `-` or `_`.
//!
//! Exit codes: 0 success, 2 validation or configuration problems (including
//! `not-ready`), 3 PIN refused or locked out, 4 unknown job, 5 transport or
//! I/O failures.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::client::{Client, VideoSource};
use crate::exchange::{ExchangeDirs, FrontEndExchange};
use crate::frameseq::{generate, write_zip, Pattern};
use crate::gateway::http::{bind, serve, ServeError};
use crate::gateway::{Gateway, GatewayConfig};
use crate::notifier::{FileTransport, Notifier, RetryPolicy, SmtpConfig, SmtpTransport, Transport};
use crate::plugin::{load_registry, verify_conformance, ConformanceOptions, Registry, SandboxConfig};
use crate::scheduler::{Scheduler, SchedulerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_AUTH: i32 = 3;
pub const EXIT_NOT_FOUND: i32 = 4;
pub const EXIT_TRANSPORT: i32 = 5;

/// Maps an error code to the process exit code.
pub fn exit_code_for(code: &str) -> i32 {
    match code {
        "wrong-pin" | "locked-out" => EXIT_AUTH,
        "not-found" => EXIT_NOT_FOUND,
        "transport-error" | "io-error" | "internal-error" | "port-in-use" | "integrity-error" => EXIT_TRANSPORT,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Debug, Parser)]
#[command(name = "fmeter", version, about = "Media-forensics job orchestration")]
pub struct Cli {
    /// key = value settings file.
    #[arg(long, global = true, env = "FMETER_CONFIG")]
    pub config: Option<PathBuf>,
    /// Log filter, e.g. `info` or `fmeter=debug`.
    #[arg(long, global = true, env = "FMETER_LOG", default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the gateway, the back-end scheduler, or both.
    Serve(Box<ServeArgs>),
    /// Submit a video; prints the job id.
    Submit(SubmitArgs),
    /// Print a job's state.
    Status {
        job_id: String,
        #[command(flatten)]
        gw: GatewayArg,
    },
    /// Download and verify a job's result bundle.
    Fetch {
        job_id: String,
        #[arg(long, env = "FMETER_PIN", default_value = "")]
        pin: String,
        /// Output file; defaults to `<job_id>.zip`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        gw: GatewayArg,
    },
    /// Inspect and validate detector plugins.
    #[command(subcommand)]
    Plugin(PluginCommand),
    /// Write a synthetic frame-sequence zip.
    Genmedia(GenmediaArgs),
}

#[derive(Debug, Args)]
pub struct GatewayArg {
    /// Gateway base URL.
    #[arg(long, env = "FMETER_GATEWAY", default_value = "http://127.0.0.1:8080")]
    pub gateway: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Gateway,
    Backend,
    Both,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FMETER_ROLE", value_enum, default_value = "both")]
    pub role: Role,
    /// Exchange root holding `inbox/` and `outbox/`.
    #[arg(long, env = "FMETER_EXCHANGE")]
    pub exchange: PathBuf,
    #[arg(long, env = "FMETER_STATE_DIR", default_value = "fmeter-state")]
    pub state_dir: PathBuf,
    #[arg(long, env = "FMETER_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Registry JSON file; the built-in registry when omitted.
    #[arg(long, env = "FMETER_REGISTRY")]
    pub registry: Option<PathBuf>,
    /// Directory of plugin folders, each with a `manifest.json`.
    #[arg(long, env = "FMETER_PLUGINS")]
    pub plugins: Option<PathBuf>,
    /// Base URL used in notification bodies; defaults to the listen address.
    #[arg(long, env = "FMETER_PUBLIC_URL")]
    pub public_url: Option<String>,
    #[arg(long, env = "FMETER_MAX_UPLOAD_BYTES", default_value_t = crate::model::MAX_VIDEO_BYTES)]
    pub max_upload_bytes: u64,
    #[arg(long, env = "FMETER_ATTEMPT_LIMIT", default_value_t = 10)]
    pub attempt_limit: u32,
    #[arg(long, env = "FMETER_COOLDOWN_SECS", default_value_t = 900)]
    pub cooldown_secs: u64,
    /// Keep consumed envelopes this long; forever when omitted.
    #[arg(long, env = "FMETER_RETENTION_SECS")]
    pub retention_secs: Option<u64>,
    #[arg(long, env = "FMETER_MAX_PARALLEL_JOBS", default_value_t = 2)]
    pub max_parallel_jobs: usize,
    #[arg(long, env = "FMETER_MAX_PARALLEL_DETECTORS", default_value_t = 4)]
    pub max_parallel_detectors: usize,
    #[arg(long, env = "FMETER_DETECTOR_TIMEOUT_SECS", default_value_t = 300.0)]
    pub detector_timeout_secs: f64,
    #[arg(long, env = "FMETER_POLL_INTERVAL_MS", default_value_t = 500)]
    pub poll_interval_ms: u64,
    /// Directory for file-transport mail; `<state-dir>/mail` by default.
    #[arg(long, env = "FMETER_MAIL_DIR")]
    pub mail_dir: Option<PathBuf>,
    /// SMTP relay; when set, mail goes there instead of files.
    #[arg(long, env = "FMETER_SMTP_HOST")]
    pub smtp_host: Option<String>,
    #[arg(long, env = "FMETER_SMTP_PORT", default_value_t = 25)]
    pub smtp_port: u16,
    #[arg(long, env = "FMETER_SMTP_USER")]
    pub smtp_user: Option<String>,
    #[arg(long, env = "FMETER_SMTP_PASSWORD", hide_env_values = true)]
    pub smtp_password: Option<String>,
    #[arg(long, env = "FMETER_SMTP_FROM", default_value = "fmeter@localhost")]
    pub smtp_from: String,
    /// Base delay between notification retries.
    #[arg(long, env = "FMETER_MAIL_BACKOFF_MS", default_value_t = 1000)]
    pub mail_backoff_ms: u64,
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    /// Video file (frame-sequence zip or any other video).
    #[arg(conflicts_with = "url", required_unless_present = "url")]
    pub file: Option<PathBuf>,
    #[arg(long)]
    pub url: Option<String>,
    /// Comma-separated detector ids.
    #[arg(long, default_value = "")]
    pub detectors: String,
    #[arg(long, env = "FMETER_EMAIL", default_value = "")]
    pub email: String,
    #[arg(long, env = "FMETER_PIN", default_value = "")]
    pub pin: String,
    #[command(flatten)]
    pub gw: GatewayArg,
}

#[derive(Debug, Subcommand)]
pub enum PluginCommand {
    /// Run the conformance suite against a plugin manifest.
    Validate {
        manifest: PathBuf,
        /// Per-check time limit in seconds.
        #[arg(long, default_value_t = 30)]
        check_timeout: u64,
    },
    /// Print the registry as a table.
    List {
        /// Registry JSON file; the built-in registry when omitted.
        registry: Option<PathBuf>,
        #[arg(long, env = "FMETER_PLUGINS")]
        plugins: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct GenmediaArgs {
    #[arg(long, default_value_t = 20)]
    pub frames: u32,
    #[arg(long, default_value = "gradient")]
    pub pattern: Pattern,
    #[arg(long, default_value_t = 32)]
    pub width: u32,
    #[arg(long, default_value_t = 24)]
    pub height: u32,
    #[arg(long, default_value_t = 25.0)]
    pub fps: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its error code; printed as `error: <code>`.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        CliError {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

impl From<crate::client::ClientError> for CliError {
    fn from(e: crate::client::ClientError) -> Self {
        let message = match &e {
            crate::client::ClientError::Api { message, .. } => message.clone(),
            other => other.to_string(),
        };
        CliError {
            code: e.code().to_string(),
            message,
        }
    }
}

/// Reads `key = value` lines and exports each as `FMETER_<KEY>` unless the
/// variable is already set, so flags and the environment take precedence.
pub fn apply_config_file(path: &Path) -> Result<usize, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("config-error", format!("{}: {e}", path.display())))?;
    let mut applied = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::new(
                "config-error",
                format!("{}:{}: expected key = value", path.display(), n + 1),
            ));
        };
        let var = format!("FMETER_{}", key.trim().to_ascii_uppercase().replace('-', "_"));
        if std::env::var_os(&var).is_none() {
            std::env::set_var(var, value.trim().trim_matches('"'));
            applied += 1;
        }
    }
    Ok(applied)
}

fn config_path_from(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    std::env::var_os("FMETER_CONFIG").map(PathBuf::from)
}

/// Entry point for the binary; returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    if let Some(path) = config_path_from(&args) {
        if let Err(e) = apply_config_file(&path) {
            return report(e);
        }
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(&cli.log)),
        )
        .with_writer(std::io::stderr)
        .try_init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> i32 {
    eprintln!("error: {}", e.code);
    if !e.message.is_empty() && e.message != e.code {
        eprintln!("  {}", e.message);
    }
    exit_code_for(&e.code)
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Serve(args) => cmd_serve(*args),
        Command::Submit(args) => cmd_submit(args),
        Command::Status { job_id, gw } => {
            let s = Client::new(&gw.gateway).status(&job_id)?;
            println!("{}", s.state);
            if let Some(d) = s.detail {
                println!("detail: {d}");
            }
            Ok(EXIT_OK)
        }
        Command::Fetch { job_id, pin, out, gw } => {
            let bundle = Client::new(&gw.gateway).fetch(&job_id, &pin)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{job_id}.zip")));
            std::fs::write(&out, &bundle.bytes).map_err(|e| CliError::new("io-error", e.to_string()))?;
            println!("wrote {} ({} bytes, sha256 {})", out.display(), bundle.bytes.len(), bundle.sha256);
            println!("state: {}", bundle.summary.state);
            for d in &bundle.summary.detectors {
                match (d.aggregate_score, &d.error_note) {
                    (Some(s), _) => println!("  {:<20} {} aggregate {s:.6}", d.detector_id, d.outcome),
                    (None, Some(n)) => println!("  {:<20} {} {n}", d.detector_id, d.outcome),
                    (None, None) => println!("  {:<20} {}", d.detector_id, d.outcome),
                }
            }
            Ok(EXIT_OK)
        }
        Command::Plugin(PluginCommand::Validate { manifest, check_timeout }) => {
            let descriptor = crate::plugin::registry::load_manifest(&manifest)
                .map_err(|e| CliError::new(e.code(), e.to_string()))?;
            let scratch = tempfile::tempdir().map_err(|e| CliError::new("io-error", e.to_string()))?;
            let report = verify_conformance(
                &descriptor,
                &SandboxConfig::new(scratch.path()),
                &ConformanceOptions {
                    check_timeout: Duration::from_secs(check_timeout),
                    work_dir: None,
                },
            );
            println!("{report}");
            Ok(if report.passed() { EXIT_OK } else { EXIT_VALIDATION })
        }
        Command::Plugin(PluginCommand::List { registry, plugins }) => {
            let registry = load_registry_from(registry.as_deref(), plugins.as_deref())?;
            println!("{:<16} {:<16} {:<8} {:<8} SOURCE", "ID", "NAME", "VERSION", "RELEASE");
            for d in registry.entries() {
                println!(
                    "{:<16} {:<16} {:<8} {:<8} {}",
                    d.detector_id, d.display_name, d.version, d.release_date, d.source_repo
                );
            }
            Ok(EXIT_OK)
        }
        Command::Genmedia(args) => {
            if args.frames == 0 || args.width == 0 || args.height == 0 {
                return Err(CliError::new("invalid-argument", "frames, width and height must be positive"));
            }
            let frames = generate(args.frames, args.pattern, args.width, args.height);
            let bytes = write_zip(&frames, args.fps).map_err(|e| CliError::new("invalid-argument", e.to_string()))?;
            std::fs::write(&args.out, &bytes).map_err(|e| CliError::new("io-error", e.to_string()))?;
            println!("wrote {} ({} frames, {} bytes)", args.out.display(), args.frames, bytes.len());
            Ok(EXIT_OK)
        }
    }
}

fn cmd_submit(args: SubmitArgs) -> Result<i32, CliError> {
    let detectors: Vec<String> = args
        .detectors
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let source = match (&args.file, &args.url) {
        (Some(f), _) => VideoSource::File(f),
        (None, Some(u)) => VideoSource::Url(u),
        (None, None) => return Err(CliError::new("bad-request", "a file or --url is required")),
    };
    let id = Client::new(&args.gw.gateway).submit(source, &detectors, &args.email, &args.pin)?;
    println!("{id}");
    Ok(EXIT_OK)
}

fn load_registry_from(path: Option<&Path>, plugins: Option<&Path>) -> Result<Registry, CliError> {
    let reg_err = |e: crate::plugin::RegistryError| CliError::new(e.code(), e.to_string());
    let mut registry = match path {
        Some(p) => Registry::from_descriptors(load_registry(p).map_err(reg_err)?).map_err(reg_err)?,
        None => Registry::shipped(),
    };
    if let Some(dir) = plugins {
        registry = registry.with_plugin_dir(dir).map_err(reg_err)?;
    }
    Ok(registry)
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::new("config-error", msg)
}

/// Creates the exchange root if only its last component is missing.
fn exchange_dirs(root: &Path) -> Result<ExchangeDirs, CliError> {
    if root.exists() && !root.is_dir() {
        return Err(config_error(format!("exchange {} is not a directory", root.display())));
    }
    if !root.exists() {
        let parent_ok = root
            .parent()
            .map(|p| p.as_os_str().is_empty() || p.is_dir())
            .unwrap_or(false);
        if !parent_ok {
            return Err(config_error(format!("exchange {}: parent directory does not exist", root.display())));
        }
        std::fs::create_dir(root).map_err(|e| config_error(format!("exchange {}: {e}", root.display())))?;
    }
    ExchangeDirs::under(root).map_err(|e| config_error(e.to_string()))
}

fn cmd_serve(args: ServeArgs) -> Result<i32, CliError> {
    let dirs = exchange_dirs(&args.exchange)?;
    std::fs::create_dir_all(&args.state_dir).map_err(|e| config_error(format!("state dir: {e}")))?;
    let registry = Arc::new(load_registry_from(args.registry.as_deref(), args.plugins.as_deref())?);
    let stop = Arc::new(AtomicBool::new(false));

    let backend = if matches!(args.role, Role::Backend | Role::Both) {
        let config = SchedulerConfig {
            max_parallel_jobs: args.max_parallel_jobs,
            max_parallel_detectors_per_job: args.max_parallel_detectors,
            detector_timeout: Duration::try_from_secs_f64(args.detector_timeout_secs)
                .map_err(|e| config_error(format!("detector timeout: {e}")))?,
            poll_interval: Duration::from_millis(args.poll_interval_ms),
            retention: args.retention_secs.map(Duration::from_secs),
        };
        let state = args.state_dir.join("backend");
        let sandbox = SandboxConfig::new(state.join("scratch"));
        let scheduler = Scheduler::new(&dirs, registry.clone(), sandbox, config, &state)
            .map_err(|e| config_error(e.to_string()))?;
        let stop = stop.clone();
        Some(std::thread::spawn(move || scheduler.run_until(&stop)))
    } else {
        None
    };

    let result = if matches!(args.role, Role::Gateway | Role::Both) {
        run_gateway(&args, &dirs, registry, stop.clone())
    } else {
        println!("fmeter: backend polling {}", args.exchange.display());
        wait_for_ctrl_c(stop.clone());
        Ok(())
    };
    stop.store(true, Ordering::SeqCst);
    if let Some(h) = backend {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => tracing::error!(error = %e, "scheduler stopped with an error"),
            Err(_) => tracing::error!("scheduler thread panicked"),
        }
    }
    result.map(|_| EXIT_OK)
}

fn wait_for_ctrl_c(stop: Arc<AtomicBool>) {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("runtime");
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    stop.store(true, Ordering::SeqCst);
}

fn run_gateway(
    args: &ServeArgs,
    dirs: &ExchangeDirs,
    registry: Arc<Registry>,
    stop: Arc<AtomicBool>,
) -> Result<(), CliError> {
    let state = args.state_dir.join("gateway");
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io-error", e.to_string()))?;
    rt.block_on(async move {
        let listener = bind(args.listen).await.map_err(|e| match e {
            ServeError::PortInUse(a) => CliError::new("port-in-use", format!("{a} is already in use")),
            ServeError::Io(e) => CliError::new("io-error", e.to_string()),
        })?;
        let addr = listener.local_addr().map_err(|e| CliError::new("io-error", e.to_string()))?;

        let transport: Arc<dyn Transport> = match &args.smtp_host {
            Some(host) => Arc::new(
                SmtpTransport::new(&SmtpConfig {
                    host: host.clone(),
                    port: args.smtp_port,
                    username: args.smtp_user.clone(),
                    password: args.smtp_password.clone(),
                    from: args.smtp_from.clone(),
                })
                .map_err(|e| config_error(e.to_string()))?,
            ),
            None => Arc::new(
                FileTransport::new(args.mail_dir.clone().unwrap_or_else(|| state.join("mail")))
                    .map_err(|e| config_error(format!("mail dir: {e}")))?,
            ),
        };
        let notifier = Notifier::start(
            transport,
            RetryPolicy {
                max_retries: 3,
                base_backoff: Duration::from_millis(args.mail_backoff_ms),
            },
            state.join("dead-letter.jsonl"),
        );
        let mut config = GatewayConfig::new(&state);
        config.max_upload_bytes = args.max_upload_bytes;
        config.attempt_limit = args.attempt_limit;
        config.cooldown = Duration::from_secs(args.cooldown_secs);
        config.public_url = args.public_url.clone().unwrap_or_else(|| format!("http://{addr}"));
        config.retention = args.retention_secs.map(Duration::from_secs);
        config.sync_interval = Duration::from_millis(args.poll_interval_ms.max(50));
        let gateway = Arc::new(
            Gateway::new(config, FrontEndExchange::new(dirs), registry, notifier.clone())
                .map_err(|e| config_error(format!("gateway state: {e}")))?,
        );

        println!("fmeter: gateway listening on http://{addr}");
        use std::io::Write as _;
        let _ = std::io::stdout().flush();

        let shutdown = async move {
            let _ = tokio::signal::ctrl_c().await;
            stop.store(true, Ordering::SeqCst);
        };
        serve(gateway, listener, shutdown)
            .await
            .map_err(|e| CliError::new("io-error", e.to_string()))?;
        tokio::task::spawn_blocking(move || notifier.shutdown())
            .await
            .map_err(|e| CliError::new("io-error", e.to_string()))?;
        Ok(())
    })
}
