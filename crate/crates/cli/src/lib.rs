//! `protlm` command-line pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable or malformed input, mismatched artifacts), 3 numeric failure
//! (non-finite loss).

pub mod args;
pub mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::Parser;

use protlm::{ErrorCategory, RunConfig};

use args::{Cli, Command, ReplayArgs};
use manifest::{sha256_file, with_suffix, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Misuse of the command line that the parser cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<protlm::Error>() {
            return match e.category() {
                ErrorCategory::Usage => EXIT_USAGE,
                ErrorCategory::Data => EXIT_DATA,
                ErrorCategory::Numeric => EXIT_NUMERIC,
            };
        }
    }
    EXIT_DATA
}

/// Parse `argv` (program name first), run the command, and return the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<String> {
    if let Command::Replay(a) = &cmd {
        return replay(a);
    }
    let cfg = resolve_config(&cmd)?;
    run_recorded(&cmd, &cfg)
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve_config(cmd: &Command) -> Result<RunConfig> {
    let args = cmd.config_args().expect("recordable command");
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| protlm::Error::from(e).in_file(p))?;
            RunConfig::parse(&text).map_err(|e| e.in_file(p))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    cfg.apply_overrides(&cmd.flag_overrides())?;
    Ok(cfg)
}

fn primary_output(cmd: &mut Command) -> PathBuf {
    cmd.outputs_mut()[0].clone()
}

pub fn manifest_path(cmd: &Command) -> PathBuf {
    with_suffix(&primary_output(&mut cmd.clone()), "manifest.json")
}

/// Run a command and write its manifest next to the primary output.
fn run_recorded(cmd: &Command, cfg: &RunConfig) -> Result<String> {
    let outcome = commands::execute(cmd, cfg)?;
    let manifest = Manifest {
        tool: format!("protlm {}", env!("CARGO_PKG_VERSION")),
        command: cmd.clone(),
        config: cfg.clone(),
        seed: cfg.seed,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
    };
    let path = manifest_path(cmd);
    manifest.save(&path)?;
    Ok(format!("{}\nmanifest: {}", outcome.summary, path.display()))
}

fn redirect(path: &Path, dir: &Path) -> PathBuf {
    dir.join(path.file_name().unwrap_or(path.as_os_str()))
}

fn replay(a: &ReplayArgs) -> Result<String> {
    let m = Manifest::load(&a.manifest)?;
    if matches!(m.command, Command::Replay(_)) {
        anyhow::bail!(UsageError("a replay cannot be replayed".into()));
    }
    for input in m.inputs.iter().filter(|i| i.role != "config") {
        let now = sha256_file(&input.path).with_context(|| format!("input {}", input.role))?;
        if now != input.sha256 {
            return Err(protlm::Error::invalid(format!(
                "input {} changed since the recorded run",
                input.role
            ))
            .in_file(&input.path)
            .into());
        }
    }
    let dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a.manifest.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    std::fs::create_dir_all(&dir).map_err(|e| protlm::Error::from(e).in_file(&dir))?;
    let mut cmd = m.command.clone();
    for p in cmd.outputs_mut() {
        *p = redirect(p, &dir);
    }
    let outcome = commands::execute(&cmd, &m.config)?;
    let mut lines = Vec::new();
    let mut differs = Vec::new();
    for want in &m.outputs {
        let got = outcome.outputs.iter().find(|o| o.role == want.role);
        let same = got.is_some_and(|g| g.sha256 == want.sha256);
        lines.push(format!(
            "{} {}",
            if same { "identical" } else { "DIFFERS  " },
            want.role
        ));
        if !same {
            differs.push(want.role.clone());
        }
    }
    if !differs.is_empty() {
        return Err(protlm::Error::invalid(format!(
            "replay of {} produced different {}",
            m.command.name(),
            differs.join(", ")
        ))
        .into());
    }
    Ok(format!(
        "replayed {} into {}\n{}",
        m.command.name(),
        dir.display(),
        lines.join("\n")
    ))
}
