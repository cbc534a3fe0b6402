//! Command-line surface. [`run`] parses arguments and dispatches; the binary
//! only maps its result to a process exit code.
//!
//! Exit codes: 0 on success, 2 for unusable input (arguments, config, CSV,
//! request files, snapshots), 1 for failures after work has started.

use std::ffi::OsString;
use std::fmt;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::protocol::{serve_stream, serve_tcp, Client, ScoreRequest, Scorer, ScoringModel, DEFAULT_UNION_CAP};
use crate::telemetry::{read_csv, summarize};
use crate::trainer::run_experiment;
use crate::verify::{grad_check_suite, oracle_suite, DEFAULT_SEED};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "opdlab", version, about = "On-policy distillation laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Transport {
    /// TCP stream socket at `--endpoint`.
    Socket,
    /// Standard input and output.
    Pipe,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train according to a recipe and write telemetry, snapshots and evaluation.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `runs/<config stem>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference checks of the objective gradients.
    GradCheck {
        /// Substring of an objective name, e.g. `topk` or `jsd`.
        #[arg(long)]
        objective: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Also write `grad_check.json` here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Every oracle check; prints a JSON report, exits 1 if any check fails.
    OracleSuite {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Also write `oracle_report.json` here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Serve a policy snapshot or oracle binding over the scoring protocol.
    ServeTeacher {
        #[arg(long)]
        snapshot: PathBuf,
        /// `host:port` for the socket transport.
        #[arg(long, default_value = "127.0.0.1:7878")]
        endpoint: String,
        #[arg(long, value_enum, default_value_t = Transport::Socket)]
        transport: Transport,
        /// Largest union served; larger requests are refused.
        #[arg(long, default_value_t = DEFAULT_UNION_CAP)]
        union_cap: usize,
    },
    /// Send JSON requests to a teacher server and print one JSON response per line.
    QueryTeacher {
        /// `host:port` for the socket transport; the snapshot path for the pipe
        /// transport, which starts its own server.
        #[arg(long)]
        endpoint: String,
        /// JSON file holding one request object or an array of them.
        #[arg(long)]
        request: PathBuf,
        #[arg(long, value_enum, default_value_t = Transport::Socket)]
        transport: Transport,
    },
    /// Summarize a telemetry CSV.
    Report {
        telemetry: PathBuf,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    fn input(category: &'static str, message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_INPUT,
            category,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            category: "runtime",
            message: message.to_string(),
        }
    }

    /// `error: <category>: <message>` on one line.
    pub fn line(&self) -> String {
        let msg: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: {}: {msg}", self.category)
    }
}

fn load_error(e: Error) -> CliError {
    match e {
        Error::Config { .. } => CliError::input("config", e),
        Error::File { .. } => CliError::input("file", e),
        other => CliError::input("input", other),
    }
}

/// Parses `args` (program name first) and executes. Normal output goes to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{e}").map_err(CliError::runtime)?;
            return Ok(());
        }
        Err(e) => return Err(CliError::input("usage", e.to_string().lines().next().unwrap_or("invalid arguments"))),
    };
    execute(cli.command, out)
}

fn execute(cmd: Cmd, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Cmd::Run { config, seed, out_dir } => cmd_run(&config, seed, out_dir, out),
        Cmd::GradCheck { objective, seed, out_dir } => {
            let report = grad_check_suite(objective.as_deref(), seed).map_err(|e| CliError::input("usage", e))?;
            emit_report(&report.to_json(), report.pass, out_dir.as_deref(), "grad_check.json", out)
        }
        Cmd::OracleSuite { seed, out_dir } => {
            let report = oracle_suite(seed).map_err(CliError::runtime)?;
            emit_report(&report.to_json(), report.pass, out_dir.as_deref(), "oracle_report.json", out)
        }
        Cmd::ServeTeacher {
            snapshot,
            endpoint,
            transport,
            union_cap,
        } => cmd_serve(&snapshot, &endpoint, transport, union_cap),
        Cmd::QueryTeacher {
            endpoint,
            request,
            transport,
        } => cmd_query(&endpoint, &request, transport, out),
        Cmd::Report { telemetry } => {
            let file = std::fs::File::open(&telemetry).map_err(|e| load_error(Error::file(&telemetry, e)))?;
            let rows = read_csv(BufReader::new(file))
                .map_err(|e| CliError::input("csv", format!("{}: {e}", telemetry.display())))?;
            write!(out, "{}", summarize(&rows).render()).map_err(CliError::runtime)
        }
    }
}

fn cmd_run(config: &Path, seed: Option<u64>, out_dir: Option<PathBuf>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config).map_err(load_error)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dir = out_dir.unwrap_or_else(|| {
        let stem = config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
        Path::new("runs").join(stem)
    });
    let (output, files) = run_experiment(&cfg, &dir).map_err(CliError::runtime)?;
    let fin = &output.report.final_eval;
    let w = |out: &mut dyn Write, k: &str, v: String| writeln!(out, "{k:<12}{v}").map_err(CliError::runtime);
    w(out, "accuracy", format!("{:.4}", fin.accuracy))?;
    if let Some(tv) = fin.consensus_tv_max {
        w(out, "tv max", format!("{tv:.4}"))?;
    }
    w(out, "telemetry", files.telemetry.display().to_string())?;
    w(out, "policy", files.policy.display().to_string())?;
    w(out, "eval", files.eval.display().to_string())?;
    if let Some(t) = &files.teacher {
        w(out, "teacher", t.display().to_string())?;
    }
    Ok(())
}

fn emit_report(json: &str, pass: bool, dir: Option<&Path>, name: &str, out: &mut dyn Write) -> Result<(), CliError> {
    writeln!(out, "{json}").map_err(CliError::runtime)?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(Error::file(dir, e)))?;
        let path = dir.join(name);
        std::fs::write(&path, format!("{json}\n")).map_err(|e| CliError::runtime(Error::file(&path, e)))?;
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::runtime("one or more oracle checks failed"))
    }
}

fn cmd_serve(snapshot: &Path, endpoint: &str, transport: Transport, union_cap: usize) -> Result<(), CliError> {
    let model = ScoringModel::load(snapshot).map_err(load_error)?;
    let scorer = Scorer::new(model, union_cap);
    match transport {
        Transport::Pipe => {
            let stdin = io::stdin().lock();
            let stdout = io::stdout().lock();
            serve_stream(&scorer, stdin, stdout).map(|_| ()).map_err(CliError::runtime)
        }
        Transport::Socket => {
            let listener = TcpListener::bind(endpoint).map_err(|e| CliError::input("endpoint", format!("{endpoint}: {e}")))?;
            let addr = listener.local_addr().map_err(CliError::runtime)?;
            eprintln!("listening on {addr}");
            serve_tcp(Arc::new(scorer), listener).map_err(CliError::runtime)
        }
    }
}

fn read_requests(path: &Path) -> Result<Vec<ScoreRequest>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| load_error(Error::file(path, e)))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::input("request", format!("{}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    parsed.map_err(|e| CliError::input("request", format!("{}: {e}", path.display())))
}

fn cmd_query(endpoint: &str, request: &Path, transport: Transport, out: &mut dyn Write) -> Result<(), CliError> {
    let requests = read_requests(request)?;
    let mut print = |resp| -> Result<(), CliError> {
        let line = serde_json::to_string(&resp).expect("responses serialize");
        writeln!(out, "{line}").map_err(CliError::runtime)
    };
    match transport {
        Transport::Socket => {
            let mut client = Client::connect(endpoint).map_err(|e| CliError::runtime(format!("{endpoint}: {e}")))?;
            for req in &requests {
                print(client.query(req).map_err(CliError::runtime)?)?;
            }
        }
        Transport::Pipe => {
            if !Path::new(endpoint).is_file() {
                return Err(CliError::input("file", format!("{endpoint}: no such snapshot")));
            }
            let exe = std::env::current_exe().map_err(CliError::runtime)?;
            let mut cmd = Command::new(exe);
            cmd.args(["serve-teacher", "--transport", "pipe", "--snapshot", endpoint]);
            let mut client = Client::spawn(cmd).map_err(CliError::runtime)?;
            for req in &requests {
                print(client.query(req).map_err(CliError::runtime)?)?;
            }
            client.finish().map_err(CliError::runtime)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (Result<(), CliError>, String) {
        let mut out = Vec::new();
        let r = run(std::iter::once("opdlab").chain(args.iter().copied()), &mut out);
        (r, String::from_utf8(out).unwrap())
    }

    #[test]
    fn missing_config_exits_2_naming_the_path() {
        let (r, _) = run_args(&["run", "--config", "/nonexistent/recipe.toml"]);
        let e = r.unwrap_err();
        assert_eq!(e.code, EXIT_INPUT);
        assert!(e.line().contains("/nonexistent/recipe.toml"));
        assert!(!e.line().contains('\n'));
    }

    #[test]
    fn bad_config_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seed = 1\n[rollout]\nbatch = 3\n").unwrap();
        let e = run_args(&["run", "--config", path.to_str().unwrap()]).0.unwrap_err();
        assert_eq!(e.code, EXIT_INPUT);
        assert_eq!(e.category, "config");
        assert!(e.message.contains("rollout.batch"));
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let e = run_args(&["frobnicate"]).0.unwrap_err();
        assert_eq!((e.code, e.category), (EXIT_INPUT, "usage"));
    }

    #[test]
    fn malformed_csv_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "not,a,telemetry,file\n1,2,3,4\n").unwrap();
        let e = run_args(&["report", path.to_str().unwrap()]).0.unwrap_err();
        assert_eq!((e.code, e.category), (EXIT_INPUT, "csv"));
    }

    #[test]
    fn grad_check_filter() {
        let (r, out) = run_args(&["grad-check", "--objective", "jsd"]);
        r.unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["checks"].as_array().unwrap().len(), 1);
        assert_eq!(v["pass"], true);
        assert_eq!(run_args(&["grad-check", "--objective", "zzz"]).0.unwrap_err().code, EXIT_INPUT);
    }

    #[test]
    fn request_file_accepts_one_or_many() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("one.json");
        std::fs::write(&one, r#"{"request_id":1,"prompt":0,"response":[1],"token_ids_logprob":[1]}"#).unwrap();
        assert_eq!(read_requests(&one).unwrap().len(), 1);
        let many = dir.path().join("many.json");
        std::fs::write(
            &many,
            r#"[{"request_id":1,"prompt":0,"response":[1],"token_ids_logprob":[1]},
                {"request_id":2,"prompt":0,"pi":[3],"response":[1,2],"token_ids_logprob":[1,2]}]"#,
        )
        .unwrap();
        assert_eq!(read_requests(&many).unwrap().len(), 2);
        std::fs::write(&many, r#"{"request_id":1}"#).unwrap();
        assert_eq!(read_requests(&many).unwrap_err().code, EXIT_INPUT);
    }
}
