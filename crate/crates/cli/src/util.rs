use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;
pub const EXIT_PARTIAL: u8 = 2;

/// An error with a machine-readable kind.
#[derive(Debug)]
pub struct Fatal {
    pub kind: &'static str,
    pub message: String,
}

impl Fatal {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Fatal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for Fatal {}

pub fn fatal(kind: &'static str, message: impl Into<String>) -> anyhow::Error {
    Fatal::new(kind, message).into()
}

/// Prints `{"error": kind, "message": ...}` on stderr and returns exit 1.
pub fn report_fatal(e: &anyhow::Error) -> ExitCode {
    let (kind, message) = match e.downcast_ref::<Fatal>() {
        Some(f) => (f.kind, f.message.clone()),
        None => ("Error", format!("{e:#}")),
    };
    eprintln!("{}", serde_json::json!({"error": kind, "message": message}));
    ExitCode::from(1)
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| fatal("InputError", format!("{}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| fatal("OutputError", format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Pretty JSON on stdout; a closed pipe is not an error.
pub fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// `"a,b, c"` -> `["a", "b", "c"]`.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_string)
        .collect()
}

/// `"2-5"` or `"2..5"` -> `(2, 5)`; a single number gives `(n, n)`.
pub fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = if s.contains("..") {
        s.split("..").collect()
    } else {
        s.split('-').collect()
    };
    let nums: std::result::Result<Vec<usize>, _> =
        parts.iter().map(|p| p.trim().parse::<usize>()).collect();
    match nums.map_err(|e| e.to_string())?.as_slice() {
        [n] => Ok((*n, *n)),
        [a, b] if a <= b => Ok((*a, *b)),
        _ => Err(format!("expected a range like 2-5, got `{s}`")),
    }
}
