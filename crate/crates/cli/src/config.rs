//! Flat `key = value` config files, merged into the argument list so that
//! command-line flags win.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key = value` lines; `#` starts a comment line. Keys are long flag
/// names without the leading dashes.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "config line {}: expected `key = value`, got `{line}`",
                i + 1
            );
        };
        let key = key.trim().trim_start_matches("--");
        if key.is_empty() || key == "config" {
            bail!("config line {}: invalid key `{key}`", i + 1);
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Flag arguments for config entries. `true`/`false` toggle switches; values
/// with spaces become several arguments (e.g. `clip = 0.75 1.25`).
pub fn entries_to_args(entries: &[(String, String)]) -> Vec<String> {
    let mut args = Vec::new();
    for (key, value) in entries {
        match value.as_str() {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            v => {
                args.push(format!("--{key}"));
                args.extend(v.split_whitespace().map(str::to_string));
            }
        }
    }
    args
}

/// Removes `--config <path>` / `--config=<path>` from `args` and inserts the
/// file's flags right after the subcommand name, ahead of any user flags.
/// Also returns the config path, if any.
pub fn merge_config_args(
    args: Vec<String>,
    subcommands: &[&str],
) -> Result<(Vec<String>, Option<String>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a path")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok((rest, None));
    };
    let text =
        fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let extra = entries_to_args(&parse_config(&text)?);
    let pos = rest
        .iter()
        .position(|a| subcommands.contains(&a.as_str()))
        .context("--config given without a subcommand")?;
    rest.splice(pos + 1..pos + 1, extra);
    Ok((rest, Some(path)))
}
