//! `--config path` support: `key = value` lines become `--key value`
//! arguments placed before the command-line flags, so explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses a config file body. Blank lines and `#` comments are ignored;
/// `true`/`false` values toggle switches.
pub fn parse(text: &str) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`", no + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key.is_empty() || key == "config" {
            bail!("config line {}: invalid key", no + 1);
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => {
                args.push(format!("--{key}"));
                args.push(value.to_string());
            }
        }
    }
    Ok(args)
}

fn config_path(args: &[OsString]) -> Option<(usize, usize, OsString)> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return args.get(i + 1).map(|p| (i, 2, p.clone()));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some((i, 1, OsString::from(p)));
        }
    }
    None
}

const SUBCOMMANDS: [&str; 5] = ["train", "compress", "decompress", "eval", "diagnose"];

/// Returns `args` with the config flag removed and the file's arguments
/// spliced in right after the subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some((at, width, path)) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config {}", Path::new(&path).display()))?;
    let extra = parse(&text)?;
    let mut rest: Vec<OsString> = args[..at].iter().chain(&args[at + width..]).cloned().collect();
    let sub = rest
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
        .map_or(rest.len(), |p| p + 1);
    let tail = rest.split_off(sub);
    rest.extend(extra.into_iter().map(OsString::from));
    rest.extend(tail);
    Ok(rest)
}
