//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment and blank lines are ignored. Keys are flag
//! names without the leading dashes (`delta2`, `waiting-times`; underscores also accepted).
//! A file given with `--config` supplies defaults that flags on the command line override;
//! `true` turns a switch on and `false` leaves it off.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses the file into an ordered map; later duplicates replace earlier ones.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {raw:?}", k + 1);
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", k + 1);
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

/// Removes `--config FILE` from `args` and splices the file's entries in as flags right after
/// the subcommand, ahead of the user's own flags.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut file = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            file = Some(it.next().context("--config needs a file name")?);
        } else if let Some(v) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            file = Some(OsString::from(v));
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else {
        return Ok(rest);
    };
    let path = Path::new(&file);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse(&text).with_context(|| format!("in config {}", path.display()))?;
    let Some(sub) = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(rest);
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        match value.as_str() {
            "true" => injected.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => injected.push(OsString::from(format!("--{key}={value}"))),
        }
    }
    let at = sub + 2;
    rest.splice(at..at, injected);
    Ok(rest)
}
