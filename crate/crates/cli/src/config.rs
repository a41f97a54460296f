//! `key = value` config files, expanded into command-line flags.
//!
//! Keys are flag names without the leading dashes (underscores and dashes
//! are interchangeable). `key = true` becomes a bare switch and
//! `key = false` is dropped. The expanded flags are placed right after the
//! subcommand, ahead of the user's own flags, so explicit flags win.

use std::ffi::OsString;
use std::fs;

pub fn parse(text: &str) -> Result<Vec<String>, String> {
    let mut args = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected 'key = value', got '{raw}'", n + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key.starts_with('-') {
            return Err(format!("config line {}: bad key '{}'", n + 1, key));
        }
        let value = value.trim().trim_matches('"');
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

/// Removes `--config PATH` from `argv` and splices the file's flags in after
/// the subcommand.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        match arg.to_str() {
            Some("--config") => {
                let p = it.next().ok_or("--config needs a file path")?;
                path = Some(p);
            }
            Some(s) if s.starts_with("--config=") => path = Some(OsString::from(&s["--config=".len()..])),
            _ => rest.push(arg),
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let extra = parse(&text)?;
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, extra.into_iter().map(OsString::from));
    Ok(rest)
}
