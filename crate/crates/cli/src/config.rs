//! Declarative config files. A TOML file holds one table per subcommand
//! (`[simulate]`, `[lsparcom.train]`, ...) whose keys are long flag names.
//! Its entries are spliced into the argument list right after the subcommand,
//! so flags given on the command line win.

use anyhow::{bail, Context, Result};
use std::ffi::OsString;
use std::path::Path;

/// Subcommands that take a nested subcommand.
const GROUPS: &[&str] = &["lsparcom", "viz"];

/// Splits off `--config <path>` and returns the remaining arguments.
fn take_config(args: Vec<OsString>) -> Result<(Vec<OsString>, Option<OsString>)> {
    let mut out = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            out.push(a);
            out.extend(it.by_ref());
            break;
        }
        if s == "--config" {
            config = Some(it.next().context("--config needs a path")?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(OsString::from(p));
        } else {
            out.push(a);
        }
    }
    Ok((out, config))
}

/// Index just past the subcommand path (e.g. `lsparcom train`).
fn subcommand_end(args: &[OsString]) -> Option<(usize, Vec<String>)> {
    let mut path = Vec::new();
    for (i, a) in args.iter().enumerate().skip(1) {
        let s = a.to_string_lossy();
        if s.starts_with('-') {
            if path.is_empty() {
                continue;
            }
            return Some((i, path));
        }
        path.push(s.into_owned());
        if path.len() == 2 || !GROUPS.contains(&path[0].as_str()) {
            return Some((i + 1, path));
        }
    }
    (!path.is_empty()).then(|| (args.len(), path))
}

fn value_args(key: &str, value: &toml::Value, out: &mut Vec<OsString>) -> Result<()> {
    let flag = format!("--{key}");
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::Array(items) => {
            for v in items {
                value_args(key, v, out)?;
            }
        }
        toml::Value::String(s) => {
            out.push(flag.into());
            out.push(s.into());
        }
        toml::Value::Integer(i) => {
            out.push(flag.into());
            out.push(i.to_string().into());
        }
        toml::Value::Float(f) => {
            out.push(flag.into());
            out.push(f.to_string().into());
        }
        other => bail!("unsupported value for '{key}': {other}"),
    }
    Ok(())
}

/// Arguments for one subcommand path taken from a parsed config file.
pub fn config_args(doc: &toml::Table, path: &[String]) -> Result<Vec<OsString>> {
    let mut table = doc;
    for p in path {
        match table.get(p) {
            Some(toml::Value::Table(t)) => table = t,
            Some(_) => bail!("config entry '{p}' must be a table"),
            None => return Ok(Vec::new()),
        }
    }
    let mut out = Vec::new();
    for (k, v) in table {
        if v.is_table() {
            continue;
        }
        value_args(k, v, &mut out)?;
    }
    Ok(out)
}

/// Command line with config-file entries merged in.
pub fn merged_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let (mut args, config) = take_config(args)?;
    let Some(config) = config else {
        return Ok(args);
    };
    let path = Path::new(&config);
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let doc: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {}", path.display()))?;
    if let Some((end, sub)) = subcommand_end(&args) {
        let extra = config_args(&doc, &sub)?;
        args.splice(end..end, extra);
    }
    Ok(args)
}
