//! `key = value` config files. Each key names a long flag (dashes or
//! underscores) and becomes that flag's default wherever it appears, so
//! anything given on the command line still wins.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use clap::Command;

use crate::error::{CliError, CliResult};

pub fn parse(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
        let key = k.trim().replace('-', "_");
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
        }
        out.insert(key, v.to_string());
    }
    Ok(out)
}

pub fn load(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    parse(&text)
}

/// Value of `--config` in raw arguments, if any.
pub fn find_config_arg(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn collect_ids(cmd: &Command, ids: &mut Vec<String>) {
    ids.extend(cmd.get_arguments().map(|a| a.get_id().to_string()));
    for sub in cmd.get_subcommands() {
        collect_ids(sub, ids);
    }
}

fn apply_rec(mut cmd: Command, values: &BTreeMap<String, String>) -> Command {
    let own: Vec<String> = cmd.get_arguments().map(|a| a.get_id().to_string()).collect();
    for id in own {
        if id == "config" {
            continue;
        }
        if let Some(v) = values.get(&id) {
            // clap wants 'static defaults; the process is short-lived
            let v: &'static str = Box::leak(v.clone().into_boxed_str());
            cmd = cmd.mut_arg(id, |a| a.default_value(v).required(false));
        }
    }
    let subs: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in subs {
        cmd = cmd.mut_subcommand(name, |s| apply_rec(s, values));
    }
    cmd
}

/// Installs config values as defaults. Keys that match no flag anywhere
/// are rejected.
pub fn apply(cmd: Command, values: &BTreeMap<String, String>) -> CliResult<Command> {
    let mut ids = Vec::new();
    collect_ids(&cmd, &mut ids);
    if let Some(k) = values.keys().find(|k| !ids.iter().any(|id| id == *k)) {
        return Err(CliError::Usage(format!("config key {k:?} matches no flag")));
    }
    Ok(apply_rec(cmd, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_quotes_and_dashes() {
        let m = parse("# top\nscale = 4\n  grid-size=\"64\"  # trailing\n\n").unwrap();
        assert_eq!(m.get("scale").unwrap(), "4");
        assert_eq!(m.get("grid_size").unwrap(), "64");
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(matches!(parse("scale 4"), Err(CliError::Usage(_))));
    }

    #[test]
    fn finds_config_in_both_spellings() {
        let a: Vec<OsString> = ["cemx", "--config", "c.txt", "kernel"].iter().map(OsString::from).collect();
        assert_eq!(find_config_arg(&a).unwrap(), "c.txt");
        let b: Vec<OsString> = ["cemx", "kernel", "--config=d.txt"].iter().map(OsString::from).collect();
        assert_eq!(find_config_arg(&b).unwrap(), "d.txt");
    }
}
