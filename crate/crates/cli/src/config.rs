//! `--config` files: one `key = value` per line, `#` starts a comment.
//! Keys are long flag names; a value on the command line always wins.
//! `flag = true` switches a boolean flag on, `flag = false` leaves it off.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::CommandFactory;

use crate::Cli;

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(cloudseg_core::Error::Parse {
                location: format!("config line {}", i + 1),
                message: format!("expected `key = value`, found `{line}`"),
            });
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!(cloudseg_core::Error::Parse {
                location: format!("config line {}", i + 1),
                message: "empty key".into(),
            });
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Appends flags from the `--config` file that the command line does not
/// already set and that the chosen verb (or the global set) accepts.
pub fn merged_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse_config(&text)?;

    let cmd = Cli::command();
    let globals: Vec<(String, bool)> = cmd
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .collect();
    let verb = args
        .iter()
        .skip(1)
        .find_map(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()));
    let mut known = globals;
    if let Some(sub) = verb {
        known.extend(
            sub.get_arguments()
                .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values()))),
        );
    }
    let all_flags: Vec<String> = std::iter::once(&cmd)
        .chain(cmd.get_subcommands())
        .flat_map(|c| c.get_arguments().filter_map(|a| a.get_long().map(str::to_string)))
        .collect();

    let present = |flag: &str| {
        args.iter().any(|a| {
            let s = a.to_string_lossy();
            s == format!("--{flag}") || s.starts_with(&format!("--{flag}="))
        })
    };
    let mut out = args.clone();
    for (key, value) in entries {
        if key == "config" {
            continue;
        }
        if !all_flags.contains(&key) {
            bail!(cloudseg_core::Error::Validation(format!(
                "config {}: unknown flag `{key}`",
                path.display()
            )));
        }
        let Some(&(_, takes_value)) = known.iter().find(|(k, _)| *k == key) else {
            continue; // belongs to another verb
        };
        if present(&key) {
            continue;
        }
        if takes_value {
            out.push(format!("--{key}").into());
            out.push(value.into());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => out.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                other => bail!(cloudseg_core::Error::Validation(format!(
                    "config {}: `{key}` is a switch, expected true/false, got `{other}`",
                    path.display()
                ))),
            }
        }
    }
    Ok(out)
}
