//! `key = value` run files: read as flag defaults, written as run manifests.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

/// Flags that take no value; `true` enables them, `false` leaves them off.
const SWITCHES: &[&str] = &["no-timing"];

/// Parses `key = value` lines. Blank lines and `#` comments are skipped, as
/// are `meta.*` keys, which describe a past run rather than configure one.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got {line:?}", idx + 1);
        };
        let key = key.trim();
        if key.starts_with("meta.") {
            continue;
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

fn config_args(pairs: &[(String, String)]) -> Result<Vec<OsString>> {
    let mut args = Vec::new();
    for (key, value) in pairs {
        if SWITCHES.contains(&key.as_str()) {
            match value.as_str() {
                "true" => args.push(format!("--{key}").into()),
                "false" => {}
                _ => bail!("{key} must be true or false, got {value:?}"),
            }
        } else {
            args.push(format!("--{key}").into());
            args.push(value.into());
        }
    }
    Ok(args)
}

/// Inserts the file's settings directly after the subcommand so that flags
/// given on the command line, which come later, take precedence.
pub fn merge_config(raw: &[OsString], subcommand: &str, path: &Path) -> Result<Vec<OsString>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let extra = parse_config(&text).with_context(|| format!("in config {}", path.display()))?;
    let at = 1 + raw
        .iter()
        .skip(1)
        .position(|a| a == subcommand)
        .context("subcommand not found in arguments")?;
    let mut merged = raw[..=at].to_vec();
    merged.extend(config_args(&extra)?);
    merged.extend_from_slice(&raw[at + 1..]);
    Ok(merged)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

#[derive(Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_skips_meta() {
        let pairs = parse_config("# run\nrisk = wd\n\nmeta.version = 1\ndata = \"a b\"\n").unwrap();
        assert_eq!(
            pairs,
            vec![
                ("risk".to_string(), "wd".to_string()),
                ("data".to_string(), "a b".to_string())
            ]
        );
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse_config("risk wd\n").is_err());
    }

    #[test]
    fn switches_expand_to_bare_flags() {
        let args = config_args(&[
            ("no-timing".into(), "true".into()),
            ("dim".into(), "8".into()),
        ])
        .unwrap();
        assert_eq!(args, vec!["--no-timing", "--dim", "8"]);
        assert!(config_args(&[("no-timing".into(), "yes".into())]).is_err());
    }

    #[test]
    fn config_goes_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "dim = 8\n").unwrap();
        let raw: Vec<OsString> = ["pderank", "train", "--dim", "4"]
            .iter()
            .map(Into::into)
            .collect();
        let merged = merge_config(&raw, "train", &path).unwrap();
        assert_eq!(merged, vec!["pderank", "train", "--dim", "8", "--dim", "4"]);
    }
}
