//! Run configuration files.
//!
//! A config is a TOML document mirroring [`RunConfig`]. String values may
//! reference environment variables as `${NAME}`. Overrides use dotted keys
//! (`data.test_n=100`); assigning a bare word to a tagged table such as
//! `backend=oracle` selects that variant.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::policy::remote::{ENV_API_KEY, ENV_ENDPOINT};
use crate::policy::PolicyBackend;
use crate::runner::RunConfig;

/// Written in place of secrets in config snapshots.
pub const REDACTED: &str = "<redacted>";

/// Keys whose value is a table tagged by `kind`.
const TAGGED: &[&str] = &["backend", "reward_mode", "data.source"];

/// Loads a config file (or the defaults), applies overrides and an optional
/// seed, and validates the result. All problems found are reported together.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config(&text, overrides, seed, |k| std::env::var(k).ok())
}

/// [`load_config`] on an in-memory document with an explicit environment.
pub fn parse_config(
    text: &str,
    overrides: &[String],
    seed: Option<u64>,
    env: impl Fn(&str) -> Option<String>,
) -> Result<RunConfig> {
    let mut errs = Vec::new();
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(vec![format!("invalid config: {}", e.message())]))?;
    for o in overrides {
        if let Err(e) = apply_override(&mut table, o) {
            errs.push(e);
        }
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| Error::config("seed must fit in a signed 64-bit integer"))?;
        table.insert("seed".into(), Value::Integer(s));
    }
    interpolate(&mut table, &env, "", &mut errs);
    errs.extend(unknown_top_level(&table));
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let mut cfg = RunConfig::deserialize(Value::Table(table))
        .map_err(|e| Error::Config(vec![format!("invalid config: {}", e.message())]))?;
    if let PolicyBackend::RemoteChat(remote) = &mut cfg.backend {
        if remote.endpoint.is_empty() {
            remote.endpoint = env(ENV_ENDPOINT).unwrap_or_default();
        }
        if remote.api_key.as_deref().is_none_or(|k| k == REDACTED) {
            remote.api_key = env(ENV_API_KEY);
        }
    }
    let errs = cfg.validate(None);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

fn unknown_top_level(table: &Table) -> Vec<String> {
    let known: BTreeSet<String> = match Value::try_from(RunConfig::default()) {
        Ok(Value::Table(t)) => t.keys().cloned().collect(),
        _ => BTreeSet::new(),
    };
    table
        .keys()
        .filter(|k| !known.contains(*k) && !matches!(k.as_str(), "buffer_admission" | "max_steps"))
        .map(|k| format!("unknown key {k:?}"))
        .collect()
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// value when it parses as one and as a plain string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> std::result::Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?} is not of the form key=value"))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(format!("override key {key:?} is malformed"));
    }
    let mut value = parse_value(raw.trim());
    if TAGGED.contains(&key) {
        if let Value::String(kind) = value {
            let mut t = Table::new();
            t.insert("kind".into(), Value::String(kind));
            value = Value::Table(t);
        }
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(format!("override {key:?}: {} is not a table", path[..=i].join("."))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn interpolate(table: &mut Table, env: &impl Fn(&str) -> Option<String>, prefix: &str, errs: &mut Vec<String>) {
    for (k, v) in table.iter_mut() {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        interpolate_value(v, env, &path, errs);
    }
}

fn interpolate_value(v: &mut Value, env: &impl Fn(&str) -> Option<String>, path: &str, errs: &mut Vec<String>) {
    match v {
        Value::String(s) => match expand_env(s, env) {
            Ok(out) => *s = out,
            Err(e) => errs.push(format!("{path}: {e}")),
        },
        Value::Table(t) => interpolate(t, env, path, errs),
        Value::Array(a) => {
            for x in a {
                interpolate_value(x, env, path, errs);
            }
        }
        _ => {}
    }
}

/// Replaces each `${NAME}` in `s` with the value of `NAME`.
pub fn expand_env(s: &str, env: &impl Fn(&str) -> Option<String>) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| format!("unterminated variable reference in {s:?}"))?;
        let name = &after[..end];
        let val = env(name).ok_or_else(|| format!("environment variable {name} is not set"))?;
        out.push_str(&val);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// The config as TOML with secrets replaced by [`REDACTED`].
pub fn snapshot(cfg: &RunConfig) -> Result<String> {
    let mut cfg = cfg.clone();
    if let PolicyBackend::RemoteChat(remote) = &mut cfg.backend {
        if remote.api_key.is_some() {
            remote.api_key = Some(REDACTED.to_string());
        }
    }
    toml::to_string(&cfg).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::Algorithm;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config("", &[], None, no_env).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.p_keep, 0.1);
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.eval_every, 500);
    }

    #[test]
    fn bare_word_selects_variant() {
        let cfg = parse_config("", &["backend=oracle".into(), "algorithm=naive".into()], None, no_env).unwrap();
        assert_eq!(cfg.backend, PolicyBackend::Oracle);
        assert_eq!(cfg.algorithm, Algorithm::Naive);
        let cfg = parse_config(
            "",
            &["reward_mode.kind=noisy".into(), "reward_mode.p_flip=0.1".into()],
            None,
            no_env,
        )
        .unwrap();
        assert_eq!(cfg.reward_mode, crate::reward::RewardMode::Noisy { p_flip: 0.1 });
    }

    #[test]
    fn errors_are_collected() {
        let err = parse_config("bogus = 1\nother = 2", &["nokey".into()], None, no_env).unwrap_err();
        let Error::Config(errs) = err else { panic!("{err}") };
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn k_zero_is_rejected() {
        let err = parse_config("algorithm = \"approximate\"\nk = 0", &[], None, no_env).unwrap_err();
        assert!(err.to_string().contains("K must be ≥ 1"), "{err}");
    }

    #[test]
    fn unknown_nested_key_is_rejected() {
        assert!(parse_config("[data]\ntest_m = 3", &[], None, no_env).is_err());
    }

    #[test]
    fn env_interpolation_and_redaction() {
        let env = |k: &str| match k {
            "ICRL_API_KEY" => Some("sekret".to_string()),
            "HOST" => Some("http://h:1".to_string()),
            _ => None,
        };
        let doc = "[backend]\nkind = \"remote_chat\"\nendpoint = \"${HOST}\"\nmodel = \"m\"\n";
        let cfg = parse_config(doc, &[], None, env).unwrap();
        let PolicyBackend::RemoteChat(r) = &cfg.backend else {
            panic!()
        };
        assert_eq!(r.endpoint, "http://h:1");
        assert_eq!(r.api_key.as_deref(), Some("sekret"));
        let snap = snapshot(&cfg).unwrap();
        assert!(!snap.contains("sekret"));
        assert!(snap.contains(REDACTED));
        // a snapshot loads back to the same config
        assert_eq!(parse_config(&snap, &[], None, env).unwrap(), cfg);
    }

    #[test]
    fn missing_variable_is_an_error() {
        let err = parse_config("[data.source]\nkind = \"file\"\npath = \"${NOPE}\"", &[], None, no_env).unwrap_err();
        assert!(err.to_string().contains("NOPE"));
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = parse_config(
            "",
            &["max_steps=100".into(), "data.train_n=1000".into()],
            Some(7),
            no_env,
        )
        .unwrap();
        let snap = snapshot(&cfg).unwrap();
        let back = parse_config(&snap, &[], None, no_env).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(snapshot(&back).unwrap(), snap);
    }
}
