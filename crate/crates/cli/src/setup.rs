//! Config layering, worker pool setup and provenance records.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tumorcast_core::RunConfig;

pub const THREADS_ENV: &str = "TUMORCAST_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Published network sizes and optimizer settings.
    Paper,
    /// Narrow networks and capped sampling for single-machine runs.
    Desk,
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Profile defaults, then the JSON file, then `--seed`.
pub fn load_config(profile: Profile, path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let base = match profile {
        Profile::Paper => RunConfig::default(),
        Profile::Desk => RunConfig::desk(),
    };
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            if !patch.is_object() {
                bail!("config {} must hold a JSON object", p.display());
            }
            let mut v = serde_json::to_value(&base)?;
            merge(&mut v, patch);
            serde_json::from_value(v).map_err(|e| tumorcast_core::CoreError::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => base,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--threads`, else `TUMORCAST_THREADS`, else every core.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map_err(|_| tumorcast_core::CoreError::InvalidConfig(format!("{THREADS_ENV}={s} is not a count")).into()),
        _ => Ok(0),
    }
}

/// Zero leaves the pool at rayon's default size.
pub fn init_pool(threads: usize) -> Result<usize> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("building worker pool")?;
    Ok(rayon::current_num_threads())
}

pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let canon = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&canon)))
}

#[derive(Serialize)]
pub struct Provenance<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub nnet_version: &'static str,
    pub command: &'a str,
    pub args: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub config_sha256: String,
    pub config: &'a RunConfig,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

pub struct RunContext<'a> {
    pub command: &'a str,
    pub cfg: &'a RunConfig,
    pub threads: usize,
}

/// Writes `provenance.json` into `dir`. Paths in `outputs` are made relative
/// to `dir` when possible so the record does not depend on where it ran.
pub fn write_provenance(dir: &Path, ctx: &RunContext<'_>, outputs: &[PathBuf], details: Value) -> Result<PathBuf> {
    let rel: Vec<String> = outputs
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect();
    let record = Provenance {
        tool: "tumorcast",
        version: env!("CARGO_PKG_VERSION"),
        nnet_version: tumorcast_nnet::VERSION,
        command: ctx.command,
        args: std::env::args().skip(1).collect(),
        seed: ctx.cfg.seed,
        threads: ctx.threads,
        config_sha256: config_hash(ctx.cfg)?,
        config: ctx.cfg,
        outputs: rel,
        details,
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("provenance.json");
    fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_profile_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"max_epochs": 3}, "seed": 9}"#).unwrap();
        let cfg = load_config(Profile::Desk, Some(&p), None).unwrap();
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.lr0, RunConfig::desk().train.lr0);
        assert_eq!(cfg.arch, RunConfig::desk().arch);
        assert_eq!(cfg.seed, 9);
        assert_eq!(load_config(Profile::Desk, Some(&p), Some(4)).unwrap().seed, 4);
    }

    #[test]
    fn unknown_and_invalid_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"trian": {}}"#).unwrap();
        assert!(load_config(Profile::Paper, Some(&p), None).is_err());
        fs::write(&p, r#"{"train": {"lr0": -1.0}}"#).unwrap();
        assert!(load_config(Profile::Paper, Some(&p), None).is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = config_hash(&RunConfig::default()).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&RunConfig::default()).unwrap());
        assert_ne!(a, config_hash(&RunConfig::desk()).unwrap());
    }
}
