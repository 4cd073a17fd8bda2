//! Run manifests: resolved config plus digests of every input and output file.
//!
//! ```text
//! format = run-manifest/1
//! subcommand = train
//! tool_version = 0.1.0
//! seed = 0
//! extra.<name> = <value>
//! config.<key> = <value>
//! input.<relative path> = <sha256>
//! output.<relative path> = <sha256>
//! ```
//!
//! Paths are relative to the manifest's directory so a moved run still checks. Wall time
//! lives in a `<manifest>.timing.txt` sibling, keeping the manifest itself reproducible.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::Config;
use super::RunnerError;
use crate::net::checkpoint::write_atomic;

pub const FORMAT: &str = "run-manifest/1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, RunnerError> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| RunnerError::io(path, e))
}

/// Sidecar path `<file>.manifest` for a single output file.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub extra: Vec<(String, String)>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

fn relative(base: &Path, path: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &Config) -> Result<Self, RunnerError> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed()?,
            config: config.entries().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            extra: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn extra(&mut self, key: &str, value: impl ToString) {
        self.extra.push((key.to_string(), value.to_string()));
    }

    /// Records the digest of an existing file under its path relative to `base`.
    pub fn add_input(&mut self, base: &Path, path: &Path) -> Result<(), RunnerError> {
        self.inputs.push((relative(base, path), file_digest(path)?));
        Ok(())
    }

    pub fn add_output(&mut self, base: &Path, path: &Path) -> Result<(), RunnerError> {
        self.outputs.push((relative(base, path), file_digest(path)?));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# guidance-lab run manifest\n");
        let _ = writeln!(s, "format = {FORMAT}");
        let _ = writeln!(s, "subcommand = {}", self.subcommand);
        let _ = writeln!(s, "tool_version = {}", self.tool_version);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (prefix, list) in
            [("extra", &self.extra), ("config", &self.config), ("input", &self.inputs), ("output", &self.outputs)]
        {
            for (k, v) in list {
                let _ = writeln!(s, "{prefix}.{k} = {v}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RunnerError> {
        let bad = |m: String| RunnerError::Manifest(m);
        let mut m = RunManifest {
            subcommand: String::new(),
            tool_version: String::new(),
            seed: 0,
            config: Vec::new(),
            extra: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        let mut format_ok = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            match k {
                "format" if v == FORMAT => format_ok = true,
                "format" => return Err(bad(format!("unsupported format {v}"))),
                "subcommand" => m.subcommand = v,
                "tool_version" => m.tool_version = v,
                "seed" => m.seed = v.parse().map_err(|_| bad(format!("bad seed {v}")))?,
                _ => {
                    let (prefix, name) =
                        k.split_once('.').ok_or_else(|| bad(format!("line {}: unknown key {k}", n + 1)))?;
                    let list = match prefix {
                        "config" => &mut m.config,
                        "extra" => &mut m.extra,
                        "input" => &mut m.inputs,
                        "output" => &mut m.outputs,
                        _ => return Err(bad(format!("line {}: unknown key {k}", n + 1))),
                    };
                    list.push((name.to_string(), v));
                }
            }
        }
        if !format_ok {
            return Err(bad("missing format line".into()));
        }
        Ok(m)
    }

    pub fn get_extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Writes the manifest and its timing sibling.
    pub fn write(&self, path: &Path, wall_seconds: f64) -> Result<(), RunnerError> {
        write_atomic(path, self.to_text().as_bytes()).map_err(|e| RunnerError::io(path, e))?;
        let timing = timing_path(path);
        let text = format!("subcommand = {}\nwall_seconds = {wall_seconds:.3}\n", self.subcommand);
        write_atomic(&timing, text.as_bytes()).map_err(|e| RunnerError::io(&timing, e))
    }

    /// Re-derives every recorded digest relative to `base`.
    pub fn check(&self, base: &Path) -> Result<usize, RunnerError> {
        let mut n = 0;
        for (name, want) in self.inputs.iter().chain(&self.outputs) {
            let path = base.join(name);
            let got = file_digest(&path)?;
            if &got != want {
                return Err(RunnerError::DigestMismatch {
                    what: path.display().to_string(),
                    expected: want.clone(),
                    found: got,
                });
            }
            n += 1;
        }
        Ok(n)
    }
}

pub fn timing_path(manifest: &Path) -> PathBuf {
    let mut p = manifest.as_os_str().to_owned();
    p.push(".timing.txt");
    PathBuf::from(p)
}

/// Loads a manifest and checks it against the files beside it; returns the count checked.
pub fn check_file(path: &Path) -> Result<usize, RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
    let m = RunManifest::from_text(&text)?;
    m.check(path.parent().unwrap_or(Path::new(".")))
}
