//! Layered `key = value` configuration.
//!
//! Keys use dotted namespaces (`train.variant`, `guidance.tau`). Values are resolved
//! from, lowest to highest precedence: built-in defaults, a preset layer supplied by the
//! subcommand, the config file, `GLAB_*` environment variables, and command-line flags.
//! The environment name of a key is `GLAB_` followed by the key upper-cased with `.`
//! replaced by `__` (`train.lr` → `GLAB_TRAIN__LR`).
//!
//! A run manifest is also a valid config file: its `config.*` lines are read and every
//! other line is ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::RunnerError;
use crate::guidance::{GuidanceKind, GuidanceSpec};
use crate::mixture::{preset_config, Preset, ToyConfig};
use crate::net::Arch;
use crate::sampler::{SamplerKind, SamplerSpec};
use crate::train::{TrainConfig, Variant};

/// Environment variable prefix.
pub const ENV_PREFIX: &str = "GLAB_";

/// `auto` defers to the variant-dependent default.
pub const AUTO: &str = "auto";

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for every random stream"),
    ("data.preset", "C", "toy regime: A, B or C"),
    ("data.n", "4096", "points written by `dataset`"),
    ("train.variant", "baseline", "baseline, mg, ag, br, sgg or slg_warm"),
    ("train.w", AUTO, "training guidance weight"),
    ("train.tau", "0.2", "sgg switch time"),
    ("train.interval", AUTO, "t_lo,t_hi band where the guidance term is added"),
    ("train.cond_dropout", "0.1", "probability of replacing the class by the null token"),
    ("train.iters", "32768", "strong-model iterations"),
    ("train.batch", "256", "batch size"),
    ("train.lr", "0.001", "Adam learning rate"),
    ("train.lognormal_loc", "-1.0", "location of the logit-normal timestep law"),
    ("train.lognormal_scale", "1.4", "scale of the logit-normal timestep law"),
    ("train.weak_update_ratio", "4", "ag: strong steps per weak step"),
    ("train.warmup_iters", AUTO, "slg_warm: plain-regression iterations"),
    ("train.skip_blocks", AUTO, "slg_warm: comma-separated blocks skipped by the weak forward"),
    ("train.unconditional", "false", "train without class input"),
    ("train.log_every", "256", "iterations between log rows"),
    ("train.checkpoint_every", "0", "iterations between periodic checkpoints (0 disables)"),
    ("net.d_c", "16", "class embedding width"),
    ("net.d_h", "64", "hidden width"),
    ("net.n_blocks", "4", "residual blocks"),
    ("net.branch_index", "1", "block after which the branch head taps (none disables)"),
    ("net.n_freqs", "16", "Fourier time frequencies"),
    ("net.weak_d_h", AUTO, "ag: hidden width of the weak net"),
    ("guidance.kind", "none", "none, cfg, ag, skip or sgg"),
    ("guidance.w", "2.0", "scale for cfg, ag and skip"),
    ("guidance.w_cdg", "2.0", "sgg scale above tau"),
    ("guidance.w_cag", "2.0", "sgg scale at or below tau"),
    ("guidance.tau", "0.3", "sgg switch time"),
    ("guidance.interval", "0,1", "t_lo,t_hi band where guidance is active"),
    ("guidance.skip_blocks", "2", "skip: comma-separated skipped blocks"),
    ("sampler.kind", "ode", "ode or sde"),
    ("sampler.steps", "128", "integration steps"),
    ("sampler.t_start", "1.0", "initial time"),
    ("sampler.t_end", "0.001", "final time"),
    ("sampler.churn", "1.0", "sde diffusion level"),
    ("sampler.n", "4096", "samples, prompts cycle through the classes"),
    ("sampler.trajectory", "false", "also write every intermediate state"),
    ("eval.radius_sigmas", "2.0", "coverage radius in standard deviations"),
    ("eval.floor_quantile", "0.001", "outlier floor quantile of ground-truth log densities"),
    ("eval.floor_samples", "100000", "ground-truth draws used to place the floor"),
    ("error.n_states", "10000", "forward-noised states per t"),
    ("error.t_points", "28", "midpoint grid size on (0,1)"),
    ("error.kinds", "cfg,ag", "guidance kinds compared against unguided"),
    ("error.ws", "1.2,1.4,1.6", "guidance scales of the error curves"),
    ("sweep.ws", "1,1.25,1.5,2,2.5,3", "guidance scales of `sweep`"),
];

/// A fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

/// The valid key closest to `key` by edit distance.
pub fn nearest_key(key: &str) -> &'static str {
    KEYS.iter()
        .map(|(k, _, _)| *k)
        .min_by_key(|k| strsim::levenshtein(key, k))
        .expect("non-empty key table")
}

fn unknown(key: &str) -> RunnerError {
    RunnerError::UnknownKey { key: key.to_string(), nearest: nearest_key(key).to_string() }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, RunnerError> {
    let mut out = Vec::new();
    let manifest = text.lines().any(|l| l.trim().replace(' ', "") == "format=run-manifest/1");
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(RunnerError::Config(format!("{origin}:{}: expected key = value", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if manifest {
            if let Some(k) = k.strip_prefix("config.") {
                out.push((k.to_string(), v.to_string()));
            }
        } else {
            out.push((k.to_string(), v.to_string()));
        }
    }
    Ok(out)
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RunnerError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(unknown(key)),
        }
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), RunnerError> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
        self.apply(&parse_pairs(&text, &path.display().to_string())?)
    }

    /// Applies `GLAB_*` variables from `vars`. Unknown names under the prefix are errors.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), RunnerError> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase().replace("__", ".");
                self.set(&key, &value)?;
            }
        }
        Ok(())
    }

    /// Resolves every layer in precedence order.
    pub fn resolve(
        preset: &[(&str, String)],
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        cli: &[(String, String)],
    ) -> Result<Self, RunnerError> {
        let mut c = Config::default();
        for (k, v) in preset {
            c.set(k, v)?;
        }
        if let Some(p) = file {
            c.apply_file(p)?;
        }
        c.apply_env(env)?;
        c.apply(cli)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn is_auto(&self, key: &str) -> bool {
        self.get(key) == AUTO
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, RunnerError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse::<T>().map_err(|e| RunnerError::Config(format!("{key} = {v}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, RunnerError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| RunnerError::Config(format!("{key} = {v}: {e}"))))
            .collect()
    }

    fn pair(&self, key: &str) -> Result<(f64, f64), RunnerError> {
        match self.list::<f64>(key)?.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(RunnerError::Config(format!("{key} needs two comma-separated numbers"))),
        }
    }

    pub fn seed(&self) -> Result<u64, RunnerError> {
        self.parse("seed")
    }

    pub fn preset(&self) -> Result<Preset, RunnerError> {
        self.parse("data.preset")
    }

    pub fn toy_config(&self) -> Result<ToyConfig, RunnerError> {
        Ok(preset_config(self.preset()?))
    }

    pub fn arch(&self) -> Result<Arch, RunnerError> {
        let branch = match self.get("net.branch_index") {
            "none" | "0" => None,
            _ => Some(self.parse("net.branch_index")?),
        };
        Ok(Arch {
            d_c: self.parse("net.d_c")?,
            d_h: self.parse("net.d_h")?,
            n_blocks: self.parse("net.n_blocks")?,
            branch_index: branch,
            n_freqs: self.parse("net.n_freqs")?,
        })
    }

    /// Training config; `auto` keys keep the variant defaults.
    pub fn train_config(&self) -> Result<TrainConfig, RunnerError> {
        let variant: Variant = self.parse("train.variant")?;
        let mut t = TrainConfig::for_variant(variant);
        t.arch = self.arch()?;
        t.iters = self.parse("train.iters")?;
        if !self.is_auto("train.w") {
            t.w = self.parse("train.w")?;
        }
        t.tau = self.parse("train.tau")?;
        if !self.is_auto("train.interval") {
            t.interval = self.pair("train.interval")?;
        }
        t.cond_dropout = self.parse("train.cond_dropout")?;
        t.batch = self.parse("train.batch")?;
        t.lr = self.parse("train.lr")?;
        t.lognormal_loc = self.parse("train.lognormal_loc")?;
        t.lognormal_scale = self.parse("train.lognormal_scale")?;
        t.weak_update_ratio = self.parse("train.weak_update_ratio")?;
        t.warmup_iters = if self.is_auto("train.warmup_iters") { t.iters / 4 } else { self.parse("train.warmup_iters")? };
        t.skip_blocks =
            if self.is_auto("train.skip_blocks") { vec![t.arch.n_blocks / 2] } else { self.list("train.skip_blocks")? };
        t.unconditional = self.parse("train.unconditional")?;
        t.log_every = self.parse("train.log_every")?;
        t.checkpoint_every = self.parse("train.checkpoint_every")?;
        t.weak_arch = (variant == Variant::Ag)
            .then(|| -> Result<Arch, RunnerError> {
                let d_h = if self.is_auto("net.weak_d_h") { t.arch.d_h / 2 } else { self.parse("net.weak_d_h")? };
                Ok(Arch { d_h, ..t.arch })
            })
            .transpose()?;
        t.seed = self.seed()?;
        t.validate()?;
        Ok(t)
    }

    pub fn guidance_spec(&self) -> Result<GuidanceSpec, RunnerError> {
        self.guidance_spec_for(self.parse("guidance.kind")?, self.parse("guidance.w")?)
    }

    /// Guidance of `kind` with scale `w`; SGG takes both scales from the config.
    pub fn guidance_spec_for(&self, kind: GuidanceKind, w: f64) -> Result<GuidanceSpec, RunnerError> {
        let spec = GuidanceSpec {
            kind,
            w,
            w_cdg: self.parse("guidance.w_cdg")?,
            w_cag: self.parse("guidance.w_cag")?,
            tau: self.parse("guidance.tau")?,
            interval: self.pair("guidance.interval")?,
            skip_blocks: self.list("guidance.skip_blocks")?,
            weak_checkpoint: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sampler_spec(&self) -> Result<SamplerSpec, RunnerError> {
        let kind: SamplerKind = self.parse("sampler.kind")?;
        let spec = SamplerSpec {
            kind,
            steps: self.parse("sampler.steps")?,
            t_start: self.parse("sampler.t_start")?,
            t_end: self.parse("sampler.t_end")?,
            churn: self.parse("sampler.churn")?,
            seed: self.seed()?,
            record_trajectory: self.parse("sampler.trajectory")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Resolved values in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// `key = value` text, loadable with [`Config::apply_file`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// The key table rendered for `--help`.
pub fn key_help() -> String {
    let mut s = String::from("Configuration keys (file `key = value`, env GLAB_<KEY with . as __>, or --set key=value):\n");
    for (k, v, d) in KEYS {
        let _ = writeln!(s, "  {k:<26} {d} [default: {v}]");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn keys_are_unique_and_defaults_parse() {
        let mut seen = std::collections::HashSet::new();
        assert!(KEYS.iter().all(|(k, _, _)| seen.insert(*k)));
        let c = Config::default();
        c.train_config().unwrap();
        c.sampler_spec().unwrap();
        c.guidance_spec().unwrap();
        assert_eq!(c.toy_config().unwrap(), preset_config(Preset::C));
    }

    #[test]
    fn precedence_cli_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\ntrain.lr = 0.002\ntrain.batch = 64\n").unwrap();
        let c = Config::resolve(&[], Some(&path), Vec::new(), &[kv("train.batch", "32")]).unwrap();
        assert_eq!(c.get("train.iters"), "32768");
        assert_eq!(c.get("train.lr"), "0.002");
        assert_eq!(c.get("train.batch"), "32");
    }

    #[test]
    fn env_sits_between_file_and_cli() {
        let env = vec![kv("GLAB_TRAIN__LR", "0.005"), kv("GLAB_SAMPLER__STEPS", "64"), kv("HOME", "/x")];
        let c = Config::resolve(&[("train.lr", "0.1".into())], None, env, &[kv("sampler.steps", "16")]).unwrap();
        assert_eq!(c.get("train.lr"), "0.005");
        assert_eq!(c.get("sampler.steps"), "16");
    }

    #[test]
    fn unknown_key_names_nearest() {
        let err = Config::default().set("sampler.step", "1").unwrap_err();
        match &err {
            RunnerError::UnknownKey { key, nearest } => assert_eq!((key.as_str(), nearest.as_str()), ("sampler.step", "sampler.steps")),
            e => panic!("{e}"),
        }
        let err = Config::default().set("guidance.tua", "1").unwrap_err();
        assert!(err.to_string().contains("guidance.tau"), "{err}");
        let err = Config::default().apply_env(vec![kv("GLAB_TRAIN__ITER", "3")]).unwrap_err();
        assert!(err.to_string().contains("train.iters"), "{err}");
    }

    #[test]
    fn manifest_text_is_a_config() {
        let mut c = Config::default();
        c.set("train.variant", "ag").unwrap();
        let text = format!(
            "format = run-manifest/1\nsubcommand = train\n{}",
            c.to_text().lines().map(|l| format!("config.{l}\n")).collect::<String>()
        );
        let mut d = Config::default();
        d.apply(&parse_pairs(&text, "m").unwrap()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn auto_keys_follow_variant() {
        let mut c = Config::default();
        c.set("train.variant", "ag").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.w, TrainConfig::for_variant(Variant::Ag).w);
        assert_eq!(t.weak_arch.unwrap().d_h, 32);
        c.set("train.w", "0").unwrap();
        c.set("net.weak_d_h", "16").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!((t.w, t.weak_arch.unwrap().d_h), (0.0, 16));
    }

    #[test]
    fn bad_values_are_reported_with_key() {
        let mut c = Config::default();
        c.set("train.lr", "fast").unwrap();
        assert!(c.train_config().unwrap_err().to_string().contains("train.lr"));
    }
}
