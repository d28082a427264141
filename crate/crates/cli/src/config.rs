use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use refine_loop::grpo::GrpoConfig;
use refine_loop::retrieval::{RetrievalConfig, DEFAULT_B, DEFAULT_K1};
use refine_loop::rewards::RewardMode;
use refine_loop::rollout::RolloutConfig;
use refine_loop::synthkb::WorldSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Scripted,
    #[default]
    Toy,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

/// Everything a run depends on. Loaded from TOML, overridden by flags, and
/// written back next to the outputs once resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub policy: Backend,
    pub k_sweep: Vec<usize>,
    pub bm25: Bm25Params,
    pub retrieval: RetrievalConfig,
    pub rollout: RolloutConfig,
    pub grpo: GrpoConfig,
    pub reward: RewardMode,
    pub world: WorldSpec,
    /// Input and output files by role, e.g. `dataset`, `index`, `out`.
    pub paths: BTreeMap<String, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            policy: Backend::Toy,
            k_sweep: (1..=7).collect(),
            bm25: Bm25Params::default(),
            retrieval: RetrievalConfig::default(),
            rollout: RolloutConfig::default(),
            grpo: GrpoConfig::toy(),
            reward: RewardMode::default(),
            world: WorldSpec::default(),
            paths: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.rollout.validate().map_err(|e| bad(&e))?;
        self.grpo.validate().map_err(|e| bad(&e))?;
        self.world.validate().map_err(|e| bad(&e))?;
        if self.retrieval.top_k == 0 {
            return Err(CliError::Config("retrieval.top_k must be >= 1".into()));
        }
        if self.retrieval.doc_token_budget == 0 {
            return Err(CliError::Config("retrieval.doc_token_budget must be >= 1".into()));
        }
        if !(self.bm25.k1 >= 0.0 && (0.0..=1.0).contains(&self.bm25.b)) {
            return Err(CliError::Config("bm25 needs k1 >= 0 and b in [0, 1]".into()));
        }
        if self.k_sweep.is_empty() || self.k_sweep.contains(&0) {
            return Err(CliError::Config("k_sweep must list depths >= 1".into()));
        }
        Ok(())
    }

    /// Resolves a path from its flag or the config, recording it either way.
    pub fn path(&mut self, role: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.optional_path(role, flag)
            .ok_or_else(|| CliError::Config(format!("missing --{}", role.replace('_', "-"))))
    }

    pub fn optional_path(&mut self, role: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        if let Some(p) = flag {
            self.paths.insert(role.to_string(), p);
        }
        self.paths.get(role).cloned()
    }

    pub fn echo(&self, command: &str, next_to: &Path) -> Result<PathBuf, CliError> {
        let target = echo_path(next_to);
        let body = toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        let text = format!("# refine-loop {command}\n{body}");
        fs::write(&target, text).map_err(|e| CliError::io(&target, e))?;
        Ok(target)
    }
}

/// `out.jsonl` echoes to `out.jsonl.config.toml`; a directory to `dir/config.toml`.
pub fn echo_path(next_to: &Path) -> PathBuf {
    if next_to.is_dir() {
        next_to.join("config.toml")
    } else {
        let mut s = next_to.as_os_str().to_owned();
        s.push(".config.toml");
        PathBuf::from(s)
    }
}
