//! Experiment configuration and its plain-text `key = value` format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are errors. `print-config` emits every key with its
//! resolved value, and that output parses back to the same config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dual::{Budgets, DualParams};
use crate::error::{Error, Result};
use crate::policy::PolicyBase;
use crate::proxy::ProxyCoeffs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Dual-driven knob adaptation.
    Cafl,
    /// Fixed base knobs, 32-bit updates, duals never updated.
    FedAvg,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Cafl => "cafl",
            Mode::FedAvg => "fedavg",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cafl" => Ok(Mode::Cafl),
            "fedavg" => Ok(Mode::FedAvg),
            other => Err(format!("expected cafl or fedavg, got {other:?}")),
        }
    }
}

/// Where the text comes from: a file, or the built-in synthetic generator
/// when `path` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSource {
    pub path: Option<PathBuf>,
    pub synthetic_len: usize,
    pub synthetic_seed: u64,
    pub val_fraction: f64,
}

/// Model shape apart from the vocabulary, which comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub context_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub model: ModelShape,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub budgets: Budgets,
    pub policy: PolicyBase,
    pub proxy: ProxyCoeffs,
    /// Per-client energy/temperature multipliers in [0.8, 1.2].
    pub heterogeneity: bool,
    pub dual: DualParams,
    pub lr: f64,
    pub seed: u64,
    pub mode: Mode,
    pub out: PathBuf,
    pub eval_examples: usize,
    /// Weight client deltas by shard size instead of a plain mean.
    pub weighted_aggregation: bool,
    /// Worker threads for client training; 0 picks the machine default.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource {
                path: None,
                synthetic_len: 200_000,
                synthetic_seed: 7,
                val_fraction: 0.1,
            },
            model: ModelShape {
                embed_dim: 64,
                hidden_dim: 64,
                n_blocks: 4,
                context_window: 8,
            },
            n_clients: 16,
            clients_per_round: 6,
            rounds: 50,
            budgets: Budgets::default(),
            policy: PolicyBase::default(),
            proxy: ProxyCoeffs::default(),
            heterogeneity: true,
            dual: DualParams::default(),
            lr: 0.3,
            seed: 0,
            mode: Mode::Cafl,
            out: PathBuf::from("metrics.csv"),
            eval_examples: 4096,
            weighted_aggregation: false,
            threads: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

/// Every accepted key, in `print-config` order.
pub const KEYS: &[&str] = &[
    "corpus.path",
    "corpus.synthetic_len",
    "corpus.synthetic_seed",
    "corpus.val_fraction",
    "model.embed_dim",
    "model.hidden_dim",
    "model.n_blocks",
    "model.context_window",
    "n_clients",
    "clients_per_round",
    "rounds",
    "budget.energy",
    "budget.comm",
    "budget.memory",
    "budget.temperature",
    "policy.k_base",
    "policy.s_base",
    "policy.b_base",
    "policy.alpha_k",
    "policy.beta_s",
    "policy.gamma_b",
    "policy.q_theta1",
    "policy.q_theta2",
    "proxy.alpha_e",
    "proxy.alpha_m",
    "proxy.beta_m",
    "proxy.alpha_t",
    "proxy.gamma_t",
    "proxy.delta_t",
    "proxy.sparsity",
    "proxy.heterogeneity",
    "dual.eta_energy",
    "dual.eta_comm",
    "dual.eta_memory",
    "dual.eta_temperature",
    "dual.delta",
    "lr",
    "seed",
    "mode",
    "out",
    "eval_examples",
    "weighted_aggregation",
    "threads",
];

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "corpus.path" => {
                self.corpus.path = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "corpus.synthetic_len" => self.corpus.synthetic_len = parse(key, v)?,
            "corpus.synthetic_seed" => self.corpus.synthetic_seed = parse(key, v)?,
            "corpus.val_fraction" => self.corpus.val_fraction = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "model.n_blocks" => self.model.n_blocks = parse(key, v)?,
            "model.context_window" => self.model.context_window = parse(key, v)?,
            "n_clients" => self.n_clients = parse(key, v)?,
            "clients_per_round" => self.clients_per_round = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "budget.energy" => self.budgets.energy = parse(key, v)?,
            "budget.comm" => self.budgets.comm = parse(key, v)?,
            "budget.memory" => self.budgets.memory = parse(key, v)?,
            "budget.temperature" => self.budgets.temperature = parse(key, v)?,
            "policy.k_base" => self.policy.k_base = parse(key, v)?,
            "policy.s_base" => self.policy.s_base = parse(key, v)?,
            "policy.b_base" => self.policy.b_base = parse(key, v)?,
            "policy.alpha_k" => self.policy.alpha_k = parse(key, v)?,
            "policy.beta_s" => self.policy.beta_s = parse(key, v)?,
            "policy.gamma_b" => self.policy.gamma_b = parse(key, v)?,
            "policy.q_theta1" => self.policy.q_thresholds.0 = parse(key, v)?,
            "policy.q_theta2" => self.policy.q_thresholds.1 = parse(key, v)?,
            "proxy.alpha_e" => self.proxy.alpha_e = parse(key, v)?,
            "proxy.alpha_m" => self.proxy.alpha_m = parse(key, v)?,
            "proxy.beta_m" => self.proxy.beta_m = parse(key, v)?,
            "proxy.alpha_t" => self.proxy.alpha_t = parse(key, v)?,
            "proxy.gamma_t" => self.proxy.gamma_t = parse(key, v)?,
            "proxy.delta_t" => self.proxy.delta_t = parse(key, v)?,
            "proxy.sparsity" => self.proxy.sparsity = parse(key, v)?,
            "proxy.heterogeneity" => self.heterogeneity = parse(key, v)?,
            "dual.eta_energy" => self.dual.eta[0] = parse(key, v)?,
            "dual.eta_comm" => self.dual.eta[1] = parse(key, v)?,
            "dual.eta_memory" => self.dual.eta[2] = parse(key, v)?,
            "dual.eta_temperature" => self.dual.eta[3] = parse(key, v)?,
            "dual.delta" => self.dual.delta = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "eval_examples" => self.eval_examples = parse(key, v)?,
            "weighted_aggregation" => self.weighted_aggregation = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "corpus.path" => self
                .corpus
                .path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "corpus.synthetic_len" => self.corpus.synthetic_len.to_string(),
            "corpus.synthetic_seed" => self.corpus.synthetic_seed.to_string(),
            "corpus.val_fraction" => self.corpus.val_fraction.to_string(),
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "model.hidden_dim" => self.model.hidden_dim.to_string(),
            "model.n_blocks" => self.model.n_blocks.to_string(),
            "model.context_window" => self.model.context_window.to_string(),
            "n_clients" => self.n_clients.to_string(),
            "clients_per_round" => self.clients_per_round.to_string(),
            "rounds" => self.rounds.to_string(),
            "budget.energy" => self.budgets.energy.to_string(),
            "budget.comm" => self.budgets.comm.to_string(),
            "budget.memory" => self.budgets.memory.to_string(),
            "budget.temperature" => self.budgets.temperature.to_string(),
            "policy.k_base" => self.policy.k_base.to_string(),
            "policy.s_base" => self.policy.s_base.to_string(),
            "policy.b_base" => self.policy.b_base.to_string(),
            "policy.alpha_k" => self.policy.alpha_k.to_string(),
            "policy.beta_s" => self.policy.beta_s.to_string(),
            "policy.gamma_b" => self.policy.gamma_b.to_string(),
            "policy.q_theta1" => self.policy.q_thresholds.0.to_string(),
            "policy.q_theta2" => self.policy.q_thresholds.1.to_string(),
            "proxy.alpha_e" => self.proxy.alpha_e.to_string(),
            "proxy.alpha_m" => self.proxy.alpha_m.to_string(),
            "proxy.beta_m" => self.proxy.beta_m.to_string(),
            "proxy.alpha_t" => self.proxy.alpha_t.to_string(),
            "proxy.gamma_t" => self.proxy.gamma_t.to_string(),
            "proxy.delta_t" => self.proxy.delta_t.to_string(),
            "proxy.sparsity" => self.proxy.sparsity.to_string(),
            "proxy.heterogeneity" => self.heterogeneity.to_string(),
            "dual.eta_energy" => self.dual.eta[0].to_string(),
            "dual.eta_comm" => self.dual.eta[1].to_string(),
            "dual.eta_memory" => self.dual.eta[2].to_string(),
            "dual.eta_temperature" => self.dual.eta[3].to_string(),
            "dual.delta" => self.dual.delta.to_string(),
            "lr" => self.lr.to_string(),
            "seed" => self.seed.to_string(),
            "mode" => self.mode.to_string(),
            "out" => self.out.display().to_string(),
            "eval_examples" => self.eval_examples.to_string(),
            "weighted_aggregation" => self.weighted_aggregation.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines from `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(key.trim(), value)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    /// Field-level checks for everything that does not need the corpus.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_clients == 0 {
            return err("n_clients must be at least 1".into());
        }
        if self.clients_per_round == 0 {
            return err("clients_per_round must be at least 1".into());
        }
        if self.clients_per_round > self.n_clients {
            return err(format!(
                "clients_per_round ({}) must not exceed n_clients ({})",
                self.clients_per_round, self.n_clients
            ));
        }
        let m = &self.model;
        for (name, v) in [
            ("model.embed_dim", m.embed_dim),
            ("model.hidden_dim", m.hidden_dim),
            ("model.n_blocks", m.n_blocks),
            ("model.context_window", m.context_window),
            ("eval_examples", self.eval_examples),
        ] {
            if v == 0 {
                return err(format!("{name} must be at least 1"));
            }
        }
        if m.embed_dim != m.hidden_dim {
            return err(format!(
                "model.embed_dim ({}) must equal model.hidden_dim ({})",
                m.embed_dim, m.hidden_dim
            ));
        }
        let vf = self.corpus.val_fraction;
        if !(vf > 0.0 && vf < 1.0) {
            return err(format!("corpus.val_fraction must lie in (0, 1), got {vf}"));
        }
        if self.corpus.path.is_none() && self.corpus.synthetic_len == 0 {
            return err("corpus.synthetic_len must be positive when corpus.path is empty".into());
        }
        for (name, v) in [
            ("budget.energy", self.budgets.energy),
            ("budget.comm", self.budgets.comm),
            ("budget.memory", self.budgets.memory),
            ("budget.temperature", self.budgets.temperature),
        ] {
            if v.is_nan() || v <= 0.0 {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        self.policy.validate(m.n_blocks)?;
        self.proxy.validate()?;
        for (name, v) in [
            ("dual.eta_energy", self.dual.eta[0]),
            ("dual.eta_comm", self.dual.eta[1]),
            ("dual.eta_memory", self.dual.eta[2]),
            ("dual.eta_temperature", self.dual.eta[3]),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.dual.delta >= 0.0 && self.dual.delta.is_finite()) {
            return err(format!("dual.delta must be nonnegative, got {}", self.dual.delta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Reads `path` (if given) over the defaults, then applies `overrides` in
/// order, then validates.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
