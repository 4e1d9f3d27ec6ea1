//! Round orchestration: client selection, local training under the round's
//! knobs, wire roundtrip, aggregation, usage averaging and the dual step.

mod codec;
mod metrics;

pub use codec::{
    decode_tensor, dequantize, encode_tensor, quantize, roundtrip, tensor_wire_len, wire_len,
    WireTensor, WireUpdate,
};
pub use metrics::{read_metrics, to_csv_bytes, MetricsWriter, RoundMetrics, CSV_COLUMNS};

use rand::Rng;
use rayon::prelude::*;

pub use crate::config::Mode;
use crate::config::ExperimentConfig;
use crate::corpus::{partition, sample_batch, synthetic_text, ClientShard, Corpus, SplitCorpus};
use crate::dual::{update_duals, DualState, UsageVector};
use crate::error::{Error, Result};
use crate::model::{
    active_params, backward, delta, evaluate, forward_loss, init_model, Gradients, ModelConfig,
    ModelParams, UpdateDelta,
};
use crate::policy::{compute_knobs, Knobs};
use crate::proxy::{estimate_usage, ProxyCoeffs};
use crate::seed::{self, Purpose};

/// What one client sends back after a round of local work.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// The delta as reconstructed by the server after the wire roundtrip.
    pub delta: UpdateDelta,
    pub usage: UsageVector,
    pub wire_bytes: usize,
    pub micro_batches: usize,
}

/// Trains a copy of `global` on `shard` for `knobs.s` optimizer steps, each
/// averaging gradients over `knobs.grad_accum` micro-batches of size
/// `knobs.b`. A non-finite loss or parameter aborts with
/// [`Error::NonFinite`].
#[allow(clippy::too_many_arguments)]
pub fn local_train<R: Rng + ?Sized>(
    shard: &ClientShard,
    global: &ModelParams,
    knobs: &Knobs,
    lr: f64,
    rng: &mut R,
    coeffs: &ProxyCoeffs,
    heterogeneity: f64,
) -> Result<ClientUpdate> {
    let cfg = global.cfg;
    cfg.check_depth(knobs.k)?;
    let mut params = global.clone();
    let mut micro_batches = 0;
    for _ in 0..knobs.s {
        let mut grads = Gradients::zeros(cfg, knobs.k);
        for _ in 0..knobs.grad_accum {
            let batch = sample_batch(shard, knobs.b, cfg.context_window, rng)?;
            micro_batches += 1;
            let (loss, cache) = forward_loss(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("local training loss"));
            }
            grads.add_assign(&backward(&params, &cache, knobs.k)?)?;
        }
        grads.scale(1.0 / knobs.grad_accum as f64);
        params.sgd_step(&grads, lr)?;
    }
    let raw = delta(&params, global, knobs.k)?;
    let (delta, wire_bytes) = roundtrip(&raw, knobs.q)?;
    let usage = estimate_usage(knobs, active_params(&cfg, knobs.k)?, coeffs, heterogeneity);
    Ok(ClientUpdate {
        client_id: shard.client_id,
        delta,
        usage,
        wire_bytes,
        micro_batches,
    })
}

/// Elementwise mean of `deltas`, summed in the given order. With `weights`,
/// a weighted mean normalised by the weight total.
pub fn aggregate(deltas: &[&UpdateDelta], weights: Option<&[f64]>) -> Result<UpdateDelta> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::Shape("cannot aggregate an empty set of updates".into()))?;
    let (cfg, k) = (*first.cfg(), first.k);
    if let Some(w) = weights {
        if w.len() != deltas.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} updates",
                w.len(),
                deltas.len()
            )));
        }
    }
    let mut out = UpdateDelta::zeros(cfg, k);
    for (i, d) in deltas.iter().enumerate() {
        if *d.cfg() != cfg || d.k != k {
            return Err(Error::Shape(format!(
                "update {i} has depth {} and shape {:?}, expected {k} and {cfg:?}",
                d.k,
                d.cfg()
            )));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        for (acc, src) in out.values.tensors_mut().into_iter().zip(d.values.tensors()) {
            for (a, x) in acc.iter_mut().zip(src) {
                *a += w * x;
            }
        }
    }
    let total = weights.map_or(deltas.len() as f64, |w| w.iter().sum());
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Shape(format!("aggregation weights sum to {total}")));
    }
    for t in out.values.tensors_mut() {
        for x in t {
            *x /= total;
        }
    }
    Ok(out)
}

/// Loads the configured corpus, or generates the synthetic one.
pub fn load_data(cfg: &ExperimentConfig) -> Result<SplitCorpus> {
    let c = &cfg.corpus;
    match &c.path {
        Some(path) => crate::corpus::load_corpus(path, c.val_fraction),
        None => Corpus::from_text(&synthetic_text(c.synthetic_len, c.synthetic_seed))?
            .split(c.val_fraction),
    }
}

/// Per-client energy/temperature multipliers, uniform in [0.8, 1.2].
pub fn heterogeneity_multipliers(master: u64, n_clients: usize, enabled: bool) -> Vec<f64> {
    (0..n_clients)
        .map(|c| {
            if enabled {
                seed::rng(master, Purpose::Heterogeneity, c as u64, 0).gen_range(0.8..=1.2)
            } else {
                1.0
            }
        })
        .collect()
}

/// `clients_per_round` distinct ids drawn uniformly, ascending.
pub fn select_clients(master: u64, round: usize, n_clients: usize, per_round: usize) -> Vec<usize> {
    let mut rng = seed::rng(master, Purpose::Selection, round as u64, 0);
    let mut picked = rand::seq::index::sample(&mut rng, n_clients, per_round).into_vec();
    picked.sort_unstable();
    picked
}

/// Orchestrator state. The round loop is its only writer.
#[derive(Debug)]
pub struct Federation {
    cfg: ExperimentConfig,
    vocab_size: usize,
    shards: Vec<ClientShard>,
    val: Vec<usize>,
    global: ModelParams,
    duals: DualState,
    heterogeneity: Vec<f64>,
    round: usize,
    pool: rayon::ThreadPool,
}

impl Federation {
    /// Validates `cfg`, loads data, partitions it and initialises the model.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_data(&cfg)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: ExperimentConfig, data: SplitCorpus) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.model;
        let model_cfg = ModelConfig {
            vocab_size: data.corpus.vocab_size(),
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            n_blocks: m.n_blocks,
            context_window: m.context_window,
        };
        let shards = partition(&data.train, cfg.n_clients, m.context_window)?;
        if data.val.len() <= m.context_window {
            return Err(Error::ShortSequence {
                len: data.val.len(),
                needed: m.context_window + 1,
            });
        }
        let global = init_model(model_cfg, cfg.seed)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
        Ok(Federation {
            heterogeneity: heterogeneity_multipliers(cfg.seed, cfg.n_clients, cfg.heterogeneity),
            vocab_size: model_cfg.vocab_size,
            shards,
            val: data.val,
            global,
            duals: DualState::default(),
            round: 0,
            pool,
            cfg,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn duals(&self) -> &DualState {
        &self.duals
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn heterogeneity(&self) -> &[f64] {
        &self.heterogeneity
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Knobs the next round will use.
    pub fn next_knobs(&self) -> Knobs {
        match self.cfg.mode {
            Mode::Cafl => compute_knobs(&self.duals, &self.cfg.policy, self.cfg.model.n_blocks),
            Mode::FedAvg => self.cfg.policy.base_knobs(),
        }
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.round + 1;
        let eval = evaluate(
            &self.global,
            &self.val,
            self.cfg.model.context_window,
            self.cfg.eval_examples,
        )?;
        let selected = select_clients(
            self.cfg.seed,
            round,
            self.cfg.n_clients,
            self.cfg.clients_per_round,
        );
        let knobs = self.next_knobs();

        let (global, shards, hetero, cfg) = (&self.global, &self.shards, &self.heterogeneity, &self.cfg);
        let results: Vec<Result<ClientUpdate>> = self.pool.install(|| {
            selected
                .par_iter()
                .map(|&c| {
                    let mut rng = seed::rng(cfg.seed, Purpose::ClientBatches, round as u64, c as u64);
                    local_train(&shards[c], global, &knobs, cfg.lr, &mut rng, &cfg.proxy, hetero[c])
                })
                .collect()
        });

        let mut updates = Vec::with_capacity(results.len());
        for (c, r) in selected.iter().zip(results) {
            match r {
                Ok(u) => updates.push(u),
                Err(Error::NonFinite(what)) => {
                    log::warn!("round {round}: client {c} dropped, non-finite {what}");
                }
                Err(e) => return Err(e),
            }
        }

        let clients: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
        let wire_bytes = updates.iter().map(|u| u.wire_bytes).sum();
        let usage = if updates.is_empty() {
            log::warn!("round {round}: every client failed, model and duals unchanged");
            UsageVector::default()
        } else {
            let deltas: Vec<&UpdateDelta> = updates.iter().map(|u| &u.delta).collect();
            let weights: Option<Vec<f64>> = self
                .cfg
                .weighted_aggregation
                .then(|| updates.iter().map(|u| self.shards[u.client_id].len() as f64).collect());
            let agg = aggregate(&deltas, weights.as_deref())?;
            self.global.apply_delta(&agg)?;
            let usage = UsageVector::mean(&updates.iter().map(|u| u.usage).collect::<Vec<_>>());
            if self.cfg.mode == Mode::Cafl {
                self.duals = update_duals(&self.duals, &usage, &self.cfg.budgets, &self.cfg.dual);
            }
            usage
        };

        self.round = round;
        Ok(RoundMetrics {
            round,
            val_loss: eval.loss,
            val_acc: eval.accuracy,
            knobs,
            duals: self.duals,
            ratios: usage.ratios(&self.cfg.budgets),
            usage,
            wire_bytes,
            clients,
        })
    }
}

/// Runs all configured rounds and returns the trace.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    run_experiment_with(cfg, |_| Ok(()))
}

/// Like [`run_experiment`], calling `on_round` after each round.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut on_round: F) -> Result<Vec<RoundMetrics>>
where
    F: FnMut(&RoundMetrics) -> Result<()>,
{
    let mut fed = Federation::new(cfg.clone())?;
    let mut trace = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let m = fed.run_round()?;
        on_round(&m)?;
        trace.push(m);
    }
    Ok(trace)
}
