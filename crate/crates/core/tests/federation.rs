use cafl::config::{ExperimentConfig, Mode};
use cafl::corpus::{partition, sample_batch, Batch, ClientShard, Corpus};
use cafl::dual::{Budgets, DualState};
use cafl::fedsim::{
    aggregate, local_train, quantize, run_experiment, to_csv_bytes, wire_len, Federation,
};
use cafl::model::{
    active_params, backward, delta, evaluate, forward_loss, init_model, ModelConfig, ModelParams,
    UpdateDelta,
};
use cafl::policy::{Compression, Knobs, PolicyBase};
use cafl::proxy::{estimate_usage, ProxyCoeffs, BYTES_PER_MB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.synthetic_len = 20_000;
    cfg.model.embed_dim = 16;
    cfg.model.hidden_dim = 16;
    cfg.model.n_blocks = 3;
    cfg.model.context_window = 4;
    cfg.n_clients = 5;
    cfg.clients_per_round = 3;
    cfg.rounds = 4;
    cfg.policy.k_base = 3;
    cfg.policy.s_base = 10;
    cfg.policy.b_base = 8;
    cfg.eval_examples = 256;
    cfg
}

fn model_cfg(v: usize, d: usize, l: usize, w: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        embed_dim: d,
        hidden_dim: d,
        n_blocks: l,
        context_window: w,
    }
}

#[test]
fn uniform_offset_sampling() {
    // 10 valid offsets; each should be drawn ~1000 times out of 10^4
    let shard = ClientShard {
        client_id: 0,
        ids: (0..12).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 10];
    for _ in 0..10_000 {
        let b = sample_batch(&shard, 1, 2, &mut rng).unwrap();
        counts[b.contexts[0]] += 1;
    }
    let p = 0.1f64;
    let se = (10_000.0 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - 1000.0).abs() < 5.0 * se, "{counts:?}");
    }
}

#[test]
fn alternating_text_is_learned() {
    // mean pooling over an odd window still tells the two phases apart
    let corpus = Corpus::from_text(&"ab".repeat(500)).unwrap();
    let split = corpus.split(0.2).unwrap();
    let cfg = model_cfg(2, 8, 2, 3);
    let mut params = init_model(cfg, 3).unwrap();
    let shard = ClientShard {
        client_id: 0,
        ids: split.train.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let batch = sample_batch(&shard, 16, 3, &mut rng).unwrap();
        let (_, cache) = forward_loss(&params, &batch).unwrap();
        let g = backward(&params, &cache, 2).unwrap();
        params.sgd_step(&g, 0.5).unwrap();
    }
    let eval = evaluate(&params, &split.val, 3, 1000).unwrap();
    assert!(eval.accuracy > 0.9, "{eval:?}");
}

#[test]
fn one_sgd_step_reduces_batch_loss() {
    let cfg = model_cfg(20, 16, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 1..=3 {
        let mut params = init_model(cfg, k as u64).unwrap();
        let shard = ClientShard {
            client_id: 0,
            ids: (0..300).map(|_| rng.gen_range(0..20)).collect(),
        };
        let batch = sample_batch(&shard, 32, 5, &mut rng).unwrap();
        let (before, cache) = forward_loss(&params, &batch).unwrap();
        let g = backward(&params, &cache, k).unwrap();
        params.sgd_step(&g, 0.05).unwrap();
        let (after, _) = forward_loss(&params, &batch).unwrap();
        assert!(after < before, "k={k}: {before} -> {after}");
    }
}

fn shard_of(len: usize, v: usize, seed: u64) -> ClientShard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ClientShard {
        client_id: 0,
        ids: (0..len).map(|_| rng.gen_range(0..v)).collect(),
    }
}

#[test]
fn local_train_consumes_s_times_accum_micro_batches() {
    let cfg = model_cfg(10, 8, 2, 3);
    let global = init_model(cfg, 1).unwrap();
    let knobs = Knobs {
        k: 1,
        s: 10,
        b: 8,
        q: Compression::Full,
        grad_accum: 4,
    };
    let u = local_train(
        &shard_of(200, 10, 2),
        &global,
        &knobs,
        0.1,
        &mut ChaCha8Rng::seed_from_u64(3),
        &ProxyCoeffs::default(),
        1.0,
    )
    .unwrap();
    assert_eq!(u.micro_batches, 40);
}

#[test]
fn local_train_zero_lr_and_determinism() {
    let cfg = model_cfg(10, 8, 2, 3);
    let global = init_model(cfg, 1).unwrap();
    let shard = shard_of(200, 10, 5);
    let knobs = Knobs {
        k: 2,
        s: 10,
        b: 8,
        q: Compression::Int8,
        grad_accum: 2,
    };
    let coeffs = ProxyCoeffs::default();
    let run = |lr: f64, seed: u64| {
        local_train(&shard, &global, &knobs, lr, &mut ChaCha8Rng::seed_from_u64(seed), &coeffs, 1.1)
            .unwrap()
    };
    let still = run(0.0, 1);
    assert_eq!(still.delta.max_abs(), 0.0);
    assert!(still.usage.as_array().iter().all(|&x| x > 0.0));
    let a = run(0.2, 7);
    let b = run(0.2, 7);
    assert_eq!(a, b);
    assert!(a.delta.max_abs() > 0.0);
    assert_eq!(a.wire_bytes, wire_len(&cfg, 2, Compression::Int8));
}

#[test]
fn local_train_reports_divergence() {
    let cfg = model_cfg(10, 8, 2, 3);
    let global = init_model(cfg, 1).unwrap();
    let knobs = PolicyBase {
        k_base: 2,
        s_base: 10,
        b_base: 8,
        ..Default::default()
    }
    .base_knobs();
    let r = local_train(
        &shard_of(200, 10, 5),
        &global,
        &knobs,
        1e300,
        &mut ChaCha8Rng::seed_from_u64(1),
        &ProxyCoeffs::default(),
        1.0,
    );
    assert!(matches!(r, Err(cafl::Error::NonFinite(_))), "{r:?}");
}

#[test]
fn aggregated_delta_equals_mean_of_client_models() {
    let cfg = model_cfg(7, 5, 3, 2);
    let global = init_model(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 1..=3 {
        let clients: Vec<ModelParams> = (0..4)
            .map(|_| {
                let mut p = global.clone();
                for t in p.tensors_mut() {
                    for x in t.iter_mut() {
                        *x += rng.gen_range(-0.1..0.1);
                    }
                }
                p
            })
            .collect();
        let deltas: Vec<UpdateDelta> = clients
            .iter()
            .map(|c| cafl::fedsim::roundtrip(&delta(c, &global, k).unwrap(), Compression::Int8).unwrap().0)
            .collect();
        let refs: Vec<&UpdateDelta> = deltas.iter().collect();
        let mut via_delta = global.clone();
        via_delta.apply_delta(&aggregate(&refs, None).unwrap()).unwrap();

        let mask = cfg.trainable_mask(k);
        let g = global.tensors();
        let models: Vec<ModelParams> = deltas
            .iter()
            .map(|d| {
                let mut m = global.clone();
                m.apply_delta(d).unwrap();
                m
            })
            .collect();
        for (ti, on) in mask.iter().enumerate() {
            for (i, &base) in g[ti].iter().enumerate() {
                let expect = if *on {
                    models.iter().map(|m| m.tensors()[ti][i]).sum::<f64>() / models.len() as f64
                } else {
                    base
                };
                let got = via_delta.tensors()[ti][i];
                assert!((got - expect).abs() < 1e-12, "k={k} t={ti}: {got} vs {expect}");
            }
        }
    }
}

#[test]
fn comm_proxy_matches_wire_size() {
    let cfg = model_cfg(65, 64, 4, 8);
    for k in 1..=4 {
        for q in [Compression::Full, Compression::Int8, Compression::Int2] {
            let knobs = Knobs {
                k,
                s: 50,
                b: 32,
                q,
                grad_accum: 1,
            };
            let n = active_params(&cfg, k).unwrap();
            let proxy_bytes = estimate_usage(&knobs, n, &ProxyCoeffs::default(), 1.0).comm_mb * BYTES_PER_MB;
            let wire = quantize(&UpdateDelta::zeros(cfg, k), q).encoded_len();
            assert_eq!(wire, wire_len(&cfg, k, q));
            assert!(wire as f64 >= proxy_bytes);
            assert!((wire as f64 - proxy_bytes) / proxy_bytes <= 0.01, "k={k} q={q:?}");
        }
    }
}

#[test]
fn zero_rounds_give_empty_trace() {
    let mut cfg = small_config();
    cfg.rounds = 0;
    assert!(run_experiment(&cfg).unwrap().is_empty());
}

#[test]
fn first_round_uses_base_knobs_and_fedavg_keeps_zero_duals() {
    let mut cfg = small_config();
    cfg.mode = Mode::FedAvg;
    let trace = run_experiment(&cfg).unwrap();
    let base = cfg.policy.base_knobs();
    for m in &trace {
        assert_eq!(m.knobs, base);
        assert_eq!(m.duals, DualState::default());
    }
    cfg.mode = Mode::Cafl;
    let cafl = run_experiment(&cfg).unwrap();
    assert_eq!(cafl[0].knobs, base);
    assert_eq!(cafl[0].val_loss, trace[0].val_loss);
    assert!(cafl.windows(2).all(|w| w[1].round == w[0].round + 1));
}

#[test]
fn knobs_follow_previous_round_duals() {
    let trace = run_experiment(&small_config()).unwrap();
    let cfg = small_config();
    for w in trace.windows(2) {
        let expect = cafl::policy::compute_knobs(&w[0].duals, &cfg.policy, cfg.model.n_blocks);
        assert_eq!(w[1].knobs, expect);
    }
    for m in &trace {
        let r = m.usage.ratios(&cfg.budgets);
        assert_eq!(r, m.ratios);
        assert_eq!(m.clients.len(), cfg.clients_per_round);
    }
}

#[test]
fn infinite_budgets_make_modes_identical() {
    let mut cfg = small_config();
    cfg.budgets = Budgets {
        energy: f64::INFINITY,
        comm: f64::INFINITY,
        memory: f64::INFINITY,
        temperature: f64::INFINITY,
    };
    let a = run_experiment(&cfg).unwrap();
    cfg.mode = Mode::FedAvg;
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(to_csv_bytes(&a), to_csv_bytes(&b));
}

#[test]
fn weighted_aggregation_runs() {
    let mut cfg = small_config();
    cfg.weighted_aggregation = true;
    cfg.rounds = 2;
    let w = run_experiment(&cfg).unwrap();
    cfg.weighted_aggregation = false;
    let u = run_experiment(&cfg).unwrap();
    // first evaluation precedes any aggregation
    assert_eq!(w[0].val_loss, u[0].val_loss);
    assert_eq!(w.len(), 2);
}

#[test]
fn all_failed_round_is_skipped() {
    let mut cfg = small_config();
    cfg.lr = 1e300;
    cfg.rounds = 2;
    let mut fed = Federation::new(cfg).unwrap();
    let before = fed.global().clone();
    let m = fed.run_round().unwrap();
    assert!(m.clients.is_empty());
    assert_eq!(m.wire_bytes, 0);
    assert_eq!(fed.global(), &before);
    assert_eq!(fed.duals(), &DualState::default());
    assert_eq!(fed.round(), 1);
}

#[test]
fn thread_count_does_not_change_trace() {
    let mut cfg = small_config();
    cfg.threads = 1;
    let one = to_csv_bytes(&run_experiment(&cfg).unwrap());
    cfg.threads = 3;
    let three = to_csv_bytes(&run_experiment(&cfg).unwrap());
    assert_eq!(one, three);
}

#[test]
fn setup_errors_surface_before_training() {
    let mut cfg = small_config();
    cfg.corpus.path = Some("/definitely/not/here.txt".into());
    assert!(Federation::new(cfg).is_err());
    let mut cfg = small_config();
    cfg.corpus.synthetic_len = 30;
    assert!(Federation::new(cfg).unwrap_err().is_config());
    assert!(partition(&[0; 10], 5, 4).is_err());
}

#[test]
fn batch_shape_checked() {
    assert!(Batch::new(3, vec![0; 5], vec![0, 1]).is_err());
}
