use crate::corpus::Batch;
use crate::error::{Error, Result};

use super::{Gradients, ModelParams};

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: Batch,
    /// Block inputs `h_0..h_L`, each `batch x hidden`.
    hidden: Vec<Vec<f64>>,
    /// `tanh` outputs of each block, each `batch x hidden`.
    activations: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let v = params.cfg.vocab_size;
    if let Some(&bad) = batch
        .contexts
        .iter()
        .chain(&batch.targets)
        .find(|&&id| id >= v)
    {
        return Err(Error::Shape(format!("token id {bad} >= vocab size {v}")));
    }
    Ok(())
}

/// Returns `batch x vocab` logits and fills `hidden`/`activations`.
fn run_forward(
    params: &ModelParams,
    batch: &Batch,
    hidden: &mut Vec<Vec<f64>>,
    activations: &mut Vec<Vec<f64>>,
) -> Vec<f64> {
    let cfg = &params.cfg;
    let (n, d, v, w) = (batch.len(), cfg.hidden_dim, cfg.vocab_size, batch.window);

    let mut h = vec![0.0; n * d];
    let inv_w = 1.0 / w as f64;
    for r in 0..n {
        let row = &mut h[r * d..(r + 1) * d];
        for &id in batch.context(r) {
            let e = &params.embedding[id * d..(id + 1) * d];
            for (x, y) in row.iter_mut().zip(e) {
                *x += y;
            }
        }
        for x in row.iter_mut() {
            *x *= inv_w;
        }
    }

    for block in &params.blocks {
        let mut z = vec![0.0; n * d];
        let mut next = h.clone();
        for r in 0..n {
            let hin = &h[r * d..(r + 1) * d];
            for i in 0..d {
                let wrow = &block.weight[i * d..(i + 1) * d];
                let a = wrow.iter().zip(hin).map(|(a, b)| a * b).sum::<f64>() + block.bias[i];
                let t = a.tanh();
                z[r * d + i] = t;
                next[r * d + i] += t;
            }
        }
        hidden.push(std::mem::replace(&mut h, next));
        activations.push(z);
    }

    let mut logits = vec![0.0; n * v];
    for r in 0..n {
        let out = &mut logits[r * v..(r + 1) * v];
        out.copy_from_slice(&params.head_bias);
        for (j, &x) in h[r * d..(r + 1) * d].iter().enumerate() {
            let wrow = &params.head_weight[j * v..(j + 1) * v];
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += x * wv;
            }
        }
    }
    hidden.push(h);
    logits
}

/// Softmax in place per row; returns per-row `-log p(target)`.
fn softmax_xent(logits: &mut [f64], targets: &[usize], v: usize) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &mut logits[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let shifted_target = row[t] - m;
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            let nll = sum.ln() - shifted_target;
            for x in row.iter_mut() {
                *x /= sum;
            }
            nll
        })
        .collect()
}

/// Mean cross-entropy (nats) of the batch targets.
pub fn forward_loss(params: &ModelParams, batch: &Batch) -> Result<(f64, ForwardCache)> {
    check_batch(params, batch)?;
    let mut hidden = Vec::with_capacity(params.cfg.n_blocks + 1);
    let mut activations = Vec::with_capacity(params.cfg.n_blocks);
    let mut probs = run_forward(params, batch, &mut hidden, &mut activations);
    let nll = softmax_xent(&mut probs, &batch.targets, params.cfg.vocab_size);
    let loss = nll.iter().sum::<f64>() / batch.len() as f64;
    Ok((
        loss,
        ForwardCache {
            batch: batch.clone(),
            hidden,
            activations,
            probs,
        },
    ))
}

/// Exact gradients of the mean loss for the tensors trainable at depth `k`.
///
/// Propagation stops at the lowest trainable block unless the embedding is
/// trainable too; frozen tensors keep exact zero gradients.
pub fn backward(params: &ModelParams, cache: &ForwardCache, k: usize) -> Result<Gradients> {
    let cfg = &params.cfg;
    cfg.check_depth(k)?;
    let batch = &cache.batch;
    let (n, d, v, big_l) = (batch.len(), cfg.hidden_dim, cfg.vocab_size, cfg.n_blocks);
    if cache.hidden.len() != big_l + 1 || cache.probs.len() != n * v {
        return Err(Error::Shape("forward cache does not match parameters".into()));
    }
    let mut grads = Gradients::zeros(*cfg, k);
    let g = &mut grads.values;

    let inv_n = 1.0 / n as f64;
    let mut dlogits = cache.probs.clone();
    for (r, &t) in batch.targets.iter().enumerate() {
        dlogits[r * v + t] -= 1.0;
    }
    for x in dlogits.iter_mut() {
        *x *= inv_n;
    }

    let top = &cache.hidden[big_l];
    let mut dh = vec![0.0; n * d];
    for r in 0..n {
        let dl = &dlogits[r * v..(r + 1) * v];
        for (gb, x) in g.head_bias.iter_mut().zip(dl) {
            *gb += x;
        }
        for j in 0..d {
            let hj = top[r * d + j];
            let wrow = &params.head_weight[j * v..(j + 1) * v];
            let grow = &mut g.head_weight[j * v..(j + 1) * v];
            let mut acc = 0.0;
            for ((gw, &dlv), &wv) in grow.iter_mut().zip(dl).zip(wrow) {
                *gw += hj * dlv;
                acc += dlv * wv;
            }
            dh[r * d + j] = acc;
        }
    }

    let train_embedding = k == big_l;
    let lowest = big_l - k;
    for l in (lowest..big_l).rev() {
        let z = &cache.activations[l];
        let hin = &cache.hidden[l];
        let block = &params.blocks[l];
        let gblock = &mut g.blocks[l];
        let need_dh = l > lowest || train_embedding;
        let mut da = vec![0.0; d];
        for r in 0..n {
            let rows = r * d..(r + 1) * d;
            for ((a, g), t) in da.iter_mut().zip(&dh[rows.clone()]).zip(&z[rows]) {
                *a = g * (1.0 - t * t);
            }
            let hrow = &hin[r * d..(r + 1) * d];
            for (i, &a) in da.iter().enumerate() {
                gblock.bias[i] += a;
                let grow = &mut gblock.weight[i * d..(i + 1) * d];
                for (gw, x) in grow.iter_mut().zip(hrow) {
                    *gw += a * x;
                }
            }
            if need_dh {
                let dhrow = &mut dh[r * d..(r + 1) * d];
                for (i, &a) in da.iter().enumerate() {
                    let wrow = &block.weight[i * d..(i + 1) * d];
                    for (o, wv) in dhrow.iter_mut().zip(wrow) {
                        *o += a * wv;
                    }
                }
            }
        }
    }

    if train_embedding {
        let inv_w = 1.0 / batch.window as f64;
        for r in 0..n {
            let dx = &dh[r * d..(r + 1) * d];
            for &id in batch.context(r) {
                let erow = &mut g.embedding[id * d..(id + 1) * d];
                for (e, x) in erow.iter_mut().zip(dx) {
                    *e += x * inv_w;
                }
            }
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub examples: usize,
}

const EVAL_CHUNK: usize = 256;

/// Sliding-window evaluation over the first `max_examples` positions of
/// `val_ids`. Argmax ties resolve to the lowest id.
pub fn evaluate(
    params: &ModelParams,
    val_ids: &[usize],
    window: usize,
    max_examples: usize,
) -> Result<Evaluation> {
    if val_ids.len() <= window {
        return Err(Error::ShortSequence {
            len: val_ids.len(),
            needed: window + 1,
        });
    }
    let total = (val_ids.len() - window).min(max_examples.max(1));
    let v = params.cfg.vocab_size;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    while start < total {
        let end = (start + EVAL_CHUNK).min(total);
        let mut contexts = Vec::with_capacity((end - start) * window);
        let mut targets = Vec::with_capacity(end - start);
        for o in start..end {
            contexts.extend_from_slice(&val_ids[o..o + window]);
            targets.push(val_ids[o + window]);
        }
        let batch = Batch::new(window, contexts, targets)?;
        let (loss, cache) = forward_loss(params, &batch)?;
        loss_sum += loss * batch.len() as f64;
        for (r, &t) in batch.targets.iter().enumerate() {
            let row = &cache.probs[r * v..(r + 1) * v];
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            if best == t {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(Evaluation {
        loss: loss_sum / total as f64,
        accuracy: correct as f64 / total as f64,
        examples: total,
    })
}
