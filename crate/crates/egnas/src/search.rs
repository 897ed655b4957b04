//! Bilevel differentiable search: alternating optimization of the
//! architecture parameters on validation batches (Adam) and the model
//! weights on training batches (momentum SGD under a cosine schedule),
//! plus derivation of discrete genotypes from the alphas.
//!
//! The architecture gradient uses the first-order approximation: weights
//! are held fixed during an alpha step and no unrolled second-order term
//! is computed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape};
use crate::cell::CellAlphas;
use crate::datagen::derive_seed;
use crate::error::{Error, Result};
use crate::genotype::{CellTopology, EdgeOpKind, EntityOpKind, Genotype, GenotypeCell};
use crate::graph::{batch_refs, Graph};
use crate::layers::ParamKind;
use crate::network::{loss_on_tape, metric_value, Model};
use crate::optim::{cosine_lr, Adam, SgdMomentum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_weight_decay: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 40,
            batch_size: 64,
            w_lr: 0.025,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_weight_decay: 1e-3,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.w_lr < 0.0 || self.alpha_lr < 0.0 {
            return Err(Error::config("learning rates must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub metric: f64,
    pub lr: f64,
}

pub struct SearchOutcome {
    pub genotype: Genotype,
    pub logs: Vec<EpochLog>,
    /// Would-be derived genotype after each epoch.
    pub snapshots: Vec<Genotype>,
}

/// Whole-split eval-mode loss and metric.
pub fn evaluate(model: &Model, graphs: &[Graph]) -> Result<(f64, f64)> {
    let refs: Vec<&Graph> = graphs.iter().collect();
    let b = batch_refs(&refs)?;
    let mut tape = Tape::new();
    let out = model.forward_on(&mut tape, &b, false)?;
    let loss = loss_on_tape(&mut tape, out, &b, &model.task)?;
    let loss = tape.data(loss)[0];
    let pred = tape.to_tensor(out);
    let metric = metric_value(&pred, &b, &model.task)?;
    Ok((loss, metric))
}

fn softmax5(vals: &[f64]) -> Vec<f64> {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Pick the strongest non-Zero op of one alpha vector: (op index, weight).
fn best_non_zero(weights: &[f64], zero_index: usize) -> (usize, f64) {
    let mut best = usize::MAX;
    for (i, &w) in weights.iter().enumerate() {
        if i == zero_index {
            continue;
        }
        if best == usize::MAX || w > weights[best] {
            best = i;
        }
    }
    (best, weights[best])
}

fn derive_dag<K: Copy>(
    alphas: &[Param],
    topo: CellTopology,
    kinds: &[K],
    zero_index: usize,
) -> Vec<(usize, usize, K)> {
    // score per candidate edge, then keep the top-2 per destination node.
    let pairs = topo.pairs();
    let mut per_dst: Vec<Vec<(usize, K, f64)>> = vec![Vec::new(); topo.dag_nodes + 1];
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let weights = softmax5(&alphas[k].value().data);
        let (op, score) = best_non_zero(&weights, zero_index);
        per_dst[j].push((i, kinds[op], score));
    }
    let mut out = Vec::new();
    for (j, cands) in per_dst.iter_mut().enumerate().skip(1) {
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        for &(i, kind, _) in cands.iter().take(2) {
            out.push((i, j, kind));
        }
    }
    out.sort_by_key(|&(i, j, _)| (j, i));
    out
}

/// Discretize the supernet: per candidate DAG edge take the argmax op with
/// Zero excluded (ties break toward the lower op index), then keep at most
/// the two strongest incoming edges per node (ties toward the lower source).
pub fn derive(alphas: &[CellAlphas], topo: CellTopology, d_v: usize, d_e: usize) -> Genotype {
    let cells = alphas
        .iter()
        .map(|ca| GenotypeCell {
            entity: derive_dag(&ca.entity, topo, &EntityOpKind::ALL, 4),
            edge: derive_dag(&ca.edge, topo, &EdgeOpKind::ALL, 4),
        })
        .collect();
    Genotype { cells, d_v, d_e }
}

/// Run the alternating search and return the final genotype plus the
/// per-epoch trajectory.
pub fn search(
    model: &Model,
    train: &[Graph],
    val: &[Graph],
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("search requires non-empty train and validation splits"));
    }
    let alphas = model
        .alphas
        .as_ref()
        .ok_or_else(|| Error::config("search requires a supernet model"))?;
    let topo = CellTopology::new(model.net.dag_nodes);

    let weight_params: Vec<(ParamKind, Param)> =
        model.bank.entries().iter().map(|e| (e.kind, e.param.clone())).collect();
    let alpha_handles = model.alpha_params();
    let alpha_params: Vec<(ParamKind, Param)> =
        alpha_handles.iter().map(|p| (ParamKind::Weight, p.clone())).collect();
    let mut sgd = SgdMomentum::new(weight_params, cfg.w_momentum, cfg.w_weight_decay);
    let mut adam = Adam::new(alpha_params, cfg.alpha_beta1, cfg.alpha_beta2, cfg.alpha_weight_decay);

    let zero_grads = || {
        model.bank.zero_grads();
        for p in &alpha_handles {
            p.zero_grad();
        }
    };

    let run_batch = |graphs: Vec<&Graph>, training: bool, what: &str| -> Result<f64> {
        let b = batch_refs(&graphs)?;
        let mut tape = Tape::new();
        let out = model.forward_on(&mut tape, &b, training)?;
        let loss = loss_on_tape(&mut tape, out, &b, &model.task)?;
        let lv = tape.data(loss)[0];
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite {what} loss during search")));
        }
        tape.backward(loss)?;
        Ok(lv)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 71));
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.w_lr);
        let mut train_idx: Vec<usize> = (0..train.len()).collect();
        train_idx.shuffle(&mut rng);
        let mut val_idx: Vec<usize> = (0..val.len()).collect();
        val_idx.shuffle(&mut rng);
        let val_batches: Vec<&[usize]> = val_idx.chunks(cfg.batch_size).collect();

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, tb) in train_idx.chunks(cfg.batch_size).enumerate() {
            // Architecture step on a validation batch, weights fixed.
            let vb = val_batches[bi % val_batches.len()];
            zero_grads();
            run_batch(vb.iter().map(|&i| &val[i]).collect(), true, "validation")?;
            adam.step(cfg.alpha_lr);

            // Weight step on the training batch, alphas fixed.
            zero_grads();
            loss_sum += run_batch(tb.iter().map(|&i| &train[i]).collect(), true, "training")?;
            batches += 1;
            sgd.step(lr);
        }

        let (val_loss, metric) = evaluate(model, val)?;
        logs.push(EpochLog { epoch, train_loss: loss_sum / batches as f64, val_loss, metric, lr });
        snapshots.push(derive(alphas, topo, model.net.d_v, model.net.d_e));
    }

    let genotype = derive(alphas, topo, model.net.d_v, model.net.d_e);
    genotype.validate()?;
    Ok(SearchOutcome { genotype, logs, snapshots })
}
