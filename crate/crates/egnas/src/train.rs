//! Training of derived (discrete) architectures from scratch, with the
//! plateau-halving learning-rate schedule, plus model checkpointing as
//! JSON metadata + a flat binary parameter blob.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnState, Param, Tape};
use crate::datagen::derive_seed;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::graph::{batch_refs, Graph};
use crate::layers::ParamKind;
use crate::network::{loss_on_tape, Model, TaskSpec};
use crate::optim::{Adam, PlateauSchedule};
use crate::search::evaluate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            plateau_patience: 10,
            lr_floor: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("max_epochs and batch_size must be positive"));
        }
        if self.lr <= 0.0 || self.lr_floor <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub logs: Vec<TrainEpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

type Snapshot = (Vec<Vec<f64>>, Vec<BnState>);

fn take_snapshot(model: &Model) -> Snapshot {
    let params = model.bank.entries().iter().map(|e| e.param.value().data.clone()).collect();
    let buffers = model.bank.buffers().iter().map(|(_, s)| s.borrow().clone()).collect();
    (params, buffers)
}

fn restore_snapshot(model: &Model, snap: &Snapshot) {
    for (e, data) in model.bank.entries().iter().zip(&snap.0) {
        e.param.value_mut().data.copy_from_slice(data);
    }
    for ((_, s), saved) in model.bank.buffers().iter().zip(&snap.1) {
        *s.borrow_mut() = saved.clone();
    }
}

/// Adam training with validation-plateau lr halving and early stop; the
/// model is left at its best-validation parameters.
pub fn train_model(
    model: &Model,
    train: &[Graph],
    val: &[Graph],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training requires non-empty train and validation splits"));
    }
    let params: Vec<(ParamKind, Param)> =
        model.bank.entries().iter().map(|e| (e.kind, e.param.clone())).collect();
    let mut adam = Adam::new(params, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut plateau = PlateauSchedule::new(cfg.lr, cfg.plateau_patience, cfg.lr_floor);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7237));

    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, Snapshot)> = None;
    for epoch in 0..cfg.max_epochs {
        let lr = plateau.lr;
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            model.bank.zero_grads();
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| &train[i]).collect();
            let b = batch_refs(&graphs)?;
            let mut tape = Tape::new();
            let out = model.forward_on(&mut tape, &b, true)?;
            let loss = loss_on_tape(&mut tape, out, &b, &model.task)?;
            let lv = tape.data(loss)[0];
            if !lv.is_finite() {
                return Err(Error::Numeric("non-finite training loss".into()));
            }
            tape.backward(loss)?;
            adam.step(lr);
            loss_sum += lv;
            batches += 1;
        }
        let (val_loss, val_metric) = evaluate(model, val)?;
        logs.push(TrainEpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_metric,
            lr,
        });
        if best.as_ref().map_or(true, |(_, bl, _)| val_loss < *bl) {
            best = Some((epoch, val_loss, take_snapshot(model)));
        }
        if plateau.observe(val_loss).stop {
            break;
        }
    }
    let (best_epoch, best_val_loss, snap) = best.expect("at least one epoch ran");
    restore_snapshot(model, &snap);
    Ok(TrainOutcome { logs, best_epoch, best_val_loss })
}

// ── Checkpointing ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, in f64 units.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub genotype: Genotype,
    pub task: TaskSpec,
    pub dropout: f64,
    pub d_in_v: usize,
    pub d_in_e: usize,
    blob: String,
    manifest: Vec<ManifestEntry>,
}

/// Write `<stem>.json` + `<stem>.bin` under `dir`. The blob holds every
/// parameter and every batch-norm running statistic, little-endian f64.
pub fn save_checkpoint(model: &Model, genotype: &Genotype, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    let mut blob: Vec<f64> = Vec::new();
    for e in model.bank.entries() {
        let t = e.param.value();
        manifest.push(ManifestEntry {
            name: e.name.clone(),
            rows: t.rows,
            cols: t.cols,
            offset: blob.len(),
        });
        blob.extend_from_slice(&t.data);
    }
    for (name, state) in model.bank.buffers() {
        let s = state.borrow();
        for (suffix, data) in [("running_mean", &s.running_mean), ("running_var", &s.running_var)] {
            manifest.push(ManifestEntry {
                name: format!("{name}.{suffix}"),
                rows: 1,
                cols: data.len(),
                offset: blob.len(),
            });
            blob.extend_from_slice(data);
        }
    }
    let meta = CheckpointMeta {
        genotype: genotype.clone(),
        task: model.task,
        dropout: model.net.dropout,
        d_in_v: model.d_in_v,
        d_in_e: model.d_in_e,
        blob: format!("{stem}.bin"),
        manifest,
    };
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&meta).expect("checkpoint meta serializes"))?;
    let mut bytes = Vec::with_capacity(blob.len() * 8);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    File::create(dir.join(format!("{stem}.bin")))?.write_all(&bytes)?;
    Ok(json_path)
}

/// Rebuild the discrete model from a checkpoint; eval outputs are
/// bit-exact against the saved model.
pub fn load_checkpoint(json_path: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(
        &std::fs::read_to_string(json_path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", json_path.display())))?,
    )
    .map_err(|e| Error::data(format!("{}: {e}", json_path.display())))?;
    let blob_path = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&meta.blob);
    let mut bytes = Vec::new();
    File::open(&blob_path)
        .map_err(|e| Error::data(format!("cannot open blob {}: {e}", blob_path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::data("parameter blob length is not a multiple of 8"));
    }
    let blob: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let model = Model::discrete(&meta.genotype, meta.task, meta.dropout, meta.d_in_v, meta.d_in_e, 0)?;
    let slice_for = |name: &str, len: usize| -> Result<&[f64]> {
        let entry = meta
            .manifest
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::data(format!("checkpoint missing tensor {name}")))?;
        if entry.rows * entry.cols != len {
            return Err(Error::data(format!("checkpoint tensor {name} has wrong shape")));
        }
        blob.get(entry.offset..entry.offset + len)
            .ok_or_else(|| Error::data(format!("checkpoint blob truncated at {name}")))
    };
    for e in model.bank.entries() {
        let len = e.param.value().data.len();
        let src = slice_for(&e.name, len)?;
        e.param.value_mut().data.copy_from_slice(src);
    }
    for (name, state) in model.bank.buffers() {
        let width = state.borrow().running_mean.len();
        let mean = slice_for(&format!("{name}.running_mean"), width)?.to_vec();
        let var = slice_for(&format!("{name}.running_var"), width)?.to_vec();
        *state.borrow_mut() = BnState { running_mean: mean, running_var: var };
    }
    Ok((model, meta))
}
