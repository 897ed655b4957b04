//! Stacked-cell networks with task-specific output layers.
//!
//! A model embeds node features and the relation input, runs its cells
//! sequentially on the batch graph, and applies one of three heads:
//! per-node logits, per-edge logits, or a per-graph prediction from
//! mean-pooled node and edge features.

use std::cell::RefCell;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, SegmentMode, Tape, Tensor, Var};
use crate::cell::{edge_input_matrix, CellAlphas, CellCtx, DiscreteCell, SupernetCell};
use crate::datagen::derive_seed;
use crate::error::{Error, Result};
use crate::genotype::{CellTopology, Genotype};
use crate::graph::GraphBatch;
use crate::layers::{Linear, ParamBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLevel {
    Node,
    Edge,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    AbsoluteError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    BinaryF1,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub level: TaskLevel,
    pub num_classes: usize,
    pub loss: LossKind,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.loss {
            LossKind::AbsoluteError => {
                if self.num_classes != 1 {
                    return Err(Error::config("regression requires num_classes = 1"));
                }
                if self.level != TaskLevel::Graph {
                    return Err(Error::config("absolute_error is only supported at graph level"));
                }
            }
            LossKind::CrossEntropy => {
                if self.num_classes < 2 {
                    return Err(Error::config("cross_entropy requires num_classes >= 2"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_cells: usize,
    pub dag_nodes: usize,
    pub d_v: usize,
    pub d_e: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { num_cells: 4, dag_nodes: 4, d_v: 16, d_e: 16, dropout: 0.0 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cells == 0 || self.dag_nodes == 0 || self.d_v == 0 || self.d_e == 0 {
            return Err(Error::config("cells, DAG nodes and widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0,1)"));
        }
        Ok(())
    }
}

enum Cells {
    Supernet(Vec<SupernetCell>),
    Discrete(Vec<DiscreteCell>),
}

enum Head {
    Node(Linear),
    Edge(Linear),
    Graph(Linear),
}

/// A supernet or discrete network with its parameter registry.
pub struct Model {
    pub task: TaskSpec,
    pub net: NetworkConfig,
    pub d_in_v: usize,
    pub d_in_e: usize,
    pub bank: ParamBank,
    pub alphas: Option<Vec<CellAlphas>>,
    node_embed: Linear,
    edge_embed: Linear,
    cells: Cells,
    head: Head,
    dropout_rng: RefCell<ChaCha8Rng>,
}

fn head_for(task: &TaskSpec, net: &NetworkConfig, bank: &mut ParamBank, rng: &mut ChaCha8Rng) -> Head {
    // Task heads are plain linear classifiers without bias.
    match task.level {
        TaskLevel::Node => Head::Node(Linear::new(bank, "head.node", net.d_v, task.num_classes, false, rng)),
        TaskLevel::Edge => Head::Edge(Linear::new(bank, "head.edge", net.d_e, task.num_classes, false, rng)),
        TaskLevel::Graph => {
            Head::Graph(Linear::new(bank, "head.graph", net.d_v + net.d_e, task.num_classes, false, rng))
        }
    }
}

impl Model {
    /// One-shot model containing every candidate op, with all-zero alphas.
    pub fn supernet(
        task: TaskSpec,
        net: NetworkConfig,
        d_in_v: usize,
        d_in_e: usize,
        seed: u64,
    ) -> Result<Model> {
        task.validate()?;
        net.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let topo = CellTopology::new(net.dag_nodes);
        let node_embed = Linear::new(&mut bank, "embed.node", d_in_v, net.d_v, true, &mut rng);
        let edge_embed = Linear::new(&mut bank, "embed.edge", d_in_e.max(1), net.d_e, true, &mut rng);
        let cells: Vec<SupernetCell> = (0..net.num_cells)
            .map(|c| SupernetCell::new(&mut bank, &format!("cell{c}"), topo, net.d_v, net.d_e, &mut rng))
            .collect();
        let alphas = (0..net.num_cells).map(|_| CellAlphas::new(topo)).collect();
        let head = head_for(&task, &net, &mut bank, &mut rng);
        Ok(Model {
            task,
            net,
            d_in_v,
            d_in_e,
            bank,
            alphas: Some(alphas),
            node_embed,
            edge_embed,
            cells: Cells::Supernet(cells),
            head,
            dropout_rng: RefCell::new(ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD0))),
        })
    }

    /// Discrete network instantiated from a genotype; trains from scratch.
    pub fn discrete(
        genotype: &Genotype,
        task: TaskSpec,
        dropout: f64,
        d_in_v: usize,
        d_in_e: usize,
        seed: u64,
    ) -> Result<Model> {
        genotype.validate()?;
        task.validate()?;
        let net = NetworkConfig {
            num_cells: genotype.cells.len(),
            dag_nodes: genotype.dag_nodes(),
            d_v: genotype.d_v,
            d_e: genotype.d_e,
            dropout,
        };
        net.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let node_embed = Linear::new(&mut bank, "embed.node", d_in_v, net.d_v, true, &mut rng);
        let edge_embed = Linear::new(&mut bank, "embed.edge", d_in_e.max(1), net.d_e, true, &mut rng);
        let cells: Vec<DiscreteCell> = genotype
            .cells
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                DiscreteCell::new(
                    &mut bank,
                    &format!("cell{c}"),
                    cell,
                    net.dag_nodes,
                    net.d_v,
                    net.d_e,
                    &mut rng,
                )
            })
            .collect();
        let head = head_for(&task, &net, &mut bank, &mut rng);
        Ok(Model {
            task,
            net,
            d_in_v,
            d_in_e,
            bank,
            alphas: None,
            node_embed,
            edge_embed,
            cells: Cells::Discrete(cells),
            head,
            dropout_rng: RefCell::new(ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD0))),
        })
    }

    pub fn alpha_params(&self) -> Vec<Param> {
        self.alphas
            .iter()
            .flatten()
            .flat_map(|c| c.entity.iter().chain(&c.edge).cloned())
            .collect()
    }

    fn dropout_mask(&self, tape: &mut Tape, rows: usize, cols: usize) -> Var {
        let p = self.net.dropout;
        let keep = 1.0 - p;
        let mut rng = self.dropout_rng.borrow_mut();
        let data = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.constant(Tensor { rows, cols, data, requires_grad: false, grad: None })
    }

    /// Run the network on a batch; returns the head output (logits or
    /// regression values) still attached to `tape`.
    pub fn forward_on(&self, tape: &mut Tape, batch: &GraphBatch, training: bool) -> Result<Var> {
        let g = &batch.graph;
        if g.node_features.cols != self.d_in_v {
            return Err(Error::shape(format!(
                "node feature width {} != model input width {}",
                g.node_features.cols, self.d_in_v
            )));
        }
        if g.edge_features.cols != self.d_in_e {
            return Err(Error::shape(format!(
                "edge feature width {} != model input width {}",
                g.edge_features.cols, self.d_in_e
            )));
        }
        let srcs = g.src_ids();
        let dsts = g.dst_ids();
        let ctx = CellCtx { srcs: &srcs, dsts: &dsts, num_nodes: g.num_nodes, training };

        let x = tape.constant(g.node_features.clone());
        let mut v = self.node_embed.forward(tape, x)?;
        let e_in = tape.constant(edge_input_matrix(g.num_edges(), &g.edge_features));
        let mut e = self.edge_embed.forward(tape, e_in)?;

        let use_dropout = training && self.net.dropout > 0.0;
        match &self.cells {
            Cells::Supernet(cells) => {
                let alphas = self.alphas.as_ref().expect("supernet models carry alphas");
                for (cell, a) in cells.iter().zip(alphas) {
                    let masks = use_dropout.then(|| {
                        let vm = self.dropout_mask(tape, g.num_nodes, self.net.d_v);
                        let em = self.dropout_mask(tape, g.num_edges(), self.net.d_e);
                        (vm, em)
                    });
                    (v, e) = cell.forward(tape, v, e, &ctx, a, masks)?;
                }
            }
            Cells::Discrete(cells) => {
                for cell in cells {
                    let masks = use_dropout.then(|| {
                        let vm = self.dropout_mask(tape, g.num_nodes, self.net.d_v);
                        let em = self.dropout_mask(tape, g.num_edges(), self.net.d_e);
                        (vm, em)
                    });
                    (v, e) = cell.forward(tape, v, e, &ctx, masks)?;
                }
            }
        }

        match &self.head {
            Head::Node(lin) => lin.forward(tape, v),
            Head::Edge(lin) => lin.forward(tape, e),
            Head::Graph(lin) => {
                let vg = tape.segment_aggregate(v, &batch.graph_of_node, batch.num_graphs, SegmentMode::Mean)?;
                let eg = tape.segment_aggregate(e, &batch.graph_of_edge, batch.num_graphs, SegmentMode::Mean)?;
                let cat = tape.concat_cols(vg, eg)?;
                lin.forward(tape, cat)
            }
        }
    }

    pub fn forward(&self, batch: &GraphBatch, training: bool) -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, batch, training)?;
        Ok((tape, out))
    }

    /// Eval-mode predictions as a plain tensor.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Tensor> {
        let (tape, out) = self.forward(batch, false)?;
        Ok(tape.to_tensor(out))
    }
}

// ── Loss and metrics ─────────────────────────────────────────────────────

pub fn graph_targets(batch: &GraphBatch) -> Result<Tensor> {
    let vals: Option<Vec<f64>> = batch.graph_labels.iter().copied().collect();
    let vals = vals.ok_or_else(|| Error::data("graph-level task but a graph lacks its label"))?;
    Tensor::new(batch.num_graphs, 1, vals)
}

/// Attach the task loss to `out` on the same tape.
pub fn loss_on_tape(tape: &mut Tape, out: Var, batch: &GraphBatch, task: &TaskSpec) -> Result<Var> {
    match (task.level, task.loss) {
        (TaskLevel::Node, LossKind::CrossEntropy) => {
            let labels = batch
                .graph
                .node_labels
                .as_ref()
                .ok_or_else(|| Error::data("node-level task but dataset has no node labels"))?;
            tape.cross_entropy(out, labels)
        }
        (TaskLevel::Edge, LossKind::CrossEntropy) => {
            let labels = batch
                .graph
                .edge_labels
                .as_ref()
                .ok_or_else(|| Error::data("edge-level task but dataset has no edge labels"))?;
            tape.cross_entropy(out, labels)
        }
        (TaskLevel::Graph, LossKind::CrossEntropy) => {
            let labels: Vec<usize> = batch
                .graph_labels
                .iter()
                .map(|l| {
                    l.map(|v| v.round().max(0.0) as usize)
                        .ok_or_else(|| Error::data("graph-level task but a graph lacks its label"))
                })
                .collect::<Result<_>>()?;
            tape.cross_entropy(out, &labels)
        }
        (TaskLevel::Graph, LossKind::AbsoluteError) => {
            let targets = graph_targets(batch)?;
            tape.mae_loss(out, &targets)
        }
        (_, LossKind::AbsoluteError) => {
            Err(Error::config("absolute_error is only supported at graph level"))
        }
    }
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(pred: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = (0..pred.rows).filter(|&r| argmax_row(pred.row(r)) == labels[r]).count();
    hits as f64 / labels.len() as f64
}

/// Binary F1 on the positive class, deduplicated by unordered endpoint
/// pair: the two directions of an edge vote with their mean logits.
pub fn edge_f1_dedup(pred: &Tensor, batch: &GraphBatch) -> Result<f64> {
    let labels = batch
        .graph
        .edge_labels
        .as_ref()
        .ok_or_else(|| Error::data("edge metric requires edge labels"))?;
    if pred.cols != 2 {
        return Err(Error::shape("binary F1 expects 2-class logits"));
    }
    let mut by_pair: std::collections::BTreeMap<(usize, usize), (f64, usize, usize)> =
        std::collections::BTreeMap::new();
    for (i, &(s, d)) in batch.graph.edges.iter().enumerate() {
        let key = (s.min(d), s.max(d));
        let score = pred.get(i, 1) - pred.get(i, 0);
        let e = by_pair.entry(key).or_insert((0.0, 0, labels[i]));
        e.0 += score;
        e.1 += 1;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (_, (score_sum, count, label)) in by_pair {
        let positive = score_sum / count as f64 > 0.0;
        match (positive, label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Task metric from eval-mode predictions.
pub fn metric_value(pred: &Tensor, batch: &GraphBatch, task: &TaskSpec) -> Result<f64> {
    match task.metric {
        MetricKind::Accuracy => match task.level {
            TaskLevel::Node => {
                let labels = batch
                    .graph
                    .node_labels
                    .as_ref()
                    .ok_or_else(|| Error::data("accuracy requires node labels"))?;
                Ok(accuracy(pred, labels))
            }
            TaskLevel::Edge => {
                let labels = batch
                    .graph
                    .edge_labels
                    .as_ref()
                    .ok_or_else(|| Error::data("accuracy requires edge labels"))?;
                Ok(accuracy(pred, labels))
            }
            TaskLevel::Graph => {
                let labels: Vec<usize> = batch
                    .graph_labels
                    .iter()
                    .map(|l| l.map(|v| v.round().max(0.0) as usize).unwrap_or(0))
                    .collect();
                Ok(accuracy(pred, &labels))
            }
        },
        MetricKind::BinaryF1 => edge_f1_dedup(pred, batch),
        MetricKind::Mae => {
            let targets = graph_targets(batch)?;
            let n = targets.data.len();
            let sum: f64 = pred.data.iter().zip(&targets.data).map(|(p, t)| (p - t).abs()).sum();
            Ok(sum / n as f64)
        }
    }
}
