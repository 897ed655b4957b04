//! Graph representation and disjoint-union batching.
//!
//! Edges are directed; undirected source data is stored as both directions
//! so that a destination node's in-edge set is exactly its neighborhood.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One graph instance with features and optional task labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    /// Directed (src, dst) pairs.
    pub edges: Vec<(usize, usize)>,
    /// num_nodes x d_in_v.
    pub node_features: Tensor,
    /// num_edges x d_in_e (d_in_e may be 0).
    pub edge_features: Tensor,
    pub node_labels: Option<Vec<usize>>,
    pub edge_labels: Option<Vec<usize>>,
    pub graph_label: Option<f64>,
}

impl Graph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn src_ids(&self) -> Vec<usize> {
        self.edges.iter().map(|&(s, _)| s).collect()
    }

    pub fn dst_ids(&self) -> Vec<usize> {
        self.edges.iter().map(|&(_, d)| d).collect()
    }

    /// Check the structural invariants; generators and loaders call this.
    pub fn validate(&self) -> Result<()> {
        if let Some(&(s, d)) = self.edges.iter().find(|&&(s, d)| s >= self.num_nodes || d >= self.num_nodes) {
            return Err(Error::data(format!(
                "edge ({s},{d}) out of range for {} nodes",
                self.num_nodes
            )));
        }
        if self.node_features.rows != self.num_nodes {
            return Err(Error::data(format!(
                "{} node feature rows for {} nodes",
                self.node_features.rows, self.num_nodes
            )));
        }
        if self.edge_features.rows != self.edges.len() {
            return Err(Error::data(format!(
                "{} edge feature rows for {} edges",
                self.edge_features.rows,
                self.edges.len()
            )));
        }
        if let Some(l) = &self.node_labels {
            if l.len() != self.num_nodes {
                return Err(Error::data("node label count mismatch"));
            }
        }
        if let Some(l) = &self.edge_labels {
            if l.len() != self.edges.len() {
                return Err(Error::data("edge label count mismatch"));
            }
        }
        Ok(())
    }
}

/// Disjoint union of several graphs plus the segment ids needed to read
/// per-graph results back out.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub graph: Graph,
    pub graph_of_node: Vec<usize>,
    pub graph_of_edge: Vec<usize>,
    pub num_graphs: usize,
    /// Per-graph (node_offset, num_nodes, edge_offset, num_edges).
    pub ranges: Vec<(usize, usize, usize, usize)>,
    pub graph_labels: Vec<Option<f64>>,
}

/// Merge graphs by offsetting node indices. All inputs must share feature
/// widths and label kinds.
pub fn batch(graphs: &[Graph]) -> Result<GraphBatch> {
    batch_refs(&graphs.iter().collect::<Vec<_>>())
}

/// [`batch`] over borrowed graphs, for batching out of a dataset without
/// cloning.
pub fn batch_refs(graphs: &[&Graph]) -> Result<GraphBatch> {
    if graphs.is_empty() {
        return Err(Error::data("cannot batch zero graphs"));
    }
    let d_v = graphs[0].node_features.cols;
    let d_e = graphs[0].edge_features.cols;
    for g in graphs {
        if g.node_features.cols != d_v || g.edge_features.cols != d_e {
            return Err(Error::data(format!(
                "feature width mismatch in batch: {}x{} vs {d_v}x{d_e}",
                g.node_features.cols, g.edge_features.cols
            )));
        }
    }
    let has_node_labels = graphs[0].node_labels.is_some();
    let has_edge_labels = graphs[0].edge_labels.is_some();
    if graphs.iter().any(|g| g.node_labels.is_some() != has_node_labels || g.edge_labels.is_some() != has_edge_labels) {
        return Err(Error::data("label kinds differ across batch"));
    }

    let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let total_edges: usize = graphs.iter().map(|g| g.num_edges()).sum();
    let mut edges = Vec::with_capacity(total_edges);
    let mut node_data = Vec::with_capacity(total_nodes * d_v);
    let mut edge_data = Vec::with_capacity(total_edges * d_e);
    let mut graph_of_node = Vec::with_capacity(total_nodes);
    let mut graph_of_edge = Vec::with_capacity(total_edges);
    let mut node_labels = if has_node_labels { Some(Vec::with_capacity(total_nodes)) } else { None };
    let mut edge_labels = if has_edge_labels { Some(Vec::with_capacity(total_edges)) } else { None };
    let mut ranges = Vec::with_capacity(graphs.len());
    let mut graph_labels = Vec::with_capacity(graphs.len());

    let mut node_offset = 0;
    let mut edge_offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        for &(s, d) in &g.edges {
            edges.push((s + node_offset, d + node_offset));
        }
        node_data.extend_from_slice(&g.node_features.data);
        edge_data.extend_from_slice(&g.edge_features.data);
        graph_of_node.extend(std::iter::repeat(gi).take(g.num_nodes));
        graph_of_edge.extend(std::iter::repeat(gi).take(g.num_edges()));
        if let (Some(acc), Some(l)) = (&mut node_labels, &g.node_labels) {
            acc.extend_from_slice(l);
        }
        if let (Some(acc), Some(l)) = (&mut edge_labels, &g.edge_labels) {
            acc.extend_from_slice(l);
        }
        ranges.push((node_offset, g.num_nodes, edge_offset, g.num_edges()));
        graph_labels.push(g.graph_label);
        node_offset += g.num_nodes;
        edge_offset += g.num_edges();
    }

    let merged = Graph {
        num_nodes: total_nodes,
        edges,
        node_features: Tensor::new(total_nodes, d_v, node_data)?,
        edge_features: Tensor::new(total_edges, d_e, edge_data)?,
        node_labels,
        edge_labels,
        graph_label: None,
    };
    Ok(GraphBatch {
        graph: merged,
        graph_of_node,
        graph_of_edge,
        num_graphs: graphs.len(),
        ranges,
        graph_labels,
    })
}

/// Inverse of [`batch`]: reproduces the original graphs exactly.
pub fn unbatch(b: &GraphBatch) -> Vec<Graph> {
    let d_v = b.graph.node_features.cols;
    let d_e = b.graph.edge_features.cols;
    let mut out = Vec::with_capacity(b.num_graphs);
    for (gi, &(n0, nn, e0, ne)) in b.ranges.iter().enumerate() {
        let edges = b.graph.edges[e0..e0 + ne]
            .iter()
            .map(|&(s, d)| (s - n0, d - n0))
            .collect();
        let node_features = Tensor {
            rows: nn,
            cols: d_v,
            data: b.graph.node_features.data[n0 * d_v..(n0 + nn) * d_v].to_vec(),
            requires_grad: false,
            grad: None,
        };
        let edge_features = Tensor {
            rows: ne,
            cols: d_e,
            data: b.graph.edge_features.data[e0 * d_e..(e0 + ne) * d_e].to_vec(),
            requires_grad: false,
            grad: None,
        };
        out.push(Graph {
            num_nodes: nn,
            edges,
            node_features,
            edge_features,
            node_labels: b.graph.node_labels.as_ref().map(|l| l[n0..n0 + nn].to_vec()),
            edge_labels: b.graph.edge_labels.as_ref().map(|l| l[e0..e0 + ne].to_vec()),
            graph_label: b.graph_labels[gi],
        });
    }
    out
}
