//! Discrete architecture description: op kinds, candidate-edge topology
//! and the genotype serialization contract.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entity (node feature) updating operations. Order is fixed: it is the
/// alpha indexing order and the argmax tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityOpKind {
    Sum,
    Mean,
    Max,
    EntitySkip,
    Zero,
}

impl EntityOpKind {
    pub const ALL: [EntityOpKind; 5] =
        [EntityOpKind::Sum, EntityOpKind::Mean, EntityOpKind::Max, EntityOpKind::EntitySkip, EntityOpKind::Zero];

    pub fn is_zero(self) -> bool {
        self == EntityOpKind::Zero
    }

    pub fn has_params(self) -> bool {
        matches!(self, EntityOpKind::Sum | EntityOpKind::Mean | EntityOpKind::Max)
    }
}

/// Edge (relation feature) updating operations. Order is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeOpKind {
    Concat,
    GRU,
    FiLM,
    EdgeSkip,
    Zero,
}

impl EdgeOpKind {
    pub const ALL: [EdgeOpKind; 5] =
        [EdgeOpKind::Concat, EdgeOpKind::GRU, EdgeOpKind::FiLM, EdgeOpKind::EdgeSkip, EdgeOpKind::Zero];

    pub fn is_zero(self) -> bool {
        self == EdgeOpKind::Zero
    }

    pub fn has_params(self) -> bool {
        matches!(self, EdgeOpKind::Concat | EdgeOpKind::GRU | EdgeOpKind::FiLM)
    }
}

/// Candidate-edge structure shared by both DAGs of a cell: node 0 is the
/// cell input, nodes 1..=n are intermediates, and every (i, j) with
/// i < j is a candidate edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellTopology {
    pub dag_nodes: usize,
}

impl CellTopology {
    pub fn new(dag_nodes: usize) -> CellTopology {
        CellTopology { dag_nodes }
    }

    /// Candidate edges in destination-major order:
    /// (0,1), (0,2), (1,2), (0,3), ...
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.dag_nodes * (self.dag_nodes + 1) / 2);
        for j in 1..=self.dag_nodes {
            for i in 0..j {
                out.push((i, j));
            }
        }
        out
    }

    pub fn num_pairs(&self) -> usize {
        self.dag_nodes * (self.dag_nodes + 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenotypeCell {
    pub entity: Vec<(usize, usize, EntityOpKind)>,
    pub edge: Vec<(usize, usize, EdgeOpKind)>,
}

/// A discrete dual-DAG architecture. Valid genotypes have 1 or 2 chosen
/// incoming edges per non-input node, carry no Zero ops, and round-trip
/// losslessly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub cells: Vec<GenotypeCell>,
    pub d_v: usize,
    pub d_e: usize,
}

impl Genotype {
    /// Number of DAG nodes (excluding the input node 0), derived from the
    /// largest destination index.
    pub fn dag_nodes(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| {
                c.entity.iter().map(|&(_, j, _)| j).chain(c.edge.iter().map(|&(_, j, _)| j))
            })
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Genotype("no cells".into()));
        }
        if self.d_v == 0 || self.d_e == 0 {
            return Err(Error::Genotype("hidden widths must be positive".into()));
        }
        let n = self.dag_nodes();
        if n == 0 {
            return Err(Error::Genotype("no DAG edges".into()));
        }
        for (ci, cell) in self.cells.iter().enumerate() {
            check_dag(&cell.entity, n, ci, "entity", |k| k.is_zero())?;
            check_dag(&cell.edge, n, ci, "edge", |k| k.is_zero())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Genotype> {
        let g: Genotype =
            serde_json::from_str(s).map_err(|e| Error::Genotype(format!("parse: {e}")))?;
        g.validate()?;
        Ok(g)
    }
}

fn check_dag<K: Copy + std::fmt::Debug>(
    edges: &[(usize, usize, K)],
    dag_nodes: usize,
    cell: usize,
    dag: &str,
    is_zero: impl Fn(K) -> bool,
) -> Result<()> {
    let mut indegree = vec![0usize; dag_nodes + 1];
    let mut seen = std::collections::BTreeSet::new();
    for &(src, dst, kind) in edges {
        if src >= dst {
            return Err(Error::Genotype(format!("cell {cell} {dag}: edge ({src},{dst}) not forward")));
        }
        if dst > dag_nodes {
            return Err(Error::Genotype(format!("cell {cell} {dag}: node {dst} out of range")));
        }
        if is_zero(kind) {
            return Err(Error::Genotype(format!("cell {cell} {dag}: Zero op on chosen edge ({src},{dst})")));
        }
        if !seen.insert((src, dst)) {
            return Err(Error::Genotype(format!("cell {cell} {dag}: duplicate edge ({src},{dst})")));
        }
        indegree[dst] += 1;
    }
    for (j, &deg) in indegree.iter().enumerate().skip(1) {
        if deg == 0 {
            return Err(Error::Genotype(format!("cell {cell} {dag}: node {j} has no incoming edge")));
        }
        if deg > 2 {
            return Err(Error::Genotype(format!("cell {cell} {dag}: node {j} has {deg} incoming edges")));
        }
    }
    Ok(())
}
