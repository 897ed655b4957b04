//! JSONL persistence for datasets: one JSON object per line per graph.
//!
//! Schema per line:
//! `{"n": int, "edges": [[s,d],...], "x": [[...]], "e": [[...]],
//!   "y_node": [int] | "y_edge": [int] | "y_graph": float}`
//! Floats round-trip exactly (shortest representation that parses back to
//! the same bit pattern).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    n: usize,
    edges: Vec<(usize, usize)>,
    x: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y_node: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y_edge: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y_graph: Option<f64>,
    /// Edge feature width, needed to rebuild 0-column and 0-row tensors.
    de: usize,
    dv: usize,
}

fn to_record(g: &Graph) -> Record {
    Record {
        n: g.num_nodes,
        edges: g.edges.clone(),
        x: g.node_features.to_rows(),
        e: g.edge_features.to_rows(),
        y_node: g.node_labels.clone(),
        y_edge: g.edge_labels.clone(),
        y_graph: g.graph_label,
        de: g.edge_features.cols,
        dv: g.node_features.cols,
    }
}

fn feature_tensor(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Tensor> {
    if rows.len() != nrows {
        return Err(Error::data(format!("{what}: {} rows, expected {nrows}", rows.len())));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::data(format!("{what}: row width disagrees with declared {ncols}")));
    }
    if ncols == 0 || nrows == 0 {
        return Ok(Tensor::zeros(nrows, ncols));
    }
    Tensor::from_rows(rows).map_err(|e| Error::data(format!("{what}: {e}")))
}

fn from_record(r: Record) -> Result<Graph> {
    let node_features = feature_tensor(&r.x, r.n, r.dv, "x")?;
    let edge_features = feature_tensor(&r.e, r.edges.len(), r.de, "e")?;
    let g = Graph {
        num_nodes: r.n,
        edges: r.edges,
        node_features,
        edge_features,
        node_labels: r.y_node,
        edge_labels: r.y_edge,
        graph_label: r.y_graph,
    };
    g.validate()?;
    Ok(g)
}

pub fn save_jsonl(path: &Path, graphs: &[Graph]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for g in graphs {
        let line = serde_json::to_string(&to_record(g))
            .map_err(|e| Error::data(format!("serialize: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Graph>> {
    let f = File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        out.push(from_record(rec).map_err(|e| {
            Error::data(format!("{}: line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> Vec<Graph> {
        vec![
            Graph {
                num_nodes: 3,
                edges: vec![(0, 1), (1, 0), (1, 2)],
                node_features: Tensor::from_rows(&[
                    vec![0.1, 0.25],
                    vec![-1.0, 3.0],
                    vec![0.0, 1.0 / 3.0],
                ])
                .unwrap(),
                edge_features: Tensor::zeros(3, 0),
                node_labels: Some(vec![0, 1, 0]),
                edge_labels: None,
                graph_label: None,
            },
            Graph {
                num_nodes: 2,
                edges: vec![(0, 1), (1, 0)],
                node_features: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                edge_features: Tensor::from_rows(&[vec![0.7071067811865476], vec![0.7071067811865476]]).unwrap(),
                node_labels: None,
                edge_labels: Some(vec![1, 1]),
                graph_label: Some(2.5),
            },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let graphs = sample();
        save_jsonl(&path, &graphs).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(loaded, graphs);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_error_names_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let graphs = sample();
        save_jsonl(&path, &graphs).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.push_str("{\"n\": 3, \"edges\": [[0,\n");
        std::fs::write(&path, content).unwrap();
        let err = load_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "error was: {err}");
    }
}
