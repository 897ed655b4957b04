//! Architecture surgery and reporting: ablation transforms, DOT export of
//! the dual DAGs, topology statistics, and the shortest-incident-edge
//! heuristic used as the edge-task baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::genotype::{EdgeOpKind, EntityOpKind, Genotype, GenotypeCell};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    ReplaceEntity(EntityOpKind),
    ReplaceEdge(EdgeOpKind),
    /// Rewire each cell's edge-updating DAG into a chain: node j depends
    /// only on node j-1.
    Sequentialize,
    /// Ignore the input genotype and sample a fresh valid one uniformly.
    RandomSample(u64),
}

pub fn ablate(genotype: &Genotype, kind: AblationKind) -> Result<Genotype> {
    genotype.validate()?;
    let mut out = genotype.clone();
    match kind {
        AblationKind::ReplaceEntity(op) => {
            if op.is_zero() {
                return Err(Error::config("replacement op must be non-Zero"));
            }
            for cell in &mut out.cells {
                for e in &mut cell.entity {
                    e.2 = op;
                }
            }
        }
        AblationKind::ReplaceEdge(op) => {
            if op.is_zero() {
                return Err(Error::config("replacement op must be non-Zero"));
            }
            for cell in &mut out.cells {
                for e in &mut cell.edge {
                    e.2 = op;
                }
            }
        }
        AblationKind::Sequentialize => {
            let n = genotype.dag_nodes();
            for cell in &mut out.cells {
                let existing: std::collections::BTreeMap<(usize, usize), EdgeOpKind> =
                    cell.edge.iter().map(|&(i, j, k)| ((i, j), k)).collect();
                cell.edge = (1..=n)
                    .map(|j| (j - 1, j, existing.get(&(j - 1, j)).copied().unwrap_or(EdgeOpKind::Concat)))
                    .collect();
            }
        }
        AblationKind::RandomSample(seed) => {
            out = random_genotype(
                genotype.cells.len(),
                genotype.dag_nodes(),
                genotype.d_v,
                genotype.d_e,
                seed,
            );
        }
    }
    out.validate()?;
    Ok(out)
}

/// Uniform sample from the discrete space: per node, 1 or 2 predecessors
/// chosen uniformly without replacement; ops uniform over non-Zero kinds.
pub fn random_genotype(num_cells: usize, dag_nodes: usize, d_v: usize, d_e: usize, seed: u64) -> Genotype {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Op values are indices into the non-Zero prefix of each kind list.
    let sample_dag = |rng: &mut ChaCha8Rng| -> Vec<(usize, usize, usize)> {
        let mut edges = Vec::new();
        for j in 1..=dag_nodes {
            let count = if j == 1 { 1 } else { rng.gen_range(1..=2usize) };
            let mut sources: Vec<usize> = (0..j).collect();
            sources.shuffle(rng);
            sources.truncate(count);
            sources.sort_unstable();
            for src in sources {
                edges.push((src, j, rng.gen_range(0..4usize)));
            }
        }
        edges
    };
    let mut cells = Vec::with_capacity(num_cells);
    for _ in 0..num_cells {
        let entity = sample_dag(&mut rng);
        let edge = sample_dag(&mut rng);
        cells.push(GenotypeCell {
            entity: entity.iter().map(|&(i, j, op)| (i, j, EntityOpKind::ALL[op])).collect(),
            edge: edge.iter().map(|&(i, j, op)| (i, j, EdgeOpKind::ALL[op])).collect(),
        });
    }
    Genotype { cells, d_v, d_e }
}

// ── DOT export ───────────────────────────────────────────────────────────

fn entity_edge_label(i: usize, kind: EntityOpKind) -> String {
    match kind {
        EntityOpKind::Sum => format!("Sum (+E_{i})"),
        EntityOpKind::Mean => format!("Mean (+E_{i})"),
        EntityOpKind::Max => format!("Max (+E_{i})"),
        EntityOpKind::EntitySkip => "skip".to_string(),
        EntityOpKind::Zero => "zero".to_string(),
    }
}

fn edge_edge_label(i: usize, kind: EdgeOpKind) -> String {
    match kind {
        EdgeOpKind::Concat => format!("Concat (+V_{i})"),
        EdgeOpKind::GRU => format!("GRU (+V_{i})"),
        EdgeOpKind::FiLM => format!("FiLM (+V_{i})"),
        EdgeOpKind::EdgeSkip => "skip".to_string(),
        EdgeOpKind::Zero => "zero".to_string(),
    }
}

fn is_skip_entity(k: EntityOpKind) -> bool {
    k == EntityOpKind::EntitySkip
}

fn is_skip_edge(k: EdgeOpKind) -> bool {
    k == EdgeOpKind::EdgeSkip
}

/// Render the genotype as DOT: two clusters per cell, the edge-updating
/// graph above the entity-updating graph, skip connections dashed.
pub fn export_dot(genotype: &Genotype) -> Result<String> {
    genotype.validate()?;
    let n = genotype.dag_nodes();
    let mut out = String::from("digraph genotype {\n  rankdir=LR;\n");
    for (ci, cell) in genotype.cells.iter().enumerate() {
        out.push_str(&format!("  subgraph cluster_cell{ci}_edge {{\n"));
        out.push_str(&format!("    label=\"cell {ci} edge-updating\";\n"));
        for j in 0..=n {
            out.push_str(&format!("    c{ci}e{j} [label=\"E{j}\"];\n"));
        }
        for &(i, j, kind) in &cell.edge {
            let style = if is_skip_edge(kind) { ", style=dashed" } else { "" };
            out.push_str(&format!(
                "    c{ci}e{i} -> c{ci}e{j} [label=\"{}\"{style}];\n",
                edge_edge_label(i, kind)
            ));
        }
        out.push_str("  }\n");
        out.push_str(&format!("  subgraph cluster_cell{ci}_entity {{\n"));
        out.push_str(&format!("    label=\"cell {ci} entity-updating\";\n"));
        for j in 0..=n {
            out.push_str(&format!("    c{ci}v{j} [label=\"V{j}\"];\n"));
        }
        for &(i, j, kind) in &cell.entity {
            let style = if is_skip_entity(kind) { ", style=dashed" } else { "" };
            out.push_str(&format!(
                "    c{ci}v{i} -> c{ci}v{j} [label=\"{}\"{style}];\n",
                entity_edge_label(i, kind)
            ));
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    Ok(out)
}

// ── Topology statistics ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellStats {
    pub cell: usize,
    pub entity_longest_path: usize,
    pub edge_longest_path: usize,
    pub entity_skip_edges: usize,
    pub edge_skip_edges: usize,
    /// Edge-updating DAG edges leaving the cell input E0.
    pub edges_from_e0: usize,
}

fn longest_path<K: Copy>(edges: &[(usize, usize, K)], dag_nodes: usize) -> usize {
    let mut depth = vec![0usize; dag_nodes + 1];
    for j in 1..=dag_nodes {
        for &(i, dst, _) in edges {
            if dst == j {
                depth[j] = depth[j].max(depth[i] + 1);
            }
        }
    }
    depth.into_iter().max().unwrap_or(0)
}

pub fn topology_stats(genotype: &Genotype) -> Result<Vec<CellStats>> {
    genotype.validate()?;
    let n = genotype.dag_nodes();
    Ok(genotype
        .cells
        .iter()
        .enumerate()
        .map(|(ci, cell)| CellStats {
            cell: ci,
            entity_longest_path: longest_path(&cell.entity, n),
            edge_longest_path: longest_path(&cell.edge, n),
            entity_skip_edges: cell.entity.iter().filter(|&&(_, _, k)| is_skip_entity(k)).count(),
            edge_skip_edges: cell.edge.iter().filter(|&&(_, _, k)| is_skip_edge(k)).count(),
            edges_from_e0: cell.edge.iter().filter(|&&(i, _, _)| i == 0).count(),
        })
        .collect())
}

pub fn stats_csv(stats: &[CellStats]) -> String {
    let mut out = String::from(
        "cell,entity_longest_path,edge_longest_path,entity_skip_edges,edge_skip_edges,edges_from_e0\n",
    );
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.cell,
            s.entity_longest_path,
            s.edge_longest_path,
            s.entity_skip_edges,
            s.edge_skip_edges,
            s.edges_from_e0
        ));
    }
    out
}

// ── Edge-task heuristic baseline ─────────────────────────────────────────

/// Predict positive for each node's k-1 shortest incident edges (by the
/// stored distance feature), dedup by unordered pair, and score micro-F1
/// against the tour labels.
pub fn shortest_incident_f1(graphs: &[Graph], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::config("heuristic needs k >= 2"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for g in graphs {
        let labels = g
            .edge_labels
            .as_ref()
            .ok_or_else(|| Error::data("heuristic baseline requires edge labels"))?;
        if g.edge_features.cols < 1 {
            return Err(Error::data("heuristic baseline requires a distance feature"));
        }
        let mut pair_dist: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
        let mut pair_label: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
        for (idx, &(s, d)) in g.edges.iter().enumerate() {
            let key = (s.min(d), s.max(d));
            pair_dist.insert(key, g.edge_features.get(idx, 0));
            pair_label.insert(key, labels[idx]);
        }
        let mut predicted: std::collections::BTreeSet<(usize, usize)> = Default::default();
        for v in 0..g.num_nodes {
            let mut incident: Vec<(&(usize, usize), &f64)> =
                pair_dist.iter().filter(|((a, b), _)| *a == v || *b == v).collect();
            incident.sort_by(|x, y| x.1.partial_cmp(y.1).unwrap().then(x.0.cmp(y.0)));
            for (pair, _) in incident.into_iter().take(k - 1) {
                predicted.insert(*pair);
            }
        }
        for (pair, &label) in &pair_label {
            match (predicted.contains(pair), label == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Genotype {
        Genotype {
            cells: vec![
                GenotypeCell {
                    entity: vec![
                        (0, 1, EntityOpKind::Sum),
                        (0, 2, EntityOpKind::EntitySkip),
                        (1, 2, EntityOpKind::Max),
                        (1, 3, EntityOpKind::Mean),
                        (2, 3, EntityOpKind::Sum),
                    ],
                    edge: vec![
                        (0, 1, EdgeOpKind::GRU),
                        (0, 2, EdgeOpKind::EdgeSkip),
                        (1, 2, EdgeOpKind::FiLM),
                        (0, 3, EdgeOpKind::Concat),
                        (2, 3, EdgeOpKind::GRU),
                    ],
                },
                GenotypeCell {
                    entity: vec![
                        (0, 1, EntityOpKind::Mean),
                        (0, 2, EntityOpKind::Sum),
                        (0, 3, EntityOpKind::Sum),
                    ],
                    edge: vec![
                        (0, 1, EdgeOpKind::Concat),
                        (0, 2, EdgeOpKind::Concat),
                        (0, 3, EdgeOpKind::EdgeSkip),
                    ],
                },
            ],
            d_v: 8,
            d_e: 8,
        }
    }

    #[test]
    fn replace_entity_rewrites_only_entity_dag() {
        let g = sample();
        let out = ablate(&g, AblationKind::ReplaceEntity(EntityOpKind::Mean)).unwrap();
        assert!(out.cells.iter().all(|c| c.entity.iter().all(|&(_, _, k)| k == EntityOpKind::Mean)));
        for (a, b) in out.cells.iter().zip(&g.cells) {
            assert_eq!(a.edge, b.edge);
            let topo_a: Vec<(usize, usize)> = a.entity.iter().map(|&(i, j, _)| (i, j)).collect();
            let topo_b: Vec<(usize, usize)> = b.entity.iter().map(|&(i, j, _)| (i, j)).collect();
            assert_eq!(topo_a, topo_b, "topology must be untouched");
        }
    }

    #[test]
    fn replace_rejects_zero() {
        let g = sample();
        assert!(ablate(&g, AblationKind::ReplaceEntity(EntityOpKind::Zero)).is_err());
        assert!(ablate(&g, AblationKind::ReplaceEdge(EdgeOpKind::Zero)).is_err());
    }

    #[test]
    fn sequentialize_makes_edge_dag_a_chain_and_keeps_existing_ops() {
        let g = sample();
        let out = ablate(&g, AblationKind::Sequentialize).unwrap();
        for (ci, cell) in out.cells.iter().enumerate() {
            let n = out.dag_nodes();
            assert_eq!(cell.edge.len(), n);
            for (j, &(src, dst, _)) in cell.edge.iter().enumerate() {
                assert_eq!((src, dst), (j, j + 1));
            }
            assert_eq!(cell.entity, g.cells[ci].entity, "entity DAG untouched");
        }
        // (0,1) GRU existed in cell 0 and must be kept; (1,2) FiLM kept;
        // (2,3) GRU kept.
        assert_eq!(out.cells[0].edge[0].2, EdgeOpKind::GRU);
        assert_eq!(out.cells[0].edge[1].2, EdgeOpKind::FiLM);
        assert_eq!(out.cells[0].edge[2].2, EdgeOpKind::GRU);
        // Cell 1 lacks (1,2) and (2,3): Concat inserted.
        assert_eq!(out.cells[1].edge[1].2, EdgeOpKind::Concat);
        assert_eq!(out.cells[1].edge[2].2, EdgeOpKind::Concat);
    }

    #[test]
    fn random_samples_always_validate() {
        for seed in 0..1000 {
            let g = random_genotype(2, 4, 8, 8, seed);
            g.validate().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn random_sampling_is_deterministic_and_covers_ops() {
        assert_eq!(random_genotype(2, 4, 8, 8, 7), random_genotype(2, 4, 8, 8, 7));
        let mut seen_entity = std::collections::BTreeSet::new();
        let mut seen_edge = std::collections::BTreeSet::new();
        for seed in 0..50 {
            let g = random_genotype(1, 4, 4, 4, seed);
            for &(_, _, k) in &g.cells[0].entity {
                seen_entity.insert(format!("{k:?}"));
            }
            for &(_, _, k) in &g.cells[0].edge {
                seen_edge.insert(format!("{k:?}"));
            }
        }
        assert_eq!(seen_entity.len(), 4, "all non-Zero entity ops appear: {seen_entity:?}");
        assert_eq!(seen_edge.len(), 4, "all non-Zero edge ops appear: {seen_edge:?}");
    }

    #[test]
    fn dot_export_structure() {
        let g = sample();
        let dot = export_dot(&g).unwrap();
        assert!(dot.starts_with("digraph genotype {"));
        assert!(dot.contains("subgraph cluster_cell0_edge"));
        assert!(dot.contains("subgraph cluster_cell1_entity"));
        assert!(dot.contains("style=dashed"), "skip edges render dashed");
        assert!(dot.contains("Sum (+E_0)"), "entity ops cross-reference their guiding edge state");
        assert!(dot.contains("GRU (+V_0)"), "edge ops cross-reference their guiding entity state");
        assert_eq!(dot.matches("subgraph").count(), 4);
    }

    #[test]
    fn dot_rejects_invalid_genotype() {
        let empty = Genotype { cells: vec![], d_v: 4, d_e: 4 };
        assert!(export_dot(&empty).is_err());
    }

    #[test]
    fn stats_hand_cases_and_dfs_oracle() {
        // Sequential chain: longest path = number of DAG nodes.
        let seq = ablate(&sample(), AblationKind::Sequentialize).unwrap();
        let stats = topology_stats(&seq).unwrap();
        assert_eq!(stats[0].edge_longest_path, 3);

        // Star from the input: longest path 1.
        let star = Genotype {
            cells: vec![GenotypeCell {
                entity: vec![
                    (0, 1, EntityOpKind::Sum),
                    (0, 2, EntityOpKind::Sum),
                    (0, 3, EntityOpKind::Sum),
                ],
                edge: vec![
                    (0, 1, EdgeOpKind::Concat),
                    (0, 2, EdgeOpKind::Concat),
                    (0, 3, EdgeOpKind::Concat),
                ],
            }],
            d_v: 4,
            d_e: 4,
        };
        assert_eq!(topology_stats(&star).unwrap()[0].edge_longest_path, 1);

        // Exhaustive DFS oracle on the 4-node sample.
        fn dfs_longest<K: Copy>(edges: &[(usize, usize, K)], from: usize) -> usize {
            edges
                .iter()
                .filter(|&&(i, _, _)| i == from)
                .map(|&(_, j, _)| 1 + dfs_longest(edges, j))
                .max()
                .unwrap_or(0)
        }
        let g = sample();
        let stats = topology_stats(&g).unwrap();
        for (ci, cell) in g.cells.iter().enumerate() {
            let want_e = (0..=g.dag_nodes()).map(|s| dfs_longest(&cell.edge, s)).max().unwrap();
            let want_v = (0..=g.dag_nodes()).map(|s| dfs_longest(&cell.entity, s)).max().unwrap();
            assert_eq!(stats[ci].edge_longest_path, want_e);
            assert_eq!(stats[ci].entity_longest_path, want_v);
        }
        assert_eq!(stats[0].edge_skip_edges, 1);
        assert_eq!(stats[0].edges_from_e0, 3);
    }

    #[test]
    fn heuristic_f1_perfect_when_tour_edges_are_shortest() {
        use crate::datagen::tsp_graph;
        // Square: the 4 perimeter edges are each corner's 2 shortest.
        let coords = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let g = tsp_graph(&coords, 3);
        let f1 = shortest_incident_f1(&[g], 3).unwrap();
        assert!((f1 - 1.0).abs() < 1e-12);
    }
}
