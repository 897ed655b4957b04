//! Synthetic dataset generators: community graphs (node classification),
//! planar tour labeling (edge classification) and a structural regression
//! target (graph regression). All generators are pure functions of their
//! parameters and seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::Graph;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable sub-seed derivation (splitmix64 step).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ── Community graphs (node-level) ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SbmParams {
    pub num_graphs: usize,
    pub nodes_per_community: usize,
    pub num_communities: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Probability that a node's one-hot community hint is replaced by the
    /// "unknown" feature.
    pub feature_noise: f64,
}

/// Stochastic block model graphs. Node i belongs to community
/// i / nodes_per_community; features are a noisy one-hot hint of it
/// (corrupted nodes get the extra "unknown" column); labels are the
/// community ids.
pub fn gen_sbm(p: &SbmParams, seed: u64) -> Result<Vec<Graph>> {
    if !(0.0..=1.0).contains(&p.p_intra) || !(0.0..=p.p_intra).contains(&p.p_inter) {
        return Err(Error::config(format!(
            "require 0 <= p_inter <= p_intra <= 1, got {} and {}",
            p.p_inter, p.p_intra
        )));
    }
    if !(0.0..=1.0).contains(&p.feature_noise) {
        return Err(Error::config("feature_noise must be in [0,1]"));
    }
    if p.nodes_per_community == 0 || p.num_communities == 0 {
        return Err(Error::config("community sizes must be positive"));
    }
    let n = p.nodes_per_community * p.num_communities;
    let d_in = p.num_communities + 1;
    let mut out = Vec::with_capacity(p.num_graphs);
    for gi in 0..p.num_graphs {
        let mut rng = rng_for(derive_seed(seed, gi as u64));
        let community = |v: usize| v / p.nodes_per_community;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let prob = if community(u) == community(v) { p.p_intra } else { p.p_inter };
                if rng.gen::<f64>() < prob {
                    edges.push((u, v));
                    edges.push((v, u));
                }
            }
        }
        let mut feat = Tensor::zeros(n, d_in);
        let mut labels = Vec::with_capacity(n);
        for v in 0..n {
            let c = community(v);
            labels.push(c);
            if rng.gen::<f64>() < p.feature_noise {
                feat.set(v, p.num_communities, 1.0);
            } else {
                feat.set(v, c, 1.0);
            }
        }
        edges.sort_unstable();
        let g = Graph {
            num_nodes: n,
            edge_features: Tensor::zeros(edges.len(), 0),
            edges,
            node_features: feat,
            node_labels: Some(labels),
            edge_labels: None,
            graph_label: None,
        };
        g.validate()?;
        out.push(g);
    }
    Ok(out)
}

// ── Planar tours (edge-level) ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TspParams {
    pub num_graphs: usize,
    pub num_cities: usize,
    pub knn_k: usize,
}

const TSP_MAX_CITIES: usize = 12;

/// Exact shortest tour over the complete graph on `coords` by dynamic
/// programming over vertex subsets. Returns the tour length and the edge
/// set as unordered pairs. Ties break deterministically (lowest index
/// first found wins).
pub fn held_karp(coords: &[(f64, f64)]) -> (f64, Vec<(usize, usize)>) {
    let n = coords.len();
    assert!((3..=TSP_MAX_CITIES).contains(&n), "held_karp supports 3..=12 cities");
    let dist = |a: usize, b: usize| -> f64 {
        let dx = coords[a].0 - coords[b].0;
        let dy = coords[a].1 - coords[b].1;
        (dx * dx + dy * dy).sqrt()
    };
    // g[mask][e]: min cost path starting at 0, visiting exactly the set
    // `mask` of vertices 1..n, ending at e (e in mask). mask bits index
    // vertices 1..n-1 shifted by one.
    let m = n - 1;
    let full = 1usize << m;
    let mut g = vec![f64::INFINITY; full * m];
    let mut parent = vec![usize::MAX; full * m];
    for e in 0..m {
        g[(1 << e) * m + e] = dist(0, e + 1);
    }
    for mask in 1..full {
        for e in 0..m {
            if mask & (1 << e) == 0 {
                continue;
            }
            let cur = g[mask * m + e];
            if !cur.is_finite() {
                continue;
            }
            for nxt in 0..m {
                if mask & (1 << nxt) != 0 {
                    continue;
                }
                let nmask = mask | (1 << nxt);
                let cand = cur + dist(e + 1, nxt + 1);
                if cand < g[nmask * m + nxt] {
                    g[nmask * m + nxt] = cand;
                    parent[nmask * m + nxt] = e;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut best_end = 0;
    for e in 0..m {
        let total = g[(full - 1) * m + e] + dist(e + 1, 0);
        if total < best {
            best = total;
            best_end = e;
        }
    }
    // Reconstruct the cycle.
    let mut order = vec![0usize];
    let mut mask = full - 1;
    let mut e = best_end;
    let mut rev = Vec::with_capacity(m);
    loop {
        rev.push(e + 1);
        let p = parent[mask * m + e];
        mask &= !(1 << e);
        if p == usize::MAX {
            break;
        }
        e = p;
    }
    rev.reverse();
    order.extend(rev);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let a = order[i];
        let b = order[(i + 1) % n];
        pairs.push((a.min(b), a.max(b)));
    }
    pairs.sort_unstable();
    (best, pairs)
}

/// Greedy nearest-neighbor tour length, used as an independent upper bound
/// on the optimal tour in tests.
pub fn nearest_neighbor_tour_length(coords: &[(f64, f64)]) -> f64 {
    let n = coords.len();
    let dist = |a: usize, b: usize| -> f64 {
        let dx = coords[a].0 - coords[b].0;
        let dy = coords[a].1 - coords[b].1;
        (dx * dx + dy * dy).sqrt()
    };
    let mut visited = vec![false; n];
    visited[0] = true;
    let mut cur = 0;
    let mut total = 0.0;
    for _ in 1..n {
        let mut best = f64::INFINITY;
        let mut pick = usize::MAX;
        for v in 0..n {
            if !visited[v] && dist(cur, v) < best {
                best = dist(cur, v);
                pick = v;
            }
        }
        visited[pick] = true;
        total += best;
        cur = pick;
    }
    total + dist(cur, 0)
}

/// Build the edge-labeled graph for one set of city coordinates: edges are
/// the symmetrized k-nearest-neighbor pairs plus all optimal-tour pairs,
/// node features are coordinates, the single edge feature is Euclidean
/// distance, and labels mark tour membership (both directions).
pub fn tsp_graph(coords: &[(f64, f64)], knn_k: usize) -> Graph {
    let n = coords.len();
    let dist = |a: usize, b: usize| -> f64 {
        let dx = coords[a].0 - coords[b].0;
        let dy = coords[a].1 - coords[b].1;
        (dx * dx + dy * dy).sqrt()
    };
    let (_, tour_pairs) = held_karp(coords);
    let mut pairs = std::collections::BTreeSet::new();
    for u in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&v| v != u).collect();
        others.sort_by(|&a, &b| dist(u, a).partial_cmp(&dist(u, b)).unwrap().then(a.cmp(&b)));
        for &v in others.iter().take(knn_k) {
            pairs.insert((u.min(v), u.max(v)));
        }
    }
    pairs.extend(tour_pairs.iter().copied());
    let tour: std::collections::BTreeSet<_> = tour_pairs.into_iter().collect();

    let mut edges = Vec::with_capacity(pairs.len() * 2);
    for &(u, v) in &pairs {
        edges.push((u, v));
        edges.push((v, u));
    }
    edges.sort_unstable();
    let mut efeat = Tensor::zeros(edges.len(), 1);
    let mut labels = Vec::with_capacity(edges.len());
    for (i, &(s, d)) in edges.iter().enumerate() {
        efeat.set(i, 0, dist(s, d));
        labels.push(usize::from(tour.contains(&(s.min(d), s.max(d)))));
    }
    let mut nfeat = Tensor::zeros(n, 2);
    for (v, &(x, y)) in coords.iter().enumerate() {
        nfeat.set(v, 0, x);
        nfeat.set(v, 1, y);
    }
    Graph {
        num_nodes: n,
        edges,
        node_features: nfeat,
        edge_features: efeat,
        node_labels: None,
        edge_labels: Some(labels),
        graph_label: None,
    }
}

/// Uniform random cities in the unit square, labeled by the exact solver.
pub fn gen_tsp(p: &TspParams, seed: u64) -> Result<Vec<Graph>> {
    if !(3..=TSP_MAX_CITIES).contains(&p.num_cities) {
        return Err(Error::config(format!(
            "num_cities out of bounds: {} (supported 3..=12)",
            p.num_cities
        )));
    }
    if p.knn_k == 0 || p.knn_k >= p.num_cities {
        return Err(Error::config("knn_k must be in 1..num_cities"));
    }
    let mut out = Vec::with_capacity(p.num_graphs);
    for gi in 0..p.num_graphs {
        let mut rng = rng_for(derive_seed(seed, gi as u64));
        let coords: Vec<(f64, f64)> =
            (0..p.num_cities).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        let g = tsp_graph(&coords, p.knn_k);
        g.validate()?;
        out.push(g);
    }
    Ok(out)
}

// ── Structural regression (graph-level) ──────────────────────────────────

#[derive(Debug, Clone)]
pub struct GraphRegParams {
    pub num_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Erdős–Rényi edge probability before conditioning on connectivity.
    pub edge_prob: f64,
}

impl Default for GraphRegParams {
    fn default() -> Self {
        GraphRegParams { num_graphs: 100, min_nodes: 6, max_nodes: 10, edge_prob: 0.4 }
    }
}

pub const EDGE_TYPE_COUNT: usize = 3;

/// Number of triangles plus half the count of type-0 undirected edges:
/// a target that needs both structure and edge features.
pub fn graphreg_label(num_nodes: usize, pairs: &[(usize, usize)], types: &[usize]) -> f64 {
    let mut adj = vec![false; num_nodes * num_nodes];
    for &(u, v) in pairs {
        adj[u * num_nodes + v] = true;
        adj[v * num_nodes + u] = true;
    }
    let mut triangles = 0usize;
    for a in 0..num_nodes {
        for b in a + 1..num_nodes {
            if !adj[a * num_nodes + b] {
                continue;
            }
            for c in b + 1..num_nodes {
                if adj[a * num_nodes + c] && adj[b * num_nodes + c] {
                    triangles += 1;
                }
            }
        }
    }
    let type0 = types.iter().filter(|&&t| t == 0).count();
    triangles as f64 + 0.5 * type0 as f64
}

fn connected(num_nodes: usize, pairs: &[(usize, usize)]) -> bool {
    if num_nodes == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); num_nodes];
    for &(u, v) in pairs {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut seen = vec![false; num_nodes];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == num_nodes
}

/// Random connected graphs with degree one-hot node features, random
/// 3-class edge types and the [`graphreg_label`] regression target.
pub fn gen_graphreg(p: &GraphRegParams, seed: u64) -> Result<Vec<Graph>> {
    if p.min_nodes < 3 || p.max_nodes < p.min_nodes {
        return Err(Error::config("need 3 <= min_nodes <= max_nodes"));
    }
    if !(0.0..=1.0).contains(&p.edge_prob) {
        return Err(Error::config("edge_prob must be in [0,1]"));
    }
    let d_in = p.max_nodes; // degree one-hot: degree <= max_nodes - 1
    let mut out = Vec::with_capacity(p.num_graphs);
    for gi in 0..p.num_graphs {
        let mut rng = rng_for(derive_seed(seed, gi as u64));
        let n = rng.gen_range(p.min_nodes..=p.max_nodes);
        let pairs = loop {
            let mut pairs = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.gen::<f64>() < p.edge_prob {
                        pairs.push((u, v));
                    }
                }
            }
            if connected(n, &pairs) {
                break pairs;
            }
        };
        let types: Vec<usize> = pairs.iter().map(|_| rng.gen_range(0..EDGE_TYPE_COUNT)).collect();
        let label = graphreg_label(n, &pairs, &types);

        let mut degree = vec![0usize; n];
        for &(u, v) in &pairs {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut nfeat = Tensor::zeros(n, d_in);
        for v in 0..n {
            nfeat.set(v, degree[v].min(d_in - 1), 1.0);
        }

        let mut edges = Vec::with_capacity(pairs.len() * 2);
        let mut type_of_pair = std::collections::BTreeMap::new();
        for (&(u, v), &t) in pairs.iter().zip(&types) {
            edges.push((u, v));
            edges.push((v, u));
            type_of_pair.insert((u, v), t);
        }
        edges.sort_unstable();
        let mut efeat = Tensor::zeros(edges.len(), EDGE_TYPE_COUNT);
        for (i, &(s, d)) in edges.iter().enumerate() {
            let t = type_of_pair[&(s.min(d), s.max(d))];
            efeat.set(i, t, 1.0);
        }
        let g = Graph {
            num_nodes: n,
            edges,
            node_features: nfeat,
            edge_features: efeat,
            node_labels: None,
            edge_labels: None,
            graph_label: Some(label),
        };
        g.validate()?;
        out.push(g);
    }
    Ok(out)
}
