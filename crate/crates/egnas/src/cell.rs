//! One searchable computational cell: parallel entity-updating and
//! edge-updating DAGs over the same number of nodes. Node 0 of each DAG is
//! the cell input; every intermediate node sums the op outputs of its
//! incoming DAG edges. The cell output concatenates all intermediate
//! nodes, projects back to the hidden width and adds the cell input as a
//! residual.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::genotype::{CellTopology, EdgeOpKind, EntityOpKind, GenotypeCell};
use crate::layers::{Linear, ParamBank};
use crate::searchspace::{apply_edge_op, apply_entity_op, mixed_output, EdgeOpParams, EntityOpParams};

/// Static per-batch context shared by every op application.
pub struct CellCtx<'a> {
    pub srcs: &'a [usize],
    pub dsts: &'a [usize],
    pub num_nodes: usize,
    pub training: bool,
}

/// Architecture parameters for one cell: a 1x5 vector per candidate DAG
/// edge per DAG, indexed in [`CellTopology::pairs`] order.
pub struct CellAlphas {
    pub entity: Vec<Param>,
    pub edge: Vec<Param>,
}

impl CellAlphas {
    /// All-zero initialization: uniform op mix at step 0.
    pub fn new(topo: CellTopology) -> CellAlphas {
        let n = topo.num_pairs();
        CellAlphas {
            entity: (0..n).map(|_| Param::new(Tensor::zeros(1, EntityOpKind::ALL.len()))).collect(),
            edge: (0..n).map(|_| Param::new(Tensor::zeros(1, EdgeOpKind::ALL.len()))).collect(),
        }
    }
}

fn pair_index(i: usize, j: usize) -> usize {
    j * (j - 1) / 2 + i
}

fn op_name_entity(kind: EntityOpKind) -> &'static str {
    match kind {
        EntityOpKind::Sum => "sum",
        EntityOpKind::Mean => "mean",
        EntityOpKind::Max => "max",
        EntityOpKind::EntitySkip => "skip",
        EntityOpKind::Zero => "zero",
    }
}

fn op_name_edge(kind: EdgeOpKind) -> &'static str {
    match kind {
        EdgeOpKind::Concat => "concat",
        EdgeOpKind::GRU => "gru",
        EdgeOpKind::FiLM => "film",
        EdgeOpKind::EdgeSkip => "skip",
        EdgeOpKind::Zero => "zero",
    }
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, out: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, out)?,
        None => out,
    }))
}

fn reduce_and_residual(
    tape: &mut Tape,
    states: &[Var],
    input: Var,
    proj: &Linear,
    mask: Option<Var>,
) -> Result<Var> {
    let mut cat = states[1];
    for &s in &states[2..] {
        cat = tape.concat_cols(cat, s)?;
    }
    let mut out = proj.forward(tape, cat)?;
    if let Some(m) = mask {
        out = tape.mul(out, m)?;
    }
    tape.add(out, input)
}

// ── Supernet cell ────────────────────────────────────────────────────────

/// Holds every candidate op of every candidate DAG edge simultaneously;
/// forward mixes them with the softmax of the alphas.
pub struct SupernetCell {
    pub topo: CellTopology,
    entity_candidates: Vec<Vec<(EntityOpKind, Option<EntityOpParams>)>>,
    edge_candidates: Vec<Vec<(EdgeOpKind, Option<EdgeOpParams>)>>,
    v_proj: Linear,
    e_proj: Linear,
}

impl SupernetCell {
    pub fn new(
        bank: &mut ParamBank,
        prefix: &str,
        topo: CellTopology,
        d_v: usize,
        d_e: usize,
        rng: &mut ChaCha8Rng,
    ) -> SupernetCell {
        let mut entity_candidates = Vec::with_capacity(topo.num_pairs());
        let mut edge_candidates = Vec::with_capacity(topo.num_pairs());
        for (i, j) in topo.pairs() {
            let ent = EntityOpKind::ALL
                .iter()
                .map(|&kind| {
                    let params = kind.has_params().then(|| {
                        EntityOpParams::new(
                            bank,
                            &format!("{prefix}.entity.{i}_{j}.{}", op_name_entity(kind)),
                            d_v,
                            d_e,
                            rng,
                        )
                    });
                    (kind, params)
                })
                .collect();
            entity_candidates.push(ent);
            let edg = EdgeOpKind::ALL
                .iter()
                .map(|&kind| {
                    let params = EdgeOpParams::new(
                        kind,
                        bank,
                        &format!("{prefix}.edge.{i}_{j}.{}", op_name_edge(kind)),
                        d_v,
                        d_e,
                        rng,
                    );
                    (kind, params)
                })
                .collect();
            edge_candidates.push(edg);
        }
        SupernetCell {
            topo,
            entity_candidates,
            edge_candidates,
            v_proj: Linear::new(bank, &format!("{prefix}.vproj"), topo.dag_nodes * d_v, d_v, true, rng),
            e_proj: Linear::new(bank, &format!("{prefix}.eproj"), topo.dag_nodes * d_e, d_e, true, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        v0: Var,
        e0: Var,
        ctx: &CellCtx,
        alphas: &CellAlphas,
        masks: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        if alphas.entity.len() != self.topo.num_pairs() {
            return Err(Error::shape("alpha count does not match cell topology"));
        }
        let mut v_states = vec![v0];
        let mut e_states = vec![e0];
        for j in 1..=self.topo.dag_nodes {
            let mut v_acc = None;
            let mut e_acc = None;
            for i in 0..j {
                let k = pair_index(i, j);
                let mut v_outs = Vec::with_capacity(EntityOpKind::ALL.len());
                for (kind, params) in &self.entity_candidates[k] {
                    v_outs.push(apply_entity_op(
                        tape,
                        *kind,
                        params.as_ref(),
                        v_states[i],
                        e_states[i],
                        ctx.srcs,
                        ctx.dsts,
                        ctx.num_nodes,
                        ctx.training,
                    )?);
                }
                let v_mixed = mixed_output(tape, &alphas.entity[k], &v_outs)?;
                v_acc = accumulate(tape, v_acc, v_mixed)?;

                let mut e_outs = Vec::with_capacity(EdgeOpKind::ALL.len());
                for (kind, params) in &self.edge_candidates[k] {
                    e_outs.push(apply_edge_op(
                        tape,
                        *kind,
                        params.as_ref(),
                        e_states[i],
                        v_states[i],
                        ctx.srcs,
                        ctx.dsts,
                        ctx.training,
                    )?);
                }
                let e_mixed = mixed_output(tape, &alphas.edge[k], &e_outs)?;
                e_acc = accumulate(tape, e_acc, e_mixed)?;
            }
            v_states.push(v_acc.expect("every node has candidate predecessors"));
            e_states.push(e_acc.expect("every node has candidate predecessors"));
        }
        let (vm, em) = match masks {
            Some((vm, em)) => (Some(vm), Some(em)),
            None => (None, None),
        };
        let v_out = reduce_and_residual(tape, &v_states, v0, &self.v_proj, vm)?;
        let e_out = reduce_and_residual(tape, &e_states, e0, &self.e_proj, em)?;
        Ok((v_out, e_out))
    }
}

// ── Discrete cell ────────────────────────────────────────────────────────

/// A cell instantiated from one genotype cell: only the chosen edges carry
/// ops and parameters.
pub struct DiscreteCell {
    pub dag_nodes: usize,
    entity_edges: Vec<(usize, usize, EntityOpKind, Option<EntityOpParams>)>,
    edge_edges: Vec<(usize, usize, EdgeOpKind, Option<EdgeOpParams>)>,
    v_proj: Linear,
    e_proj: Linear,
}

impl DiscreteCell {
    pub fn new(
        bank: &mut ParamBank,
        prefix: &str,
        cell: &GenotypeCell,
        dag_nodes: usize,
        d_v: usize,
        d_e: usize,
        rng: &mut ChaCha8Rng,
    ) -> DiscreteCell {
        let entity_edges = cell
            .entity
            .iter()
            .map(|&(i, j, kind)| {
                let params = kind.has_params().then(|| {
                    EntityOpParams::new(
                        bank,
                        &format!("{prefix}.entity.{i}_{j}.{}", op_name_entity(kind)),
                        d_v,
                        d_e,
                        rng,
                    )
                });
                (i, j, kind, params)
            })
            .collect();
        let edge_edges = cell
            .edge
            .iter()
            .map(|&(i, j, kind)| {
                let params = EdgeOpParams::new(
                    kind,
                    bank,
                    &format!("{prefix}.edge.{i}_{j}.{}", op_name_edge(kind)),
                    d_v,
                    d_e,
                    rng,
                );
                (i, j, kind, params)
            })
            .collect();
        DiscreteCell {
            dag_nodes,
            entity_edges,
            edge_edges,
            v_proj: Linear::new(bank, &format!("{prefix}.vproj"), dag_nodes * d_v, d_v, true, rng),
            e_proj: Linear::new(bank, &format!("{prefix}.eproj"), dag_nodes * d_e, d_e, true, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        v0: Var,
        e0: Var,
        ctx: &CellCtx,
        masks: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let (_, d_v) = tape.dims(v0);
        let (num_edges, d_e) = tape.dims(e0);
        let mut v_states = vec![v0];
        let mut e_states = vec![e0];
        for j in 1..=self.dag_nodes {
            let mut v_acc = None;
            for &(i, dst, kind, ref params) in &self.entity_edges {
                if dst != j {
                    continue;
                }
                let out = apply_entity_op(
                    tape,
                    kind,
                    params.as_ref(),
                    v_states[i],
                    e_states[i],
                    ctx.srcs,
                    ctx.dsts,
                    ctx.num_nodes,
                    ctx.training,
                )?;
                v_acc = accumulate(tape, v_acc, out)?;
            }
            let mut e_acc = None;
            for &(i, dst, kind, ref params) in &self.edge_edges {
                if dst != j {
                    continue;
                }
                let out = apply_edge_op(
                    tape,
                    kind,
                    params.as_ref(),
                    e_states[i],
                    v_states[i],
                    ctx.srcs,
                    ctx.dsts,
                    ctx.training,
                )?;
                e_acc = accumulate(tape, e_acc, out)?;
            }
            v_states
                .push(v_acc.unwrap_or_else(|| tape.constant(Tensor::zeros(ctx.num_nodes, d_v))));
            e_states.push(e_acc.unwrap_or_else(|| tape.constant(Tensor::zeros(num_edges, d_e))));
        }
        let (vm, em) = match masks {
            Some((vm, em)) => (Some(vm), Some(em)),
            None => (None, None),
        };
        let v_out = reduce_and_residual(tape, &v_states, v0, &self.v_proj, vm)?;
        let e_out = reduce_and_residual(tape, &e_states, e0, &self.e_proj, em)?;
        Ok((v_out, e_out))
    }
}

/// Pre-embedding relation input: provided edge features, or the all-ones
/// single column when the dataset has none.
pub fn edge_input_matrix(num_edges: usize, edge_features: &Tensor) -> Tensor {
    if edge_features.cols > 0 {
        edge_features.clone()
    } else {
        Tensor::ones(num_edges, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::Genotype;
    use rand::SeedableRng;

    fn skip_only_genotype(n: usize) -> Genotype {
        Genotype {
            cells: vec![GenotypeCell {
                entity: (1..=n).map(|j| (0, j, EntityOpKind::EntitySkip)).collect(),
                edge: (1..=n).map(|j| (0, j, EdgeOpKind::EdgeSkip)).collect(),
            }],
            d_v: 2,
            d_e: 2,
        }
    }

    #[test]
    fn skip_only_cell_with_averaging_projection_doubles_input() {
        let n = 3;
        let g = skip_only_genotype(n);
        g.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bank = ParamBank::new();
        let cell = DiscreteCell::new(&mut bank, "cell0", &g.cells[0], n, 2, 2, &mut rng);
        // Averaging projection: out = mean of the n concatenated copies.
        {
            let mut w = cell.v_proj.w.value_mut();
            for v in w.data.iter_mut() {
                *v = 0.0;
            }
            for block in 0..n {
                for c in 0..2 {
                    w.set(block * 2 + c, c, 1.0 / n as f64);
                }
            }
            let mut we = cell.e_proj.w.value_mut();
            for v in we.data.iter_mut() {
                *v = 0.0;
            }
            for block in 0..n {
                for c in 0..2 {
                    we.set(block * 2 + c, c, 1.0 / n as f64);
                }
            }
        }
        let mut tape = Tape::new();
        let v0 = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let e0 = tape.constant(Tensor::from_rows(&[vec![0.25, 0.5]]).unwrap());
        let ctx = CellCtx { srcs: &[0], dsts: &[1], num_nodes: 2, training: false };
        let (v_out, e_out) = cell.forward(&mut tape, v0, e0, &ctx, None).unwrap();
        let expect_v: Vec<f64> = tape.data(v0).iter().map(|x| 2.0 * x).collect();
        let expect_e: Vec<f64> = tape.data(e0).iter().map(|x| 2.0 * x).collect();
        for (a, b) in tape.data(v_out).iter().zip(&expect_v) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.data(e_out).iter().zip(&expect_e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn supernet_forward_shapes_and_gradients_flow_to_alphas() {
        let topo = CellTopology::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = ParamBank::new();
        let cell = SupernetCell::new(&mut bank, "cell0", topo, 3, 3, &mut rng);
        let alphas = CellAlphas::new(topo);
        let mut tape = Tape::new();
        let v0 = tape.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.1, 0.0, 0.4]]).unwrap());
        let e0 = tape.constant(Tensor::from_rows(&[vec![0.5, -0.5, 0.1], vec![0.2, 0.3, -0.2]]).unwrap());
        let ctx = CellCtx { srcs: &[0, 1], dsts: &[1, 0], num_nodes: 2, training: true };
        let (v_out, e_out) = cell.forward(&mut tape, v0, e0, &ctx, &alphas, None).unwrap();
        assert_eq!(tape.dims(v_out), (2, 3));
        assert_eq!(tape.dims(e_out), (2, 3));
        let s1 = tape.sum_all(v_out).unwrap();
        let s2 = tape.sum_all(e_out).unwrap();
        let s = tape.add(s1, s2).unwrap();
        tape.backward(s).unwrap();
        let nonzero = alphas
            .entity
            .iter()
            .chain(&alphas.edge)
            .filter(|a| a.grad_or_zeros().iter().any(|&g| g != 0.0))
            .count();
        assert!(nonzero > 0, "alpha gradients should flow in supernet mode");
    }

    #[test]
    fn edge_input_matrix_identity_rule() {
        let none = Tensor::zeros(3, 0);
        let m = edge_input_matrix(3, &none);
        assert_eq!((m.rows, m.cols), (3, 1));
        assert!(m.data.iter().all(|&v| v == 1.0));

        let have = Tensor::from_rows(&[vec![0.7], vec![0.1]]).unwrap();
        assert_eq!(edge_input_matrix(2, &have), have);
    }
}
