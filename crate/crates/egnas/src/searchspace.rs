//! The candidate operations of the dual-DAG cell.
//!
//! Entity updates aggregate feature-wise modulated messages over in-edges
//! (sum / mean / max), edge updates rebuild relation features from the
//! endpoint entities (Concat / GRU / FiLM), and both sets carry skip and
//! zero members. Every parameterized op is followed by the shared
//! FC-ReLU-BN wrapper; the GRU keeps its gated output un-ReLU'd.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Param, SegmentMode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::genotype::{EdgeOpKind, EntityOpKind};
use crate::layers::{uniform_init, FcReluBn, FilmTransform, Linear, ParamBank, ParamKind};

/// Parameters of one Sum/Mean/Max entity op instance: the modulation
/// transform conditioned on the paired relation state, plus the wrapper.
pub struct EntityOpParams {
    pub film: FilmTransform,
    pub wrap: FcReluBn,
}

impl EntityOpParams {
    pub fn new(bank: &mut ParamBank, prefix: &str, d_v: usize, d_e: usize, rng: &mut ChaCha8Rng) -> Self {
        EntityOpParams {
            film: FilmTransform::new(bank, &format!("{prefix}.film"), d_e, d_v, rng),
            wrap: FcReluBn::new(bank, &format!("{prefix}.wrap"), d_v, true, rng),
        }
    }
}

/// Per-edge messages gamma(E) * V_src + beta(E); with no transform the
/// message is the raw source feature.
pub fn entity_messages(
    tape: &mut Tape,
    v_state: Var,
    e_state: Var,
    film: Option<&FilmTransform>,
    srcs: &[usize],
) -> Result<Var> {
    let vs = tape.gather_rows(v_state, srcs)?;
    match film {
        Some(f) => {
            let (gamma, beta) = f.gamma_beta(tape, e_state)?;
            let scaled = tape.mul(gamma, vs)?;
            tape.add(scaled, beta)
        }
        None => Ok(vs),
    }
}

fn aggregator(kind: EntityOpKind) -> SegmentMode {
    match kind {
        EntityOpKind::Sum => SegmentMode::Sum,
        EntityOpKind::Mean => SegmentMode::Mean,
        EntityOpKind::Max => SegmentMode::Max,
        _ => unreachable!("only aggregating kinds carry a segment mode"),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn apply_entity_op(
    tape: &mut Tape,
    kind: EntityOpKind,
    params: Option<&EntityOpParams>,
    v_state: Var,
    e_state: Var,
    srcs: &[usize],
    dsts: &[usize],
    num_nodes: usize,
    training: bool,
) -> Result<Var> {
    match kind {
        EntityOpKind::Sum | EntityOpKind::Mean | EntityOpKind::Max => {
            let p = params.ok_or_else(|| Error::shape(format!("{kind:?} needs parameters")))?;
            let msg = entity_messages(tape, v_state, e_state, Some(&p.film), srcs)?;
            let agg = tape.segment_aggregate(msg, dsts, num_nodes, aggregator(kind))?;
            p.wrap.forward(tape, agg, training)
        }
        EntityOpKind::EntitySkip => Ok(v_state),
        EntityOpKind::Zero => {
            let (_, d_v) = tape.dims(v_state);
            Ok(tape.constant(Tensor::zeros(num_nodes, d_v)))
        }
    }
}

/// Parameters of one edge op instance.
pub enum EdgeOpParams {
    Concat {
        mlp: Linear,
        wrap: FcReluBn,
    },
    Gru {
        joint: Param,
        reset_x: Param,
        reset_e: Param,
        update_x: Param,
        update_e: Param,
        cand_x: Param,
        cand_e: Param,
        wrap: FcReluBn,
    },
    Film {
        film: FilmTransform,
        wrap: FcReluBn,
    },
}

impl EdgeOpParams {
    /// The update rule itself, without the shared wrapper. `joint` is the
    /// per-edge [V_src || V_dst] matrix.
    pub fn raw_update(&self, tape: &mut Tape, e_state: Var, joint: Var) -> Result<Var> {
        match self {
            EdgeOpParams::Concat { mlp, .. } => {
                let all = tape.concat_cols(e_state, joint)?;
                mlp.forward(tape, all)
            }
            EdgeOpParams::Gru {
                joint: pj,
                reset_x,
                reset_e,
                update_x,
                update_e,
                cand_x,
                cand_e,
                ..
            } => gru_update(tape, e_state, joint, pj, reset_x, reset_e, update_x, update_e, cand_x, cand_e),
            EdgeOpParams::Film { film, .. } => {
                let (gamma, beta) = film.gamma_beta(tape, joint)?;
                let scaled = tape.mul(gamma, e_state)?;
                tape.add(scaled, beta)
            }
        }
    }

    fn wrap(&self) -> &FcReluBn {
        match self {
            EdgeOpParams::Concat { wrap, .. }
            | EdgeOpParams::Gru { wrap, .. }
            | EdgeOpParams::Film { wrap, .. } => wrap,
        }
    }

    pub fn new(
        kind: EdgeOpKind,
        bank: &mut ParamBank,
        prefix: &str,
        d_v: usize,
        d_e: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<EdgeOpParams> {
        match kind {
            EdgeOpKind::Concat => Some(EdgeOpParams::Concat {
                mlp: Linear::new(bank, &format!("{prefix}.mlp"), d_e + 2 * d_v, d_e, true, rng),
                wrap: FcReluBn::new(bank, &format!("{prefix}.wrap"), d_e, true, rng),
            }),
            EdgeOpKind::GRU => {
                let mut mat = |name: &str, rows: usize| {
                    bank.register(
                        format!("{prefix}.{name}"),
                        ParamKind::Weight,
                        uniform_init(rows, d_e, rows, rng),
                    )
                };
                Some(EdgeOpParams::Gru {
                    joint: mat("joint", 2 * d_v),
                    reset_x: mat("reset_x", d_e),
                    reset_e: mat("reset_e", d_e),
                    update_x: mat("update_x", d_e),
                    update_e: mat("update_e", d_e),
                    cand_x: mat("cand_x", d_e),
                    cand_e: mat("cand_e", d_e),
                    wrap: FcReluBn::new(bank, &format!("{prefix}.wrap"), d_e, false, rng),
                })
            }
            EdgeOpKind::FiLM => Some(EdgeOpParams::Film {
                film: FilmTransform::new(bank, &format!("{prefix}.film"), 2 * d_v, d_e, rng),
                wrap: FcReluBn::new(bank, &format!("{prefix}.wrap"), d_e, true, rng),
            }),
            EdgeOpKind::EdgeSkip | EdgeOpKind::Zero => None,
        }
    }
}

/// Per-edge [V_src || V_dst], the temporary relation feature.
pub fn endpoint_features(tape: &mut Tape, v_state: Var, srcs: &[usize], dsts: &[usize]) -> Result<Var> {
    let vs = tape.gather_rows(v_state, srcs)?;
    let vt = tape.gather_rows(v_state, dsts)?;
    tape.concat_cols(vs, vt)
}

/// The gated update: x = relu(joint . P); r/z from x and the old state;
/// candidate h from x and the reset state; output (1-z)*E + z*h.
#[allow(clippy::too_many_arguments)]
fn gru_update(
    tape: &mut Tape,
    e_state: Var,
    joint_feat: Var,
    joint: &Param,
    reset_x: &Param,
    reset_e: &Param,
    update_x: &Param,
    update_e: &Param,
    cand_x: &Param,
    cand_e: &Param,
) -> Result<Var> {
    let pj = tape.leaf(joint);
    let pre = tape.matmul(joint_feat, pj)?;
    let x = tape.relu(pre)?;

    let gate = |tape: &mut Tape, wx: &Param, we: &Param, e_in: Var| -> Result<Var> {
        let wx = tape.leaf(wx);
        let we = tape.leaf(we);
        let a = tape.matmul(x, wx)?;
        let b = tape.matmul(e_in, we)?;
        tape.add(a, b)
    };

    let r_pre = gate(tape, reset_x, reset_e, e_state)?;
    let r = tape.sigmoid(r_pre)?;
    let z_pre = gate(tape, update_x, update_e, e_state)?;
    let z = tape.sigmoid(z_pre)?;
    let re = tape.mul(r, e_state)?;
    let h_pre = gate(tape, cand_x, cand_e, re)?;
    let h = tape.tanh(h_pre)?;

    let (rows, cols) = tape.dims(e_state);
    let ones = tape.constant(Tensor::ones(rows, cols));
    let keep = tape.sub(ones, z)?;
    let old = tape.mul(keep, e_state)?;
    let new = tape.mul(z, h)?;
    tape.add(old, new)
}

#[allow(clippy::too_many_arguments)]
pub fn apply_edge_op(
    tape: &mut Tape,
    kind: EdgeOpKind,
    params: Option<&EdgeOpParams>,
    e_state: Var,
    v_state: Var,
    srcs: &[usize],
    dsts: &[usize],
    training: bool,
) -> Result<Var> {
    match kind {
        EdgeOpKind::Concat | EdgeOpKind::GRU | EdgeOpKind::FiLM => {
            let p = params.ok_or_else(|| Error::shape(format!("{kind:?} needs parameters")))?;
            let joint = endpoint_features(tape, v_state, srcs, dsts)?;
            let out = p.raw_update(tape, e_state, joint)?;
            p.wrap().forward(tape, out, training)
        }
        EdgeOpKind::EdgeSkip => Ok(e_state),
        EdgeOpKind::Zero => {
            let (rows, cols) = tape.dims(e_state);
            Ok(tape.constant(Tensor::zeros(rows, cols)))
        }
    }
}

/// Softmax-weighted sum over all candidate outputs of one DAG edge.
pub fn mixed_output(tape: &mut Tape, alpha: &Param, outputs: &[Var]) -> Result<Var> {
    let a = tape.leaf(alpha);
    let weights = tape.softmax_rows(a)?;
    tape.weighted_sum(weights, outputs)
}
