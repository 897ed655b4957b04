//! Parameter registry and the small layer vocabulary the cells are built
//! from. Construction order is deterministic, so parameter enumeration,
//! optimizer state and checkpoints line up across runs.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnState, Param, Tape, Tensor, Var};
use crate::error::Result;

/// Weight decay applies to `Weight` only; biases and norm scale/shift are
/// excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub param: Param,
}

/// Named registry of learnable tensors plus batch-norm running statistics.
#[derive(Default)]
pub struct ParamBank {
    entries: Vec<ParamEntry>,
    buffers: Vec<(String, Rc<RefCell<BnState>>)>,
}

impl ParamBank {
    pub fn new() -> ParamBank {
        ParamBank::default()
    }

    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Param {
        let param = Param::new(tensor);
        self.entries.push(ParamEntry { name: name.into(), kind, param: param.clone() });
        param
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, width: usize) -> Rc<RefCell<BnState>> {
        let state = Rc::new(RefCell::new(BnState::new(width)));
        self.buffers.push((name.into(), state.clone()));
        state
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn buffers(&self) -> &[(String, Rc<RefCell<BnState>>)] {
        &self.buffers
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.param.zero_grad();
        }
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.param)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.param.value().data.len()).sum()
    }

    /// Copy values (and running statistics) from `other` for every entry
    /// whose name exists there. Returns the entry names that had no match.
    pub fn load_matching(&self, other: &ParamBank) -> Vec<String> {
        let mut missing = Vec::new();
        for e in &self.entries {
            match other.find(&e.name) {
                Some(src) => {
                    let src = src.value();
                    let mut dst = e.param.value_mut();
                    assert_eq!((dst.rows, dst.cols), (src.rows, src.cols), "shape of {}", e.name);
                    dst.data.copy_from_slice(&src.data);
                }
                None => missing.push(e.name.clone()),
            }
        }
        for (name, state) in &self.buffers {
            match other.buffers.iter().find(|(n, _)| n == name) {
                Some((_, src)) => {
                    *state.borrow_mut() = src.borrow().clone();
                }
                None => missing.push(name.clone()),
            }
        }
        missing
    }
}

/// Uniform init in ±1/sqrt(fan_in), matrices only; biases start at zero.
pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = if fan_in == 0 { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

/// Row-major x.W + b with W of shape in_dim x out_dim.
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(
        bank: &mut ParamBank,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w = bank.register(format!("{prefix}.w"), ParamKind::Weight, uniform_init(in_dim, out_dim, in_dim, rng));
        let b = bias.then(|| bank.register(format!("{prefix}.b"), ParamKind::Bias, Tensor::zeros(1, out_dim)));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.w);
        let y = tape.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let bv = tape.leaf(b);
                tape.add(y, bv)
            }
            None => Ok(y),
        }
    }
}

pub struct BatchNormLayer {
    pub gamma: Param,
    pub beta: Param,
    pub state: Rc<RefCell<BnState>>,
}

impl BatchNormLayer {
    pub fn new(bank: &mut ParamBank, prefix: &str, width: usize) -> BatchNormLayer {
        let gamma = bank.register(format!("{prefix}.gamma"), ParamKind::Norm, Tensor::ones(1, width));
        let beta = bank.register(format!("{prefix}.beta"), ParamKind::Norm, Tensor::zeros(1, width));
        let state = bank.register_buffer(format!("{prefix}.stats"), width);
        BatchNormLayer { gamma, beta, state }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        let mut state = self.state.borrow_mut();
        tape.batch_norm(x, g, b, &mut state, training)
    }
}

/// The FC-ReLU-BN wrapper applied to every op except skip and zero. Gated
/// updates keep their convex-combination output, so the ReLU can be
/// disabled while FC and BN still apply.
pub struct FcReluBn {
    pub fc: Linear,
    pub bn: BatchNormLayer,
    pub relu: bool,
}

impl FcReluBn {
    pub fn new(bank: &mut ParamBank, prefix: &str, width: usize, relu: bool, rng: &mut ChaCha8Rng) -> FcReluBn {
        FcReluBn {
            fc: Linear::new(bank, &format!("{prefix}.fc"), width, width, true, rng),
            bn: BatchNormLayer::new(bank, &format!("{prefix}.bn"), width),
            relu,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let mut y = self.fc.forward(tape, x)?;
        if self.relu {
            y = tape.relu(y)?;
        }
        self.bn.forward(tape, y, training)
    }
}

/// Maps a conditioning row to a feature-wise affine transform: the first
/// `out_dim` output columns are gamma, the last `out_dim` are beta.
pub struct FilmTransform {
    pub lin: Linear,
    pub out_dim: usize,
}

impl FilmTransform {
    pub fn new(
        bank: &mut ParamBank,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> FilmTransform {
        FilmTransform { lin: Linear::new(bank, prefix, in_dim, 2 * out_dim, true, rng), out_dim }
    }

    pub fn gamma_beta(&self, tape: &mut Tape, cond: Var) -> Result<(Var, Var)> {
        let gb = self.lin.forward(tape, cond)?;
        let gamma = tape.slice_cols(gb, 0, self.out_dim)?;
        let beta = tape.slice_cols(gb, self.out_dim, self.out_dim)?;
        Ok((gamma, beta))
    }

    /// Overwrite so the transform yields gamma = 1, beta = 0 for any input.
    pub fn force_identity(&self) {
        {
            let mut w = self.lin.w.value_mut();
            for v in w.data.iter_mut() {
                *v = 0.0;
            }
        }
        let b = self.lin.b.as_ref().expect("film transform always has a bias");
        let mut b = b.value_mut();
        for c in 0..self.out_dim {
            b.data[c] = 1.0;
        }
        for c in self.out_dim..2 * self.out_dim {
            b.data[c] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn film_identity_returns_input_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bank = ParamBank::new();
        let film = FilmTransform::new(&mut bank, "f", 3, 2, &mut rng);
        film.force_identity();
        let mut tape = Tape::new();
        let cond = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let (gamma, beta) = film.gamma_beta(&mut tape, cond).unwrap();
        assert_eq!(tape.data(gamma), &[1.0, 1.0]);
        assert_eq!(tape.data(beta), &[0.0, 0.0]);
    }

    #[test]
    fn linear_bias_starts_zero_and_weights_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = ParamBank::new();
        let lin = Linear::new(&mut bank, "l", 16, 4, true, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(lin.w.value().data.iter().all(|v| v.abs() <= bound));
        assert!(lin.b.as_ref().unwrap().value().data.iter().all(|&v| v == 0.0));
        assert_eq!(bank.num_scalars(), 16 * 4 + 4);
    }

    #[test]
    fn load_matching_copies_values_and_reports_missing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut src = ParamBank::new();
        let _ = Linear::new(&mut src, "shared", 2, 2, true, &mut rng);
        let mut dst = ParamBank::new();
        let lin = Linear::new(&mut dst, "shared", 2, 2, true, &mut rng);
        let _orphan = Linear::new(&mut dst, "only_dst", 2, 2, false, &mut rng);
        let missing = dst.load_matching(&src);
        assert_eq!(missing, vec!["only_dst.w".to_string()]);
        assert_eq!(lin.w.value().data, src.find("shared.w").unwrap().value().data);
    }
}
