//! Parameterized layers, weight initialization, and the SGD optimizer.

use crate::rng::Rng;
use crate::tensor::{BnMode, Tape, Tensor, Val};
use crate::{Error, Real, Result};

/// Weight std used for conv, linear, and lookup initialization.
pub const INIT_STD: f64 = 0.02;

/// How a forward pass treats parameters and batch-norm state.
///
/// `Train` binds parameters for gradients and updates running moments.
/// `TrainFrozen` uses batch statistics but treats parameters as constants
/// and leaves all state untouched (a network running inside another
/// network's update step). `Eval` uses running moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    TrainFrozen,
    Eval,
}

impl Phase {
    fn bind(self, tape: &mut Tape, t: &Tensor) -> Result<Val> {
        match self {
            Phase::TrainFrozen => tape.bind_frozen(t),
            _ => tape.bind(t),
        }
    }
}

/// A named trainable tensor, as surfaced by [`Module::visit`].
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Anything holding named parameter tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// All named tensors of a module, cloned, in visit order.
pub fn parameters(m: &impl Module) -> Vec<Parameter> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| {
        out.push(Parameter {
            name: name.to_string(),
            value: t.clone(),
        });
    });
    out
}

/// Raw little-endian bytes of every tensor in visit order; used by tests to
/// assert that a network was left untouched.
pub fn parameter_bytes(m: &impl Module) -> Vec<u8> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| {
        for v in t.data() {
            out.extend_from_slice(&(*v as f64).to_le_bytes());
        }
    });
    out
}

/// value <- value - lr * grad for every trainable tensor, then zero grads.
pub fn sgd_step(m: &mut impl Module, lr: Real) -> Result<()> {
    let mut missing: Option<String> = None;
    m.visit_mut("", &mut |name, t| {
        if !t.requires_grad || missing.is_some() {
            return;
        }
        match t.grad.take() {
            None => missing = Some(name.to_string()),
            Some(g) => {
                for (v, gv) in t.data_mut().iter_mut().zip(&g) {
                    *v -= lr * gv;
                }
            }
        }
    });
    match missing {
        Some(name) => Err(Error::MissingGrad { name }),
        None => Ok(()),
    }
}

/// Clear gradient buffers on every tensor.
pub fn zero_grads(m: &mut impl Module) {
    m.visit_mut("", &mut |_, t| {
        t.grad = None;
    });
}

/// Pulls gradients accumulated on the tape into the module's tensors.
pub fn absorb_grads(tape: &Tape, m: &mut impl Module) {
    m.visit_mut("", &mut |_, t| {
        if let Some(g) = tape.grad_of(t) {
            let g = g.to_vec();
            t.accumulate_grad(&g);
        }
    });
}

pub fn init_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape).with_grad();
    rng.fill_normal(t.data_mut(), 0.0, std);
    t
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ── Linear ──────────────────────────────────────────────────────────────

/// Fully connected layer; weight is stored [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: init_normal(&[in_features, out_features], INIT_STD, rng),
            bias: Tensor::zeros(&[out_features]).with_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Val, phase: Phase) -> Result<Val> {
        let w = phase.bind(tape, &self.weight)?;
        let b = phase.bind(tape, &self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ── Conv2d ──────────────────────────────────────────────────────────────

/// Strided convolution; weight is [Cout, Cin, kh, kw].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        Conv2d {
            weight: init_normal(&[c_out, c_in, kernel, kernel], INIT_STD, rng),
            bias: Tensor::zeros(&[c_out]).with_grad(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Val, phase: Phase) -> Result<Val> {
        let w = phase.bind(tape, &self.weight)?;
        let b = phase.bind(tape, &self.bias)?;
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ── ConvTranspose2d ─────────────────────────────────────────────────────

/// Fractionally strided convolution; weight is [Cin, Cout, kh, kw] so the
/// same tensor is the adjoint of the matching [`Conv2d`].
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut Rng,
    ) -> Self {
        ConvTranspose2d {
            weight: init_normal(&[c_in, c_out, kernel, kernel], INIT_STD, rng),
            bias: Tensor::zeros(&[c_out]).with_grad(),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Val, phase: Phase) -> Result<Val> {
        let w = phase.bind(tape, &self.weight)?;
        let b = phase.bind(tape, &self.bias)?;
        tape.conv_transpose2d(x, w, b, self.stride, self.padding, self.output_padding)
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ── BatchNorm2d ─────────────────────────────────────────────────────────

pub const BN_EPS: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: Real,
    pub momentum: Real,
}

impl BatchNorm2d {
    pub fn init(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Val, phase: Phase) -> Result<Val> {
        let g = phase.bind(tape, &self.gamma)?;
        let b = phase.bind(tape, &self.beta)?;
        match phase {
            Phase::Train => {
                let (y, stats) = tape.batch_norm2d(x, g, b, BnMode::Train, self.eps)?;
                let stats = stats.expect("train mode returns batch stats");
                let m = self.momentum;
                for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * v;
                }
                Ok(y)
            }
            Phase::TrainFrozen => {
                let (y, _) = tape.batch_norm2d(x, g, b, BnMode::TrainFrozen, self.eps)?;
                Ok(y)
            }
            Phase::Eval => {
                let mode = BnMode::Eval {
                    mean: self.running_mean.data(),
                    var: self.running_var.data(),
                };
                let (y, _) = tape.batch_norm2d(x, g, b, mode, self.eps)?;
                Ok(y)
            }
        }
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

// ── LookupTable ─────────────────────────────────────────────────────────

/// Per-class embedding table; row `id` is the embedding of class `id`.
#[derive(Debug, Clone)]
pub struct LookupTable {
    pub table: Tensor,
}

impl LookupTable {
    pub fn init(num_labels: usize, dim: usize, rng: &mut Rng) -> Self {
        LookupTable {
            table: init_normal(&[num_labels, dim], INIT_STD, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize], phase: Phase) -> Result<Val> {
        let t = phase.bind(tape, &self.table)?;
        tape.embed(t, ids)
    }
}

impl Module for LookupTable {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "table"), &self.table);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair {
        a: Tensor,
        b: Tensor,
    }

    impl Module for Pair {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            f(&join(prefix, "a"), &self.a);
            f(&join(prefix, "b"), &self.b);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&join(prefix, "a"), &mut self.a);
            f(&join(prefix, "b"), &mut self.b);
        }
    }

    #[test]
    fn sgd_updates_and_zeroes() {
        let mut a = Tensor::full(&[1], 1.0).with_grad();
        a.accumulate_grad(&[0.5]);
        let mut m = Pair {
            a,
            b: Tensor::zeros(&[1]),
        };
        m.b.requires_grad = false;
        sgd_step(&mut m, 0.1).unwrap();
        assert!((m.a.data()[0] - 0.95).abs() < 1e-15);
        assert!(m.a.grad.is_none());
    }

    #[test]
    fn sgd_lr_zero_is_identity() {
        let mut a = Tensor::full(&[2], 3.0).with_grad();
        a.accumulate_grad(&[1.0, 2.0]);
        let mut m = Pair {
            a,
            b: Tensor::zeros(&[1]),
        };
        m.b.requires_grad = false;
        sgd_step(&mut m, 0.0).unwrap();
        assert_eq!(m.a.data(), &[3.0, 3.0]);
    }

    #[test]
    fn sgd_missing_grad_names_parameter() {
        let mut m = Pair {
            a: Tensor::zeros(&[1]).with_grad(),
            b: Tensor::zeros(&[1]),
        };
        let err = sgd_step(&mut m, 0.1).unwrap_err();
        match err {
            Error::MissingGrad { name } => assert_eq!(name, "a"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn init_is_deterministic_for_seed() {
        let mut r1 = crate::rng::Rng::seed_from(7);
        let mut r2 = crate::rng::Rng::seed_from(7);
        let a = Linear::init(13, 17, &mut r1);
        let b = Linear::init(13, 17, &mut r2);
        assert_eq!(a.weight.data(), b.weight.data());
        assert_eq!(a.bias.data(), b.bias.data());
    }

    #[test]
    fn init_std_matches_convention() {
        let mut rng = crate::rng::Rng::seed_from(3);
        let w = init_normal(&[100, 100], INIT_STD, &mut rng);
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().map(|v| *v as f64).sum::<f64>() / n;
        let var: f64 =
            w.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - INIT_STD).abs() / INIT_STD < 0.05,
            "std {std} not within 5% of {INIT_STD}"
        );
    }

    #[test]
    fn bn_init_gamma_one_beta_zero() {
        let bn = BatchNorm2d::init(4);
        assert!(bn.gamma.data().iter().all(|&v| v == 1.0));
        assert!(bn.beta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = |w|^2 under SGD at lr 0.1 contracts by 0.8 per step.
        let mut w = init_normal(&[8], 1.0, &mut crate::rng::Rng::seed_from(5));
        let mut m = Pair {
            a: w.clone(),
            b: Tensor::zeros(&[1]),
        };
        m.b.requires_grad = false;
        for _ in 0..200 {
            let g: Vec<Real> = m.a.data().iter().map(|v| 2.0 * v).collect();
            m.a.accumulate_grad(&g);
            sgd_step(&mut m, 0.1).unwrap();
        }
        let f: Real = m.a.data().iter().map(|v| v * v).sum();
        assert!(f < 1e-6, "final value {f}");
        // matches the closed-form geometric decay
        for v in w.data_mut().iter_mut() {
            *v *= (0.8 as Real).powi(200);
        }
        for (x, y) in m.a.data().iter().zip(w.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lookup_gradient_touches_only_selected_rows() {
        let mut rng = crate::rng::Rng::seed_from(1);
        let lt = LookupTable::init(5, 4, &mut rng);
        let mut tape = Tape::new();
        let e = lt.forward(&mut tape, &[3], Phase::Train).unwrap();
        let loss = tape.sum(e).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad_of(&lt.table).unwrap();
        for row in 0..5 {
            for col in 0..4 {
                let expect = if row == 3 { 1.0 } else { 0.0 };
                assert_eq!(g[row * 4 + col], expect);
            }
        }
    }

    #[test]
    fn lookup_returns_requested_row() {
        let mut lt = LookupTable {
            table: Tensor::new((0..8).map(|v| v as Real).collect(), &[2, 4]).unwrap(),
        };
        lt.table.requires_grad = true;
        let mut tape = Tape::new();
        let e = lt.forward(&mut tape, &[1], Phase::Eval).unwrap();
        assert_eq!(tape.data(e), &[4.0, 5.0, 6.0, 7.0]);
        let mut tape2 = Tape::new();
        let e0 = lt.forward(&mut tape2, &[0], Phase::Eval).unwrap();
        assert_eq!(tape2.data(e0), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn lookup_rejects_out_of_range_id() {
        let mut rng = crate::rng::Rng::seed_from(1);
        let lt = LookupTable::init(3, 2, &mut rng);
        let mut tape = Tape::new();
        assert!(lt.forward(&mut tape, &[3], Phase::Train).is_err());
    }
}
