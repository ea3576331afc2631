use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::{Error, Real, Result};
use std::collections::HashMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

/// Inputs near relu/leaky-relu breakpoints are flagged so the gradient
/// checker can exclude them (subgradient convention: 0 at the kink).
const KINK_EPS: Real = 1e-6;

/// Sigmoid saturates its argument here so outputs stay strictly inside
/// (0,1) in floating point.
#[cfg(not(feature = "f32"))]
const SIGMOID_SAT: Real = 30.0;
#[cfg(feature = "f32")]
const SIGMOID_SAT: Real = 12.0;

struct Node {
    data: Vec<Real>,
    shape: Vec<usize>,
    grad: Option<Vec<Real>>,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add { a: Val, b: Val },
    Mul { a: Val, b: Val },
    Affine { x: Val, mul: Real },
    AddRowBias { x: Val, bias: Val },
    AddChannelMap { x: Val, map: Val },
    Relu { x: Val },
    LeakyRelu { x: Val, slope: Real },
    Sigmoid { x: Val },
    Tanh { x: Val },
    Exp { x: Val },
    Log { x: Val },
    Clamp { x: Val, lo: Real, hi: Real },
    LnClamped { x: Val, lo: Real, hi: Real },
    Reshape { x: Val },
    SliceCols { x: Val, from: usize, width: usize },
    MatMul { a: Val, b: Val },
    Sum { x: Val },
    Mean { x: Val },
    Conv2d { x: Val, w: Val, b: Val, geom: ConvGeom, c_out: usize },
    ConvT2d { x: Val, w: Val, b: Val, geom: ConvGeom, c_u: usize },
    BatchNorm { x: Val, gamma: Val, beta: Val, mean: Vec<Real>, inv_std: Vec<Real>, batch: bool },
    Embed { table: Val, ids: Vec<usize> },
    Bce { xhat: Val, target: Vec<Real> },
    L2 { xhat: Val, target: Vec<Real> },
    CrossEntropy { logits: Val, targets: Vec<usize> },
}

/// Batch statistics computed by a train-mode batch norm, handed back to the
/// layer so it can update its running moments.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

/// Batch-norm evaluation mode.
pub enum BnMode<'a> {
    /// Normalize with batch statistics and report them to the caller.
    Train,
    /// Normalize with batch statistics but leave all state untouched
    /// (used when a network runs inside another network's update step).
    TrainFrozen,
    /// Normalize with the given fixed moments.
    Eval { mean: &'a [Real], var: &'a [Real] },
}

/// Record of one step's computation: values in topological order plus the
/// primitive that produced each, with enough saved state to run the chain
/// rule backwards once.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    bound: HashMap<u64, Val>,
    bound_order: Vec<(u64, Val)>,
    kink_events: usize,
    clamp_events: usize,
    activation_signature: u64,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            bound: HashMap::new(),
            bound_order: Vec::new(),
            kink_events: 0,
            clamp_events: 0,
            activation_signature: 0,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Val) -> &[Real] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a scalar node.
    pub fn item(&self, v: Val) -> Real {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Val) -> Option<&[Real]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Number of activation inputs that landed within `1e-6` of a
    /// relu/leaky-relu breakpoint during forward evaluation.
    pub fn kink_events(&self) -> usize {
        self.kink_events
    }

    /// Number of probability values clamped before a log.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Counts which side of each activation breakpoint every input fell
    /// on. Two forward passes with equal signatures crossed no relu,
    /// leaky-relu, or clamp breakpoint relative to each other, so central
    /// differences between them are smooth.
    pub fn activation_signature(&self) -> u64 {
        self.activation_signature
    }

    fn push(
        &mut self,
        op_name: &'static str,
        data: Vec<Real>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: Op,
    ) -> Result<Val> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            needs_grad,
        });
        self.ops.push(op);
        Ok(Val(self.nodes.len() - 1))
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Record a constant (non-differentiated) value.
    pub fn constant(&mut self, data: Vec<Real>, shape: &[usize]) -> Result<Val> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument {
                op: "constant",
                msg: format!("shape {shape:?} incompatible with {} elements", data.len()),
            });
        }
        self.push("constant", data, shape.to_vec(), false, Op::Leaf)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Val> {
        self.push(
            "constant",
            t.data().to_vec(),
            t.shape().to_vec(),
            false,
            Op::Leaf,
        )
    }

    pub fn scalar(&mut self, v: Real) -> Result<Val> {
        self.constant(vec![v], &[1])
    }

    /// Bind a tensor as a leaf, honoring its `requires_grad` flag. Repeated
    /// binds of the same tensor within one tape return the same leaf, so
    /// gradients from every use accumulate together.
    pub fn bind(&mut self, t: &Tensor) -> Result<Val> {
        if let Some(&v) = self.bound.get(&t.uid()) {
            return Ok(v);
        }
        let v = self.push(
            "bind",
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )?;
        self.bound.insert(t.uid(), v);
        self.bound_order.push((t.uid(), v));
        Ok(v)
    }

    /// Bind a tensor as a constant leaf regardless of its `requires_grad`
    /// flag. Gradients flow through ops consuming it but stop here.
    pub fn bind_frozen(&mut self, t: &Tensor) -> Result<Val> {
        self.constant_tensor(t)
    }

    /// Gradient accumulated for a bound tensor, if any.
    pub fn grad_of(&self, t: &Tensor) -> Option<&[Real]> {
        self.bound
            .get(&t.uid())
            .and_then(|v| self.nodes[v.0].grad.as_deref())
    }

    /// Copy a node's value out as a fresh constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Val) -> Result<Val> {
        let data = self.nodes[v.0].data.clone();
        let shape = self.nodes[v.0].shape.clone();
        self.push("detach", data, shape, false, Op::Leaf)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Val, b: Val) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<Real> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("add", data, shape, needs, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<Real> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", data, shape, needs, Op::Mul { a, b })
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: Val, mul: Real, add: Real) -> Result<Val> {
        let data: Vec<Real> = self.nodes[x.0].data.iter().map(|v| mul * v + add).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("affine", data, shape, needs, Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: Val, c: Real) -> Result<Val> {
        self.affine(x, c, 0.0)
    }

    /// x [N,F] + bias [F], broadcast over rows.
    pub fn add_row_bias(&mut self, x: Val, bias: Val) -> Result<Val> {
        let xs = self.nodes[x.0].shape.clone();
        let bs = self.nodes[bias.0].shape.clone();
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let f = xs[1];
        let bdat = &self.nodes[bias.0].data;
        let data: Vec<Real> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bdat[i % f])
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        self.push("add_row_bias", data, xs, needs, Op::AddRowBias { x, bias })
    }

    /// x [N,C,H,W] + map [N,C], broadcast over spatial positions.
    pub fn add_channel_map(&mut self, x: Val, map: Val) -> Result<Val> {
        let xs = self.nodes[x.0].shape.clone();
        let ms = self.nodes[map.0].shape.clone();
        if xs.len() != 4 || ms.len() != 2 || ms[0] != xs[0] || ms[1] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_map",
                lhs: xs,
                rhs: ms,
            });
        }
        let hw = xs[2] * xs[3];
        let mdat = &self.nodes[map.0].data;
        let data: Vec<Real> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + mdat[i / hw])
            .collect();
        let needs = self.needs(x) || self.needs(map);
        self.push(
            "add_channel_map",
            data,
            xs,
            needs,
            Op::AddChannelMap { x, map },
        )
    }

    pub fn relu(&mut self, x: Val) -> Result<Val> {
        let mut kinks = 0;
        let mut positive = 0u64;
        let data: Vec<Real> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                if v.abs() < KINK_EPS {
                    kinks += 1;
                }
                if v > 0.0 {
                    positive += 1;
                    v
                } else {
                    0.0
                }
            })
            .collect();
        self.kink_events += kinks;
        self.activation_signature = self.activation_signature.wrapping_mul(31).wrapping_add(positive);
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("relu", data, shape, needs, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Val, slope: Real) -> Result<Val> {
        let mut kinks = 0;
        let mut positive = 0u64;
        let data: Vec<Real> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                if v.abs() < KINK_EPS {
                    kinks += 1;
                }
                if v > 0.0 {
                    positive += 1;
                    v
                } else {
                    slope * v
                }
            })
            .collect();
        self.kink_events += kinks;
        self.activation_signature = self.activation_signature.wrapping_mul(31).wrapping_add(positive);
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("leaky_relu", data, shape, needs, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Val) -> Result<Val> {
        let data: Vec<Real> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                let c = v.clamp(-SIGMOID_SAT, SIGMOID_SAT);
                1.0 / (1.0 + (-c).exp())
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("sigmoid", data, shape, needs, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Val) -> Result<Val> {
        let data: Vec<Real> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("tanh", data, shape, needs, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: Val) -> Result<Val> {
        let data: Vec<Real> = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("exp", data, shape, needs, Op::Exp { x })
    }

    pub fn log(&mut self, x: Val) -> Result<Val> {
        if let Some(&bad) = self.nodes[x.0].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("log requires strictly positive input, got {bad}"),
            });
        }
        let data: Vec<Real> = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("log", data, shape, needs, Op::Log { x })
    }

    /// clamp(x, lo, hi) with zero gradient outside the interval.
    pub fn clamp(&mut self, x: Val, lo: Real, hi: Real) -> Result<Val> {
        if lo >= hi {
            return Err(Error::InvalidArgument {
                op: "clamp",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let mut kinks = 0;
        let mut inside = 0u64;
        let data: Vec<Real> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                if (v - lo).abs() < KINK_EPS || (v - hi).abs() < KINK_EPS {
                    kinks += 1;
                }
                if v >= lo && v <= hi {
                    inside += 1;
                }
                v.clamp(lo, hi)
            })
            .collect();
        self.kink_events += kinks;
        self.activation_signature = self.activation_signature.wrapping_mul(31).wrapping_add(inside);
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("clamp", data, shape, needs, Op::Clamp { x, lo, hi })
    }

    /// ln(clamp(x, lo, hi)); clamped elements are counted and get zero
    /// gradient.
    pub fn ln_clamped(&mut self, x: Val, lo: Real, hi: Real) -> Result<Val> {
        let mut clamped = 0u64;
        let data: Vec<Real> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                if v < lo || v > hi {
                    clamped += 1;
                }
                v.clamp(lo, hi).ln()
            })
            .collect();
        self.clamp_events += clamped as usize;
        self.activation_signature = self.activation_signature.wrapping_mul(31).wrapping_add(clamped);
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push("ln_clamped", data, shape, needs, Op::LnClamped { x, lo, hi })
    }

    // ── Shape ───────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Val, shape: &[usize]) -> Result<Val> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        self.push("reshape", data, shape.to_vec(), needs, Op::Reshape { x })
    }

    /// Columns [from, from+width) of a [N,F] value.
    pub fn slice_cols(&mut self, x: Val, from: usize, width: usize) -> Result<Val> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 || from + width > xs[1] || width == 0 {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {from}..{} of shape {xs:?}", from + width),
            });
        }
        let (n, f) = (xs[0], xs[1]);
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(&src[r * f + from..r * f + from + width]);
        }
        let needs = self.needs(x);
        self.push(
            "slice_cols",
            data,
            vec![n, width],
            needs,
            Op::SliceCols { x, from, width },
        )
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut data,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", data, vec![m, n], needs, Op::MatMul { a, b })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Val) -> Result<Val> {
        let s: Real = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push("sum", vec![s], vec![1], needs, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Val) -> Result<Val> {
        let n = self.nodes[x.0].data.len() as Real;
        let s: Real = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push("mean", vec![s / n], vec![1], needs, Op::Mean { x })
    }

    // ── Convolutions ────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: Val,
        w: Val,
        b: Val,
        stride: usize,
        padding: usize,
    ) -> Result<Val> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if ws[1] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d: weight Cin vs input Cin",
                lhs: ws,
                rhs: xs,
            });
        }
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if bs != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d: bias",
                lhs: bs,
                rhs: vec![c_out],
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        if kh > xs[2] + 2 * padding || kw > xs[3] + 2 * padding {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    xs[2] + 2 * padding,
                    xs[3] + 2 * padding
                ),
            });
        }
        let n = xs[0];
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], kh, kw, stride, padding);
        let mut data = vec![0.0; n * c_out * geom.l()];
        kernels::conv2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            n,
            c_out,
            &geom,
            &mut data,
        );
        let shape = vec![n, c_out, geom.h_out, geom.w_out];
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            "conv2d",
            data,
            shape,
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
            },
        )
    }

    /// Adjoint of [`Tape::conv2d`]: input u [N,Cu,Hu,Wu], weight
    /// [Cu,Cv,kh,kw], output [N,Cv,Hv,Wv] with
    /// Hv = (Hu-1)*stride - 2*padding + kh + output_padding.
    pub fn conv_transpose2d(
        &mut self,
        x: Val,
        w: Val,
        b: Val,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Val> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if ws[0] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d: weight Cin vs input Cin",
                lhs: ws,
                rhs: xs,
            });
        }
        let (c_u, c_v, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if bs != [c_v] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d: bias",
                lhs: bs,
                rhs: vec![c_v],
            });
        }
        if stride == 0 || output_padding >= stride {
            return Err(Error::InvalidArgument {
                op: "conv_transpose2d",
                msg: format!(
                    "stride {stride} and output_padding {output_padding} must satisfy 0 <= output_padding < stride"
                ),
            });
        }
        let (n, hu, wu) = (xs[0], xs[2], xs[3]);
        let hv = (hu - 1) * stride + kh + output_padding;
        let wv = (wu - 1) * stride + kw + output_padding;
        if hv < 2 * padding + 1 || wv < 2 * padding + 1 {
            return Err(Error::InvalidArgument {
                op: "conv_transpose2d",
                msg: "output size would be non-positive".into(),
            });
        }
        let (hv, wv) = (hv - 2 * padding, wv - 2 * padding);
        let geom = ConvGeom::new(c_v, hv, wv, kh, kw, stride, padding);
        if geom.h_out != hu || geom.w_out != wu {
            return Err(Error::InvalidArgument {
                op: "conv_transpose2d",
                msg: format!(
                    "no forward convolution maps {hv}x{wv} to {hu}x{wu} with this configuration"
                ),
            });
        }
        let mut data = vec![0.0; n * c_v * hv * wv];
        kernels::conv_transpose2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            n,
            c_u,
            &geom,
            &mut data,
        );
        let shape = vec![n, c_v, hv, wv];
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            "conv_transpose2d",
            data,
            shape,
            needs,
            Op::ConvT2d {
                x,
                w,
                b,
                geom,
                c_u,
            },
        )
    }

    // ── Batch normalization ─────────────────────────────────────────────

    pub fn batch_norm2d(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        mode: BnMode,
        eps: Real,
    ) -> Result<(Val, Option<BnStats>)> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::InvalidArgument {
                op: "batch_norm2d",
                msg: format!("expected rank-4 input, got shape {xs:?}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d: gamma/beta",
                lhs: self.nodes[gamma.0].shape.clone(),
                rhs: vec![c],
            });
        }
        let m = n * h * w;
        let batch = !matches!(mode, BnMode::Eval { .. });
        if batch && m < 2 {
            return Err(Error::InvalidArgument {
                op: "batch_norm2d",
                msg: "train mode needs at least 2 elements per channel (variance undefined)"
                    .into(),
            });
        }

        let (mean, var): (Vec<Real>, Vec<Real>) = match &mode {
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::InvalidArgument {
                        op: "batch_norm2d",
                        msg: "running moments length does not match channel count".into(),
                    });
                }
                (mean.to_vec(), var.to_vec())
            }
            _ => {
                let xd = &self.nodes[x.0].data;
                let hw = h * w;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * hw;
                        for v in &xd[base..base + hw] {
                            s += v;
                        }
                    }
                    mean[ch] = s / m as Real;
                    let mut sq = 0.0;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * hw;
                        for v in &xd[base..base + hw] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / m as Real;
                }
                (mean, var)
            }
        };

        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * w;
        let gdat = &self.nodes[gamma.0].data;
        let bdat = &self.nodes[beta.0].data;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; xd.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gdat[ch], bdat[ch]);
                for i in 0..hw {
                    data[base + i] = g * (xd[base + i] - mu) * is + b;
                }
            }
        }
        let stats = if matches!(mode, BnMode::Train) {
            Some(BnStats {
                mean: mean.clone(),
                var: var.clone(),
            })
        } else {
            None
        };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            "batch_norm2d",
            data,
            xs,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
            },
        )?;
        Ok((v, stats))
    }

    // ── Table lookup ────────────────────────────────────────────────────

    /// Rows of `table` [L,D] selected by `ids` -> [N,D]. Gradient flows only
    /// to the selected rows.
    pub fn embed(&mut self, table: Val, ids: &[usize]) -> Result<Val> {
        let ts = self.nodes[table.0].shape.clone();
        if ts.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "embed",
                msg: format!("table must be rank 2, got {ts:?}"),
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument {
                op: "embed",
                msg: "empty id list".into(),
            });
        }
        let (l, d) = (ts[0], ts[1]);
        for &id in ids {
            if id >= l {
                return Err(Error::IndexOutOfRange {
                    what: "lookup id",
                    index: id,
                    size: l,
                });
            }
        }
        let tdat = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tdat[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            "embed",
            data,
            vec![ids.len(), d],
            needs,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Pixelwise Bernoulli negative log-likelihood of `target` under `xhat`,
    /// summed over pixels and averaged over the leading (batch) dimension.
    pub fn bce_loss(&mut self, xhat: Val, target: &Tensor) -> Result<Val> {
        let xs = self.nodes[xhat.0].shape.clone();
        if xs != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_loss",
                lhs: xs,
                rhs: target.shape().to_vec(),
            });
        }
        let xd = &self.nodes[xhat.0].data;
        if let Some(&bad) = xd.iter().find(|v| **v <= 0.0 || **v >= 1.0) {
            return Err(Error::Domain {
                op: "bce_loss",
                msg: format!("predictions must lie strictly inside (0,1), got {bad}"),
            });
        }
        if let Some(&bad) = target.data().iter().find(|v| **v < 0.0 || **v > 1.0) {
            return Err(Error::Domain {
                op: "bce_loss",
                msg: format!("targets must lie in [0,1], got {bad}"),
            });
        }
        let n = xs[0] as Real;
        let mut total = 0.0;
        for (&p, &t) in xd.iter().zip(target.data()) {
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let needs = self.needs(xhat);
        self.push(
            "bce_loss",
            vec![total / n],
            vec![1],
            needs,
            Op::Bce {
                xhat,
                target: target.data().to_vec(),
            },
        )
    }

    /// Squared-error likelihood: 0.5 * sum((xhat - target)^2) / batch.
    pub fn l2_loss(&mut self, xhat: Val, target: &Tensor) -> Result<Val> {
        let xs = self.nodes[xhat.0].shape.clone();
        if xs != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "l2_loss",
                lhs: xs,
                rhs: target.shape().to_vec(),
            });
        }
        let n = xs[0] as Real;
        let mut total = 0.0;
        for (&p, &t) in self.nodes[xhat.0].data.iter().zip(target.data()) {
            let d = p - t;
            total += 0.5 * d * d;
        }
        let needs = self.needs(xhat);
        self.push(
            "l2_loss",
            vec![total / n],
            vec![1],
            needs,
            Op::L2 {
                xhat,
                target: target.data().to_vec(),
            },
        )
    }

    /// Softmax cross-entropy of integer targets, averaged over the batch.
    pub fn cross_entropy(&mut self, logits: Val, targets: &[usize]) -> Result<Val> {
        let ls = self.nodes[logits.0].shape.clone();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::InvalidArgument {
                op: "cross_entropy",
                msg: format!("logits {ls:?} vs {} targets", targets.len()),
            });
        }
        let (n, c) = (ls[0], ls[1]);
        for &t in targets {
            if t >= c {
                return Err(Error::IndexOutOfRange {
                    what: "class target",
                    index: t,
                    size: c,
                });
            }
        }
        let ld = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for (row, &t) in ld.chunks(c).zip(targets) {
            let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
            total += lse - row[t];
        }
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            vec![total / n as Real],
            vec![1],
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every node is visited exactly once
    /// in reverse recording order; gradients of leaves bound with
    /// [`Tape::bind`] remain available afterwards.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: "empty tape".into(),
            });
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        let nodes = &mut self.nodes;
        let ops = &self.ops;

        fn add_into(nodes: &mut [Node], v: Val, delta: &[Real]) {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].data.len();
            let g = nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n]);
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }

        for i in (0..nodes.len()).rev() {
            if matches!(ops[i], Op::Leaf) || !nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = nodes[i].grad.take() else {
                continue;
            };
            match &ops[i] {
                Op::Leaf => unreachable!(),
                Op::Add { a, b } => {
                    add_into(nodes, *a, &gout);
                    add_into(nodes, *b, &gout);
                }
                Op::Mul { a, b } => {
                    if nodes[a.0].needs_grad {
                        let da: Vec<Real> = gout
                            .iter()
                            .zip(&nodes[b.0].data)
                            .map(|(g, v)| g * v)
                            .collect();
                        add_into(nodes, *a, &da);
                    }
                    if nodes[b.0].needs_grad {
                        let db: Vec<Real> = gout
                            .iter()
                            .zip(&nodes[a.0].data)
                            .map(|(g, v)| g * v)
                            .collect();
                        add_into(nodes, *b, &db);
                    }
                }
                Op::Affine { x, mul } => {
                    let dx: Vec<Real> = gout.iter().map(|g| g * mul).collect();
                    add_into(nodes, *x, &dx);
                }
                Op::AddRowBias { x, bias } => {
                    add_into(nodes, *x, &gout);
                    if nodes[bias.0].needs_grad {
                        let f = nodes[bias.0].data.len();
                        let mut db = vec![0.0; f];
                        for (i, g) in gout.iter().enumerate() {
                            db[i % f] += g;
                        }
                        add_into(nodes, *bias, &db);
                    }
                }
                Op::AddChannelMap { x, map } => {
                    add_into(nodes, *x, &gout);
                    if nodes[map.0].needs_grad {
                        let hw = nodes[x.0].shape[2] * nodes[x.0].shape[3];
                        let mut dm = vec![0.0; nodes[map.0].data.len()];
                        for (i, g) in gout.iter().enumerate() {
                            dm[i / hw] += g;
                        }
                        add_into(nodes, *map, &dm);
                    }
                }
                Op::Relu { x } => {
                    let dx: Vec<Real> = gout
                        .iter()
                        .zip(&nodes[x.0].data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(nodes, *x, &dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx: Vec<Real> = gout
                        .iter()
                        .zip(&nodes[x.0].data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                        .collect();
                    add_into(nodes, *x, &dx);
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<Real> = gout
                        .iter()
                        .zip(&nodes[i].data)
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    add_into(nodes, *x, &dx);
                }
                Op::Tanh { x } => {
                    let dx: Vec<Real> = gout
                        .iter()
                        .zip(&nodes[i].data)
                        .map(|(g, &t)| g * (1.0 - t * t))
                        .collect();
                    add_into(nodes, *x, &dx);
                }
                Op::Exp { x } => {
                    let dx: Vec<Real> = gout
                        .iter()
                        .zip(&nodes[i].data)
                        .map(|(g, &e)| g * e)
                        .collect();
                    add_into(nodes, *x, &dx);
                }
                Op::Log { x } => {
                    let dx: Vec<Real> = gout
                        .iter()
                        .zip(&nodes[x.0].data)
                        .map(|(g, &v)| g / v)
                        .collect();
                    add_into(nodes, *x, &dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx: Vec<Real> = gout
                        .iter()
                        .zip(&nodes[x.0].data)
                        .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                        .collect();
                    add_into(nodes, *x, &dx);
                }
                Op::LnClamped { x, lo, hi } => {
                    let dx: Vec<Real> = gout
                        .iter()
                        .zip(&nodes[x.0].data)
                        .map(|(g, &v)| if v >= *lo && v <= *hi { g / v } else { 0.0 })
                        .collect();
                    add_into(nodes, *x, &dx);
                }
                Op::Reshape { x } => {
                    add_into(nodes, *x, &gout);
                }
                Op::SliceCols { x, from, width } => {
                    let (n, f) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                    let mut dx = vec![0.0; n * f];
                    for r in 0..n {
                        dx[r * f + from..r * f + from + width]
                            .copy_from_slice(&gout[r * width..(r + 1) * width]);
                    }
                    add_into(nodes, *x, &dx);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_abt_acc(&gout, &nodes[b.0].data, m, n, k, &mut da);
                        add_into(nodes, *a, &da);
                    }
                    if nodes[b.0].needs_grad {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_atb(&nodes[a.0].data, &gout, m, k, n, &mut db);
                        add_into(nodes, *b, &db);
                    }
                }
                Op::Sum { x } => {
                    let dx = vec![gout[0]; nodes[x.0].data.len()];
                    add_into(nodes, *x, &dx);
                }
                Op::Mean { x } => {
                    let n = nodes[x.0].data.len();
                    let dx = vec![gout[0] / n as Real; n];
                    add_into(nodes, *x, &dx);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    c_out,
                } => {
                    let n = nodes[x.0].shape[0];
                    let mut dx = if nodes[x.0].needs_grad {
                        Some(vec![0.0; nodes[x.0].data.len()])
                    } else {
                        None
                    };
                    let mut dw = if nodes[w.0].needs_grad {
                        Some(vec![0.0; nodes[w.0].data.len()])
                    } else {
                        None
                    };
                    let mut db = if nodes[b.0].needs_grad {
                        Some(vec![0.0; nodes[b.0].data.len()])
                    } else {
                        None
                    };
                    kernels::conv2d_backward(
                        &nodes[x.0].data,
                        &nodes[w.0].data,
                        &gout,
                        n,
                        *c_out,
                        geom,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        add_into(nodes, *x, &dx);
                    }
                    if let Some(dw) = dw {
                        add_into(nodes, *w, &dw);
                    }
                    if let Some(db) = db {
                        add_into(nodes, *b, &db);
                    }
                }
                Op::ConvT2d { x, w, b, geom, c_u } => {
                    let n = nodes[x.0].shape[0];
                    let mut du = if nodes[x.0].needs_grad {
                        Some(vec![0.0; nodes[x.0].data.len()])
                    } else {
                        None
                    };
                    let mut dw = if nodes[w.0].needs_grad {
                        Some(vec![0.0; nodes[w.0].data.len()])
                    } else {
                        None
                    };
                    let mut db = if nodes[b.0].needs_grad {
                        Some(vec![0.0; nodes[b.0].data.len()])
                    } else {
                        None
                    };
                    kernels::conv_transpose2d_backward(
                        &nodes[x.0].data,
                        &nodes[w.0].data,
                        &gout,
                        n,
                        *c_u,
                        geom,
                        du.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(du) = du {
                        add_into(nodes, *x, &du);
                    }
                    if let Some(dw) = dw {
                        add_into(nodes, *w, &dw);
                    }
                    if let Some(db) = db {
                        add_into(nodes, *b, &db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch,
                } => {
                    let xs = &nodes[x.0].shape;
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let hw = h * w;
                    let m = (n * hw) as Real;
                    let xd = &nodes[x.0].data;
                    let gdat = &nodes[gamma.0].data;

                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for s_i in 0..n {
                        for ch in 0..c {
                            let base = (s_i * c + ch) * hw;
                            for idx in 0..hw {
                                let g = gout[base + idx];
                                let xhat = (xd[base + idx] - mean[ch]) * inv_std[ch];
                                dgamma[ch] += g * xhat;
                                dbeta[ch] += g;
                            }
                        }
                    }

                    if nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; xd.len()];
                        if *batch {
                            for s_i in 0..n {
                                for ch in 0..c {
                                    let base = (s_i * c + ch) * hw;
                                    let coef = gdat[ch] * inv_std[ch];
                                    let mg = dbeta[ch] / m;
                                    let mgx = dgamma[ch] / m;
                                    for idx in 0..hw {
                                        let xhat =
                                            (xd[base + idx] - mean[ch]) * inv_std[ch];
                                        dx[base + idx] =
                                            coef * (gout[base + idx] - mg - xhat * mgx);
                                    }
                                }
                            }
                        } else {
                            for s_i in 0..n {
                                for ch in 0..c {
                                    let base = (s_i * c + ch) * hw;
                                    let coef = gdat[ch] * inv_std[ch];
                                    for idx in 0..hw {
                                        dx[base + idx] = gout[base + idx] * coef;
                                    }
                                }
                            }
                        }
                        add_into(nodes, *x, &dx);
                    }
                    add_into(nodes, *gamma, &dgamma);
                    add_into(nodes, *beta, &dbeta);
                }
                Op::Embed { table, ids } => {
                    if nodes[table.0].needs_grad {
                        let d = nodes[table.0].shape[1];
                        let mut dt = vec![0.0; nodes[table.0].data.len()];
                        for (row, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += gout[row * d + j];
                            }
                        }
                        add_into(nodes, *table, &dt);
                    }
                }
                Op::Bce { xhat, target } => {
                    let n = nodes[xhat.0].shape[0] as Real;
                    let g = gout[0] / n;
                    let dx: Vec<Real> = nodes[xhat.0]
                        .data
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| g * (p - t) / (p * (1.0 - p)))
                        .collect();
                    add_into(nodes, *xhat, &dx);
                }
                Op::L2 { xhat, target } => {
                    let n = nodes[xhat.0].shape[0] as Real;
                    let g = gout[0] / n;
                    let dx: Vec<Real> = nodes[xhat.0]
                        .data
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| g * (p - t))
                        .collect();
                    add_into(nodes, *xhat, &dx);
                }
                Op::CrossEntropy { logits, targets } => {
                    let c = nodes[logits.0].shape[1];
                    let n = targets.len() as Real;
                    let g = gout[0] / n;
                    let ld = &nodes[logits.0].data;
                    let mut dx = vec![0.0; ld.len()];
                    for (row, &t) in targets.iter().enumerate() {
                        let r = &ld[row * c..(row + 1) * c];
                        let m = r.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                        let denom: Real = r.iter().map(|v| (v - m).exp()).sum();
                        for j in 0..c {
                            let soft = (r[j] - m).exp() / denom;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dx[row * c + j] = g * (soft - onehot);
                        }
                    }
                    add_into(nodes, *logits, &dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn t(data: &[Real], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn randt(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::Rng::seed_from(seed);
        let numel: usize = shape.iter().product();
        let data: Vec<Real> = (0..numel).map(|_| rng.normal() as Real).collect();
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = t(&[1.0, 2.0, 3.0], &[3]).with_grad();
        let mut tape = Tape::new();
        let v = tape.bind(&x).unwrap();
        let loss = tape.sum(v).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = t(&[1.0, 2.0, 3.0], &[3]).with_grad();
        let mut tape = Tape::new();
        let v = tape.bind(&x).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let x = t(&[1.0], &[1]).with_grad();
        let mut tape = Tape::new();
        let v = tape.bind(&x).unwrap();
        let loss = tape.sum(v).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = t(&[1.0, 2.0], &[2]).with_grad();
        let mut tape = Tape::new();
        let v = tape.bind(&x).unwrap();
        assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn grads_accumulate_over_multiple_uses() {
        // loss = sum(x) + sum(x) -> grad 2 everywhere; also exercises the
        // bind cache returning the same leaf.
        let x = t(&[1.0, -1.0], &[2]).with_grad();
        let mut tape = Tape::new();
        let a = tape.bind(&x).unwrap();
        let b = tape.bind(&x).unwrap();
        assert_eq!(a, b);
        let y = tape.add(a, b).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn elementwise_trivia() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![-1.0], &[1]).unwrap();
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert!((tape.item(y) - (-0.2)).abs() < 1e-15);
        let z = tape.constant(vec![0.0], &[1]).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.item(s), 0.5);
        let a = tape.constant(vec![1.0; 6], &[2, 3]).unwrap();
        let b = tape.constant(vec![1.0; 12], &[3, 4]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(tape.data(c).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn sigmoid_output_strictly_inside_unit_interval() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![-1e6, -50.0, 0.0, 50.0, 1e6], &[5]).unwrap();
        let s = tape.sigmoid(x).unwrap();
        for &v in tape.data(s) {
            assert!(v > 0.0 && v < 1.0, "sigmoid output {v} not in (0,1)");
        }
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0; 4], &[2, 2]).unwrap();
        let b = tape.constant(vec![1.0; 6], &[2, 3]).unwrap();
        assert!(matches!(
            tape.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
        assert!(tape.matmul(a, b).is_ok());
        assert!(matches!(
            tape.matmul(b, b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 0.0], &[2]).unwrap();
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn reshape_preserves_sum_and_copies() {
        let x = randt(&[3, 4], 2);
        let mut tape = Tape::new();
        let v = tape.constant_tensor(&x).unwrap();
        let r = tape.reshape(v, &[2, 6]).unwrap();
        let s0: Real = tape.data(v).iter().sum();
        let s1: Real = tape.data(r).iter().sum();
        assert_eq!(s0, s1);
        assert!(tape.reshape(v, &[5, 2]).is_err());
    }

    #[test]
    fn conv_shape_formula() {
        // 28x28, 5x5 kernel, stride 2, padding 2 -> 14x14
        let x = randt(&[1, 1, 28, 28], 3);
        let w = randt(&[4, 1, 5, 5], 4);
        let b = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&w).unwrap(),
            tape.constant_tensor(&b).unwrap(),
        );
        let y = tape.conv2d(xv, wv, bv, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 14, 14]);

        // 32x32, 3x3 kernel, stride 2, padding 1 -> 16x16
        let x2 = randt(&[1, 1, 32, 32], 5);
        let w2 = randt(&[2, 1, 3, 3], 6);
        let b2 = Tensor::zeros(&[2]);
        let (xv2, wv2, bv2) = (
            tape.constant_tensor(&x2).unwrap(),
            tape.constant_tensor(&w2).unwrap(),
            tape.constant_tensor(&b2).unwrap(),
        );
        let y2 = tape.conv2d(xv2, wv2, bv2, 2, 1).unwrap();
        assert_eq!(tape.shape(y2), &[1, 2, 16, 16]);
    }

    #[test]
    fn identity_convolutions() {
        let x = randt(&[2, 1, 7, 7], 7);
        let w = t(&[1.0], &[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&w).unwrap(),
            tape.constant_tensor(&b).unwrap(),
        );
        let y = tape.conv2d(xv, wv, bv, 1, 0).unwrap();
        assert_eq!(tape.data(y), x.data());
        let w2 = t(&[1.0], &[1, 1, 1, 1]);
        let wv2 = tape.constant_tensor(&w2).unwrap();
        let yt = tape.conv_transpose2d(xv, wv2, bv, 1, 0, 0).unwrap();
        assert_eq!(tape.data(yt), x.data());
    }

    #[test]
    fn conv_cin_mismatch_reports_both_shapes() {
        let x = randt(&[1, 3, 8, 8], 8);
        let w = randt(&[4, 2, 3, 3], 9);
        let b = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&w).unwrap(),
            tape.constant_tensor(&b).unwrap(),
        );
        match tape.conv2d(xv, wv, bv, 1, 1) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![4, 2, 3, 3]);
                assert_eq!(rhs, vec![1, 3, 8, 8]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn conv_transpose_shape_with_output_padding() {
        // 14x14, k5, s2, p2 -> 27x27; output_padding 1 -> 28x28
        let x = randt(&[1, 2, 14, 14], 10);
        let w = randt(&[2, 3, 5, 5], 11);
        let b = Tensor::zeros(&[3]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&w).unwrap(),
            tape.constant_tensor(&b).unwrap(),
        );
        let y27 = tape.conv_transpose2d(xv, wv, bv, 2, 2, 0).unwrap();
        assert_eq!(tape.shape(y27), &[1, 3, 27, 27]);
        let y28 = tape.conv_transpose2d(xv, wv, bv, 2, 2, 1).unwrap();
        assert_eq!(tape.shape(y28), &[1, 3, 28, 28]);
    }

    #[test]
    fn conv_adjoint_identity_on_tape() {
        // <conv2d(x), y> == <x, conv_transpose2d(y)> with shared weights.
        let x = randt(&[2, 2, 9, 9], 12);
        let w = randt(&[3, 2, 5, 5], 13);
        let y = randt(&[2, 3, 5, 5], 14);
        let zb_out = Tensor::zeros(&[3]);
        let zb_in = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let (xv, wv, yv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&w).unwrap(),
            tape.constant_tensor(&y).unwrap(),
        );
        let b_out = tape.constant_tensor(&zb_out).unwrap();
        let b_in = tape.constant_tensor(&zb_in).unwrap();
        let cx = tape.conv2d(xv, wv, b_out, 2, 2).unwrap();
        assert_eq!(tape.shape(cx), &[2, 3, 5, 5]);
        let prod1 = tape.mul(cx, yv).unwrap();
        let lhs = tape.sum(prod1).unwrap();
        let ty = tape.conv_transpose2d(yv, wv, b_in, 2, 2, 0).unwrap();
        assert_eq!(tape.shape(ty), &[2, 2, 9, 9]);
        let prod2 = tape.mul(ty, xv).unwrap();
        let rhs = tape.sum(prod2).unwrap();
        assert!(
            (tape.item(lhs) - tape.item(rhs)).abs() < 1e-10,
            "adjoint identity violated: {} vs {}",
            tape.item(lhs),
            tape.item(rhs)
        );
    }

    #[test]
    fn batch_norm_statistics_oracle() {
        // Random input, train mode: per-channel output mean ~= beta,
        // variance ~= gamma^2.
        let x = randt(&[4, 3, 5, 5], 15);
        let gamma = t(&[1.5, 0.5, 2.0], &[3]);
        let beta = t(&[0.3, -0.2, 0.0], &[3]);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&gamma).unwrap(),
            tape.constant_tensor(&beta).unwrap(),
        );
        let (y, stats) = tape
            .batch_norm2d(xv, gv, bv, BnMode::Train, 1e-5)
            .unwrap();
        assert!(stats.is_some());
        let yd = tape.data(y);
        let m = 4 * 5 * 5;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for n in 0..4 {
                let base = (n * 3 + c) * 25;
                for i in 0..25 {
                    sum += yd[base + i];
                    sumsq += yd[base + i] * yd[base + i];
                }
            }
            let mean = sum / m as Real;
            let var = sumsq / m as Real - mean * mean;
            assert!(
                (mean - beta.data()[c]).abs() < 1e-8,
                "channel {c} mean {mean}"
            );
            let g2 = gamma.data()[c] * gamma.data()[c];
            assert!((var - g2).abs() / g2 < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_input_is_beta() {
        let x = Tensor::full(&[2, 2, 3, 3], 7.0);
        let gamma = t(&[1.0, 1.0], &[2]);
        let beta = t(&[0.0, 0.5], &[2]);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&gamma).unwrap(),
            tape.constant_tensor(&beta).unwrap(),
        );
        let (y, _) = tape
            .batch_norm2d(xv, gv, bv, BnMode::Train, 1e-5)
            .unwrap();
        let yd = tape.data(y);
        for n in 0..2 {
            for i in 0..9 {
                assert!(yd[(n * 2) * 9 + i].abs() < 1e-12);
                assert!((yd[(n * 2 + 1) * 9 + i] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_gamma_zero_gives_beta() {
        let x = randt(&[2, 1, 4, 4], 16);
        let gamma = t(&[0.0], &[1]);
        let beta = t(&[0.7], &[1]);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&gamma).unwrap(),
            tape.constant_tensor(&beta).unwrap(),
        );
        let (y, _) = tape
            .batch_norm2d(xv, gv, bv, BnMode::Train, 1e-5)
            .unwrap();
        assert!(tape.data(y).iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_single_element_errors_in_train() {
        let x = randt(&[1, 2, 1, 1], 17);
        let gamma = t(&[1.0, 1.0], &[2]);
        let beta = t(&[0.0, 0.0], &[2]);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.constant_tensor(&x).unwrap(),
            tape.constant_tensor(&gamma).unwrap(),
            tape.constant_tensor(&beta).unwrap(),
        );
        assert!(tape
            .batch_norm2d(xv, gv, bv, BnMode::Train, 1e-5)
            .is_err());
    }

    #[test]
    fn nonfinite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1e308], &[1]).unwrap();
        // exp overflows to infinity
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn ln_clamped_counts_events() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.5, 1.0], &[3]).unwrap();
        let y = tape.ln_clamped(x, 1e-7, 1.0 - 1e-7).unwrap();
        assert_eq!(tape.clamp_events(), 2);
        assert!((tape.data(y)[1] - (0.5 as Real).ln()).abs() < 1e-12);
    }

    // ── Finite-difference checks for every differentiable primitive ────

    fn fd_check(
        name: &str,
        inputs: &[(&str, Tensor)],
        build: &mut super::super::gradcheck::GraphBuilder,
    ) {
        let report = check_gradients(inputs, build, 1e-5, 1e-5).unwrap();
        assert!(
            report.passed(),
            "{name} failed finite-difference check:\n{}",
            report.to_text()
        );
        assert!(
            report.total_checked() > 0,
            "{name}: every comparison was skipped"
        );
    }

    #[test]
    fn fd_elementwise_ops() {
        let x = randt(&[2, 3], 20);
        let y = randt(&[2, 3], 21);
        fd_check("add+mul+affine", &[("x", x.clone()), ("y", y)], &mut |tape, ts| {
            let a = tape.bind(&ts[0])?;
            let b = tape.bind(&ts[1])?;
            let s = tape.add(a, b)?;
            let m = tape.mul(s, a)?;
            let f = tape.affine(m, 0.7, -0.3)?;
            tape.sum(f)
        });
        fd_check("sigmoid+tanh+exp", &[("x", x.clone())], &mut |tape, ts| {
            let a = tape.bind(&ts[0])?;
            let s = tape.sigmoid(a)?;
            let t2 = tape.tanh(s)?;
            let e = tape.exp(t2)?;
            tape.mean(e)
        });
        fd_check("relu+leaky", &[("x", x.clone())], &mut |tape, ts| {
            let a = tape.bind(&ts[0])?;
            let r = tape.relu(a)?;
            let l = tape.leaky_relu(a, 0.2)?;
            let s = tape.add(r, l)?;
            tape.sum(s)
        });
        let pos = Tensor::new(
            x.data().iter().map(|v| v.abs() + 0.5).collect(),
            x.shape(),
        )
        .unwrap();
        fd_check("log", &[("x", pos)], &mut |tape, ts| {
            let a = tape.bind(&ts[0])?;
            let l = tape.log(a)?;
            tape.sum(l)
        });
    }

    #[test]
    fn fd_matmul_bias_slice() {
        let x = randt(&[3, 4], 22);
        let w = randt(&[4, 5], 23);
        let b = randt(&[5], 24);
        fd_check(
            "matmul+row_bias+slice",
            &[("x", x), ("w", w), ("b", b)],
            &mut |tape, ts| {
                let xv = tape.bind(&ts[0])?;
                let wv = tape.bind(&ts[1])?;
                let bv = tape.bind(&ts[2])?;
                let y = tape.matmul(xv, wv)?;
                let y = tape.add_row_bias(y, bv)?;
                let s = tape.slice_cols(y, 1, 3)?;
                let sq = tape.mul(s, s)?;
                tape.sum(sq)
            },
        );
    }

    #[test]
    fn fd_conv2d() {
        let x = randt(&[2, 2, 6, 6], 25);
        let w = randt(&[3, 2, 3, 3], 26);
        let b = randt(&[3], 27);
        fd_check("conv2d", &[("x", x), ("w", w), ("b", b)], &mut |tape, ts| {
            let xv = tape.bind(&ts[0])?;
            let wv = tape.bind(&ts[1])?;
            let bv = tape.bind(&ts[2])?;
            let y = tape.conv2d(xv, wv, bv, 2, 1)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }

    #[test]
    fn fd_conv_transpose2d() {
        let x = randt(&[2, 3, 4, 4], 28);
        let w = randt(&[3, 2, 3, 3], 29);
        let b = randt(&[2], 30);
        fd_check("conv_transpose2d", &[("x", x), ("w", w), ("b", b)], &mut |tape, ts| {
            let xv = tape.bind(&ts[0])?;
            let wv = tape.bind(&ts[1])?;
            let bv = tape.bind(&ts[2])?;
            let y = tape.conv_transpose2d(xv, wv, bv, 2, 1, 1)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        });
    }

    #[test]
    fn fd_batch_norm_train_and_eval() {
        let x = randt(&[3, 2, 4, 4], 31);
        let gamma = randt(&[2], 32);
        let beta = randt(&[2], 33);
        // Weight the output elementwise before reducing: an unweighted sum of
        // squares of a normalized batch barely depends on x at all.
        let weights = randt(&[3, 2, 4, 4], 39);
        fd_check(
            "batch_norm train",
            &[("x", x.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())],
            &mut |tape, ts| {
                let xv = tape.bind(&ts[0])?;
                let gv = tape.bind(&ts[1])?;
                let bv = tape.bind(&ts[2])?;
                let (y, _) = tape.batch_norm2d(xv, gv, bv, BnMode::TrainFrozen, 1e-5)?;
                let wv = tape.constant_tensor(&weights)?;
                let yw = tape.mul(y, wv)?;
                let sq = tape.mul(yw, yw)?;
                tape.sum(sq)
            },
        );
        fd_check(
            "batch_norm eval",
            &[("x", x), ("gamma", gamma), ("beta", beta)],
            &mut |tape, ts| {
                let xv = tape.bind(&ts[0])?;
                let gv = tape.bind(&ts[1])?;
                let bv = tape.bind(&ts[2])?;
                let mean = vec![0.1, -0.2];
                let var = vec![1.3, 0.6];
                let (y, _) = tape.batch_norm2d(
                    xv,
                    gv,
                    bv,
                    BnMode::Eval {
                        mean: &mean,
                        var: &var,
                    },
                    1e-5,
                )?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
        );
    }

    #[test]
    fn fd_embed_and_channel_map() {
        let table = randt(&[4, 3], 34);
        let x = randt(&[2, 3, 2, 2], 35);
        fd_check(
            "embed+add_channel_map",
            &[("table", table), ("x", x)],
            &mut |tape, ts| {
                let tv = tape.bind(&ts[0])?;
                let xv = tape.bind(&ts[1])?;
                let e = tape.embed(tv, &[1, 3])?;
                let y = tape.add_channel_map(xv, e)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
        );
    }

    #[test]
    fn fd_losses() {
        let mut logits = randt(&[3, 4], 36);
        for v in logits.data_mut() {
            *v *= 2.0;
        }
        fd_check("cross_entropy", &[("logits", logits)], &mut |tape, ts| {
            let lv = tape.bind(&ts[0])?;
            tape.cross_entropy(lv, &[0, 2, 3])
        });

        let pre = randt(&[2, 1, 3, 3], 37);
        let target = Tensor::new(
            randt(&[2, 1, 3, 3], 38)
                .data()
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
            &[2, 1, 3, 3],
        )
        .unwrap();
        fd_check("bce via sigmoid", &[("pre", pre.clone())], &mut |tape, ts| {
            let pv = tape.bind(&ts[0])?;
            let xh = tape.sigmoid(pv)?;
            tape.bce_loss(xh, &target)
        });
        fd_check("l2", &[("pre", pre)], &mut |tape, ts| {
            let pv = tape.bind(&ts[0])?;
            tape.l2_loss(pv, &target)
        });
        fd_check("ln_clamped", &[("p", t(&[0.3, 0.8], &[2]))], &mut |tape, ts| {
            let pv = tape.bind(&ts[0])?;
            let l = tape.ln_clamped(pv, 1e-7, 1.0 - 1e-7)?;
            tape.mean(l)
        });
    }

    #[test]
    fn bce_rejects_out_of_range_predictions() {
        let target = Tensor::full(&[1, 2], 0.5);
        let mut tape = Tape::new();
        let bad = tape.constant(vec![0.5, 1.0], &[1, 2]).unwrap();
        assert!(matches!(
            tape.bce_loss(bad, &target),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn bce_uniform_half_is_pixels_ln2() {
        let target = Tensor::new(vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0], &[1, 6]).unwrap();
        let mut tape = Tape::new();
        let xh = tape.constant(vec![0.5; 6], &[1, 6]).unwrap();
        let loss = tape.bce_loss(xh, &target).unwrap();
        let expect = 6.0 * (2.0 as Real).ln();
        assert!((tape.item(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_skips_exact_kinks() {
        let x = t(&[0.0, 1.0, -1.0], &[3]);
        let report = check_gradients(
            &[("x", x)],
            &mut |tape, ts| {
                let v = tape.bind(&ts[0])?;
                let r = tape.relu(v)?;
                tape.sum(r)
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed());
        // the element at exactly 0 crosses the breakpoint under perturbation
        assert_eq!(report.entries[0].skipped, 1, "{:?}", report.entries[0]);
        assert_eq!(report.entries[0].checked, 2);
    }

    #[test]
    fn detach_stops_gradient() {
        let x = t(&[2.0], &[1]).with_grad();
        let mut tape = Tape::new();
        let v = tape.bind(&x).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let d = tape.detach(sq).unwrap();
        let y = tape.mul(d, v).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        // d treated as constant 4: dL/dx = 4, not 3x^2 = 12
        assert_eq!(tape.grad_of(&x).unwrap(), &[4.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let x = randt(&[2, 2, 8, 8], 40);
        let w = randt(&[4, 2, 5, 5], 41);
        let b = randt(&[4], 42);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant_tensor(&x).unwrap();
            let wv = tape.constant_tensor(&w).unwrap();
            let bv = tape.constant_tensor(&b).unwrap();
            let y = tape.conv2d(xv, wv, bv, 2, 2).unwrap();
            tape.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }
}
