//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records eagerly-evaluated operations as a flat list of nodes;
//! [`Tape::backward`] replays the list in reverse, accumulating gradients
//! additively into every node that requires them. The op set is exactly what
//! the localization/segmentation pipeline needs, nothing more: convolutions,
//! a few activations, nearest upsampling, the affine grid generator with its
//! bilinear sampler, and small scalar plumbing for loss assembly.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tensor;

pub use adam::{AdamState, ParamSet};
pub use tensor::{Dtype, Real, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Element-wise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
    Ln,
    Exp,
    Act(Activation),
    Clamp { lo: f64, hi: f64 },
    Maximum,
    Minimum,
    SumAll,
    MeanAll,
    Index(usize),
    PixelVector { y: usize, x: usize },
    Stack,
    Reshape,
    Conv2d { stride: usize, padding: usize },
    Upsample2x,
    AffineGrid { oh: usize, ow: usize },
    GridSample,
    ScaleGrad(f64),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op,
    inputs: Vec<NodeId>,
}

/// The computation tape. Confined to one execution context; create one per
/// forward/backward pass and drop it afterwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, populated by [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value out of {:?}", op);
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            inputs,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ----- leaves -----

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = self.push(value, Op::Leaf, vec![]);
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar_tensor(T::of(v)))
    }

    // ----- element-wise binary -----

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(T, T) -> T) -> NodeId {
        assert_eq!(
            self.nodes[a.0].value.dims(),
            self.nodes[b.0].value.dims(),
            "shape mismatch in {:?}",
            op
        );
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let dims = self.nodes[a.0].value.dims().to_vec();
        self.push(Tensor::new(dims, data), op, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Maximum, |x, y| if x >= y { x } else { y })
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Minimum, |x, y| if x <= y { x } else { y })
    }

    // ----- element-wise unary -----

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(T) -> T) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op, vec![a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::of(c);
        self.unary(a, Op::AddScalar(c), |x| x + cv)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::of(c);
        self.unary(a, Op::MulScalar(c), |x| x * cv)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> NodeId {
        let pv = T::of(p);
        self.unary(a, Op::PowScalar(p), |x| x.powf(pv))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln, |x| x.ln())
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp, |x| x.exp())
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp { lo, hi }, |x| x.max(l).min(h))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        self.unary(a, Op::Act(kind), |x| apply_activation(x, kind))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Softplus)
    }

    /// Identity forward; backward multiplies the incoming gradient by
    /// `factor`. Carries the decayed supervision from the second stage back
    /// into the first.
    pub fn scale_gradient(&mut self, a: NodeId, factor: f64) -> NodeId {
        assert!(factor >= 0.0, "gradient scale factor must be >= 0");
        self.unary(a, Op::ScaleGrad(factor), |x| x)
    }

    // ----- reductions and shuffles -----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Tensor::scalar_tensor(s), Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a.0].value.mean();
        self.push(Tensor::scalar_tensor(m), Op::MeanAll, vec![a])
    }

    /// Extract a single element by flat index as a scalar node.
    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = self.nodes[a.0].value.data()[i];
        self.push(Tensor::scalar_tensor(v), Op::Index(i), vec![a])
    }

    /// Gather the channel vector at spatial position (y, x) of a
    /// [1,C,H,W] map into a [C] node.
    pub fn pixel_vector(&mut self, a: NodeId, y: usize, x: usize) -> NodeId {
        let dims = self.nodes[a.0].value.dims();
        assert_eq!(dims.len(), 4, "pixel_vector expects a [1,C,H,W] map");
        assert_eq!(dims[0], 1, "pixel_vector expects batch 1");
        let (c, h, w) = (dims[1], dims[2], dims[3]);
        assert!(y < h && x < w, "pixel ({}, {}) outside {}x{} map", x, y, w, h);
        let data: Vec<T> = (0..c)
            .map(|ch| self.nodes[a.0].value.data()[(ch * h + y) * w + x])
            .collect();
        self.push(Tensor::new(vec![c], data), Op::PixelVector { y, x }, vec![a])
    }

    /// Stack k scalar nodes into a [k] vector node.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack of zero nodes");
        let data: Vec<T> = parts
            .iter()
            .map(|&p| self.nodes[p.0].value.scalar())
            .collect();
        self.push(Tensor::new(vec![parts.len()], data), Op::Stack, parts.to_vec())
    }

    pub fn reshape(&mut self, a: NodeId, dims: Vec<usize>) -> NodeId {
        let value = self.nodes[a.0].value.clone().reshaped(dims);
        self.push(value, Op::Reshape, vec![a])
    }

    // ----- spatial ops -----

    /// 2-D cross-correlation with bias. input [N,Cin,H,W], weight
    /// [Cout,Cin,kh,kw], bias [Cout].
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        let idims = self.nodes[input.0].value.dims().to_vec();
        let wdims = self.nodes[weight.0].value.dims().to_vec();
        let bdims = self.nodes[bias.0].value.dims().to_vec();
        assert_eq!(idims.len(), 4, "conv2d input must be [N,Cin,H,W], got {:?}", idims);
        assert_eq!(wdims.len(), 4, "conv2d weight must be [Cout,Cin,kh,kw], got {:?}", wdims);
        assert_eq!(
            idims[1], wdims[1],
            "conv2d channel mismatch: input {:?} vs weight {:?}",
            idims, wdims
        );
        assert_eq!(bdims, vec![wdims[0]], "conv2d bias must be [Cout]");
        assert!(wdims[2] % 2 == 1 && wdims[3] % 2 == 1, "conv2d kernel dims must be odd");
        let (n, cin, h, w) = (idims[0], idims[1], idims[2], idims[3]);
        let (cout, kh, kw) = (wdims[0], wdims[2], wdims[3]);
        let oh = kernels::conv_out_dim(h, kh, stride, padding);
        let ow = kernels::conv_out_dim(w, kw, stride, padding);
        let data = kernels::conv2d_forward(
            self.nodes[input.0].value.data(),
            self.nodes[weight.0].value.data(),
            self.nodes[bias.0].value.data(),
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
        );
        self.push(
            Tensor::new(vec![n, cout, oh, ow], data),
            Op::Conv2d { stride, padding },
            vec![input, weight, bias],
        )
    }

    pub fn upsample_nearest2x(&mut self, a: NodeId) -> NodeId {
        let dims = self.nodes[a.0].value.dims().to_vec();
        assert_eq!(dims.len(), 4, "upsample expects [N,C,H,W]");
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let data = kernels::upsample2x_forward(self.nodes[a.0].value.data(), n, c, h, w);
        self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], data), Op::Upsample2x, vec![a])
    }

    /// Sampling grid from a normalized [N,2,3] affine matrix,
    /// align-corners convention. Output [N,oh,ow,2].
    pub fn affine_grid(&mut self, theta: NodeId, oh: usize, ow: usize) -> NodeId {
        let dims = self.nodes[theta.0].value.dims().to_vec();
        assert_eq!(dims.len(), 3, "affine_grid theta must be [N,2,3]");
        assert_eq!(&dims[1..], &[2, 3], "affine_grid theta must be [N,2,3]");
        let n = dims[0];
        let data = kernels::affine_grid_forward(self.nodes[theta.0].value.data(), n, oh, ow);
        self.push(
            Tensor::new(vec![n, oh, ow, 2], data),
            Op::AffineGrid { oh, ow },
            vec![theta],
        )
    }

    /// Bilinear sampling of input [N,C,H,W] at grid [N,gh,gw,2]; coordinates
    /// outside [-1,1] read zeros. Gradients flow to both the image and the
    /// grid.
    pub fn grid_sample(&mut self, input: NodeId, grid: NodeId) -> NodeId {
        let idims = self.nodes[input.0].value.dims().to_vec();
        let gdims = self.nodes[grid.0].value.dims().to_vec();
        assert_eq!(idims.len(), 4, "grid_sample input must be [N,C,H,W]");
        assert_eq!(gdims.len(), 4, "grid_sample grid must be [N,gh,gw,2]");
        assert_eq!(gdims[3], 2, "grid last dim must hold (x,y) pairs");
        assert_eq!(idims[0], gdims[0], "grid_sample batch mismatch");
        let (n, c, h, w) = (idims[0], idims[1], idims[2], idims[3]);
        let (gh, gw) = (gdims[1], gdims[2]);
        let data = kernels::grid_sample_forward(
            self.nodes[input.0].value.data(),
            self.nodes[grid.0].value.data(),
            n,
            c,
            h,
            w,
            gh,
            gw,
        );
        self.push(
            Tensor::new(vec![n, c, gh, gw], data),
            Op::GridSample,
            vec![input, grid],
        )
    }

    // ----- backward -----

    /// Reverse accumulation from a scalar loss. Gradients add into any
    /// previously accumulated values; reset with the owning parameter set.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss, got dims {:?}",
            self.nodes[loss.0].value.dims()
        );
        let n = loss.0 + 1;
        let mut scratch: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        scratch[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (input, contrib) in self.propagate(i, &g) {
                match &mut scratch[input.0] {
                    Some(buf) => add_into(buf, &contrib),
                    slot => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            let slot = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.dims()));
            add_into(slot.data_mut(), &g);
        }
    }

    /// Per-op chain rule: gradient contributions of node `i` to each input
    /// that requires a gradient.
    fn propagate(&self, i: usize, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out: Vec<(NodeId, Vec<T>)> = Vec::new();
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| self.nodes[id.0].value.data();

        match node.op {
            Op::Leaf => {}
            Op::Add => {
                for &inp in &node.inputs {
                    if needs(inp) {
                        out.push((inp, g.to_vec()));
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    out.push((b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&go, &y)| go * y).collect()));
                }
                if needs(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&go, &x)| go * x).collect()));
                }
            }
            Op::Div => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&go, &y)| go / y).collect()));
                }
                if needs(b) {
                    let contrib = g
                        .iter()
                        .zip(val(a).iter().zip(val(b)))
                        .map(|(&go, (&x, &y))| -go * x / (y * y))
                        .collect();
                    out.push((b, contrib));
                }
            }
            Op::Maximum => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    let contrib = g
                        .iter()
                        .zip(val(a).iter().zip(val(b)))
                        .map(|(&go, (&x, &y))| if x >= y { go } else { T::zero() })
                        .collect();
                    out.push((a, contrib));
                }
                if needs(b) {
                    let contrib = g
                        .iter()
                        .zip(val(a).iter().zip(val(b)))
                        .map(|(&go, (&x, &y))| if x < y { go } else { T::zero() })
                        .collect();
                    out.push((b, contrib));
                }
            }
            Op::Minimum => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    let contrib = g
                        .iter()
                        .zip(val(a).iter().zip(val(b)))
                        .map(|(&go, (&x, &y))| if x <= y { go } else { T::zero() })
                        .collect();
                    out.push((a, contrib));
                }
                if needs(b) {
                    let contrib = g
                        .iter()
                        .zip(val(a).iter().zip(val(b)))
                        .map(|(&go, (&x, &y))| if x > y { go } else { T::zero() })
                        .collect();
                    out.push((b, contrib));
                }
            }
            Op::AddScalar(_) => {
                out.push((node.inputs[0], g.to_vec()));
            }
            Op::MulScalar(c) => {
                let cv = T::of(c);
                out.push((node.inputs[0], g.iter().map(|&go| go * cv).collect()));
            }
            Op::PowScalar(p) => {
                let a = node.inputs[0];
                let pv = T::of(p);
                let contrib = g
                    .iter()
                    .zip(val(a))
                    .map(|(&go, &x)| go * pv * x.powf(pv - T::one()))
                    .collect();
                out.push((a, contrib));
            }
            Op::Ln => {
                let a = node.inputs[0];
                out.push((a, g.iter().zip(val(a)).map(|(&go, &x)| go / x).collect()));
            }
            Op::Exp => {
                let a = node.inputs[0];
                let y = node.value.data();
                out.push((a, g.iter().zip(y).map(|(&go, &e)| go * e).collect()));
            }
            Op::Act(kind) => {
                let a = node.inputs[0];
                let contrib = g
                    .iter()
                    .zip(val(a).iter().zip(node.value.data()))
                    .map(|(&go, (&x, &y))| go * activation_grad(x, y, kind))
                    .collect();
                out.push((a, contrib));
            }
            Op::Clamp { lo, hi } => {
                let a = node.inputs[0];
                let (l, h) = (T::of(lo), T::of(hi));
                let contrib = g
                    .iter()
                    .zip(val(a))
                    .map(|(&go, &x)| if x > l && x < h { go } else { T::zero() })
                    .collect();
                out.push((a, contrib));
            }
            Op::SumAll => {
                let a = node.inputs[0];
                out.push((a, vec![g[0]; self.nodes[a.0].value.len()]));
            }
            Op::MeanAll => {
                let a = node.inputs[0];
                let n = self.nodes[a.0].value.len();
                let s = g[0] / T::of(n as f64);
                out.push((a, vec![s; n]));
            }
            Op::Index(idx) => {
                let a = node.inputs[0];
                let mut contrib = vec![T::zero(); self.nodes[a.0].value.len()];
                contrib[idx] = g[0];
                out.push((a, contrib));
            }
            Op::PixelVector { y, x } => {
                let a = node.inputs[0];
                let dims = self.nodes[a.0].value.dims();
                let (c, h, w) = (dims[1], dims[2], dims[3]);
                let mut contrib = vec![T::zero(); self.nodes[a.0].value.len()];
                for ch in 0..c {
                    contrib[(ch * h + y) * w + x] = g[ch];
                }
                out.push((a, contrib));
            }
            Op::Stack => {
                for (k, &inp) in node.inputs.iter().enumerate() {
                    if needs(inp) {
                        out.push((inp, vec![g[k]]));
                    }
                }
            }
            Op::Reshape => {
                out.push((node.inputs[0], g.to_vec()));
            }
            Op::Conv2d { stride, padding } => {
                let (input, weight, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let idims = self.nodes[input.0].value.dims();
                let wdims = self.nodes[weight.0].value.dims();
                let (n, cin, h, w) = (idims[0], idims[1], idims[2], idims[3]);
                let (cout, kh, kw) = (wdims[0], wdims[2], wdims[3]);
                let mut gi = vec![T::zero(); self.nodes[input.0].value.len()];
                let mut gw = vec![T::zero(); self.nodes[weight.0].value.len()];
                let mut gb = vec![T::zero(); cout];
                kernels::conv2d_backward(
                    val(input),
                    val(weight),
                    g,
                    &mut gi,
                    &mut gw,
                    &mut gb,
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    stride,
                    padding,
                );
                if needs(input) {
                    out.push((input, gi));
                }
                if needs(weight) {
                    out.push((weight, gw));
                }
                if needs(bias) {
                    out.push((bias, gb));
                }
            }
            Op::Upsample2x => {
                let a = node.inputs[0];
                let dims = self.nodes[a.0].value.dims();
                let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                let mut gi = vec![T::zero(); self.nodes[a.0].value.len()];
                kernels::upsample2x_backward(g, &mut gi, n, c, h, w);
                out.push((a, gi));
            }
            Op::AffineGrid { oh, ow } => {
                let a = node.inputs[0];
                let n = self.nodes[a.0].value.dims()[0];
                let mut gt = vec![T::zero(); self.nodes[a.0].value.len()];
                kernels::affine_grid_backward(g, &mut gt, n, oh, ow);
                out.push((a, gt));
            }
            Op::GridSample => {
                let (input, grid) = (node.inputs[0], node.inputs[1]);
                let idims = self.nodes[input.0].value.dims();
                let gdims = self.nodes[grid.0].value.dims();
                let (n, c, h, w) = (idims[0], idims[1], idims[2], idims[3]);
                let (gh, gw) = (gdims[1], gdims[2]);
                let mut gi = vec![T::zero(); self.nodes[input.0].value.len()];
                let mut gg = vec![T::zero(); self.nodes[grid.0].value.len()];
                kernels::grid_sample_backward(
                    val(input),
                    val(grid),
                    g,
                    &mut gi,
                    &mut gg,
                    n,
                    c,
                    h,
                    w,
                    gh,
                    gw,
                );
                if needs(input) {
                    out.push((input, gi));
                }
                if needs(grid) {
                    out.push((grid, gg));
                }
            }
            Op::ScaleGrad(f) => {
                let fv = T::of(f);
                out.push((node.inputs[0], g.iter().map(|&go| go * fv).collect()));
            }
        }
        out.retain(|(id, _)| self.nodes[id.0].requires_grad);
        out
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn apply_activation<T: Real>(x: T, kind: Activation) -> T {
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::Sigmoid => sigmoid(x),
        Activation::Softplus => softplus(x),
    }
}

fn activation_grad<T: Real>(x: T, y: T, kind: Activation) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        // y = sigmoid(x)
        Activation::Sigmoid => y * (T::one() - y),
        Activation::Softplus => sigmoid(x),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

// Overflow-stable ln(1 + e^x).
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &mut Tape<f64>, v: f64) -> NodeId {
        tape.leaf(Tensor::scalar_tensor(v), true)
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 3.0);
        let y = tape.mul(x, x);
        tape.backward(y);
        assert_eq!(tape.value(y).scalar(), 9.0);
        assert_eq!(tape.grad(x).unwrap().scalar(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 1.0);
        let y = tape.add(x, x);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap().scalar(), 2.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 3.0);
        let y = tape.mul(x, x);
        tape.backward(y);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap().scalar(), 12.0);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 2]), true);
        tape.backward(x);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sigmoid(x);
        assert!((tape.value(s).data()[1] - 0.5).abs() < 1e-15);
        let sp = tape.softplus(x);
        assert!((tape.value(sp).data()[1] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn scale_gradient_identity_forward_scaled_backward() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 7.0);
        let y = tape.scale_gradient(x, 0.1);
        let z = tape.mul_scalar(y, 2.0);
        tape.backward(z);
        assert_eq!(tape.value(y).scalar(), 7.0);
        assert!((tape.grad(x).unwrap().scalar() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn scale_gradient_factor_one_is_noop() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 2.0);
        let y = tape.scale_gradient(x, 1.0);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap().scalar(), 1.0);
    }

    #[test]
    fn conv_identity_kernel_on_tape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.25),
            true,
        );
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn pixel_vector_gathers_and_scatters() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64), true);
        let v = tape.pixel_vector(x, 1, 2);
        assert_eq!(tape.value(v).data(), &[5.0, 14.0]);
        let s = tape.sum_all(v);
        tape.backward(s);
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data()[5], 1.0);
        assert_eq!(g.data()[14], 1.0);
        assert_eq!(g.sum(), 2.0);
    }

    #[test]
    fn stack_routes_gradients() {
        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 1.0);
        let b = scalar_leaf(&mut tape, 2.0);
        let v = tape.stack(&[a, b]);
        let w = tape.constant(Tensor::new(vec![2], vec![3.0, 5.0]));
        let p = tape.mul(v, w);
        let s = tape.sum_all(p);
        tape.backward(s);
        assert_eq!(tape.grad(a).unwrap().scalar(), 3.0);
        assert_eq!(tape.grad(b).unwrap().scalar(), 5.0);
    }

    #[test]
    fn grid_sample_identity_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 5, 7], |i| (i as f64).sin()));
        let theta = tape.constant(Tensor::new(
            vec![1, 2, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        ));
        let grid = tape.affine_grid(theta, 5, 7);
        let y = tape.grid_sample(x, grid);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
