//! Operation tape and adjoint replay.

use super::kernels::{self, ConvGeom};
use super::{check_shape, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
///
/// Handles carry the generation of the graph they were created in, so a
/// handle that outlives [`Graph::clear`] is rejected instead of aliasing a
/// newer node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    generation: u32,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var, channels: usize, plane: usize },
    Upsample2x { x: Var, planes: usize, h: usize, w: usize },
    LeakyRelu(Var, F),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    InstanceNorm { x: Var, plane: usize, inv_stds: Vec<F> },
    Concat { parts: Vec<Var>, outer: usize },
    MeanPool { x: Var, planes: usize, h: usize, w: usize, k: usize },
    Reshape(Var),
    BroadcastSpatial { x: Var, plane: usize },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Upsample2x { .. } => "upsample2x",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Concat { .. } => "concat",
            Op::MeanPool { .. } => "mean_pool",
            Op::Reshape(..) => "reshape",
            Op::BroadcastSpatial { .. } => "broadcast_spatial",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Records primitive operations in execution order.
///
/// Gradients are retained for leaves only; intermediate adjoints are
/// released as soon as they have been propagated.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    generation: u32,
    backward_done: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Instance normalization stabilizer.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and invalidates all outstanding handles.
    pub fn clear(&mut self) {
        self.nodes = Vec::new();
        self.generation = self.generation.wrapping_add(1);
        self.backward_done = false;
    }

    fn node(&self, v: Var) -> Result<&Node<F>, TensorError> {
        if v.generation != self.generation {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(v.idx).ok_or(TensorError::ForeignVar)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Result<Var, TensorError> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            idx: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// Records a copy of `t` as a leaf; gradients are tracked when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Result<Var, TensorError> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var, TensorError> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&[F], TensorError> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize], TensorError> {
        Ok(&self.node(v)?.shape)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> Result<F, TensorError> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<F>, TensorError> {
        let n = self.node(v)?;
        Tensor::from_vec(&n.shape, n.value.clone())
    }

    /// Gradient of the last backward pass with respect to a tracked leaf.
    pub fn grad(&self, v: Var) -> Result<Option<&[F]>, TensorError> {
        Ok(self.node(v)?.grad.as_deref())
    }

    /// Copies the gradient of leaf `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor<F>) -> Result<(), TensorError> {
        let n = self.node(v)?;
        if n.shape != t.shape {
            return Err(TensorError::ShapeMismatch {
                op: "write_grad",
                lhs: n.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        t.grad = n.grad.clone();
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.idx].requires_grad)
    }

    fn zip_map(&mut self, op: Op<F>, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Var, TensorError> {
        self.same_shape(op.name(), a, b)?;
        let (na, nb) = (&self.nodes[a.idx], &self.nodes[b.idx]);
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(shape, value, op, rg)
    }

    fn map(&mut self, op: Op<F>, a: Var, f: impl Fn(F) -> F) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let value = na.value.iter().map(|&x| f(x)).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad;
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var, TensorError> {
        self.map(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var, TensorError> {
        self.map(Op::AddScalar(a), a, |x| x + s)
    }

    /// Element-wise absolute value; the adjoint at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(Op::Abs(a), a, |x| x.abs())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Result<Var, TensorError> {
        self.map(Op::LeakyRelu(a, slope), a, |x| if x > F::zero() { x } else { x * slope })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(Op::Tanh(a), a, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(Op::Sigmoid(a), a, |x| F::one() / (F::one() + (-x).exp()))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(Op::Softplus(a), a, |x| x.max(F::zero()) + (-x.abs()).exp().ln_1p())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let s = na.value.iter().copied().sum::<F>();
        let rg = na.requires_grad;
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let s = na.value.iter().copied().sum::<F>() / F::from_usize(na.value.len()).unwrap();
        let rg = na.requires_grad;
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        check_shape(shape)?;
        let na = self.node(a)?;
        if shape.iter().product::<usize>() != na.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: na.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = na.value.clone();
        let rg = na.requires_grad;
        self.push(shape.to_vec(), value, Op::Reshape(a), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            false,
            false,
            m,
            k,
            n,
            F::one(),
            &self.nodes[a.idx].value,
            &self.nodes[b.idx].value,
            F::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Cross-correlation of an NCHW input with `[cout, cin, kh, kw]` weights,
    /// symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.node(x)?.shape.clone(), self.node(w)?.shape.clone());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (ph, pw) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if sw[2] > ph || sw[3] > pw {
            return Err(TensorError::KernelTooLarge {
                op: "conv2d",
                kernel: [sw[2], sw[3]],
                padded: [ph, pw],
            });
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            ho: (ph - sw[2]) / stride + 1,
            wo: (pw - sw[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(&self.nodes[x.idx].value, &self.nodes[w.idx].value, &geom);
        let rg = self.rg(&[x, w]);
        self.push(vec![geom.n, geom.cout, geom.ho, geom.wo], out, Op::Conv2d { x, w, geom }, rg)
    }

    /// Adds `b[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.node(x)?.shape.clone(), self.node(b)?.shape.clone());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let channels = sx[1];
        let plane: usize = sx[2..].iter().product();
        let bias = &self.nodes[b.idx].value;
        let mut out = self.nodes[x.idx].value.clone();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = bias[i % channels];
            chunk.iter_mut().for_each(|v| *v = *v + bc);
        }
        let rg = self.rg(&[x, b]);
        self.push(sx, out, Op::ChannelBias { x, b, channels, plane }, rg)
    }

    fn spatial_dims(&self, op: &'static str, x: Var) -> Result<(Vec<usize>, usize, usize, usize), TensorError> {
        let sx = self.node(x)?.shape.clone();
        if sx.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("expected an NCHW tensor, got shape {sx:?}"),
            });
        }
        let planes = sx[0] * sx[1];
        let (h, w) = (sx[2], sx[3]);
        Ok((sx, planes, h, w))
    }

    /// Nearest-neighbour upsampling by a factor of two in both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let (sx, planes, h, w) = self.spatial_dims("upsample2x", x)?;
        let out = kernels::upsample2x_forward(&self.nodes[x.idx].value, planes, h, w);
        let rg = self.rg(&[x]);
        self.push(vec![sx[0], sx[1], 2 * h, 2 * w], out, Op::Upsample2x { x, planes, h, w }, rg)
    }

    /// Non-overlapping `k x k` average pooling; `k` must divide both spatial extents.
    pub fn mean_pool(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let (sx, planes, h, w) = self.spatial_dims("mean_pool", x)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean_pool",
                msg: format!("window {k} does not tile spatial extent {h}x{w}"),
            });
        }
        let out = kernels::mean_pool_forward(&self.nodes[x.idx].value, planes, h, w, k);
        let rg = self.rg(&[x]);
        self.push(vec![sx[0], sx[1], h / k, w / k], out, Op::MeanPool { x, planes, h, w, k }, rg)
    }

    /// Normalizes each `(n, c)` plane to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.node(x)?.shape.clone();
        if sx.len() < 3 {
            return Err(TensorError::InvalidArgument {
                op: "instance_norm",
                msg: format!("expected at least one spatial axis, got shape {sx:?}"),
            });
        }
        let plane: usize = sx[2..].iter().product();
        let eps = F::from_f64_lossy(INSTANCE_NORM_EPS);
        let (y, inv_stds) = kernels::instance_norm_forward(&self.nodes[x.idx].value, plane, eps);
        let rg = self.rg(&[x]);
        self.push(sx, y, Op::InstanceNorm { x, plane, inv_stds }, rg)
    }

    /// Concatenates along axis 1. All other extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let s0 = self.node(*first)?.shape.clone();
        if s0.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("expected rank >= 2, got shape {s0:?}"),
            });
        }
        let mut channels = 0;
        for &p in parts {
            let sp = &self.node(p)?.shape;
            if sp.len() != s0.len() || sp[0] != s0[0] || sp[2..] != s0[2..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: sp.clone(),
                });
            }
            channels += sp[1];
        }
        let outer = s0[0];
        let total: usize = parts.iter().map(|p| self.nodes[p.idx].value.len()).sum();
        let mut out = Vec::with_capacity(total);
        for n in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.idx].value;
                let item = v.len() / outer;
                out.extend_from_slice(&v[n * item..(n + 1) * item]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let rg = self.rg(parts);
        self.push(shape, out, Op::Concat { parts: parts.to_vec(), outer }, rg)
    }

    /// `[n, c] -> [n, c, h, w]` by repeating each entry over the plane.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let sx = self.node(x)?.shape.clone();
        if sx.len() != 2 || h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "broadcast_spatial",
                msg: format!("expected [n, c] input and positive plane, got {sx:?} -> {h}x{w}"),
            });
        }
        let plane = h * w;
        let out = self.nodes[x.idx].value.iter().flat_map(|&v| std::iter::repeat_n(v, plane)).collect();
        let rg = self.rg(&[x]);
        self.push(vec![sx[0], sx[1], h, w], out, Op::BroadcastSpatial { x, plane }, rg)
    }

    /// Propagates adjoints from a scalar `loss` back to every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.node(loss)?.shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![F::one()]);

        for i in (0..=loss.idx).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            for (input, g) in self.adjoint(i, &gout) {
                if !self.nodes[input.idx].requires_grad {
                    continue;
                }
                match &mut grads[input.idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = Some(g.unwrap_or_else(|| vec![F::zero(); node.value.len()]));
            }
        }
        Ok(())
    }

    /// Adjoint rule of node `i`: pairs of (input, contribution).
    fn adjoint(&self, i: usize, gout: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.idx].value;
        let needs = |v: Var| self.nodes[v.idx].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let ga = gout.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                let gb = gout.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, gout.iter().map(|&g| g * *s).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, gout.to_vec())],
            Op::Abs(a) => {
                let g = gout
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| {
                        if x > F::zero() {
                            g
                        } else if x < F::zero() {
                            -g
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                vec![(*a, g)]
            }
            Op::Sum(a) => vec![(*a, vec![gout[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![gout[0] / F::from_usize(n).unwrap(); n])]
            }
            Op::MatMul { a, b, m, k, n } => {
                let mut out = Vec::new();
                if needs(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    F::gemm(false, true, *m, *n, *k, F::one(), gout, val(*b), F::zero(), &mut ga);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    F::gemm(true, false, *k, *m, *n, F::one(), val(*a), gout, F::zero(), &mut gb);
                    out.push((*b, gb));
                }
                out
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), gout, geom, needs(*x), needs(*w));
                dx.map(|g| (*x, g)).into_iter().chain(dw.map(|g| (*w, g))).collect()
            }
            Op::ChannelBias { x, b, channels, plane } => {
                let mut gb = vec![F::zero(); *channels];
                for (j, chunk) in gout.chunks(*plane).enumerate() {
                    gb[j % channels] = gb[j % channels] + chunk.iter().copied().sum::<F>();
                }
                vec![(*x, gout.to_vec()), (*b, gb)]
            }
            Op::Upsample2x { x, planes, h, w } => {
                vec![(*x, kernels::upsample2x_backward(gout, *planes, *h, *w))]
            }
            Op::MeanPool { x, planes, h, w, k } => {
                vec![(*x, kernels::mean_pool_backward(gout, *planes, *h, *w, *k))]
            }
            Op::LeakyRelu(a, slope) => {
                let g = gout.iter().zip(val(*a)).map(|(&g, &x)| if x > F::zero() { g } else { g * *slope }).collect();
                vec![(*a, g)]
            }
            Op::Tanh(a) => {
                let g = gout.iter().zip(&node.value).map(|(&g, &y)| g * (F::one() - y * y)).collect();
                vec![(*a, g)]
            }
            Op::Sigmoid(a) => {
                let g = gout.iter().zip(&node.value).map(|(&g, &y)| g * y * (F::one() - y)).collect();
                vec![(*a, g)]
            }
            Op::Softplus(a) => {
                let g = gout.iter().zip(val(*a)).map(|(&g, &x)| g / (F::one() + (-x).exp())).collect();
                vec![(*a, g)]
            }
            Op::InstanceNorm { x, plane, inv_stds } => {
                vec![(*x, kernels::instance_norm_backward(&node.value, inv_stds, gout, *plane))]
            }
            Op::Concat { parts, outer } => {
                let mut offsets = Vec::with_capacity(parts.len());
                let mut item_total = 0;
                for p in parts {
                    let item = val(*p).len() / outer;
                    offsets.push((item_total, item));
                    item_total += item;
                }
                parts
                    .iter()
                    .zip(offsets)
                    .map(|(p, (off, item))| {
                        let mut g = Vec::with_capacity(item * outer);
                        for n in 0..*outer {
                            let base = n * item_total + off;
                            g.extend_from_slice(&gout[base..base + item]);
                        }
                        (*p, g)
                    })
                    .collect()
            }
            Op::BroadcastSpatial { x, plane } => {
                let g = gout.chunks(*plane).map(|c| c.iter().copied().sum::<F>()).collect();
                vec![(*x, g)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn leaky_relu_forward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t64(&[2], &[-1.0, 2.0])).unwrap();
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).unwrap(), &[-0.2, 2.0]);
    }

    #[test]
    fn identity_matmul_and_pointwise_conv() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = g.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).unwrap(), &[1.0, 2.0, 3.0, 4.0]);

        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = g.leaf(&t64(&[1, 1, 3, 4], &data)).unwrap();
        let w = g.leaf(&t64(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).unwrap(), &data[..]);
    }

    #[test]
    fn square_and_sigmoid_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t64(&[1], &[3.0]).with_requires_grad(true)).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().unwrap(), &[6.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::scalar(0.0).with_requires_grad(true)).unwrap();
        let s = g.sigmoid(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().unwrap(), &[0.25]);
    }

    #[test]
    fn softplus_is_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t64(&[3], &[-800.0, 0.0, 800.0]).with_requires_grad(true)).unwrap();
        let y = g.softplus(x).unwrap();
        let v = g.value(y).unwrap().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v[2], 800.0);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t64(&[2], &[1.0, 2.0]).with_requires_grad(true)).unwrap();
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::BackwardTwice));
        g.clear();
        assert_eq!(g.value(x).unwrap_err(), TensorError::ForeignVar);
        assert!(g.is_empty());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");

        let x = g.constant(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let w = g.constant(&[1, 1, 5, 5], vec![0.0; 25]).unwrap();
        assert!(matches!(g.conv2d(x, w, 1, 1), Err(TensorError::KernelTooLarge { .. })));
        assert!(g.conv2d(x, w, 1, 2).is_ok());
    }

    #[test]
    fn non_finite_reports_operator() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1], vec![f64::MAX]).unwrap();
        let err = g.scale(x, 10.0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn concat_adjoint_splits_gradient_exactly() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::full(&[2, 1, 2, 2], 1.0).with_requires_grad(true)).unwrap();
        let b = g.leaf(&Tensor::full(&[2, 3, 2, 2], 2.0).with_requires_grad(true)).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c).unwrap(), &[2, 4, 2, 2]);
        let w: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let wv = g.constant(&[2, 4, 2, 2], w.clone()).unwrap();
        let p = g.mul(c, wv).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        let ga = g.grad(a).unwrap().unwrap();
        let gb = g.grad(b).unwrap().unwrap();
        assert_eq!(ga, &[0.0, 1.0, 2.0, 3.0, 16.0, 17.0, 18.0, 19.0]);
        assert_eq!(gb.len(), 24);
        let total: f64 = ga.iter().chain(gb).sum();
        assert_eq!(total, w.iter().sum::<f64>());
    }
}
