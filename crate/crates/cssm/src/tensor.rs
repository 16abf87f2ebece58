//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A `Tape` is rebuilt for every forward pass (define-by-run). Operations
//! append nodes holding the forward value plus enough context to replay the
//! backward rule; `Tape::backward` walks the nodes in reverse and accumulates
//! gradients into every reachable leaf that requires them.
//!
//! The operation vocabulary is deliberately small: elementwise ops with
//! per-channel vector broadcasting, matmul, 2-D (grouped) convolution, a
//! 2x2/stride-2 transpose convolution, layer norm over the channel axis,
//! layout remapping, concat/narrow, sum, and an escape hatch for custom ops
//! with hand-derived backward rules (the CSSM scan and the losses).

use crate::par::par_chunks_mut;
use crate::scalar::Scalar;
use std::sync::Arc;

/// Dense row-major tensor. The universal value type for parameters and data.
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); n])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Convert element type (f32 <-> f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// A learnable tensor with a stable id used to route gradients and name
/// entries in checkpoints.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub id: usize,
    pub value: Tensor<F>,
}

/// Hands out sequential parameter ids during model construction.
#[derive(Default)]
pub struct ParamAlloc {
    next: usize,
}

impl ParamAlloc {
    pub fn new() -> Self {
        ParamAlloc { next: 0 }
    }
    pub fn make<F: Scalar>(&mut self, t: Tensor<F>) -> Param<F> {
        let id = self.next;
        self.next += 1;
        Param {
            id,
            value: t.with_grad(),
        }
    }
    pub fn count(&self) -> usize {
        self.next
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Exp,
    Softplus,
    Silu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChanKind {
    AddVec,
    MulVec,
}

/// Geometry of a grouped 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dMeta {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Hand-written backward rule for a composite operation.
///
/// `inputs` are the forward values of the op's inputs in registration order;
/// the returned vector holds one gradient contribution per input (same
/// shapes), which the tape accumulates. Saved forward context lives inside
/// the implementing struct.
pub trait CustomOp<F: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[F], inputs: &[&[F]]) -> Vec<Vec<F>>;
}

enum Op<F: Scalar> {
    Leaf,
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    AddScalar {
        a: usize,
    },
    MulScalar {
        a: usize,
        c: F,
    },
    Chan {
        kind: ChanKind,
        a: usize,
        v: usize,
        chan: usize,
        inner: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        meta: Conv2dMeta,
    },
    /// Transpose conv, kernel 2, stride 2 (exact x2 upsampling).
    ConvT2 {
        x: usize,
        w: usize,
        cin: usize,
        cout: usize,
        h: usize,
        wd: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        chan: usize,
        inner: usize,
        /// (mean, rstd) per normalized position.
        ctx: Vec<(F, F)>,
    },
    Remap {
        a: usize,
        map: Arc<Vec<usize>>,
    },
    Concat {
        a: usize,
        b: usize,
        asize: usize,
    },
    Narrow {
        a: usize,
        start: usize,
    },
    Sum {
        a: usize,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    needs_grad: bool,
    op: Op<F>,
}

/// Define-by-run autodiff tape.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Vec<F>>,
    /// (param id, var) bindings recorded by `param`.
    bindings: Vec<(usize, Var)>,
    first_nonfinite: Option<String>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first op that produced a NaN/Inf value, if any.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.first_nonfinite.as_deref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` call w.r.t. `v`. Empty if unreachable.
    pub fn grad(&self, v: Var) -> &[F] {
        &self.grads[v.0]
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[F])> {
        self.bindings
            .iter()
            .map(move |&(id, v)| (id, self.grad(v)))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, needs_grad: bool, op: Op<F>) -> Var {
        if self.first_nonfinite.is_none() {
            if let Some(_bad) = data.iter().find(|x| !x.is_finite()) {
                self.first_nonfinite = Some(op_name(&op).to_string());
            }
        }
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Var {
        self.push(shape, data, false, Op::Leaf)
    }

    /// Bind a parameter: leafs its value and records the id so gradients can
    /// be collected after backward. Binding the same param twice reuses the
    /// first node, which is how weight sharing works.
    pub fn param(&mut self, p: &Param<F>) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|&&(id, _)| id == p.id) {
            return v;
        }
        let v = self.leaf(&p.value);
        self.bindings.push((p.id, v));
        v
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| unary_fwd(kind, x))
            .collect();
        let ng = self.ng(a);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            ng,
            Op::Unary { kind, a: a.0 },
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Silu, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "elementwise {:?}: shape mismatch",
            kind
        );
        let (xa, xb) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let data = xa
            .iter()
            .zip(xb.iter())
            .map(|(&x, &y)| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            ng,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let ng = self.ng(a);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            ng,
            Op::AddScalar { a: a.0 },
        )
    }

    pub fn mul_scalar(&mut self, a: Var, c: F) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            ng,
            Op::MulScalar { a: a.0, c },
        )
    }

    /// Broadcast a `[chan]` vector over `a` laid out as `[outer, chan, inner]`.
    pub fn chan_op(&mut self, kind: ChanKind, a: Var, v: Var, chan: usize, inner: usize) -> Var {
        let n = self.nodes[a.0].data.len();
        assert_eq!(
            self.nodes[v.0].data.len(),
            chan,
            "per-channel vector length mismatch"
        );
        assert_eq!(n % (chan * inner), 0, "bad channel decomposition");
        let (xa, xv) = (&self.nodes[a.0].data, &self.nodes[v.0].data);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i / inner) % chan;
            data.push(match kind {
                ChanKind::AddVec => xa[i] + xv[c],
                ChanKind::MulVec => xa[i] * xv[c],
            });
        }
        let ng = self.ng(a) || self.ng(v);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            ng,
            Op::Chan {
                kind,
                a: a.0,
                v: v.0,
                chan,
                inner,
            },
        )
    }

    pub fn add_chan(&mut self, a: Var, v: Var, chan: usize, inner: usize) -> Var {
        self.chan_op(ChanKind::AddVec, a, v, chan, inner)
    }
    pub fn mul_chan(&mut self, a: Var, v: Var, chan: usize, inner: usize) -> Var {
        self.chan_op(ChanKind::MulVec, a, v, chan, inner)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        assert_eq!(sa.len(), 2, "matmul lhs must be rank 2");
        assert_eq!(sb.len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            vec![m, n],
            data,
            ng,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        )
    }

    /// Grouped 2-D cross-correlation, zero padding.
    /// `x: [cin,h,w]`, `w: [cout, cin/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        assert_eq!(sx.len(), 3, "conv2d input must be [c,h,w]");
        assert_eq!(sw.len(), 4, "conv2d weight must be [cout,cin/g,k,k]");
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, cin_g, k, k2) = (sw[0], sw[1], sw[2], sw[3]);
        assert_eq!(k, k2, "conv2d kernel must be square");
        assert!(k % 2 == 1, "conv2d kernel size must be odd");
        assert!(
            cin % groups == 0 && cout % groups == 0,
            "groups must divide channels"
        );
        assert_eq!(cin / groups, cin_g, "weight cin/groups mismatch");
        assert!(
            (h + 2 * pad).checked_sub(k).map_or(false, |v| v % stride == 0),
            "non-integral output height"
        );
        assert!(
            (wd + 2 * pad).checked_sub(k).map_or(false, |v| v % stride == 0),
            "non-integral output width"
        );
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let meta = Conv2dMeta {
            cin,
            cout,
            h,
            w: wd,
            k,
            stride,
            pad,
            groups,
            oh,
            ow,
        };
        let data = conv2d_fwd(&self.nodes[x.0].data, &self.nodes[w.0].data, &meta);
        let ng = self.ng(x) || self.ng(w);
        self.push(
            vec![cout, oh, ow],
            data,
            ng,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                meta,
            },
        )
    }

    /// Transpose convolution with a 2x2 kernel and stride 2: exact x2
    /// upsampling. `x: [cin,h,w]`, `w: [cin,cout,2,2]` -> `[cout,2h,2w]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        assert_eq!(sx.len(), 3);
        assert_eq!(sw.len(), 4);
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        assert_eq!(sw[0], cin, "conv_transpose2 weight cin mismatch");
        assert_eq!((sw[2], sw[3]), (2, 2), "conv_transpose2 kernel must be 2x2");
        let cout = sw[1];
        let data = convt2_fwd(&self.nodes[x.0].data, &self.nodes[w.0].data, cin, cout, h, wd);
        let ng = self.ng(x) || self.ng(w);
        self.push(
            vec![cout, 2 * h, 2 * wd],
            data,
            ng,
            Op::ConvT2 {
                x: x.0,
                w: w.0,
                cin,
                cout,
                h,
                wd,
            },
        )
    }

    /// Layer norm over the channel axis of `x` laid out `[outer, chan, inner]`,
    /// followed by per-channel gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, chan: usize, inner: usize, eps: F) -> Var {
        assert!(eps > F::zero(), "layernorm eps must be positive");
        assert_eq!(self.nodes[gain.0].data.len(), chan, "gain length != C");
        assert_eq!(self.nodes[bias.0].data.len(), chan, "bias length != C");
        let n = self.nodes[x.0].data.len();
        assert_eq!(n % (chan * inner), 0);
        let outer = n / (chan * inner);
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![F::zero(); n];
        let mut ctx = Vec::with_capacity(outer * inner);
        let cn = F::from_f64(chan as f64);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * chan + c) * inner + i;
                let mut mean = F::zero();
                for c in 0..chan {
                    mean = mean + xd[idx(c)];
                }
                mean = mean / cn;
                let mut var = F::zero();
                for c in 0..chan {
                    let d = xd[idx(c)] - mean;
                    var = var + d * d;
                }
                var = var / cn;
                let rstd = F::one() / (var + eps).sqrt();
                for c in 0..chan {
                    data[idx(c)] = (xd[idx(c)] - mean) * rstd * g[c] + b[c];
                }
                ctx.push((mean, rstd));
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            ng,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                chan,
                inner,
                ctx,
            },
        )
    }

    /// Pure layout transform: `out[i] = a[map[i]]`. `map` must be a
    /// permutation of `0..a.len()` for shapes to stay consistent.
    pub fn remap(&mut self, a: Var, new_shape: Vec<usize>, map: Arc<Vec<usize>>) -> Var {
        assert_eq!(map.len(), new_shape.iter().product::<usize>());
        let xa = &self.nodes[a.0].data;
        let data = map.iter().map(|&j| xa[j]).collect();
        let ng = self.ng(a);
        self.push(new_shape, data, ng, Op::Remap { a: a.0, map })
    }

    /// Concatenate along the first axis (contiguous layouts).
    pub fn concat0(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert_eq!(sa[1..], sb[1..], "concat0: trailing dims must match");
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let asize = self.nodes[a.0].data.len();
        let ng = self.ng(a) || self.ng(b);
        self.push(
            shape,
            data,
            ng,
            Op::Concat {
                a: a.0,
                b: b.0,
                asize,
            },
        )
    }

    /// Slice `len0` entries of the first axis starting at `start0`.
    pub fn narrow0(&mut self, a: Var, start0: usize, len0: usize) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let inner: usize = sa[1..].iter().product();
        assert!(start0 + len0 <= sa[0], "narrow0 out of range");
        let mut shape = sa.clone();
        shape[0] = len0;
        let data = self.nodes[a.0].data[start0 * inner..(start0 + len0) * inner].to_vec();
        let ng = self.ng(a);
        self.push(
            shape,
            data,
            ng,
            Op::Narrow {
                a: a.0,
                start: start0 * inner,
            },
        )
    }

    /// Sum of all elements -> `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].data.iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], ng, Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s = self.sum(a);
        self.mul_scalar(s, F::from_f64(1.0 / n as f64))
    }

    /// Record a custom op with precomputed output.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        out_shape: Vec<usize>,
        out_data: Vec<F>,
        op: Box<dyn CustomOp<F>>,
    ) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            out_shape,
            out_data,
            ng,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                op,
            },
        )
    }

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// reachable node whose subgraph contains a requires-grad leaf.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward requires a scalar loss"
        );
        self.grads = self.nodes.iter().map(|_| Vec::new()).collect();
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.grads[loss.0] = vec![F::one()];
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() {
                continue;
            }
            // Final gradient for node i is ready (reverse topological order).
            // Leaves keep theirs; interior nodes propagate and may keep a copy
            // (needed for saliency read-out at intermediate activations).
            let gout = self.grads[i].clone();
            self.dispatch_backward(i, &gout);
        }
    }

    fn acc(&mut self, node: usize, contrib: &[F]) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let g = &mut self.grads[node];
        if g.is_empty() {
            *g = contrib.to_vec();
        } else {
            for (gi, &c) in g.iter_mut().zip(contrib) {
                *gi = *gi + c;
            }
        }
    }

    fn dispatch_backward(&mut self, i: usize, gout: &[F]) {
        // Ownership dance: clone small contexts out of the op so we can call
        // &mut self accumulation helpers.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                let (kind, a) = (*kind, *a);
                let xa = &self.nodes[a].data;
                let contrib: Vec<F> = xa
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| unary_bwd(kind, x) * g)
                    .collect();
                self.acc(a, &contrib);
            }
            Op::Binary { kind, a, b } => {
                let (kind, a, b) = (*kind, *a, *b);
                match kind {
                    BinKind::Add => {
                        self.acc(a, gout);
                        self.acc(b, gout);
                    }
                    BinKind::Sub => {
                        self.acc(a, gout);
                        let neg: Vec<F> = gout.iter().map(|&g| -g).collect();
                        self.acc(b, &neg);
                    }
                    BinKind::Mul => {
                        let da: Vec<F> = self.nodes[b].data.iter().zip(gout).map(|(&y, &g)| y * g).collect();
                        let db: Vec<F> = self.nodes[a].data.iter().zip(gout).map(|(&x, &g)| x * g).collect();
                        self.acc(a, &da);
                        self.acc(b, &db);
                    }
                    BinKind::Div => {
                        let xb = &self.nodes[b].data;
                        let xa = &self.nodes[a].data;
                        let da: Vec<F> = xb.iter().zip(gout).map(|(&y, &g)| g / y).collect();
                        let db: Vec<F> = xa
                            .iter()
                            .zip(xb.iter())
                            .zip(gout)
                            .map(|((&x, &y), &g)| -g * x / (y * y))
                            .collect();
                        self.acc(a, &da);
                        self.acc(b, &db);
                    }
                }
            }
            Op::AddScalar { a } => {
                let a = *a;
                self.acc(a, gout);
            }
            Op::MulScalar { a, c } => {
                let (a, c) = (*a, *c);
                let contrib: Vec<F> = gout.iter().map(|&g| g * c).collect();
                self.acc(a, &contrib);
            }
            Op::Chan {
                kind,
                a,
                v,
                chan,
                inner,
            } => {
                let (kind, a, v, chan, inner) = (*kind, *a, *v, *chan, *inner);
                match kind {
                    ChanKind::AddVec => {
                        let mut dv = vec![F::zero(); chan];
                        for (idx, &g) in gout.iter().enumerate() {
                            dv[(idx / inner) % chan] = dv[(idx / inner) % chan] + g;
                        }
                        self.acc(a, gout);
                        self.acc(v, &dv);
                    }
                    ChanKind::MulVec => {
                        let xa = &self.nodes[a].data;
                        let xv = &self.nodes[v].data;
                        let mut dv = vec![F::zero(); chan];
                        let mut da = vec![F::zero(); gout.len()];
                        for (idx, &g) in gout.iter().enumerate() {
                            let c = (idx / inner) % chan;
                            dv[c] = dv[c] + xa[idx] * g;
                            da[idx] = xv[c] * g;
                        }
                        self.acc(a, &da);
                        self.acc(v, &dv);
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                // dA = G B^T, dB = A^T G
                let xb = &self.nodes[b].data;
                let xa = &self.nodes[a].data;
                let mut da = vec![F::zero(); m * k];
                for i2 in 0..m {
                    for j in 0..k {
                        let mut s = F::zero();
                        for l in 0..n {
                            s = s + gout[i2 * n + l] * xb[j * n + l];
                        }
                        da[i2 * k + j] = s;
                    }
                }
                let mut db = vec![F::zero(); k * n];
                for j in 0..k {
                    for l in 0..n {
                        let mut s = F::zero();
                        for i2 in 0..m {
                            s = s + xa[i2 * k + j] * gout[i2 * n + l];
                        }
                        db[j * n + l] = s;
                    }
                }
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::Conv2d { x, w, meta } => {
                let (x, w, meta) = (*x, *w, *meta);
                let dx = conv2d_bwd_x(gout, &self.nodes[w].data, &meta);
                let dw = conv2d_bwd_w(gout, &self.nodes[x].data, &meta);
                self.acc(x, &dx);
                self.acc(w, &dw);
            }
            Op::ConvT2 {
                x,
                w,
                cin,
                cout,
                h,
                wd,
            } => {
                let (x, w, cin, cout, h, wd) = (*x, *w, *cin, *cout, *h, *wd);
                let (dx, dw) = convt2_bwd(
                    gout,
                    &self.nodes[x].data,
                    &self.nodes[w].data,
                    cin,
                    cout,
                    h,
                    wd,
                );
                self.acc(x, &dx);
                self.acc(w, &dw);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                chan,
                inner,
                ctx,
            } => {
                let (x, gain, bias, chan, inner) = (*x, *gain, *bias, *chan, *inner);
                let ctx = ctx.clone();
                let xd = &self.nodes[x].data;
                let g = &self.nodes[gain].data;
                let n = xd.len();
                let outer = n / (chan * inner);
                let cn = F::from_f64(chan as f64);
                let mut dx = vec![F::zero(); n];
                let mut dgain = vec![F::zero(); chan];
                let mut dbias = vec![F::zero(); chan];
                for o in 0..outer {
                    for ii in 0..inner {
                        let (mean, rstd) = ctx[o * inner + ii];
                        let idx = |c: usize| (o * chan + c) * inner + ii;
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for c in 0..chan {
                            let xhat = (xd[idx(c)] - mean) * rstd;
                            let dg = gout[idx(c)] * g[c];
                            s1 = s1 + dg;
                            s2 = s2 + dg * xhat;
                            dgain[c] = dgain[c] + gout[idx(c)] * xhat;
                            dbias[c] = dbias[c] + gout[idx(c)];
                        }
                        s1 = s1 / cn;
                        s2 = s2 / cn;
                        for c in 0..chan {
                            let xhat = (xd[idx(c)] - mean) * rstd;
                            let dg = gout[idx(c)] * g[c];
                            dx[idx(c)] = (dg - s1 - xhat * s2) * rstd;
                        }
                    }
                }
                self.acc(x, &dx);
                self.acc(gain, &dgain);
                self.acc(bias, &dbias);
            }
            Op::Remap { a, map } => {
                let a = *a;
                let map = Arc::clone(map);
                let mut da = vec![F::zero(); self.nodes[a].data.len()];
                for (i2, &j) in map.iter().enumerate() {
                    da[j] = da[j] + gout[i2];
                }
                self.acc(a, &da);
            }
            Op::Concat { a, b, asize } => {
                let (a, b, asize) = (*a, *b, *asize);
                self.acc(a, &gout[..asize]);
                self.acc(b, &gout[asize..]);
            }
            Op::Narrow { a, start } => {
                let (a, start) = (*a, *start);
                let mut da = vec![F::zero(); self.nodes[a].data.len()];
                da[start..start + gout.len()].copy_from_slice(gout);
                self.acc(a, &da);
            }
            Op::Sum { a } => {
                let a = *a;
                let g = gout[0];
                let contrib = vec![g; self.nodes[a].data.len()];
                self.acc(a, &contrib);
            }
            Op::Custom { inputs, op } => {
                let inputs = inputs.clone();
                // Gather input data without aliasing the grads we mutate.
                let in_data: Vec<&[F]> = inputs.iter().map(|&j| self.nodes[j].data.as_slice()).collect();
                let contribs = op.backward(gout, &in_data);
                assert_eq!(contribs.len(), inputs.len());
                for (j, contrib) in inputs.iter().zip(contribs.iter()) {
                    self.acc(*j, contrib);
                }
            }
        }
    }
}

fn op_name<F: Scalar>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Unary { kind, .. } => match kind {
            UnaryKind::Neg => "neg",
            UnaryKind::Abs => "abs",
            UnaryKind::Exp => "exp",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Silu => "silu",
            UnaryKind::Relu => "relu",
        },
        Op::Binary { kind, .. } => match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        },
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Chan { .. } => "chan_broadcast",
        Op::MatMul { .. } => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvT2 { .. } => "conv_transpose2",
        Op::LayerNorm { .. } => "layernorm",
        Op::Remap { .. } => "remap",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::Sum { .. } => "sum",
        Op::Custom { op, .. } => op.name(),
    }
}

fn unary_fwd<F: Scalar>(kind: UnaryKind, x: F) -> F {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Softplus => x.softplus(),
        UnaryKind::Silu => x * x.sigmoid(),
        UnaryKind::Relu => {
            if x > F::zero() {
                x
            } else {
                F::zero()
            }
        }
    }
}

fn unary_bwd<F: Scalar>(kind: UnaryKind, x: F) -> F {
    match kind {
        UnaryKind::Neg => -F::one(),
        // Subgradient 0 at x == 0.
        UnaryKind::Abs => {
            if x > F::zero() {
                F::one()
            } else if x < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        }
        UnaryKind::Exp => x.exp(),
        UnaryKind::Softplus => x.sigmoid(),
        UnaryKind::Silu => {
            let s = x.sigmoid();
            s * (F::one() + x * (F::one() - s))
        }
        UnaryKind::Relu => {
            if x > F::zero() {
                F::one()
            } else {
                F::zero()
            }
        }
    }
}

pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    par_chunks_mut(&mut out, n.max(1), |i, row| {
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// Valid output-column range `[ox0, ox1)` for kernel column `kx` at stride 1,
/// plus the first input column it touches.
fn row_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize, usize) {
    let ox0 = pad.saturating_sub(kx);
    let ox1 = ow.min((w + pad).saturating_sub(kx));
    // ox0 + kx >= pad by construction
    (ox0, ox1, ox0 + kx - pad)
}

fn conv2d_fwd<F: Scalar>(x: &[F], w: &[F], m: &Conv2dMeta) -> Vec<F> {
    if m.stride == 1 {
        return conv2d_fwd_s1(x, w, m);
    }
    conv2d_fwd_generic(x, w, m)
}

/// Stride-1 fast path: per-row axpy over contiguous slices.
fn conv2d_fwd_s1<F: Scalar>(x: &[F], w: &[F], m: &Conv2dMeta) -> Vec<F> {
    let cin_g = m.cin / m.groups;
    let cout_g = m.cout / m.groups;
    let mut out = vec![F::zero(); m.cout * m.oh * m.ow];
    par_chunks_mut(&mut out, m.oh * m.ow, |co, plane| {
        let g = co / cout_g;
        for ci in 0..cin_g {
            let xc = g * cin_g + ci;
            let xplane = &x[xc * m.h * m.w..(xc + 1) * m.h * m.w];
            for ky in 0..m.k {
                for kx in 0..m.k {
                    let wv = w[((co * cin_g + ci) * m.k + ky) * m.k + kx];
                    let (ox0, ox1, ix0) = row_span(kx, m.pad, m.w, m.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let len = ox1 - ox0;
                    for oy in 0..m.oh {
                        let iy = (oy + ky) as isize - m.pad as isize;
                        if iy < 0 || iy >= m.h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * m.w + ix0..][..len];
                        let orow = &mut plane[oy * m.ow + ox0..][..len];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o = *o + wv * xv;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv2d_fwd_generic<F: Scalar>(x: &[F], w: &[F], m: &Conv2dMeta) -> Vec<F> {
    let cin_g = m.cin / m.groups;
    let cout_g = m.cout / m.groups;
    let mut out = vec![F::zero(); m.cout * m.oh * m.ow];
    par_chunks_mut(&mut out, m.oh * m.ow, |co, plane| {
        let g = co / cout_g;
        for oy in 0..m.oh {
            for ox in 0..m.ow {
                let mut s = F::zero();
                for ci in 0..cin_g {
                    let xc = g * cin_g + ci;
                    for ky in 0..m.k {
                        let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                        if iy < 0 || iy >= m.h as isize {
                            continue;
                        }
                        for kx in 0..m.k {
                            let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                            if ix < 0 || ix >= m.w as isize {
                                continue;
                            }
                            s = s + x[(xc * m.h + iy as usize) * m.w + ix as usize]
                                * w[((co * cin_g + ci) * m.k + ky) * m.k + kx];
                        }
                    }
                }
                plane[oy * m.ow + ox] = s;
            }
        }
    });
    out
}

fn conv2d_bwd_x<F: Scalar>(gout: &[F], w: &[F], m: &Conv2dMeta) -> Vec<F> {
    if m.stride == 1 {
        return conv2d_bwd_x_s1(gout, w, m);
    }
    conv2d_bwd_x_generic(gout, w, m)
}

fn conv2d_bwd_x_s1<F: Scalar>(gout: &[F], w: &[F], m: &Conv2dMeta) -> Vec<F> {
    let cin_g = m.cin / m.groups;
    let cout_g = m.cout / m.groups;
    let mut dx = vec![F::zero(); m.cin * m.h * m.w];
    par_chunks_mut(&mut dx, m.h * m.w, |xc, plane| {
        let g = xc / cin_g;
        let ci = xc % cin_g;
        for co_l in 0..cout_g {
            let co = g * cout_g + co_l;
            let gplane = &gout[co * m.oh * m.ow..(co + 1) * m.oh * m.ow];
            for ky in 0..m.k {
                for kx in 0..m.k {
                    let wv = w[((co * cin_g + ci) * m.k + ky) * m.k + kx];
                    let (ox0, ox1, ix0) = row_span(kx, m.pad, m.w, m.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let len = ox1 - ox0;
                    for oy in 0..m.oh {
                        let iy = (oy + ky) as isize - m.pad as isize;
                        if iy < 0 || iy >= m.h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * m.ow + ox0..][..len];
                        let xrow = &mut plane[iy as usize * m.w + ix0..][..len];
                        for (o, &gv) in xrow.iter_mut().zip(grow) {
                            *o = *o + wv * gv;
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv2d_bwd_x_generic<F: Scalar>(gout: &[F], w: &[F], m: &Conv2dMeta) -> Vec<F> {
    let cin_g = m.cin / m.groups;
    let cout_g = m.cout / m.groups;
    let mut dx = vec![F::zero(); m.cin * m.h * m.w];
    par_chunks_mut(&mut dx, m.h * m.w, |xc, plane| {
        let g = xc / cin_g;
        let ci = xc % cin_g;
        for iy in 0..m.h {
            for ix in 0..m.w {
                let mut s = F::zero();
                for co_l in 0..cout_g {
                    let co = g * cout_g + co_l;
                    for ky in 0..m.k {
                        let oy_num = iy as isize + m.pad as isize - ky as isize;
                        if oy_num < 0 || oy_num % m.stride as isize != 0 {
                            continue;
                        }
                        let oy = (oy_num / m.stride as isize) as usize;
                        if oy >= m.oh {
                            continue;
                        }
                        for kx in 0..m.k {
                            let ox_num = ix as isize + m.pad as isize - kx as isize;
                            if ox_num < 0 || ox_num % m.stride as isize != 0 {
                                continue;
                            }
                            let ox = (ox_num / m.stride as isize) as usize;
                            if ox >= m.ow {
                                continue;
                            }
                            s = s + gout[(co * m.oh + oy) * m.ow + ox]
                                * w[((co * cin_g + ci) * m.k + ky) * m.k + kx];
                        }
                    }
                }
                plane[iy * m.w + ix] = s;
            }
        }
    });
    dx
}

fn conv2d_bwd_w<F: Scalar>(gout: &[F], x: &[F], m: &Conv2dMeta) -> Vec<F> {
    if m.stride == 1 {
        return conv2d_bwd_w_s1(gout, x, m);
    }
    conv2d_bwd_w_generic(gout, x, m)
}

fn conv2d_bwd_w_s1<F: Scalar>(gout: &[F], x: &[F], m: &Conv2dMeta) -> Vec<F> {
    let cin_g = m.cin / m.groups;
    let cout_g = m.cout / m.groups;
    let mut dw = vec![F::zero(); m.cout * cin_g * m.k * m.k];
    par_chunks_mut(&mut dw, cin_g * m.k * m.k, |co, wslab| {
        let g = co / cout_g;
        let gplane = &gout[co * m.oh * m.ow..(co + 1) * m.oh * m.ow];
        for ci in 0..cin_g {
            let xc = g * cin_g + ci;
            let xplane = &x[xc * m.h * m.w..(xc + 1) * m.h * m.w];
            for ky in 0..m.k {
                for kx in 0..m.k {
                    let (ox0, ox1, ix0) = row_span(kx, m.pad, m.w, m.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let len = ox1 - ox0;
                    let mut s = F::zero();
                    for oy in 0..m.oh {
                        let iy = (oy + ky) as isize - m.pad as isize;
                        if iy < 0 || iy >= m.h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * m.ow + ox0..][..len];
                        let xrow = &xplane[iy as usize * m.w + ix0..][..len];
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            s = s + gv * xv;
                        }
                    }
                    wslab[(ci * m.k + ky) * m.k + kx] = s;
                }
            }
        }
    });
    dw
}

fn conv2d_bwd_w_generic<F: Scalar>(gout: &[F], x: &[F], m: &Conv2dMeta) -> Vec<F> {
    let cin_g = m.cin / m.groups;
    let cout_g = m.cout / m.groups;
    let mut dw = vec![F::zero(); m.cout * cin_g * m.k * m.k];
    par_chunks_mut(&mut dw, cin_g * m.k * m.k, |co, wslab| {
        let g = co / cout_g;
        for ci in 0..cin_g {
            let xc = g * cin_g + ci;
            for ky in 0..m.k {
                for kx in 0..m.k {
                    let mut s = F::zero();
                    for oy in 0..m.oh {
                        let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                        if iy < 0 || iy >= m.h as isize {
                            continue;
                        }
                        for ox in 0..m.ow {
                            let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                            if ix < 0 || ix >= m.w as isize {
                                continue;
                            }
                            s = s + gout[(co * m.oh + oy) * m.ow + ox]
                                * x[(xc * m.h + iy as usize) * m.w + ix as usize];
                        }
                    }
                    wslab[(ci * m.k + ky) * m.k + kx] = s;
                }
            }
        }
    });
    dw
}

fn convt2_fwd<F: Scalar>(x: &[F], w: &[F], cin: usize, cout: usize, h: usize, wd: usize) -> Vec<F> {
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![F::zero(); cout * oh * ow];
    par_chunks_mut(&mut out, oh * ow, |co, plane| {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x[(ci * h + iy) * wd + ix];
                    for dy in 0..2 {
                        for dx2 in 0..2 {
                            plane[(2 * iy + dy) * ow + 2 * ix + dx2] = plane
                                [(2 * iy + dy) * ow + 2 * ix + dx2]
                                + xv * w[((ci * cout + co) * 2 + dy) * 2 + dx2];
                        }
                    }
                }
            }
        }
    });
    out
}

fn convt2_bwd<F: Scalar>(
    gout: &[F],
    x: &[F],
    w: &[F],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> (Vec<F>, Vec<F>) {
    let ow = 2 * wd;
    let mut dx = vec![F::zero(); cin * h * wd];
    par_chunks_mut(&mut dx, h * wd, |ci, plane| {
        for iy in 0..h {
            for ix in 0..wd {
                let mut s = F::zero();
                for co in 0..cout {
                    for dy in 0..2 {
                        for dx2 in 0..2 {
                            s = s + gout[(co * 2 * h + 2 * iy + dy) * ow + 2 * ix + dx2]
                                * w[((ci * cout + co) * 2 + dy) * 2 + dx2];
                        }
                    }
                }
                plane[iy * wd + ix] = s;
            }
        }
    });
    let mut dw = vec![F::zero(); cin * cout * 4];
    par_chunks_mut(&mut dw, cout * 4, |ci, wslab| {
        for co in 0..cout {
            for dy in 0..2 {
                for dx2 in 0..2 {
                    let mut s = F::zero();
                    for iy in 0..h {
                        for ix in 0..wd {
                            s = s + x[(ci * h + iy) * wd + ix]
                                * gout[(co * 2 * h + 2 * iy + dy) * ow + 2 * ix + dx2];
                        }
                    }
                    wslab[(co * 2 + dy) * 2 + dx2] = s;
                }
            }
        }
    });
    (dx, dw)
}
