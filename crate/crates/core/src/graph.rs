//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves are either
//! constants or trainable parameters; gradients are only propagated along
//! paths that reach a trainable leaf, so frozen networks still pass
//! gradients through to their inputs without accumulating their own.

use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Layout, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Tanh(Var),
    Upsample2(Var),
    AvgPool2(Var),
    Reshape(Var),
    MeanAbsDiff(Var, Var),
    MeanSqToTarget(Var, T),
    SumSquares(Var, T),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Re-enters a value as a constant, cutting its gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        assert_eq!(ws[2], ws[3], "conv2d kernels must be square");
        let geom = ConvGeom {
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        assert!(
            xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[2],
            "conv2d input {xs:?} smaller than kernel"
        );
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs[0],
            &geom,
            self.value(w).data(),
            bias.as_deref(),
        );
        let shape = [xs[0], geom.out_channels, geom.out_height(), geom.out_width()];
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&shape, out), Op::Conv2d { x, w, b, geom }, needs)
    }

    /// `x [N, I] * w[O, I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, I]");
        assert_eq!(xs[1], ws[1], "linear width mismatch: {xs:?} vs {ws:?}");
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            Layout::Normal,
            self.value(w).data(),
            Layout::Transposed,
            T::one(),
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&[n, o], out), Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let needs = self.needs(a);
        self.push(out, Op::LeakyRelu(a, slope), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let needs = self.needs(a);
        self.push(out, Op::Tanh(a), needs)
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let out = kernels::upsample2(self.value(a).data(), s[0] * s[1], s[2], s[3]);
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(&[s[0], s[1], 2 * s[2], 2 * s[3]], out),
            Op::Upsample2(a),
            needs,
        )
    }

    pub fn avgpool2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s[2] % 2 == 0 && s[3] % 2 == 0, "avgpool2 needs even sizes, got {s:?}");
        let out = kernels::avgpool2(self.value(a).data(), s[0] * s[1], s[2], s[3]);
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(&[s[0], s[1], s[2] / 2, s[3] / 2], out),
            Op::AvgPool2(a),
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let needs = self.needs(a);
        self.push(out, Op::Reshape(a), needs)
    }

    /// Mean of `|a - b|` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_abs_diff shape mismatch");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = T::lit(va.len() as f64);
        let s: T = va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s / n), Op::MeanAbsDiff(a, b), needs)
    }

    /// Mean of `(a - target)^2` over all elements.
    pub fn mean_sq_to_target(&mut self, a: Var, target: T) -> Var {
        let va = self.value(a).data();
        let n = T::lit(va.len() as f64);
        let s: T = va.iter().map(|&x| (x - target) * (x - target)).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / n), Op::MeanSqToTarget(a, target), needs)
    }

    /// `scale * sum(a^2)`.
    pub fn sum_squares(&mut self, a: Var, scale: T) -> Var {
        let s: T = self.value(a).data().iter().map(|&x| x * x).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s * scale), Op::SumSquares(a, scale), needs)
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            total += self.scalar(v) * w;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()).reshape(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let r = kernels::conv2d_backward(
                    self.value(*x).data(),
                    xs[0],
                    geom,
                    self.value(*w).data(),
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, Tensor::from_vec(xs, dx));
                }
                if let Some(dw) = r.dw {
                    self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw));
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, inp, out) = (xs[0], xs[1], ws[0]);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * inp];
                    gemm(
                        n,
                        out,
                        inp,
                        T::one(),
                        g.data(),
                        Layout::Normal,
                        self.value(*w).data(),
                        Layout::Normal,
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(xs, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(
                        out,
                        n,
                        inp,
                        T::one(),
                        g.data(),
                        Layout::Transposed,
                        self.value(*x).data(),
                        Layout::Normal,
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(ws, dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); out];
                        for row in g.data().chunks(out) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[out], db));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&d, &xv)| if xv > T::zero() { d } else { d * *slope })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.shape(), data));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&d, &yv)| d * (T::one() - yv * yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.shape(), data));
            }
            Op::Upsample2(a) => {
                let s = self.shape(*a);
                let dx = kernels::upsample2_backward(g.data(), s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, *a, Tensor::from_vec(s, dx));
            }
            Op::AvgPool2(a) => {
                let s = self.shape(*a);
                let dx = kernels::avgpool2_backward(g.data(), s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, *a, Tensor::from_vec(s, dx));
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&s));
            }
            Op::MeanAbsDiff(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let k = g.item() / T::lit(va.len() as f64);
                let da: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| sign(x - y) * k)
                    .collect();
                if self.needs(*b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db));
                }
                self.accumulate(grads, *a, Tensor::from_vec(self.shape(*a), da));
            }
            Op::MeanSqToTarget(a, target) => {
                let va = self.value(*a).data();
                let k = g.item() * T::lit(2.0) / T::lit(va.len() as f64);
                let da = va.iter().map(|&x| (x - *target) * k).collect();
                self.accumulate(grads, *a, Tensor::from_vec(self.shape(*a), da));
            }
            Op::SumSquares(a, scale) => {
                let k = g.item() * T::lit(2.0) * *scale;
                let da = self.value(*a).data().iter().map(|&x| x * k).collect();
                self.accumulate(grads, *a, Tensor::from_vec(self.shape(*a), da));
            }
            Op::WeightedSum(terms) => {
                let gv = g.item();
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gv * w).reshape(self.shape(v)));
                }
            }
        }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when no trainable path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
