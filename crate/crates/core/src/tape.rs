//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! records in reverse and accumulates adjoints. Model weights enter operations
//! as shared constants ([`Arc<Tensor>`]) rather than tape nodes, since only
//! gradients with respect to latents are ever needed.
//!
//! [`Tape::detach`] is the stop-gradient: its output carries the input value
//! but never propagates an adjoint back to it.

use std::sync::Arc;

use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source element of a gather: `(source slot, flat offset)`, or `None` for zero.
pub type GatherIndex = Option<(u32, u32)>;

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Arc<Tensor>),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Silu(Var),
    Sum(Var),
    SumLast(Var),
    Gather {
        sources: Vec<Var>,
        index: Arc<Vec<GatherIndex>>,
    },
    Linear {
        input: Var,
        weight: Arc<Tensor>,
    },
    SpatialMix {
        input: Var,
        matrix: Arc<Tensor>,
    },
    SoftmaxLast(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// An eager computation record supporting reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Values returned by successive `detach` calls instead of their inputs.
    frozen: Option<Vec<Tensor>>,
    detaches: usize,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` if no gradient reached it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()))
    }

    /// Adjoint of `var`, zero-filled if no gradient reached it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("operation requires rank >= 1")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `k`-th `detach` returns `values[k]` rather than its
    /// input. Replaying a computation on a perturbed input then evaluates
    /// the function the gradient actually differentiates: stop-gradient
    /// quantities held at their recorded values.
    pub fn with_frozen_detaches(values: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by every `detach` so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Detach))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// A differentiable input.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no adjoint flows back into `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = match &self.frozen {
            Some(values) => {
                let v = values.get(self.detaches).expect("more detaches than frozen values");
                assert_eq!(v.shape(), self.value(x).shape(), "frozen value has the wrong shape");
                v.clone()
            }
            None => self.value(x).clone(),
        };
        self.detaches += 1;
        self.push(value, Op::Detach, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// Elementwise `a + c` for a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    /// Elementwise `a * c` for a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(v, Op::Recip(a), ng)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = last_dim(x.shape());
        let out_shape = x.shape()[..x.shape().len() - 1].to_vec();
        let data = x.data().chunks_exact(n).map(|c| c.iter().sum()).collect();
        let v = Tensor::new(out_shape, data);
        let ng = self.ng(a);
        self.push(v, Op::SumLast(a), ng)
    }

    /// Builds a tensor of `shape` whose element `i` is copied from
    /// `sources[index[i].0]` at flat offset `index[i].1`, or zero for `None`.
    ///
    /// Reshapes, permutations, crops, broadcasts, concatenations, padding and
    /// patch extraction are all expressed through this one operation.
    pub fn gather(
        &mut self,
        sources: &[Var],
        shape: impl Into<Vec<usize>>,
        index: Arc<Vec<GatherIndex>>,
    ) -> Var {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let data = index
            .iter()
            .map(|ix| match ix {
                Some((s, o)) => self.value(sources[*s as usize]).data()[*o as usize],
                None => 0.0,
            })
            .collect();
        let ng = sources.iter().any(|&s| self.ng(s));
        self.push(
            Tensor::new(shape, data),
            Op::Gather {
                sources: sources.to_vec(),
                index,
            },
            ng,
        )
    }

    /// Same values, new shape.
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let n = self.value(a).len();
        let index: Vec<GatherIndex> = (0..n).map(|i| Some((0, i as u32))).collect();
        self.gather(&[a], shape, Arc::new(index))
    }

    /// `x[..., i] · W[i, o]` over the last axis, with `weight` of shape `[in, out]`.
    pub fn linear(&mut self, a: Var, weight: Arc<Tensor>) -> Var {
        let x = self.value(a);
        let (din, dout) = (weight.shape()[0], weight.shape()[1]);
        assert_eq!(last_dim(x.shape()), din, "linear input dim mismatch");
        let rows = x.len() / din;
        let mut out = vec![0.0; rows * dout];
        let w = weight.data();
        for (r, row) in x.data().chunks_exact(din).enumerate() {
            let o = &mut out[r * dout..(r + 1) * dout];
            for (i, &xi) in row.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wi = &w[i * dout..(i + 1) * dout];
                for (oj, &wij) in o.iter_mut().zip(wi) {
                    *oj += xi * wij;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(a);
        self.push(
            Tensor::new(shape, out),
            Op::Linear { input: a, weight },
            ng,
        )
    }

    /// For `x` of shape `[B, I, C]` and `matrix` of shape `[O, I]`, returns
    /// `y[b, o, c] = Σ_i matrix[o, i] · x[b, i, c]`.
    pub fn spatial_mix(&mut self, a: Var, matrix: Arc<Tensor>) -> Var {
        let x = self.value(a);
        let (b, i_dim, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let o_dim = matrix.shape()[0];
        assert_eq!(matrix.shape()[1], i_dim, "spatial_mix dim mismatch");
        let m = matrix.data();
        let xd = x.data();
        let mut out = vec![0.0; b * o_dim * c];
        for bb in 0..b {
            for o in 0..o_dim {
                let dst = &mut out[(bb * o_dim + o) * c..(bb * o_dim + o + 1) * c];
                for i in 0..i_dim {
                    let w = m[o * i_dim + i];
                    if w == 0.0 {
                        continue;
                    }
                    let src = &xd[(bb * i_dim + i) * c..(bb * i_dim + i + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            Tensor::new([b, o_dim, c], out),
            Op::SpatialMix { input: a, matrix },
            ng,
        )
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = last_dim(x.shape());
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let v = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxLast(a), ng)
    }

    /// Batched scaled dot-product attention:
    /// `softmax(scale · q kᵀ) v` with `q: [B, Tq, D]`, `k: [B, Tk, D]`, `v: [B, Tk, Dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (b, tq, d) = (qt.shape()[0], qt.shape()[1], qt.shape()[2]);
        let tk = kt.shape()[1];
        let dv = vt.shape()[2];
        assert_eq!(kt.shape(), &[b, tk, d], "attention key shape mismatch");
        assert_eq!(vt.shape()[..2], [b, tk], "attention value shape mismatch");
        let mut probs = vec![0.0; b * tq * tk];
        let mut out = vec![0.0; b * tq * dv];
        for bb in 0..b {
            let qb = &qt.data()[bb * tq * d..(bb + 1) * tq * d];
            let kb = &kt.data()[bb * tk * d..(bb + 1) * tk * d];
            let vb = &vt.data()[bb * tk * dv..(bb + 1) * tk * dv];
            for i in 0..tq {
                let qi = &qb[i * d..(i + 1) * d];
                let row = &mut probs[(bb * tq + i) * tk..(bb * tq + i + 1) * tk];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kb[j * d..(j + 1) * d];
                    *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(row);
                let o = &mut out[(bb * tq + i) * dv..(bb * tq + i + 1) * dv];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vb[j * dv..(j + 1) * dv];
                    for (oo, &vv) in o.iter_mut().zip(vj) {
                        *oo += p * vv;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::new([b, tq, dv], out),
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs: Tensor::new([b, tq, tk], probs),
            },
            ng,
        )
    }

    /// Attention weights recorded by an [`Tape::attention`] node.
    pub fn attention_probs(&self, var: Var) -> Option<&Tensor> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(var) {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddScalar(a) | Op::AddConst(a) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
                });
            }
            Op::MulConst(a, c) => {
                let cv = c.data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * cv[i];
                    }
                });
            }
            Op::Exp(a) => self.accumulate(grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            }),
            Op::Sqrt(a) => self.accumulate(grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * 0.5 / y[i];
                }
            }),
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * 2.0 * x[i];
                    }
                })
            }
            Op::Recip(a) => self.accumulate(grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * y[i] * y[i];
                }
            }),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        let sig = 1.0 / (1.0 + (-x[i]).exp());
                        s[i] += g[i] * (sig + x[i] * sig * (1.0 - sig));
                    }
                })
            }
            Op::Sum(a) => self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SumLast(a) => {
                let n = last_dim(self.shape(*a));
                self.accumulate(grads, *a, |s| {
                    for (row, &gr) in s.chunks_exact_mut(n).zip(g) {
                        row.iter_mut().for_each(|x| *x += gr);
                    }
                })
            }
            Op::Gather { sources, index } => {
                for (slot, &src) in sources.iter().enumerate() {
                    self.accumulate(grads, src, |s| {
                        for (gi, ix) in g.iter().zip(index.iter()) {
                            if let Some((si, o)) = ix {
                                if *si as usize == slot {
                                    s[*o as usize] += gi;
                                }
                            }
                        }
                    });
                }
            }
            Op::Linear { input, weight } => {
                let (din, dout) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.data();
                self.accumulate(grads, *input, |s| {
                    for (srow, grow) in s.chunks_exact_mut(din).zip(g.chunks_exact(dout)) {
                        for (i, si) in srow.iter_mut().enumerate() {
                            let wi = &w[i * dout..(i + 1) * dout];
                            *si += wi.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
            }
            Op::SpatialMix { input, matrix } => {
                let shape = self.shape(*input);
                let (b, i_dim, c) = (shape[0], shape[1], shape[2]);
                let o_dim = matrix.shape()[0];
                let m = matrix.data();
                self.accumulate(grads, *input, |s| {
                    for bb in 0..b {
                        for o in 0..o_dim {
                            let go = &g[(bb * o_dim + o) * c..(bb * o_dim + o + 1) * c];
                            for i in 0..i_dim {
                                let w = m[o * i_dim + i];
                                if w == 0.0 {
                                    continue;
                                }
                                let dst = &mut s[(bb * i_dim + i) * c..(bb * i_dim + i + 1) * c];
                                for (d, &gg) in dst.iter_mut().zip(go) {
                                    *d += w * gg;
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                let n = last_dim(node.value.shape());
                self.accumulate(grads, *a, |s| {
                    for ((srow, grow), yrow) in s
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => self.attention_backward(*q, *k, *v, *scale, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (b, tq, d) = (qt.shape()[0], qt.shape()[1], qt.shape()[2]);
        let tk = kt.shape()[1];
        let dv = vt.shape()[2];
        let p = probs.data();
        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), dP = dO Vᵀ
        let mut ds = vec![0.0; b * tq * tk];
        for bb in 0..b {
            let vb = &vt.data()[bb * tk * dv..(bb + 1) * tk * dv];
            for i in 0..tq {
                let go = &g[(bb * tq + i) * dv..(bb * tq + i + 1) * dv];
                let prow = &p[(bb * tq + i) * tk..(bb * tq + i + 1) * tk];
                let dsrow = &mut ds[(bb * tq + i) * tk..(bb * tq + i + 1) * tk];
                for j in 0..tk {
                    let vj = &vb[j * dv..(j + 1) * dv];
                    dsrow[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                }
                let dot: f64 = dsrow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for j in 0..tk {
                    dsrow[j] = prow[j] * (dsrow[j] - dot);
                }
            }
        }
        self.accumulate(grads, v, |s| {
            for bb in 0..b {
                for i in 0..tq {
                    let go = &g[(bb * tq + i) * dv..(bb * tq + i + 1) * dv];
                    for j in 0..tk {
                        let pij = p[(bb * tq + i) * tk + j];
                        let dst = &mut s[(bb * tk + j) * dv..(bb * tk + j + 1) * dv];
                        for (d, &gg) in dst.iter_mut().zip(go) {
                            *d += pij * gg;
                        }
                    }
                }
            }
        });
        self.accumulate(grads, q, |s| {
            for bb in 0..b {
                let kb = &kt.data()[bb * tk * d..(bb + 1) * tk * d];
                for i in 0..tq {
                    let dst = &mut s[(bb * tq + i) * d..(bb * tq + i + 1) * d];
                    for j in 0..tk {
                        let w = scale * ds[(bb * tq + i) * tk + j];
                        for (dd, &kk) in dst.iter_mut().zip(&kb[j * d..(j + 1) * d]) {
                            *dd += w * kk;
                        }
                    }
                }
            }
        });
        self.accumulate(grads, k, |s| {
            for bb in 0..b {
                let qb = &qt.data()[bb * tq * d..(bb + 1) * tq * d];
                for i in 0..tq {
                    let qi = &qb[i * d..(i + 1) * d];
                    for j in 0..tk {
                        let w = scale * ds[(bb * tq + i) * tk + j];
                        let dst = &mut s[(bb * tk + j) * d..(bb * tk + j + 1) * d];
                        for (dd, &qq) in dst.iter_mut().zip(qi) {
                            *dd += w * qq;
                        }
                    }
                }
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
