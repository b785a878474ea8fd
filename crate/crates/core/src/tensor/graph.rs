use std::collections::HashMap;

use super::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Transpose(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Gather { table: usize, ids: Vec<usize> },
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

/// Tape of tensor operations. Nodes are appended in evaluation order, which
/// is a topological order, so backward is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, usize>,
    record: bool,
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// `c[i] (+)= a @ b` for row-major matrices given as slices.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    // a is (m,k) unless a_t, in which case storage is (k,m); same for b.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents and strides above stay inside the asserted slice lengths.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sum_leading<T: Scalar>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    for chunk in g.chunks_exact(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for backward.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            record: true,
        }
    }

    /// A graph for inference: values are computed but nothing requires grad.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node
    /// so multiple uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Var(n);
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_nodes.insert(id, v.0);
        v
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        Tensor::<T>::leading_repeats(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.binary_check(name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = self.nodes[b.0].value.data();
        let inner = bv.len();
        let data: Vec<T> = av
            .data()
            .chunks_exact(inner)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(value, op, ng))
    }

    /// Elementwise `a + b`; `b` may be stretched over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Scale(a.0, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a.0]);
        self.push(value, Op::AddScalar(a.0), ng)
    }

    /// Matrix product over the last two axes. `b` is either rank 2 (shared by
    /// every leading index of `a`) or has exactly `a`'s leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead: usize = sa[..sa.len() - 2].iter().product();
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); lead * m * n];
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        if sb.len() == 2 {
            gemm_into(lead * m, k, n, av, false, bv, false, &mut out, false);
        } else {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] {
                return Err(err());
            }
            for i in 0..lead {
                gemm_into(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a.0, b.0), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("rank {} < 2", s.len()),
            });
        }
        let value = transpose_last(self.value(a));
        let ng = self.ng(&[a.0]);
        Ok(self.push(value, Op::Transpose(a.0), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.nodes[p.0].value.data();
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&d[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts: ids, axis }, ng))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(&[a.0]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Slice {
                src: a.0,
                axis,
                start,
            },
            ng,
        ))
    }

    /// Splits `a` into equal chunks along `axis`.
    pub fn split(&mut self, a: Var, axis: usize, chunks: usize) -> Result<Vec<Var>> {
        let extent = self.shape(a).get(axis).copied().unwrap_or(0);
        if chunks == 0 || extent % chunks != 0 {
            return Err(TensorError::Invalid {
                op: "split",
                msg: format!("extent {extent} not divisible into {chunks} chunks"),
            });
        }
        let w = extent / chunks;
        (0..chunks).map(|i| self.slice(a, axis, i * w, w)).collect()
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let value = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Softmax(a.0), ng)
    }

    /// Layer norm over the last axis with learned `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        let dn = T::of(d as f64);
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let ng = self.ng(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| T::of(gelu_parts(x.as_f64()).0));
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Gelu(a.0), ng)
    }

    /// Rows of a `(vocab, dim)` table selected by `ids`, shape `(ids.len(), dim)`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("table shape {s:?}, {} ids", ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("id {bad} out of range for {} rows", s[0]),
            });
        }
        let d = s[1];
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table.0]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Mean(a.0), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|(&pid, &n)| (pid, n))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |j: usize, delta: Vec<T>| {
            if !nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(delta) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor {
                        shape: nodes[j].value.shape.clone(),
                        data: delta,
                    })
                }
            }
        };
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                let inner = nodes[*b].value.len();
                acc(*b, sum_leading(gd, inner));
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                let inner = nodes[*b].value.len();
                acc(*b, sum_leading(gd, inner).into_iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                let inner = bv.len();
                if nodes[*a].needs_grad {
                    let da = gd
                        .chunks_exact(inner)
                        .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| x * y))
                        .collect();
                    acc(*a, da);
                }
                if nodes[*b].needs_grad {
                    let prod: Vec<T> = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    acc(*b, sum_leading(&prod, inner));
                }
            }
            Op::Scale(a, s) => acc(*a, gd.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(a) => acc(*a, gd.to_vec()),
            Op::MatMul(a, b) => {
                let sa = nodes[*a].value.shape();
                let sb = nodes[*b].value.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let lead: usize = sa[..sa.len() - 2].iter().product();
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                if sb.len() == 2 {
                    if nodes[*a].needs_grad {
                        let mut da = vec![T::zero(); lead * m * k];
                        gemm_into(lead * m, n, k, gd, false, bv, true, &mut da, false);
                        acc(*a, da);
                    }
                    if nodes[*b].needs_grad {
                        let mut db = vec![T::zero(); k * n];
                        gemm_into(k, lead * m, n, av, true, gd, false, &mut db, false);
                        acc(*b, db);
                    }
                } else {
                    if nodes[*a].needs_grad {
                        let mut da = vec![T::zero(); lead * m * k];
                        for l in 0..lead {
                            gemm_into(
                                m,
                                n,
                                k,
                                &gd[l * m * n..],
                                false,
                                &bv[l * k * n..],
                                true,
                                &mut da[l * m * k..],
                                false,
                            );
                        }
                        acc(*a, da);
                    }
                    if nodes[*b].needs_grad {
                        let mut db = vec![T::zero(); lead * k * n];
                        for l in 0..lead {
                            gemm_into(
                                k,
                                m,
                                n,
                                &av[l * m * k..],
                                true,
                                &gd[l * m * n..],
                                false,
                                &mut db[l * k * n..],
                                false,
                            );
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::Transpose(a) => acc(*a, transpose_last(g).data),
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.shape()[*axis] * inner;
                    if nodes[p].needs_grad {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * row + offset..o * row + offset + w]);
                        }
                        acc(p, d);
                    }
                    offset += w;
                }
            }
            Op::Slice { src, axis, start } => {
                let s = nodes[*src].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); nodes[*src].value.len()];
                for o in 0..outer {
                    let base = o * s[*axis] * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*src, d);
            }
            Op::Softmax(a) => {
                let y = nodes[i].value.data();
                let d = *g.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(d).zip(gd.chunks_exact(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = nodes[*gamma].value.data();
                let d = gam.len();
                let dn = T::of(d as f64);
                if nodes[*beta].needs_grad {
                    acc(*beta, sum_leading(gd, d));
                }
                if nodes[*gamma].needs_grad {
                    let prod: Vec<T> = gd.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                    acc(*gamma, sum_leading(&prod, d));
                }
                if nodes[*x].needs_grad {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((gr, hr), &r) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd)
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            dx.push(r * (gr[j] * gam[j] - m1 - hr[j] * m2));
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(a) => {
                let xv = nodes[*a].value.data();
                acc(
                    *a,
                    xv.iter()
                        .zip(gd)
                        .map(|(&x, &gv)| gv * T::of(gelu_parts(x.as_f64()).1))
                        .collect(),
                );
            }
            Op::Gather { table, ids } => {
                let s = nodes[*table].value.shape();
                let d = s[1];
                let mut dt = vec![T::zero(); s[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; nodes[*a].value.len()]),
            Op::Mean(a) => {
                let n = nodes[*a].value.len();
                acc(*a, vec![gd[0] / T::of(n as f64); n]);
            }
        }
    }
}

fn transpose_last<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let s = v.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let lead: usize = s[..s.len() - 2].iter().product();
    let d = v.data();
    let mut out = Vec::with_capacity(d.len());
    for l in 0..lead {
        let m = &d[l * r * c..(l + 1) * r * c];
        for j in 0..c {
            for i in 0..r {
                out.push(m[i * c + j]);
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor { shape, data: out }
}
