// Reverse-mode tape: every operator computes its value eagerly and records
// how to push an upstream gradient back to its inputs. A tape lives for one
// forward/backward round and is dropped afterwards.

use super::{lit, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    /// `a · b` or `a · bᵀ` when `trans_b`.
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale { a: Var, s: F },
    MulScalar { a: Var, s: Var },
    Exp(Var),
    Transpose(Var),
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize { a: Var, norms: Vec<F> },
    Mse(Var, Var),
    Entropy(Var),
    Nll { a: Var, targets: Vec<usize> },
    Attention(Box<AttentionRecord<F>>),
}

#[derive(Debug)]
struct AttentionRecord<F> {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    probs: Vec<F>,
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

/// `tanh` through one `exp`; much cheaper than libm's `tanhf`, exact at
/// the saturated ends.
fn fast_tanh<F: Float>(u: F) -> F {
    let two = lit::<F>(2.0);
    if u.abs() < lit::<F>(0.0625) {
        // avoid cancellation near zero
        let u2 = u * u;
        let series = [-1.0 / 3.0, 2.0 / 15.0, -17.0 / 315.0, 62.0 / 2835.0];
        let poly = series.iter().rev().fold(F::zero(), |acc, &c| (acc + lit::<F>(c)) * u2);
        return u * (F::one() + poly);
    }
    F::one() - two / ((two * u).exp() + F::one())
}

fn gelu_parts<F: Float>(x: F) -> (F, F) {
    let c = lit::<F>((2.0 / std::f64::consts::PI).sqrt());
    let a = lit::<F>(0.044715);
    let half = lit::<F>(0.5);
    let three = lit::<F>(3.0);
    let u = c * (x + a * x * x * x);
    let t = fast_tanh(u);
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x);
    (y, dy)
}

fn softmax_row<F: Float>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, tensor: Tensor<F>, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor, false)
    }

    /// Copies a value onto the tape with no path back to its source.
    pub fn detach(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn expect_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_rank2("matmul", a)?;
        let (k2, n) = self.expect_rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            (self.value(a), k as isize, 1),
            (self.value(b), n as isize, 1),
            F::zero(),
            (&mut out, n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_rank2("matmul_nt", a)?;
        let (n, k2) = self.expect_rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            (self.value(a), k as isize, 1),
            (self.value(b), 1, k as isize),
            F::zero(),
            (&mut out, n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }, rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Vec<usize>, Vec<F>)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// Adds a vector of the last extent to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a));
        if numel(self.shape(row)) != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(cols) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x = *x + y;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(shape, out, Op::AddRow { a, row }, rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale { a, s }, rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(shape, out, Op::MulScalar { a, s }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Exp(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.expect_rank2("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let n = lit::<F>(vals.len() as f64);
        let m = vals.iter().copied().sum::<F>() / n;
        let rg = self.rg(a);
        self.push(vec![1], vec![m], Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<F>();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Mean over the leading axis of a matrix: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.expect_rank2("mean_rows", a)?;
        let mut out = vec![F::zero(); n];
        for row in self.value(a).chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        let inv = F::one() / lit::<F>(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        Ok(self.push(vec![n], out, Op::MeanRows(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let conforms = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !conforms {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ax = shape[axis];
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * ax * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(a);
        Ok(self.push(new_shape, out, Op::Slice { a, axis, start }, rg))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.expect_rank2("gather_rows", a)?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", &[m, n], &[bad]));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    /// Layer normalization over the last axis with ε = 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if numel(self.shape(gamma)) != cols || numel(self.shape(beta)) != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = lit::<F>(LAYER_NORM_EPS);
        let n = lit::<F>(cols as f64);
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![F::zero(); rows * cols];
        let mut xhat = vec![F::zero(); rows * cols];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = vec![F::zero(); self.value(a).len()];
        for (src, dst) in self.value(a).chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, dst);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = vec![F::zero(); self.value(a).len()];
        for (src, dst) in self.value(a).chunks(cols).zip(out.chunks_mut(cols)) {
            let max = src.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = src.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            dst.iter_mut().zip(src).for_each(|(o, &x)| *o = x - lse);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::LogSoftmax(a), rg)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(a));
        let eps = lit::<F>(L2_EPS);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in out.chunks_mut(cols) {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::L2Normalize { a, norms }, rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, diff) = self.zip_same("mse", a, b, |x, y| (x - y) * (x - y))?;
        let n = lit::<F>(diff.len() as f64);
        let v = diff.into_iter().sum::<F>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![v], Op::Mse(a, b), rg))
    }

    /// Shannon entropy (natural log) of each row, with `0·ln 0 = 0`.
    pub fn entropy(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(a));
        let out = self
            .value(a)
            .chunks(cols)
            .map(|row| {
                -row.iter()
                    .filter(|&&p| p > F::zero())
                    .map(|&p| p * p.ln())
                    .sum::<F>()
            })
            .collect();
        let rg = self.rg(a);
        self.push(vec![rows], out, Op::Entropy(a), rg)
    }

    /// Mean negative log-likelihood of `targets` under row log-probabilities.
    pub fn nll(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.expect_rank2("nll", a)?;
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::shape("nll", &[m, n], &[targets.len()]));
        }
        let vals = self.value(a);
        let total: F = targets.iter().enumerate().map(|(i, &t)| vals[i * n + t]).sum();
        let v = -total / lit::<F>(m as f64);
        let rg = self.rg(a);
        Ok(self.push(
            vec![1],
            vec![v],
            Op::Nll {
                a,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of length `seq`. Inputs are `[batch·seq, d]` row blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        let (rows, d) = self.expect_rank2("attention", q)?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", &[rows, d], &[batch, seq, heads]));
        }
        let dh = d / heads;
        let scale = F::one() / lit::<F>(dh as f64).sqrt();
        let mut out = vec![F::zero(); rows * d];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let ld = d as isize;
        let ls = seq as isize;
        let mut scores = vec![F::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                F::gemm(seq, dh, seq, scale, (&qv[off..], ld, 1), (&kv[off..], 1, ld), F::zero(), (&mut scores, ls, 1));
                if causal {
                    for i in 0..seq {
                        for j in i + 1..seq {
                            scores[i * seq + j] = F::neg_infinity();
                        }
                    }
                }
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for (src, dst) in scores.chunks(seq).zip(p.chunks_mut(seq)) {
                    softmax_row(src, dst);
                }
                F::gemm(seq, seq, dh, F::one(), (p, ls, 1), (&vv[off..], ld, 1), F::zero(), (&mut out[off..], ld, 1));
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let record = AttentionRecord {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        };
        Ok(self.push(vec![rows, d], out, Op::Attention(Box::new(record)), rg))
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Leaves that do not require gradients get none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", &self.nodes[loss.0].shape, &[1]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[F]) {
        let node = &self.nodes[i];
        let val = &node.value;
        let mut deltas: Vec<(Var, Vec<F>)> = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = node.shape[1];
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (ki, ni) = (k as isize, n as isize);
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    // dA = dC · Bᵀ (or dC · B when b was transposed)
                    let bview = if *trans_b { (bv.as_slice(), ki, 1) } else { (bv.as_slice(), 1, ni) };
                    F::gemm(m, n, k, F::one(), (g, ni, 1), bview, F::zero(), (&mut da, ki, 1));
                    deltas.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); k * n];
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        F::gemm(n, m, k, F::one(), (g, 1, ni), (av, ki, 1), F::zero(), (&mut db, ki, 1));
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        F::gemm(k, m, n, F::one(), (av, 1, ki), (g, ni, 1), F::zero(), (&mut db, ni, 1));
                    }
                    deltas.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                deltas.push((*a, g.to_vec()));
                deltas.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                deltas.push((*a, g.to_vec()));
                deltas.push((*b, g.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                deltas.push((*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
                deltas.push((*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect()));
            }
            Op::AddRow { a, row } => {
                deltas.push((*a, g.to_vec()));
                if self.rg(*row) {
                    let cols = self.nodes[row.0].value.len();
                    let mut dr = vec![F::zero(); cols];
                    for chunk in g.chunks(cols) {
                        dr.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
                    }
                    deltas.push((*row, dr));
                }
            }
            Op::Scale { a, s } => deltas.push((*a, g.iter().map(|&x| x * *s).collect())),
            Op::MulScalar { a, s } => {
                let av = &self.nodes[a.0].value;
                let sv = self.nodes[s.0].value[0];
                deltas.push((*a, g.iter().map(|&x| x * sv).collect()));
                let ds = g.iter().zip(av).map(|(&x, &y)| x * y).sum::<F>();
                deltas.push((*s, vec![ds]));
            }
            Op::Exp(a) => deltas.push((*a, g.iter().zip(val).map(|(&x, &y)| x * y).collect())),
            Op::Transpose(a) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let mut da = vec![F::zero(); m * n];
                for j in 0..n {
                    for i2 in 0..m {
                        da[i2 * n + j] = g[j * m + i2];
                    }
                }
                deltas.push((*a, da));
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                let share = g[0] / lit::<F>(len as f64);
                deltas.push((*a, vec![share; len]));
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                deltas.push((*a, vec![g[0]; len]));
            }
            Op::MeanRows(a) => {
                let m = self.nodes[a.0].shape[0];
                let inv = F::one() / lit::<F>(m as f64);
                let row: Vec<F> = g.iter().map(|&x| x * inv).collect();
                deltas.push((*a, row.iter().copied().cycle().take(m * row.len()).collect()));
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut bufs: Vec<Vec<F>> = inputs.iter().map(|v| Vec::with_capacity(self.nodes[v.0].value.len())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (buf, v) in bufs.iter_mut().zip(inputs) {
                        let len = self.nodes[v.0].shape[*axis] * inner;
                        buf.extend_from_slice(&g[pos..pos + len]);
                        pos += len;
                    }
                }
                deltas.extend(inputs.iter().copied().zip(bufs));
            }
            Op::Slice { a, axis, start } => {
                let src_shape = &self.nodes[a.0].shape;
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let ax = src_shape[*axis];
                let width = node.shape[*axis] * inner;
                let mut da = vec![F::zero(); numel(src_shape)];
                for o in 0..outer {
                    let base = o * ax * inner + start * inner;
                    da[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                deltas.push((*a, da));
            }
            Op::GatherRows { a, idx } => {
                let n = node.shape[1];
                let mut da = vec![F::zero(); self.nodes[a.0].value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    da[src * n..(src + 1) * n].iter_mut().zip(gr).for_each(|(o, &x)| *o += x);
                }
                deltas.push((*a, da));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gv = &self.nodes[gamma.0].value;
                let n = lit::<F>(cols as f64);
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); rows * cols];
                    let mut dh = vec![F::zero(); cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        dh.iter_mut().zip(gr).zip(gv).for_each(|((d, &gy), &gm)| *d = gy * gm);
                        let mean_dh = dh.iter().copied().sum::<F>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a2, &b2)| a2 * b2).sum::<F>() / n;
                        for c in 0..cols {
                            dx[r * cols + c] = rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    deltas.push((*x, dx));
                }
                if self.rg(*gamma) {
                    let mut dg = vec![F::zero(); cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(o, (&a2, &b2))| *o += a2 * b2);
                    }
                    deltas.push((*gamma, dg));
                }
                if self.rg(*beta) {
                    let mut db = vec![F::zero(); cols];
                    for gr in g.chunks(cols) {
                        db.iter_mut().zip(gr).for_each(|(o, &a2)| *o += a2);
                    }
                    deltas.push((*beta, db));
                }
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                deltas.push((*a, g.iter().zip(av).map(|(&gy, &x)| gy * gelu_parts(x).1).collect()));
            }
            Op::Softmax(a) => {
                let (_, cols) = rows_cols(&node.shape);
                let mut da = vec![F::zero(); val.len()];
                for ((gr, yr), dr) in g.chunks(cols).zip(val.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let dot = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<F>();
                    dr.iter_mut().zip(gr.iter().zip(yr)).for_each(|(o, (&x, &y))| *o = y * (x - dot));
                }
                deltas.push((*a, da));
            }
            Op::LogSoftmax(a) => {
                let (_, cols) = rows_cols(&node.shape);
                let mut da = vec![F::zero(); val.len()];
                for ((gr, yr), dr) in g.chunks(cols).zip(val.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let total = gr.iter().copied().sum::<F>();
                    dr.iter_mut().zip(gr.iter().zip(yr)).for_each(|(o, (&x, &y))| *o = x - y.exp() * total);
                }
                deltas.push((*a, da));
            }
            Op::L2Normalize { a, norms } => {
                let (_, cols) = rows_cols(&node.shape);
                let mut da = vec![F::zero(); val.len()];
                for (((gr, yr), dr), &norm) in g.chunks(cols).zip(val.chunks(cols)).zip(da.chunks_mut(cols)).zip(norms) {
                    let dot = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<F>();
                    dr.iter_mut().zip(gr.iter().zip(yr)).for_each(|(o, (&x, &y))| *o = (x - y * dot) / norm);
                }
                deltas.push((*a, da));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let c = lit::<F>(2.0) * g[0] / lit::<F>(av.len() as f64);
                let da: Vec<F> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                let db = da.iter().map(|&x| -x).collect();
                deltas.push((*a, da));
                deltas.push((*b, db));
            }
            Op::Entropy(a) => {
                let av = &self.nodes[a.0].value;
                let (_, cols) = rows_cols(&self.nodes[a.0].shape);
                let mut da = vec![F::zero(); av.len()];
                for ((pr, dr), &gr) in av.chunks(cols).zip(da.chunks_mut(cols)).zip(g) {
                    for (o, &p) in dr.iter_mut().zip(pr) {
                        if p > F::zero() {
                            *o = -(p.ln() + F::one()) * gr;
                        }
                    }
                }
                deltas.push((*a, da));
            }
            Op::Nll { a, targets } => {
                let n = self.nodes[a.0].shape[1];
                let m = targets.len();
                let mut da = vec![F::zero(); m * n];
                let share = -g[0] / lit::<F>(m as f64);
                for (i, &t) in targets.iter().enumerate() {
                    da[i * n + t] = share;
                }
                deltas.push((*a, da));
            }
            Op::Attention(rec) => {
                let AttentionRecord {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } = rec.as_ref();
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = node.shape[1];
                let dh = d / heads;
                let scale = F::one() / lit::<F>(dh as f64).sqrt();
                let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                let mut dq = vec![F::zero(); qv.len()];
                let mut dk = vec![F::zero(); kv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                let mut dp = vec![F::zero(); seq * seq];
                let (ld, ls) = (d as isize, seq as isize);
                for b in 0..batch {
                    let rows = b * seq * d..(b + 1) * seq * d;
                    if g[rows].iter().all(|&x| x == F::zero()) {
                        continue;
                    }
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        // dV = Pᵀ · dO
                        F::gemm(seq, seq, dh, F::one(), (p, 1, ls), (&g[off..], ld, 1), F::one(), (&mut dv[off..], ld, 1));
                        // dP = dO · Vᵀ
                        F::gemm(seq, dh, seq, F::one(), (&g[off..], ld, 1), (&vv[off..], 1, ld), F::zero(), (&mut dp, ls, 1));
                        for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                            let dot = dr.iter().zip(pr).map(|(&x, &y)| x * y).sum::<F>();
                            dr.iter_mut().zip(pr).for_each(|(o, &y)| *o = y * (*o - dot));
                        }
                        F::gemm(seq, seq, dh, scale, (&dp, ls, 1), (&kv[off..], ld, 1), F::one(), (&mut dq[off..], ld, 1));
                        F::gemm(seq, seq, dh, scale, (&dp, 1, ls), (&qv[off..], ld, 1), F::one(), (&mut dk[off..], ld, 1));
                    }
                }
                deltas.push((*q, dq));
                deltas.push((*k, dk));
                deltas.push((*v, dv));
            }
        }
        for (v, d) in deltas {
            self.accumulate(v, d);
        }
    }
}
