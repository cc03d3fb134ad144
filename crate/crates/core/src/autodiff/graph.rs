use super::kernels::{axis_extents, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        shared_rhs: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        codes: Vec<u32>,
        keep: Vec<bool>,
    },
    WeightedPool {
        x: Var,
        weights: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SquaredError {
        pred: Var,
        target: Vec<T>,
        weight: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weight: Vec<T>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
        weight: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// reverse index order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data_of(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Records a leaf. Gradients are tracked when the tensor has `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ---------------------------------------------------------------- ops

    /// `a[.., m, k] · b[k, n]` or batched `a[.., m, k] · b[.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && &sb[..sb.len() - 2] != lead {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data_of(a);
            let bd = self.data_of(b);
            if shared_rhs {
                gemm_nn(ad, bd, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm_nn(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                shared_rhs,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out: Vec<T> = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape_of(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), ng))
    }

    /// Adds a bias vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(bias).to_vec();
        let n = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::shape("add_bias", &sa, &sb));
        }
        let bd = self.data_of(bias);
        let out: Vec<T> = self
            .data_of(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::new(&sa, out)?, Op::AddBias(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out: Vec<T> = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape_of(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.data_of(a).iter().map(|&x| x * c).collect();
        let shape = self.shape_of(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale(a, c), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self
            .data_of(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape_of(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Relu(a), ng))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let xd = self.data_of(x);
        if xd.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xd[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape_of(p) != [n] {
                return Err(Error::shape("layer_norm", &shape, self.shape_of(p)));
            }
        }
        let rows = self.value(x).numel() / n.max(1);
        let xd = self.data_of(x);
        let g = self.data_of(gamma);
        let b = self.data_of(beta);
        let nn = T::lit(n as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ContractViolation("concat of zero tensors".into()))?;
        let base = self.shape_of(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut width = 0;
        for &p in parts {
            let s = self.shape_of(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            width += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = width;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let w = self.shape_of(p)[axis] * inner;
                out.extend_from_slice(&self.data_of(p)[o * w..(o + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Takes `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = self.shape_of(x).to_vec();
        if axis >= src.len() || start >= end || end > src[axis] {
            return Err(Error::shape("slice", &src, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_extents(&src, axis);
        let w = end - start;
        let xd = self.data_of(x);
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&xd[base + start * inner..base + end * inner]);
        }
        let mut shape = src;
        shape[axis] = w;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape_of(x);
        if src.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", src, shape));
        }
        let data = self.data_of(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape(x), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let src = self.shape_of(x).to_vec();
        if src.len() < 2 {
            return Err(Error::shape("transpose", &src, &[]));
        }
        let (r, c) = (src[src.len() - 2], src[src.len() - 1]);
        let batch = self.value(x).numel() / (r * c).max(1);
        let xd = self.data_of(x);
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = xd[off + i * c + j];
                }
            }
        }
        let mut shape = src;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data_of(x).iter().copied().sum::<T>();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::ContractViolation("mean of empty tensor".into()));
        }
        let s = self.data_of(x).iter().copied().sum::<T>() / T::lit(n as f64);
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.shape_of(x).to_vec();
        if axis >= src.len() {
            return Err(Error::shape("sum_axis", &src, &[axis]));
        }
        let (outer, len, inner) = axis_extents(&src, axis);
        let xd = self.data_of(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xd[o * len * inner + j * inner + i];
                }
            }
        }
        let mut shape = src;
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { x, axis }, ng))
    }

    /// Row lookup into `table [V, d]`. Positions with `keep == false` produce
    /// zero rows and receive no gradient. Output shape is `lead ++ [d]`.
    pub fn embedding(
        &mut self,
        table: Var,
        codes: &[u32],
        keep: &[bool],
        lead: &[usize],
    ) -> Result<Var> {
        let ts = self.shape_of(table).to_vec();
        if ts.len() != 2 || codes.len() != keep.len() || lead.iter().product::<usize>() != codes.len()
        {
            return Err(Error::shape("embedding", &ts, &[codes.len(), keep.len()]));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= v) {
            return Err(Error::SchemaMismatch(format!(
                "category code {bad} outside embedding table of {v} rows"
            )));
        }
        let td = self.data_of(table);
        let mut out = vec![T::zero(); codes.len() * d];
        for (p, (&c, &k)) in codes.iter().zip(keep).enumerate() {
            if k {
                let c = c as usize;
                out[p * d..(p + 1) * d].copy_from_slice(&td[c * d..(c + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Embedding {
                table,
                codes: codes.to_vec(),
                keep: keep.to_vec(),
            },
            ng,
        ))
    }

    /// `x [B, t, h]` pooled to `[B, h]` with per-position weights `[B*t]`.
    pub fn weighted_pool(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 3 || weights.len() != s[0] * s[1] {
            return Err(Error::shape("weighted_pool", &s, &[weights.len()]));
        }
        let (b, t, h) = (s[0], s[1], s[2]);
        let xd = self.data_of(x);
        let mut out = vec![T::zero(); b * h];
        for bi in 0..b {
            for ti in 0..t {
                let w = weights[bi * t + ti];
                if w == T::zero() {
                    continue;
                }
                let row = &xd[(bi * t + ti) * h..(bi * t + ti + 1) * h];
                for (o, &v) in out[bi * h..(bi + 1) * h].iter_mut().zip(row) {
                    *o = *o + w * v;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[b, h], out)?,
            Op::WeightedPool {
                x,
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Feature-wise max over allowed positions of `x [B, t, h]`; rows with no
    /// allowed position pool to zero.
    pub fn max_pool(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 3 || allowed.len() != s[0] * s[1] {
            return Err(Error::shape("max_pool", &s, &[allowed.len()]));
        }
        let (b, t, h) = (s[0], s[1], s[2]);
        let xd = self.data_of(x);
        let mut out = vec![T::zero(); b * h];
        let mut argmax = vec![usize::MAX; b * h];
        for bi in 0..b {
            for c in 0..h {
                let mut best: Option<(usize, T)> = None;
                for ti in 0..t {
                    if !allowed[bi * t + ti] {
                        continue;
                    }
                    let idx = (bi * t + ti) * h + c;
                    if best.is_none_or(|(_, v)| xd[idx] > v) {
                        best = Some((idx, xd[idx]));
                    }
                }
                if let Some((idx, v)) = best {
                    out[bi * h + c] = v;
                    argmax[bi * h + c] = idx;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[b, h], out)?, Op::MaxPool { x, argmax }, ng))
    }

    /// `Σ weight · (pred − target)²` over all elements.
    pub fn squared_error(&mut self, pred: Var, target: &[T], weight: &[T]) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || weight.len() != n {
            return Err(Error::shape(
                "squared_error",
                self.shape_of(pred),
                &[target.len(), weight.len()],
            ));
        }
        let pd = self.data_of(pred);
        let mut total = T::zero();
        for i in 0..n {
            if weight[i] != T::zero() {
                let d = pd[i] - target[i];
                total = total + weight[i] * d * d;
            }
        }
        if total.is_nan() {
            return Err(Error::Numeric("squared error is NaN".into()));
        }
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SquaredError {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
            ng,
        ))
    }

    /// `Σ weight · CE(logits_row, target)` where rows are the last axis.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weight: &[T]) -> Result<Var> {
        let s = self.shape_of(logits).to_vec();
        let c = *s.last().unwrap_or(&0);
        let rows = self.value(logits).numel() / c.max(1);
        if targets.len() != rows || weight.len() != rows {
            return Err(Error::shape("cross_entropy", &s, &[targets.len(), weight.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::SchemaMismatch(format!(
                "target class {bad} outside {c} logits"
            )));
        }
        let ld = self.data_of(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for r in 0..rows {
            if weight[r] == T::zero() {
                continue;
            }
            let row = &ld[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z = z + *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / z;
            }
            let lse = mx + z.ln();
            total = total + weight[r] * (lse - row[targets[r]]);
        }
        if total.is_nan() {
            return Err(Error::Numeric("cross entropy is NaN".into()));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weight: weight.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `Σ weight · (softplus(z) − y·z)`, the logistic loss on raw logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], weight: &[T]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weight.len() != n {
            return Err(Error::shape(
                "bce_with_logits",
                self.shape_of(logits),
                &[targets.len(), weight.len()],
            ));
        }
        let zd = self.data_of(logits);
        let mut total = T::zero();
        for i in 0..n {
            let z = zd[i];
            // softplus(z) = max(z, 0) + ln(1 + e^{-|z|})
            let sp = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
            total = total + weight[i] * (sp - targets[i] * z);
        }
        if total.is_nan() {
            return Err(Error::Numeric("logistic loss is NaN".into()));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weight: weight.to_vec(),
            },
            ng,
        ))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(op, self.shape_of(a), self.shape_of(b)));
        }
        Ok(())
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ContractViolation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape_of(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                if self.nodes[idx].value.requires_grad() {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                shared_rhs,
                m,
                k,
                n,
            } => {
                let (m, k, n, batch) = (*m, *k, *n, *batch);
                let ad = self.data_of(*a);
                let bd = self.data_of(*b);
                if self.ng(*a) {
                    let ga = self.slot(*a, grads);
                    if *shared_rhs {
                        gemm_nt(g, bd, ga, batch * m, n, k);
                    } else {
                        for i in 0..batch {
                            gemm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = self.slot(*b, grads);
                    if *shared_rhs {
                        gemm_tn(ad, g, gb, k, batch * m, n);
                    } else {
                        for i in 0..batch {
                            gemm_tn(
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        add_into(self.slot(v, grads), g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.ng(*a) {
                    add_into(self.slot(*a, grads), g);
                }
                if self.ng(*bias) {
                    let gb = self.slot(*bias, grads);
                    let n = gb.len();
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data_of(*a), self.data_of(*b));
                if self.ng(*a) {
                    let ga = self.slot(*a, grads);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                }
                if self.ng(*b) {
                    let gb = self.slot(*b, grads);
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = self.slot(*a, grads);
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * *c;
                }
            }
            Op::Relu(a) => {
                let ga = self.slot(*a, grads);
                for i in 0..g.len() {
                    if out[i] > T::zero() {
                        ga[i] = ga[i] + g[i];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let gx = self.slot(*x, grads);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| out[at(j)] * g[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = gx[at(j)] + out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *node.value.shape().last().unwrap();
                let rows = rstd.len();
                let gd = self.data_of(*gamma);
                if self.ng(*gamma) {
                    let gg = self.slot(*gamma, grads);
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] = gg[c] + g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.ng(*beta) {
                    let gbeta = self.slot(*beta, grads);
                    for r in 0..rows {
                        for c in 0..n {
                            gbeta[c] = gbeta[c] + g[r * n + c];
                        }
                    }
                }
                if self.ng(*x) {
                    let gx = self.slot(*x, grads);
                    let nn = T::lit(n as f64);
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..n {
                            let d = g[r * n + c] * gd[c];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[r * n + c];
                        }
                        mean_d = mean_d / nn;
                        mean_dx = mean_dx / nn;
                        for c in 0..n {
                            let d = g[r * n + c] * gd[c];
                            gx[r * n + c] = gx[r * n + c]
                                + rstd[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                let total_w: usize = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape_of(p)[*axis] * inner;
                    if self.ng(p) {
                        let gp = self.slot(p, grads);
                        for o in 0..outer {
                            let src = &g[o * total_w + offset..o * total_w + offset + w];
                            add_into(&mut gp[o * w..(o + 1) * w], src);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape_of(*x).to_vec();
                let (outer, len, inner) = axis_extents(&src_shape, *axis);
                let w = node.value.shape()[*axis] * inner;
                let gx = self.slot(*x, grads);
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    add_into(&mut gx[base..base + w], &g[o * w..(o + 1) * w]);
                }
            }
            Op::Reshape(x) => add_into(self.slot(*x, grads), g),
            Op::Transpose(x) => {
                let s = node.value.shape();
                // output is [.., c, r] for an input [.., r, c]
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c).max(1);
                let gx = self.slot(*x, grads);
                for bi in 0..batch {
                    let off = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[off + i * c + j] = gx[off + i * c + j] + g[off + j * r + i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gx = self.slot(*x, grads);
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::Mean(x) => {
                let gx = self.slot(*x, grads);
                let s = g[0] / T::lit(gx.len() as f64);
                for v in gx.iter_mut() {
                    *v = *v + s;
                }
            }
            Op::SumAxis { x, axis } => {
                let src_shape = self.shape_of(*x).to_vec();
                let (outer, len, inner) = axis_extents(&src_shape, *axis);
                let gx = self.slot(*x, grads);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            let p = o * len * inner + j * inner + i;
                            gx[p] = gx[p] + g[o * inner + i];
                        }
                    }
                }
            }
            Op::Embedding { table, codes, keep } => {
                let d = self.shape_of(*table)[1];
                let gt = self.slot(*table, grads);
                for (p, (&c, &k)) in codes.iter().zip(keep).enumerate() {
                    if k {
                        let c = c as usize;
                        add_into(&mut gt[c * d..(c + 1) * d], &g[p * d..(p + 1) * d]);
                    }
                }
            }
            Op::WeightedPool { x, weights } => {
                let s = self.shape_of(*x).to_vec();
                let (b, t, h) = (s[0], s[1], s[2]);
                let gx = self.slot(*x, grads);
                for bi in 0..b {
                    for ti in 0..t {
                        let w = weights[bi * t + ti];
                        if w == T::zero() {
                            continue;
                        }
                        let base = (bi * t + ti) * h;
                        for c in 0..h {
                            gx[base + c] = gx[base + c] + w * g[bi * h + c];
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let gx = self.slot(*x, grads);
                for (o, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        gx[src] = gx[src] + g[o];
                    }
                }
            }
            Op::SquaredError {
                pred,
                target,
                weight,
            } => {
                let pd = self.data_of(*pred);
                let gp = self.slot(*pred, grads);
                let two = T::lit(2.0);
                for i in 0..gp.len() {
                    if weight[i] != T::zero() {
                        gp[i] = gp[i] + g[0] * two * weight[i] * (pd[i] - target[i]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weight,
                probs,
            } => {
                let c = *self.shape_of(*logits).last().unwrap();
                let gl = self.slot(*logits, grads);
                for (r, (&y, &w)) in targets.iter().zip(weight).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let s = g[0] * w;
                    for j in 0..c {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        gl[r * c + j] = gl[r * c + j] + s * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                weight,
            } => {
                let zd = self.data_of(*logits);
                let gl = self.slot(*logits, grads);
                for i in 0..gl.len() {
                    let p = T::one() / (T::one() + (-zd[i]).exp());
                    gl[i] = gl[i] + g[0] * weight[i] * (p - targets[i]);
                }
            }
        }
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> &'g mut [T] {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
