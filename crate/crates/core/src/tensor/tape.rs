use super::kernels::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: R },
    Gelu { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Softmax { a: Var, outer: usize, dim: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<R>, rstd: Vec<R> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<R>, count: usize },
    Reshape { a: Var },
    /// out[i] = in[map[i]]; covers permutes and row gathers.
    Gather { a: Var, map: Vec<usize> },
    Concat { parts: Vec<Var> },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
    #[cfg(debug_assertions)]
    finite: bool,
}

/// Ordered record of forward operations. Backward replays it in exact
/// reverse order; gradients land in the `grad` buffers of leaf tensors.
#[derive(Debug)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn gelu<R: Real>(x: R) -> (R, R) {
    let c = R::of((2.0 / std::f64::consts::PI).sqrt());
    let k = R::of(0.044715);
    let half = R::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (R::one() + t);
    let dy = half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + R::of(3.0) * k * x * x);
    (y, dy)
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        #[cfg(debug_assertions)]
        let finite = {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
            let out_finite = value.is_finite();
            debug_assert!(
                !inputs_finite || out_finite || matches!(op, Op::Leaf),
                "non-finite output from finite inputs in {op:?}"
            );
            out_finite && inputs_finite
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            #[cfg(debug_assertions)]
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&self, shape: &[usize], data: Vec<R>) -> Tensor<R> {
        Tensor::new(shape, data).expect("internal shape bookkeeping")
    }

    pub fn leaf(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[R] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated into a leaf by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![R::zero(); m * n];
        matmul_acc(self.data(a), self.data(b), &mut c, m, k, n);
        let t = self.make(&[m, n], c);
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over the leading axis: `[B,M,K]·[B,K,N]`, or
    /// `[B,M,K]·[B,N,K]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim(format!("bmm {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut c = vec![R::zero(); bs * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bs {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let ci = &mut c[i * m * n..(i + 1) * m * n];
            if trans_b {
                matmul_bt_acc(ai, bi, ci, m, k, n);
            } else {
                matmul_acc(ai, bi, ci, m, k, n);
            }
        }
        let t = self.make(&[bs, m, n], c);
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, name: &str) -> Result<Vec<R>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcast(sa, sb) {
            return Err(Error::dim(format!("{name}: cannot broadcast {sb:?} onto {sa:?}")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let nb = bd.len();
        if nb == 0 {
            return Ok(Vec::new());
        }
        Ok(ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect())
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, |x, y| x + y, "add")?;
        let t = self.make(&self.shape(a).to_vec(), d);
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, |x, y| x - y, "sub")?;
        let t = self.make(&self.shape(a).to_vec(), d);
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, |x, y| x * y, "mul")?;
        let t = self.make(&self.shape(a).to_vec(), d);
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = R::of(factor);
        let d = self.data(a).iter().map(|&x| x * f).collect();
        let t = self.make(&self.shape(a).to_vec(), d);
        self.push(t, Op::Scale { a, factor: f }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let d = self.data(a).iter().map(|&x| gelu(x).0).collect();
        let t = self.make(&self.shape(a).to_vec(), d);
        self.push(t, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let d = self.data(a).iter().map(|&x| x.max(R::zero())).collect();
        let t = self.make(&self.shape(a).to_vec(), d);
        self.push(t, Op::Relu { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let d = self.data(a).iter().map(|&x| x.exp()).collect();
        let t = self.make(&self.shape(a).to_vec(), d);
        self.push(t, Op::Exp { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim(format!("softmax axis {axis} on {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(a);
        let mut y = vec![R::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut mx = R::neg_infinity();
                for d in 0..dim {
                    mx = mx.max(x[base + d * inner]);
                }
                let mut sum = R::zero();
                for d in 0..dim {
                    let e = (x[base + d * inner] - mx).exp();
                    y[base + d * inner] = e;
                    sum = sum + e;
                }
                let inv = R::one() / sum;
                for d in 0..dim {
                    y[base + d * inner] = y[base + d * inner] * inv;
                }
            }
        }
        let t = self.make(&shape, y);
        Ok(self.push(t, Op::Softmax { a, outer, dim, inner }, &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm on scalar"))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm x {shape:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).numel() / d;
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let eps = R::of(eps);
        let inv_d = R::one() / R::of(d as f64);
        let mut y = vec![R::zero(); xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let rstd = R::one() / (var + eps).sqrt();
            for j in 0..d {
                y[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = self.make(&shape, y);
        Ok(self.push(
            t,
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            &[x, gamma, beta],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("embedding table must be 2-D, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = self.make(&[ids.len(), d], out);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean negative log-likelihood over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.len() != mask.len() {
            return Err(Error::dim(format!(
                "cross_entropy logits {shape:?}, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let (t_len, v) = (shape[0], shape[1]);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("every position is masked out".into()));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        let x = self.data(logits);
        let mut probs = vec![R::zero(); t_len * v];
        let mut total = R::zero();
        for t in 0..t_len {
            if !mask[t] {
                continue;
            }
            let row = &x[t * v..(t + 1) * v];
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut sum = R::zero();
            for (p, &l) in probs[t * v..(t + 1) * v].iter_mut().zip(row) {
                *p = (l - mx).exp();
                sum = sum + *p;
            }
            for p in &mut probs[t * v..(t + 1) * v] {
                *p = *p / sum;
            }
            total = total + (sum.ln() + mx - row[targets[t]]);
        }
        let loss = total / R::of(count as f64);
        let t = self.make(&[1], vec![loss]);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            &[logits],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let t = self.make(shape, self.data(a).to_vec());
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n: usize = shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(self.gather_map(a, &out_shape, map))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Selects rows along axis 0 (repeats allowed); gradient scatter-adds.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.first().ok_or_else(|| Error::dim("gather_rows on scalar"))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim(format!("row {bad} out of range for {shape:?}")));
        }
        let width: usize = shape[1..].iter().product();
        let mut map = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            map.extend(r * width..(r + 1) * width);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        Ok(self.gather_map(a, &out_shape, map))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &rows)
    }

    fn gather_map(&mut self, a: Var, shape: &[usize], map: Vec<usize>) -> Var {
        let src = self.data(a);
        let d = map.iter().map(|&i| src[i]).collect();
        let t = self.make(shape, d);
        self.push(t, Op::Gather { a, map }, &[a])
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim(format!("concat {s:?} with trailing {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(&tail);
        let t = self.make(&shape, data);
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let t = self.make(&[1], vec![s]);
        self.push(t, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.data(a).iter().copied().sum::<R>() / R::of(n as f64);
        let t = self.make(&[1], vec![s]);
        self.push(t, Op::Mean { a }, &[a])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<R>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![R::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let needs = |v: &Var| nodes[v.0].needs_grad;
            let mut acc = |v: Var, f: &dyn Fn(&mut [R])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let buf = adj[v.0].get_or_insert_with(|| vec![R::zero(); nodes[v.0].value.numel()]);
                f(buf);
            };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(*a, &|da| matmul_bt_acc(&g, bd, da, m, n, k));
                    acc(*b, &|db| matmul_at_acc(ad, &g, db, m, k, n));
                }
                Op::Bmm { a, b, trans_b } => {
                    let sa = nodes[a.0].value.shape();
                    let (bs, m, k) = (sa[0], sa[1], sa[2]);
                    let n = nodes[i].value.shape()[2];
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let tb = *trans_b;
                    acc(*a, &|da| {
                        for j in 0..bs {
                            let gj = &g[j * m * n..(j + 1) * m * n];
                            let bj = &bd[j * k * n..(j + 1) * k * n];
                            let daj = &mut da[j * m * k..(j + 1) * m * k];
                            if tb {
                                matmul_acc(gj, bj, daj, m, n, k);
                            } else {
                                matmul_bt_acc(gj, bj, daj, m, n, k);
                            }
                        }
                    });
                    acc(*b, &|db| {
                        for j in 0..bs {
                            let gj = &g[j * m * n..(j + 1) * m * n];
                            let aj = &ad[j * m * k..(j + 1) * m * k];
                            let dbj = &mut db[j * k * n..(j + 1) * k * n];
                            if tb {
                                matmul_at_acc(gj, aj, dbj, m, n, k);
                            } else {
                                matmul_at_acc(aj, gj, dbj, m, k, n);
                            }
                        }
                    });
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -R::one() } else { R::one() };
                    acc(*a, &|da| da.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x));
                    let nb = nodes[b.0].value.numel();
                    acc(*b, &|db| {
                        for (j, &x) in g.iter().enumerate() {
                            db[j % nb] = db[j % nb] + sign * x;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let nb = bd.len();
                    acc(*a, &|da| {
                        for (j, d) in da.iter_mut().enumerate() {
                            *d = *d + g[j] * bd[j % nb];
                        }
                    });
                    acc(*b, &|db| {
                        for (j, &x) in g.iter().enumerate() {
                            db[j % nb] = db[j % nb] + x * ad[j];
                        }
                    });
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    acc(*a, &|da| da.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x * f));
                }
                Op::Gelu { a } => {
                    let x = nodes[a.0].value.data();
                    acc(*a, &|da| {
                        for j in 0..da.len() {
                            da[j] = da[j] + g[j] * gelu(x[j]).1;
                        }
                    });
                }
                Op::Relu { a } => {
                    let x = nodes[a.0].value.data();
                    acc(*a, &|da| {
                        for j in 0..da.len() {
                            if x[j] > R::zero() {
                                da[j] = da[j] + g[j];
                            }
                        }
                    });
                }
                Op::Exp { a } => {
                    let y = nodes[i].value.data();
                    acc(*a, &|da| {
                        for j in 0..da.len() {
                            da[j] = da[j] + g[j] * y[j];
                        }
                    });
                }
                Op::Softmax { a, outer, dim, inner } => {
                    let y = nodes[i].value.data();
                    let (outer, dim, inner) = (*outer, *dim, *inner);
                    acc(*a, &|da| {
                        for o in 0..outer {
                            for q in 0..inner {
                                let base = o * dim * inner + q;
                                let mut s = R::zero();
                                for d in 0..dim {
                                    let p = base + d * inner;
                                    s = s + g[p] * y[p];
                                }
                                for d in 0..dim {
                                    let p = base + d * inner;
                                    da[p] = da[p] + y[p] * (g[p] - s);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let xd = nodes[x.0].value.data();
                    let gd = nodes[gamma.0].value.data();
                    let d = gd.len();
                    let rows = mean.len();
                    let xhat = |r: usize, j: usize| (xd[r * d + j] - mean[r]) * rstd[r];
                    if needs(x) {
                        acc(*x, &|dx| {
                            let inv_d = R::one() / R::of(d as f64);
                            for r in 0..rows {
                                let mut m1 = R::zero();
                                let mut m2 = R::zero();
                                for j in 0..d {
                                    let dxh = g[r * d + j] * gd[j];
                                    m1 = m1 + dxh;
                                    m2 = m2 + dxh * xhat(r, j);
                                }
                                m1 = m1 * inv_d;
                                m2 = m2 * inv_d;
                                for j in 0..d {
                                    let dxh = g[r * d + j] * gd[j];
                                    dx[r * d + j] = dx[r * d + j] + rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                                }
                            }
                        });
                    }
                    acc(*gamma, &|dg| {
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] = dg[j] + g[r * d + j] * xhat(r, j);
                            }
                        }
                    });
                    acc(*beta, &|db| {
                        for r in 0..rows {
                            for j in 0..d {
                                db[j] = db[j] + g[r * d + j];
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].value.shape()[1];
                    acc(*table, &|dt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, targets, mask, probs, count } => {
                    let v = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / R::of(*count as f64);
                    acc(*logits, &|dl| {
                        for (t, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                            if !m {
                                continue;
                            }
                            for j in 0..v {
                                dl[t * v + j] = dl[t * v + j] + probs[t * v + j] * scale;
                            }
                            dl[t * v + tgt] = dl[t * v + tgt] - scale;
                        }
                    });
                }
                Op::Reshape { a } => {
                    acc(*a, &|da| da.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x));
                }
                Op::Gather { a, map } => {
                    acc(*a, &|da| {
                        for (j, &src) in map.iter().enumerate() {
                            da[src] = da[src] + g[j];
                        }
                    });
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = nodes[p.0].value.numel();
                        let slice = &g[offset..offset + n];
                        acc(*p, &|dp| dp.iter_mut().zip(slice).for_each(|(d, &x)| *d = *d + x));
                        offset += n;
                    }
                }
                Op::Sum { a } => {
                    acc(*a, &|da| da.iter_mut().for_each(|d| *d = *d + g[0]));
                }
                Op::Mean { a } => {
                    let n = R::of(nodes[a.0].value.numel().max(1) as f64);
                    acc(*a, &|da| da.iter_mut().for_each(|d| *d = *d + g[0] / n));
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut tape = Tape::<f64>::new();
        let i3 = tape.constant(Tensor::eye(3));
        let b = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(i3, b).unwrap();
        assert_eq!(tape.data(c), tape.data(b));

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let o = tape.constant(Tensor::ones(&[3, 2]));
        let c = tape.matmul(z, o).unwrap();
        assert!(tape.data(c).iter().all(|&x| x == 0.0));
        assert_eq!(tape.shape(c), &[2, 2]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn add_zero_is_identity_and_broadcast_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1., -2., 3., 4.]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(x, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn gelu_fixes_origin() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1]));
        let y = tape.gelu(x);
        assert_eq!(tape.data(y)[0], 0.0);
    }

    #[test]
    fn mul_gradient_matches_central_difference() {
        let f = |a: f64, b: f64| a * b;
        let h = 1e-6;
        let fd = (f(2.0 + h, 3.0) - f(2.0 - h, 3.0)) / (2.0 * h);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0).with_requires_grad(true));
        let b = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let c = tape.mul(a, b).unwrap();
        tape.backward(c).unwrap();
        assert!((tape.grad(a).unwrap()[0] - fd).abs() < 1e-6);
        assert!((tape.grad(a).unwrap()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_fixtures() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[2.5, 2.5, 2.5]));
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.data(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((tape.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_non_last_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[3, 4, 5], 3.0, &mut rng));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.data(y);
        for o in 0..3 {
            for i in 0..5 {
                let s: f64 = (0..4).map(|k| d[o * 20 + k * 5 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_fixtures() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.data(y)[0] + 1.0).abs() < 1e-9);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-9);

        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[3], &[7.0, 7.0, 7.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]).with_requires_grad(true));
        let e = tape.embedding(table, &[0]).unwrap();
        assert_eq!(tape.data(e), &[1.0, 2.0]);
        let empty = tape.embedding(table, &[]).unwrap();
        assert_eq!(tape.shape(empty), &[0, 2]);
        assert!(matches!(tape.embedding(table, &[3]), Err(Error::Vocabulary { id: 3, size: 3 })));

        let e = tape.embedding(table, &[1, 1]).unwrap();
        let w = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.mul(e, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0., 0., 4., 6., 0., 0.]);
    }

    #[test]
    fn cross_entropy_fixtures() {
        let mut tape = Tape::<f64>::new();
        let v = 7;
        let logits = tape.constant(Tensor::zeros(&[2, v]));
        let l = tape.cross_entropy(logits, &[1, 3], &[true, true]).unwrap();
        assert!((tape.data(l)[0] - (v as f64).ln()).abs() < 1e-12);

        let mut d = vec![0.0; v];
        d[2] = 20.0;
        let logits = tape.constant(t(&[1, v], &d));
        let l = tape.cross_entropy(logits, &[2], &[true]).unwrap();
        assert!(tape.data(l)[0] < 1e-6);

        let logits = tape.constant(Tensor::zeros(&[2, v]));
        assert!(matches!(
            tape.cross_entropy(logits, &[1, 3], &[false, false]),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn cross_entropy_mask_averages_unmasked_positions() {
        // 4 positions, 3 classes; hand-computed per-position NLL.
        let rows = [[1.0, 2.0, 0.5], [0.0, 0.0, 3.0], [2.0, -1.0, 0.0], [0.3, 0.3, 0.3]];
        let targets = [1usize, 0, 0, 2];
        let nll: Vec<f64> = rows
            .iter()
            .zip(targets)
            .map(|(r, t)| {
                let lse = r.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
                lse - r[t]
            })
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t(&[4, 3], &flat).with_requires_grad(true));
        let mask = [true, false, true, false];
        let l = tape.cross_entropy(logits, &targets, &mask).unwrap();
        let want = (nll[0] + nll[2]) / 2.0;
        assert!((tape.data(l)[0] - want).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!(g[3..6].iter().chain(&g[9..12]).all(|&x| x == 0.0));
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]).with_requires_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_moves_axes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[0., 1., 2., 3., 4., 5.]));
        let y = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.data(y), &[0., 3., 1., 4., 2., 5.]);
        let z = tape.constant(Tensor::from_f64(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>()).unwrap());
        let p = tape.permute(z, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(z).at(&[1, 2, 3]));
    }
}
