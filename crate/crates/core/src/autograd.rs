//! A small reverse-mode tape over dense matrices.
//!
//! Every forward op pushes a node holding its output value plus whatever it
//! needs for the backward pass. Parameters are referenced from a borrowed
//! [`ParamStore`] rather than copied. The op set is the minimum a
//! post-norm transformer with set-prediction losses needs; attention and layer
//! norm are fused so their backward passes stay cheap.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix, View, ViewMut};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { a: Var, s: T },
    Relu { a: Var },
    Sigmoid { a: Var },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, idx: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    SumSquares { a: Var },
    WeightedSum { parts: Vec<(Var, T)> },
    SmoothedCrossEntropy { logits: Var, targets: Vec<usize>, eps: T, probs: Vec<T> },
    BinaryLogLoss { p: Var, positive: Vec<usize>, negative: Vec<usize>, clamp: T },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Matrix<T>>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated once.
#[derive(Debug)]
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data()[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x * w + b` with `w` shaped `in x out` and `b` shaped `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        gemm(T::one(), xv.view(), wv.view(), T::zero(), out.view_mut());
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols()), "bias shape");
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o = *o + *bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Op::Linear { x, w, b }, out, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b }, out, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, out, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x - *y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a, b }, out, needs)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(Op::Scale { a, s }, out, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let needs = self.needs(a);
        self.push(Op::Relu { a }, out, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let needs = self.needs(a);
        self.push(Op::Sigmoid { a }, out, needs)
    }

    /// Row-wise layer normalization with affine `g` and `b` (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(g), self.value(b));
        let (n, d) = xv.shape();
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).expect("width");
        let mut out = Matrix::zeros(n, d);
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            let o = out.row_mut(r);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                o[c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let needs = self.needs(x) || self.needs(g) || self.needs(b);
        self.push(Op::LayerNorm { x, g, b, xhat, inv_std }, out, needs)
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`, `v`.
    ///
    /// With `causal`, query row `i` only sees key rows `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.shape();
        let tk = kv.rows();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.shape(), (tk, d));
        assert!(heads > 0 && d % heads == 0, "width must divide into heads");
        if causal {
            assert_eq!(tq, tk, "causal attention needs square scores");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = Matrix::zeros(tq, d);
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                scale,
                qv.view().cols(h * dh, dh),
                kv.view().cols(h * dh, dh).t(),
                T::zero(),
                ViewMut::new(p, tq, tk),
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let visible = if causal { i + 1 } else { tk };
                softmax_in_place(&mut row[..visible]);
                for x in &mut row[visible..] {
                    *x = T::zero();
                }
            }
            gemm(
                T::one(),
                View::new(p, tq, tk),
                vv.view().cols(h * dh, dh),
                T::zero(),
                out.view_mut().cols(h * dh, dh),
            );
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::Attention { q, k, v, heads, probs }, out, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows { parts: parts.to_vec() }, out, needs)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        let needs = self.needs(a);
        self.push(Op::GatherRows { a, idx: idx.to_vec() }, out, needs)
    }

    /// Multiplies elementwise by a precomputed mask (entries `0` or `1/(1-rate)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<T>) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.len());
        let data = av.data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        let needs = self.needs(a);
        self.push(Op::Dropout { a, mask }, out, needs)
    }

    /// Sum of squared entries, as a `1 x 1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x * x).sum::<T>();
        let needs = self.needs(a);
        self.push(Op::SumSquares { a }, Matrix::filled(1, 1, s), needs)
    }

    /// `sum_i c_i * a_i` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, parts: &[(Var, T)]) -> Var {
        let s = parts.iter().map(|&(v, c)| self.scalar(v) * c).sum::<T>();
        let needs = parts.iter().any(|&(v, _)| self.needs(v));
        self.push(Op::WeightedSum { parts: parts.to_vec() }, Matrix::filled(1, 1, s), needs)
    }

    /// Summed label-smoothed cross entropy of `logits` rows against `targets`.
    ///
    /// The smoothed target is `(1 - eps) * onehot + eps / V`.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[usize], eps: T) -> Var {
        let lv = self.value(logits);
        let (n, vocab) = lv.shape();
        assert_eq!(n, targets.len(), "one target per logit row");
        let vn = T::from_usize(vocab).expect("vocab");
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < vocab, "target out of range");
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for (c, x) in row.iter_mut().enumerate() {
                let logp = *x - lse;
                let q = eps / vn + if c == t { T::one() - eps } else { T::zero() };
                loss = loss - q * logp;
                *x = logp.exp();
            }
        }
        let needs = self.needs(logits);
        self.push(
            Op::SmoothedCrossEntropy { logits, targets: targets.to_vec(), eps, probs },
            Matrix::filled(1, 1, loss),
            needs,
        )
    }

    /// `-sum_{i in positive} log p_i - sum_{i in negative} log(1 - p_i)` with
    /// probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn binary_log_loss(&mut self, p: Var, positive: &[usize], negative: &[usize], clamp: T) -> Var {
        let pv = self.value(p);
        let lo = clamp;
        let hi = T::one() - clamp;
        let clip = |x: T| x.max(lo).min(hi);
        let mut loss = T::zero();
        for &i in positive {
            loss = loss - clip(pv.data()[i]).ln();
        }
        for &i in negative {
            loss = loss - (T::one() - clip(pv.data()[i])).ln();
        }
        let needs = self.needs(p);
        self.push(
            Op::BinaryLogLoss { p, positive: positive.to_vec(), negative: negative.to_vec(), clamp },
            Matrix::filled(1, 1, loss),
            needs,
        )
    }

    /// Back-propagates from the `1 x 1` node `loss`, adding `scale * dloss/dparam`
    /// into `out`.
    pub fn backward_into(&self, loss: Var, scale: T, out: &mut Gradients<T>) {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, scale));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, out);
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>], out: &mut Gradients<T>) {
        let acc = |grads: &mut [Option<Matrix<T>>], v: Var, m: Matrix<T>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.accumulate(*id, g, T::one()),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    gemm(T::one(), g.view(), wv.view().t(), T::zero(), dx.view_mut());
                    acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    gemm(T::one(), xv.view().t(), g.view(), T::zero(), dw.view_mut());
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d = *d + *x;
                            }
                        }
                        acc(grads, *b, db);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(T::one(), g.view(), bv.view().t(), T::zero(), da.view_mut());
                    acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(T::one(), av.view().t(), g.view(), T::zero(), db.view_mut());
                    acc(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Scale { a, s } => acc(grads, *a, g.map(|x| x * *s)),
            Op::Relu { a } => {
                let av = self.value(*a);
                let data = g.data().iter().zip(av.data()).map(|(d, x)| if *x > T::zero() { *d } else { T::zero() }).collect();
                acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Sigmoid { a } => {
                let y = node.value.as_ref().expect("sigmoid value");
                let data = g.data().iter().zip(y.data()).map(|(d, s)| *d * *s * (T::one() - *s)).collect();
                acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm { x, g: gamma, b: beta, xhat, inv_std } => {
                let (n, d) = g.shape();
                let gv = self.value(*gamma);
                let dn = T::from_usize(d).expect("width");
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(n, d);
                    let mut gh = vec![T::zero(); d];
                    for r in 0..n {
                        let dy = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for c in 0..d {
                            gh[c] = dy[c] * gv.data()[c];
                            mean_gh = mean_gh + gh[c];
                            mean_ghx = mean_ghx + gh[c] * xh[c];
                        }
                        mean_gh = mean_gh / dn;
                        mean_ghx = mean_ghx / dn;
                        let o = dx.row_mut(r);
                        for c in 0..d {
                            o[c] = inv_std[r] * (gh[c] - mean_gh - xh[c] * mean_ghx);
                        }
                    }
                    acc(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    let mut dg = Matrix::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            let v = dg.data()[c] + g.get(r, c) * xhat[r * d + c];
                            dg.data_mut()[c] = v;
                        }
                    }
                    acc(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = Matrix::zeros(1, d);
                    for r in 0..n {
                        for (o, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + *x;
                        }
                    }
                    acc(grads, *beta, db);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, d) = qv.shape();
                let tk = kv.rows();
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
                let mut dq = Matrix::zeros(tq, d);
                let mut dk = Matrix::zeros(tk, d);
                let mut dv = Matrix::zeros(tk, d);
                let mut ds = vec![T::zero(); tq * tk];
                for h in 0..*heads {
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    let go = g.view().cols(h * dh, dh);
                    gemm(T::one(), View::new(p, tq, tk).t(), go, T::zero(), dv.view_mut().cols(h * dh, dh));
                    gemm(T::one(), go, vv.view().cols(h * dh, dh).t(), T::zero(), ViewMut::new(&mut ds, tq, tk));
                    for i in 0..tq {
                        let pr = &p[i * tk..(i + 1) * tk];
                        let dr = &mut ds[i * tk..(i + 1) * tk];
                        let dot = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum::<T>();
                        for (x, pp) in dr.iter_mut().zip(pr) {
                            *x = *pp * (*x - dot);
                        }
                    }
                    gemm(scale, View::new(&ds, tq, tk), kv.view().cols(h * dh, dh), T::zero(), dq.view_mut().cols(h * dh, dh));
                    gemm(scale, View::new(&ds, tq, tk).t(), qv.view().cols(h * dh, dh), T::zero(), dk.view_mut().cols(h * dh, dh));
                }
                if self.needs(*q) {
                    acc(grads, *q, dq);
                }
                if self.needs(*k) {
                    acc(grads, *k, dk);
                }
                if self.needs(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let idx: Vec<usize> = (start..start + rows).collect();
                        acc(grads, p, g.select_rows(&idx));
                    }
                    start += rows;
                }
            }
            Op::GatherRows { a, idx } => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o = *o + *x;
                    }
                }
                acc(grads, *a, da);
            }
            Op::Dropout { a, mask } => {
                let data = g.data().iter().zip(mask).map(|(d, m)| *d * *m).collect();
                acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::SumSquares { a } => {
                let two_g = g.data()[0] + g.data()[0];
                acc(grads, *a, self.value(*a).map(|x| x * two_g));
            }
            Op::WeightedSum { parts } => {
                let gs = g.data()[0];
                for &(v, c) in parts {
                    if self.needs(v) {
                        acc(grads, v, Matrix::filled(1, 1, gs * c));
                    }
                }
            }
            Op::SmoothedCrossEntropy { logits, targets, eps, probs } => {
                let (n, vocab) = self.value(*logits).shape();
                let vn = T::from_usize(vocab).expect("vocab");
                let gs = g.data()[0];
                let mut dl = Matrix::from_vec(n, vocab, probs.clone());
                for (r, &t) in targets.iter().enumerate() {
                    for (c, x) in dl.row_mut(r).iter_mut().enumerate() {
                        let q = *eps / vn + if c == t { T::one() - *eps } else { T::zero() };
                        *x = (*x - q) * gs;
                    }
                }
                acc(grads, *logits, dl);
            }
            Op::BinaryLogLoss { p, positive, negative, clamp } => {
                let pv = self.value(*p);
                let gs = g.data()[0];
                let lo = *clamp;
                let hi = T::one() - *clamp;
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                for &i in positive {
                    let x = pv.data()[i];
                    if x > lo && x < hi {
                        dp.data_mut()[i] = dp.data()[i] - gs / x;
                    }
                }
                for &i in negative {
                    let x = pv.data()[i];
                    if x > lo && x < hi {
                        dp.data_mut()[i] = dp.data()[i] + gs / (T::one() - x);
                    }
                }
                acc(grads, *p, dp);
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-softmax of a slice into a fresh vector.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}
