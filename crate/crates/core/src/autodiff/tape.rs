use super::kernels::{gemm_nn, gemm_nt, gemm_tn, glu_row, log_sum_exp, sigmoid, softmax_in_place};
use super::{Array, AutodiffError, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(usize),
    Constant,
    Embedding {
        tables: Vec<Var>,
        lookups: Vec<(usize, usize)>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad_left: usize,
    },
    Glu(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node<T> {
    op: Op,
    value: Option<Array<T>>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter slot of a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    params: Vec<Array<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &[Array<T>]) -> Self {
        Self {
            params: params.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }

    pub fn get(&self, index: usize) -> &Array<T> {
        &self.params[index]
    }

    pub fn as_slice(&self) -> &[Array<T>] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [Array<T>] {
        &mut self.params
    }

    pub fn into_vec(self) -> Vec<Array<T>> {
        self.params
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for p in &mut self.params {
            for v in p.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params.iter().map(Array::sum_squares).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Array::all_finite)
    }
}

/// Record of executed operations over a borrowed parameter set.
///
/// Parameters are referenced by slot index and never copied onto the tape.
/// A tape is single-use: [`Tape::backward`] may be called once.
pub struct Tape<'p, T: Scalar> {
    params: &'p [Array<T>],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Array<T>]) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that evaluates values only; `backward` is rejected.
    pub fn inference(params: &'p [Array<T>]) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => &self.params[i],
            _ => node.value.as_ref().expect("non-parameter node always holds a value"),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.grad_enabled && self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Array<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if self.grad_enabled { op } else { Op::Constant };
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Variable bound to parameter slot `index`.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(value),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Row lookup `out[r] = table[ids[r]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let lookups: Vec<(usize, usize)> = ids.iter().map(|&id| (0, id)).collect();
        self.embedding_select(&[table], &lookups)
    }

    /// Row lookup from one of several equally shaped tables:
    /// `out[r] = tables[lookups[r].0][lookups[r].1]`.
    pub fn embedding_select(&mut self, tables: &[Var], lookups: &[(usize, usize)]) -> Result<Var, AutodiffError> {
        let first = self.value(tables[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(shape_err("embedding", &[&first]));
        }
        for &t in &tables[1..] {
            if self.value(t).shape() != first.as_slice() {
                return Err(shape_err("embedding", &[&first, self.value(t).shape()]));
            }
        }
        let (rows, dim) = (first[0], first[1]);
        let mut out = Array::zeros(&[lookups.len(), dim]);
        for (r, &(sel, id)) in lookups.iter().enumerate() {
            if sel >= tables.len() {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding table",
                    index: sel,
                    bound: tables.len(),
                });
            }
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.row_mut(r).copy_from_slice(self.value(tables[sel]).row(id));
        }
        Ok(self.push(
            Op::Embedding {
                tables: tables.to_vec(),
                lookups: lookups.to_vec(),
            },
            out,
            tables,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", &[av.shape(), bv.shape()]));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", &[av.shape(), bv.shape()]));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Array::from_vec(av.shape(), data)?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * f).collect();
        let out = Array::from_vec(av.shape(), data).expect("same shape");
        self.push(Op::Scale(a, factor), out, &[a])
    }

    /// `x[n×i] · w[i×o] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(shape_err("linear", &[xv.shape(), wv.shape()]));
        }
        let (n, i, o) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Array::zeros(&[n, o]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(shape_err("linear bias", &[wv.shape(), bv.shape()]));
            }
            for r in 0..n {
                out.row_mut(r).copy_from_slice(bv.data());
            }
        }
        gemm_nn(xv.data(), wv.data(), out.data_mut(), n, i, o);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Op::Linear { x, w, b }, out, &inputs))
    }

    /// 1-D convolution over the time axis of `x[L×i]` with kernel `w[k×i×o]`,
    /// zero padding `pad_left` / `pad_right`. Output length is
    /// `L + pad_left + pad_right − k + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad_left: usize, pad_right: usize) -> Result<Var, AutodiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 2 || wv.shape().len() != 3 || wv.shape()[1] != xv.cols() || bv.shape() != [wv.shape()[2]] {
            return Err(shape_err("conv1d", &[xv.shape(), wv.shape(), bv.shape()]));
        }
        let (len, cin, k, cout) = (xv.rows(), xv.cols(), wv.shape()[0], wv.shape()[2]);
        if len + pad_left + pad_right < k {
            return Err(shape_err("conv1d", &[xv.shape(), wv.shape()]));
        }
        let out_len = len + pad_left + pad_right + 1 - k;
        let mut out = Array::zeros(&[out_len, cout]);
        for t in 0..out_len {
            out.row_mut(t).copy_from_slice(bv.data());
        }
        for tap in 0..k {
            if let Some((t0, r0, n)) = conv_block(tap, pad_left, len, out_len) {
                let w_tap = &wv.data()[tap * cin * cout..(tap + 1) * cin * cout];
                gemm_nn(
                    &xv.data()[r0 * cin..(r0 + n) * cin],
                    w_tap,
                    &mut out.data_mut()[t0 * cout..(t0 + n) * cout],
                    n,
                    cin,
                    cout,
                );
            }
        }
        Ok(self.push(Op::Conv1d { x, w, b, pad_left }, out, &[x, w, b]))
    }

    /// Gated linear unit over the last axis: `x[.., :d] · σ(x[.., d:])`.
    pub fn glu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || !xv.cols().is_multiple_of(2) {
            return Err(shape_err("glu", &[xv.shape()]));
        }
        let (n, d) = (xv.rows(), xv.cols() / 2);
        let mut out = Array::zeros(&[n, d]);
        for r in 0..n {
            glu_row(xv.row(r), out.row_mut(r));
        }
        Ok(self.push(Op::Glu(x), out, &[x]))
    }

    /// `a[n×k] · b[k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", &[av.shape(), bv.shape()]));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = Array::zeros(&[n, m]);
        gemm_nn(av.data(), bv.data(), out.data_mut(), n, k, m);
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// `a[n×k] · b[m×k]ᵀ` (pairwise dot products of rows).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", &[av.shape(), bv.shape()]));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        let mut out = Array::zeros(&[n, m]);
        gemm_nt(av.data(), bv.data(), out.data_mut(), n, k, m);
        Ok(self.push(Op::MatMulNt(a, b), out, &[a, b]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.shape().is_empty() || xv.cols() == 0 {
            return Err(shape_err("softmax", &[xv.shape()]));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.push(Op::Softmax(x), out, &[x]))
    }

    /// Summed negative log-likelihood `−Σ_t log softmax(logits[t])[targets[t]]`.
    /// Rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != targets.len() {
            return Err(shape_err("cross_entropy", &[lv.shape(), &[targets.len()]]));
        }
        let v = lv.cols();
        let mut total = 0.0f64;
        let mut probs = Vec::with_capacity(if self.grad_enabled { lv.len() } else { 0 });
        for (t, &y) in targets.iter().enumerate() {
            let row = lv.row(t);
            let lse = log_sum_exp(row);
            if self.grad_enabled {
                probs.extend(row.iter().map(|&z| (z - lse).exp().as_f64()));
            }
            if Some(y) == ignore {
                continue;
            }
            if y >= v {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: y,
                    bound: v,
                });
            }
            total += (lse - row[y]).as_f64();
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
            },
            Array::scalar(T::of(total)),
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Array::scalar(total), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per parameter
    /// slot; slots not reachable from `loss` get exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if !self.grad_enabled {
            return Err(AutodiffError::GradDisabled);
        }
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;

        let mut result = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Array<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::from_vec(self.value(loss).shape(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Param(i) => result.params[*i].add_assign(&g),
                Op::Constant => {}
                Op::Embedding { tables, lookups } => {
                    for (ti, &t) in tables.iter().enumerate() {
                        if !self.requires(t) {
                            continue;
                        }
                        let gt = self.grad_slot(&mut grads, t);
                        for (r, &(sel, id)) in lookups.iter().enumerate() {
                            if sel == ti {
                                for (d, &s) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        self.grad_slot(&mut grads, a).add_assign(&g);
                    }
                    if self.requires(b) {
                        self.grad_slot(&mut grads, b).add_assign(&g);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let other = self.value(b).data();
                        let ga = self.grad_slot(&mut grads, a);
                        for ((d, &s), &o) in ga.data_mut().iter_mut().zip(g.data()).zip(other) {
                            *d += s * o;
                        }
                    }
                    if self.requires(b) {
                        let other = self.value(a).data();
                        let gb = self.grad_slot(&mut grads, b);
                        for ((d, &s), &o) in gb.data_mut().iter_mut().zip(g.data()).zip(other) {
                            *d += s * o;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let (a, f) = (*a, T::of(*f));
                    let ga = self.grad_slot(&mut grads, a);
                    for (d, &s) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += s * f;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (n, i, o) = (self.value(x).rows(), self.value(x).cols(), self.value(w).cols());
                    if self.requires(x) {
                        let wv = self.value(w).data();
                        let gx = self.grad_slot(&mut grads, x);
                        gemm_nt(g.data(), wv, gx.data_mut(), n, o, i);
                    }
                    if self.requires(w) {
                        let xv = self.value(x).data();
                        let gw = self.grad_slot(&mut grads, w);
                        gemm_tn(xv, g.data(), gw.data_mut(), i, n, o);
                    }
                    if let Some(b) = b.filter(|&b| self.requires(b)) {
                        let gb = self.grad_slot(&mut grads, b);
                        for r in 0..n {
                            for (d, &s) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Conv1d { x, w, b, pad_left } => {
                    let (x, w, b, pad_left) = (*x, *w, *b, *pad_left);
                    let (len, cin) = (self.value(x).rows(), self.value(x).cols());
                    let (k, cout) = (self.value(w).shape()[0], self.value(w).shape()[2]);
                    let out_len = g.rows();
                    if self.requires(x) {
                        let wv = self.value(w).data();
                        let gx = self.grad_slot(&mut grads, x);
                        for tap in 0..k {
                            if let Some((t0, r0, n)) = conv_block(tap, pad_left, len, out_len) {
                                gemm_nt(
                                    &g.data()[t0 * cout..(t0 + n) * cout],
                                    &wv[tap * cin * cout..(tap + 1) * cin * cout],
                                    &mut gx.data_mut()[r0 * cin..(r0 + n) * cin],
                                    n,
                                    cout,
                                    cin,
                                );
                            }
                        }
                    }
                    if self.requires(w) {
                        let xv = self.value(x).data();
                        let gw = self.grad_slot(&mut grads, w);
                        for tap in 0..k {
                            if let Some((t0, r0, n)) = conv_block(tap, pad_left, len, out_len) {
                                gemm_tn(
                                    &xv[r0 * cin..(r0 + n) * cin],
                                    &g.data()[t0 * cout..(t0 + n) * cout],
                                    &mut gw.data_mut()[tap * cin * cout..(tap + 1) * cin * cout],
                                    cin,
                                    n,
                                    cout,
                                );
                            }
                        }
                    }
                    if self.requires(b) {
                        let gb = self.grad_slot(&mut grads, b);
                        for r in 0..out_len {
                            for (d, &s) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Glu(x) => {
                    let x = *x;
                    let xv = self.value(x);
                    let d = g.cols();
                    let gx = self.grad_slot(&mut grads, x);
                    for r in 0..g.rows() {
                        let (row, gr) = (xv.row(r), g.row(r));
                        let out = gx.row_mut(r);
                        for c in 0..d {
                            let s = sigmoid(row[d + c]);
                            out[c] += gr[c] * s;
                            out[d + c] += gr[c] * row[c] * s * (T::one() - s);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n, k, m) = (self.value(a).rows(), self.value(a).cols(), self.value(b).cols());
                    if self.requires(a) {
                        let bv = self.value(b).data();
                        let ga = self.grad_slot(&mut grads, a);
                        gemm_nt(g.data(), bv, ga.data_mut(), n, m, k);
                    }
                    if self.requires(b) {
                        let av = self.value(a).data();
                        let gb = self.grad_slot(&mut grads, b);
                        gemm_tn(av, g.data(), gb.data_mut(), k, n, m);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n, k, m) = (self.value(a).rows(), self.value(a).cols(), self.value(b).rows());
                    if self.requires(a) {
                        let bv = self.value(b).data();
                        let ga = self.grad_slot(&mut grads, a);
                        gemm_nn(g.data(), bv, ga.data_mut(), n, m, k);
                    }
                    if self.requires(b) {
                        let av = self.value(a).data();
                        let gb = self.grad_slot(&mut grads, b);
                        gemm_tn(g.data(), av, gb.data_mut(), m, n, k);
                    }
                }
                Op::Softmax(x) => {
                    let x = *x;
                    let y = self.nodes[idx].value.as_ref().expect("softmax output");
                    let gx = self.grad_slot(&mut grads, x);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - inner);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                } => {
                    let logits = *logits;
                    let scale = g.item();
                    let v = self.value(logits).cols();
                    let ignore = *ignore;
                    let gl = self.grad_slot(&mut grads, logits);
                    for (t, &y) in targets.iter().enumerate() {
                        if Some(y) == ignore {
                            continue;
                        }
                        let row = gl.row_mut(t);
                        for (c, d) in row.iter_mut().enumerate() {
                            let p = T::of(probs[t * v + c]);
                            let onehot = if c == y { T::one() } else { T::zero() };
                            *d += scale * (p - onehot);
                        }
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    let s = g.item();
                    let gx = self.grad_slot(&mut grads, x);
                    for d in gx.data_mut() {
                        *d += s;
                    }
                }
            }
        }
        Ok(result)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Array<T>>], v: Var) -> &'g mut Array<T> {
        grads[v.0].get_or_insert_with(|| Array::zeros(self.value(v).shape()))
    }
}

/// For one kernel tap, the contiguous block of output rows `[t0, t0+n)` whose
/// input rows `[r0, r0+n)` fall inside the unpadded sequence.
fn conv_block(tap: usize, pad_left: usize, len: usize, out_len: usize) -> Option<(usize, usize, usize)> {
    // input row = t + tap - pad_left
    let t0 = pad_left.saturating_sub(tap);
    let r0 = t0 + tap - pad_left;
    if r0 >= len || t0 >= out_len {
        return None;
    }
    let n = (len - r0).min(out_len - t0);
    Some((t0, r0, n))
}
