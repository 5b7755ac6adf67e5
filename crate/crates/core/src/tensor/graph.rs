use super::{Result, Scalar, Tensor, TensorError};

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
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax { a: Var, along_rows: bool },
    MaskedSoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    L2Distances { x: Var, c: Var },
    Sum(Var),
    Pick { a: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of operations.
///
/// Nodes are recorded in evaluation order, so the tape is topologically
/// sorted by construction and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix<T: Scalar>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::new(vec![rows, cols], data).expect("op output has consistent shape")
}

fn softmax_lane<T: Scalar>(src: &[T], dst: &mut [T], start: usize, len: usize, stride: usize) {
    let mut max = T::neg_infinity();
    for i in 0..len {
        max = max.max(src[start + i * stride]);
    }
    let mut sum = T::zero();
    for i in 0..len {
        let e = (src[start + i * stride] - max).exp();
        dst[start + i * stride] = e;
        sum += e;
    }
    for i in 0..len {
        dst[start + i * stride] /= sum;
    }
}

fn acc<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Matrix product `op(a) * op(b)`, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = dims(av);
        let (rb, cb) = dims(bv);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let a_str = if ta { (1, ca) } else { (ca, 1) };
        let b_str = if tb { (1, cb) } else { (cb, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            a_str,
            bv.data(),
            b_str,
            T::zero(),
            &mut out,
            (n, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(matrix(m, n, out), Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x * w^T + bias`: the usual linear layer with `w` stored `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w, false, true)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if dims(av) != dims(bv) {
            return Err(shape_err("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = av.cols();
        if bv.numel() != cols {
            return Err(shape_err("add_row", av, bv));
        }
        let b = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % cols])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if dims(av) != dims(bv) {
            return Err(shape_err("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.max(T::zero())).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Softmax along `axis` (the last axis for vectors; 0 or 1 for matrices),
    /// with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let along_rows = match (av.shape().len(), axis) {
            (1, 0) | (2, 1) => true,
            (2, 0) => false,
            _ => {
                return Err(TensorError::Contract {
                    op: "softmax",
                    msg: format!("axis {axis} invalid for shape {:?}", av.shape()),
                })
            }
        };
        let (r, c) = dims(av);
        let mut out = vec![T::zero(); r * c];
        if along_rows {
            for i in 0..r {
                softmax_lane(av.data(), &mut out, i * c, c, 1);
            }
        } else {
            for j in 0..c {
                softmax_lane(av.data(), &mut out, j, r, c);
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a, along_rows }, rg))
    }

    /// Row softmax where `keep[j] == false` removes column `j` from every row
    /// (its probability is exactly zero).
    pub fn masked_softmax_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims(av);
        if keep.len() != c {
            return Err(TensorError::Shape {
                op: "masked_softmax_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        if !keep.iter().any(|&k| k) {
            return Err(TensorError::Contract {
                op: "masked_softmax_rows",
                msg: "every key is masked".into(),
            });
        }
        let src = av.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut max = T::neg_infinity();
            for j in (0..c).filter(|&j| keep[j]) {
                max = max.max(row[j]);
            }
            let mut sum = T::zero();
            for j in (0..c).filter(|&j| keep[j]) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in (0..c).filter(|&j| keep[j]) {
                out[i * c + j] /= sum;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedSoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = dims(av);
        let src = av.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row layer normalization with biased variance:
    /// `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = dims(xv);
        if c < 2 {
            return Err(TensorError::Contract {
                op: "layer_norm",
                msg: format!("needs at least 2 features, got {c}"),
            });
        }
        if gv.numel() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        if bv.numel() != c {
            return Err(shape_err("layer_norm", xv, bv));
        }
        let n = T::from_usize(c).expect("usize fits");
        let (src, g, b) = (xv.data(), gv.data(), bv.data());
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Contract {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let c = pv.cols();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c].copy_from_slice(pv.row(i));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims(av);
        if len == 0 || start + len > c {
            return Err(TensorError::Contract {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {c}", start + len),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(matrix(r, len, out), Op::SliceCols { a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims(av);
        if len == 0 || start + len > r {
            return Err(TensorError::Contract {
                op: "slice_rows",
                msg: format!("rows {start}..{} of {r}", start + len),
            });
        }
        let out = av.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(matrix(len, c, out), Op::SliceRows { a, start }, rg))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = dims(tv);
        if ids.is_empty() {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: "no ids".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::Index { index: id, rows: r });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            matrix(ids.len(), c, out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Euclidean distances between every row of `x` and every row of `c`.
    pub fn l2_distances(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        let (rx, d) = dims(xv);
        let (rc, dc) = dims(cv);
        if d != dc {
            return Err(shape_err("l2_distances", xv, cv));
        }
        let mut out = vec![T::zero(); rx * rc];
        for i in 0..rx {
            let xi = xv.row(i);
            for k in 0..rc {
                let ck = cv.row(k);
                let sq: T = xi.iter().zip(ck).map(|(&a, &b)| (a - b) * (a - b)).sum();
                out[i * rc + k] = sq.sqrt();
            }
        }
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(matrix(rx, rc, out), Op::L2Distances { x, c }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Gathers elements by flat row-major index into a vector.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if indices.is_empty() {
            return Err(TensorError::Contract {
                op: "pick",
                msg: "no indices".into(),
            });
        }
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= av.numel() {
                return Err(TensorError::Index {
                    index: i,
                    rows: av.numel(),
                });
            }
            out.push(av.data()[i]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::vector(out),
            Op::Pick {
                a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Afterwards [`Graph::grad`] returns
    /// `d root / d v` for every node the root depends on.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", rv.shape()),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (ra, ca) = dims(av);
                let (rb, cb) = dims(bv);
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = if *tb { rb } else { cb };
                let a_str = if *ta { (1, ca) } else { (ca, 1) };
                let b_str = if *tb { (1, cb) } else { (cb, 1) };
                if let Some(ga) = acc(grads, nodes, *a) {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n, 1),
                        bv.data(),
                        (b_str.1, b_str.0),
                        T::one(),
                        ga,
                        a_str,
                    );
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        (a_str.1, a_str.0),
                        g,
                        (n, 1),
                        T::one(),
                        gb,
                        b_str,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc(grads, nodes, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = acc(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = acc(grads, nodes, *bias) {
                    let c = gb.len();
                    for (idx, &s) in g.iter().enumerate() {
                        gb[idx % c] += s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = acc(grads, nodes, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax { a, along_rows } => {
                let (r, c) = dims(out);
                let y = out.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    let (lanes, len, lane_step, stride) = if *along_rows {
                        (r, c, c, 1)
                    } else {
                        (c, r, 1, c)
                    };
                    for l in 0..lanes {
                        let start = l * lane_step;
                        let dot: T = (0..len)
                            .map(|t| g[start + t * stride] * y[start + t * stride])
                            .sum();
                        for t in 0..len {
                            let idx = start + t * stride;
                            ga[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmaxRows(a) => {
                let (r, c) = dims(out);
                let y = out.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for row in 0..r {
                        let s = row * c;
                        let dot: T = (s..s + c).map(|idx| g[idx] * y[idx]).sum();
                        for idx in s..s + c {
                            ga[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = dims(out);
                let y = out.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for row in 0..r {
                        let s = row * c;
                        let total: T = g[s..s + c].iter().copied().sum();
                        for idx in s..s + c {
                            ga[idx] += g[idx] - y[idx].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = dims(out);
                let gn = nodes[gain.0].value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    let n = T::from_usize(c).expect("usize fits");
                    for row in 0..r {
                        let s = row * c;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = g[s + j] * gn[j];
                            mean_d += d;
                            mean_dx += d * xhat[s + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let d = g[s + j] * gn[j];
                            gx[s + j] += rstd[row] * (d - mean_d - xhat[s + j] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = acc(grads, nodes, *gain) {
                    for (idx, &s) in g.iter().enumerate() {
                        gg[idx % c] += s * xhat[idx];
                    }
                }
                if let Some(gb) = acc(grads, nodes, *bias) {
                    for (idx, &s) in g.iter().enumerate() {
                        gb[idx % c] += s;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims(out);
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if let Some(gp) = acc(grads, nodes, p) {
                        for row in 0..r {
                            for j in 0..c {
                                gp[row * c + j] += g[row * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, len) = dims(out);
                let c = nodes[a.0].value.cols();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for row in 0..r {
                        for j in 0..len {
                            ga[row * c + start + j] += g[row * len + j];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let c = out.cols();
                if let Some(ga) = acc(grads, nodes, *a) {
                    let base = start * c;
                    for (idx, &s) in g.iter().enumerate() {
                        ga[base + idx] += s;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let c = out.cols();
                if let Some(gt) = acc(grads, nodes, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[row * c + j];
                        }
                    }
                }
            }
            Op::L2Distances { x, c } => {
                let (xv, cv) = (&nodes[x.0].value, &nodes[c.0].value);
                let (rx, d) = dims(xv);
                let rc = cv.rows();
                let dist = out.data();
                let mut gx_local = vec![T::zero(); rx * d];
                let mut gc_local = vec![T::zero(); rc * d];
                for i in 0..rx {
                    for k in 0..rc {
                        let dk = dist[i * rc + k];
                        if dk <= T::zero() {
                            continue;
                        }
                        let w = g[i * rc + k] / dk;
                        for j in 0..d {
                            let diff = w * (xv.at(i, j) - cv.at(k, j));
                            gx_local[i * d + j] += diff;
                            gc_local[k * d + j] -= diff;
                        }
                    }
                }
                if let Some(gx) = acc(grads, nodes, *x) {
                    gx.iter_mut().zip(&gx_local).for_each(|(a, &b)| *a += b);
                }
                if let Some(gc) = acc(grads, nodes, *c) {
                    gc.iter_mut().zip(&gc_local).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(grads, nodes, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Pick { a, indices } => {
                if let Some(ga) = acc(grads, nodes, *a) {
                    for (p, &idx) in indices.iter().enumerate() {
                        ga[idx] += g[p];
                    }
                }
            }
        }
    }
}
