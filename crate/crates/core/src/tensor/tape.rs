//! Dynamic reverse-mode tape over dense matrices.
//!
//! A [`Tape`] is rebuilt for every episode: operations are appended in
//! forward order and [`Tape::backward`] walks them in reverse, accumulating
//! adjoints. Every op checks its output for NaN/Inf and fails loudly.

use super::{BoolMask, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Node, Node),
    Add(Node, Node),
    Mul(Node, Node),
    AddRow(Node, Node),
    Scale(Node, f64),
    Sigmoid(Node),
    Tanh(Node),
    Log { x: Node, floor: f64 },
    ConcatCols(Node, Node),
    MeanRows(Node),
    GatherRows(Node, Vec<usize>),
    Transpose(Node),
    SoftmaxRows(Node),
    MaskedSoftmax(Node, BoolMask),
    SliceCols { x: Node, start: usize },
    Sum(Node),
    Element(Node, usize),
    Dropout(Node, Vec<f64>),
    Bce { p: Node, target: f64, eps: f64 },
    SquaredNorm(Node),
}

struct Entry {
    value: Matrix,
    op: Op,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Node`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `node`; zeros if `node` did not
    /// participate in computing the root.
    pub fn get(&self, node: Node) -> Matrix {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[node.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, node: Node) -> Matrix {
        let (r, c) = self.shapes[node.0];
        self.grads[node.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, node: Node) -> &Matrix {
        &self.entries[node.0].value
    }

    /// Shorthand for the single entry of a `1 x 1` node.
    pub fn scalar(&self, node: Node) -> f64 {
        self.entries[node.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Node> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.entries.push(Entry { value, op });
        Ok(Node(self.entries.len() - 1))
    }

    pub fn leaf(&mut self, value: Matrix) -> Result<Node> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Node> {
        self.leaf(Matrix::scalar(v))
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let mut v = va.clone();
        v.add_assign(vb);
        self.push(v, Op::Add(a, b), "add")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x * y).collect();
        let v = Matrix::from_parts(va.rows(), va.cols(), data);
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Node, row: Node) -> Result<Node> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: va.shape(),
                right: vr.shape(),
            });
        }
        let mut v = va.clone();
        let c = va.cols();
        for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
            *x += vr.as_slice()[i % c];
        }
        self.push(v, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Node, s: f64) -> Result<Node> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn sigmoid(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), "tanh")
    }

    /// `ln(max(x, floor))`, with zero gradient on the clamped side.
    pub fn log(&mut self, a: Node, floor: f64) -> Result<Node> {
        if floor <= 0.0 {
            return Err(Error::Domain(format!("log floor must be positive, got {floor}")));
        }
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::Log { x: a, floor }, "log")
    }

    /// `[a ; b]` along columns; both inputs must have the same row count.
    pub fn concat_cols(&mut self, a: Node, b: Node) -> Result<Node> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(va.row_slice(i));
            data.extend_from_slice(vb.row_slice(i));
        }
        self.push(Matrix::from_parts(r, ca + cb, data), Op::ConcatCols(a, b), "concat_cols")
    }

    /// Column-wise mean over rows, giving a `1 x c` row.
    pub fn mean_rows(&mut self, a: Node) -> Result<Node> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::Precondition("mean over zero rows".into()));
        }
        let (r, c) = va.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(va.row_slice(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Matrix::row(out), Op::MeanRows(a), "mean_rows")
    }

    /// Selects rows of `table` by index. The backward pass scatter-adds, so
    /// repeated indices accumulate.
    pub fn gather_rows(&mut self, table: Node, indices: &[usize]) -> Result<Node> {
        let vt = self.value(table);
        let c = vt.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= vt.rows() {
                return Err(Error::UnknownConcept {
                    id: i,
                    universe: vt.rows(),
                });
            }
            data.extend_from_slice(vt.row_slice(i));
        }
        let v = Matrix::from_parts(indices.len(), c, data);
        self.push(v, Op::GatherRows(table, indices.to_vec()), "gather_rows")
    }

    pub fn transpose(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), "transpose")
    }

    /// Softmax applied independently to each row.
    pub fn softmax_rows(&mut self, a: Node) -> Result<Node> {
        let va = self.value(a);
        let (r, c) = va.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = va.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        self.push(Matrix::from_parts(r, c, data), Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Softmax over the allowed entries of a vector-shaped node; disallowed
    /// entries come out as exactly `0.0`.
    pub fn masked_softmax(&mut self, scores: Node, mask: &BoolMask) -> Result<Node> {
        let v = masked_softmax_values(self.value(scores), mask)?;
        self.push(v, Op::MaskedSoftmax(scores, mask.clone()), "masked_softmax")
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Node, start: usize, width: usize) -> Result<Node> {
        let va = self.value(a);
        if start + width > va.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: va.shape(),
                right: (start, width),
            });
        }
        let mut data = Vec::with_capacity(va.rows() * width);
        for i in 0..va.rows() {
            data.extend_from_slice(&va.row_slice(i)[start..start + width]);
        }
        let v = Matrix::from_parts(va.rows(), width, data);
        self.push(v, Op::SliceCols { x: a, start }, "slice_cols")
    }

    pub fn sum(&mut self, a: Node) -> Result<Node> {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    /// Adds a list of scalar nodes; an empty list yields a `0` constant.
    pub fn sum_scalars(&mut self, nodes: &[Node]) -> Result<Node> {
        let mut iter = nodes.iter();
        let Some(&first) = iter.next() else {
            return self.constant_scalar(0.0);
        };
        let mut acc = first;
        for &n in iter {
            acc = self.add(acc, n)?;
        }
        Ok(acc)
    }

    /// Flat (row-major) element `index` of `a` as a `1 x 1` node.
    pub fn element(&mut self, a: Node, index: usize) -> Result<Node> {
        let va = self.value(a);
        if index >= va.len() {
            return Err(Error::Dimension {
                op: "element",
                left: va.shape(),
                right: (index, 1),
            });
        }
        let v = Matrix::scalar(va.as_slice()[index]);
        self.push(v, Op::Element(a, index), "element")
    }

    /// Multiplies by a fixed, pre-scaled keep mask (inverted dropout).
    pub fn dropout(&mut self, a: Node, keep_scaled: Vec<f64>) -> Result<Node> {
        let va = self.value(a);
        if keep_scaled.len() != va.len() {
            return Err(Error::Dimension {
                op: "dropout",
                left: va.shape(),
                right: (keep_scaled.len(), 1),
            });
        }
        let data = va.as_slice().iter().zip(&keep_scaled).map(|(x, k)| x * k).collect();
        let v = Matrix::from_parts(va.rows(), va.cols(), data);
        self.push(v, Op::Dropout(a, keep_scaled), "dropout")
    }

    /// Binary cross-entropy of a `1 x 1` probability against a soft target.
    /// The probability is clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Node, target: f64, eps: f64) -> Result<Node> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Domain(format!("bce target {target} outside [0, 1]")));
        }
        let vp = self.value(p);
        if vp.len() != 1 {
            return Err(Error::Dimension {
                op: "bce",
                left: vp.shape(),
                right: (1, 1),
            });
        }
        let q = vp.as_slice()[0].clamp(eps, 1.0 - eps);
        let loss = -(target * q.ln() + (1.0 - target) * (1.0 - q).ln());
        self.push(Matrix::scalar(loss), Op::Bce { p, target, eps }, "bce")
    }

    pub fn squared_norm(&mut self, a: Node) -> Result<Node> {
        let v = Matrix::scalar(self.value(a).squared_norm());
        self.push(v, Op::SquaredNorm(a), "squared_norm")
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Node) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                left: root_val.shape(),
                right: (1, 1),
            });
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.entries.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            self.propagate(&entry.op, &entry.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        let shapes = self.entries.iter().map(|e| e.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let mut acc = |node: Node, delta: Matrix| match &mut grads[node.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&vb.transpose())?);
                acc(*b, va.transpose().matmul(g)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(g, vb, |x, y| x * y));
                acc(*b, zip_map(g, va, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let c = g.cols();
                let mut r = vec![0.0; c];
                for i in 0..g.rows() {
                    for (o, x) in r.iter_mut().zip(g.row_slice(i)) {
                        *o += x;
                    }
                }
                acc(*row, Matrix::row(r));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Sigmoid(a) => acc(*a, zip_map(g, out, |gi, y| gi * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, zip_map(g, out, |gi, y| gi * (1.0 - y * y))),
            Op::Log { x, floor } => {
                let vx = self.value(*x);
                acc(*x, zip_map(g, vx, |gi, xi| if xi > *floor { gi / xi } else { 0.0 }));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let r = g.rows();
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = g.row_slice(i);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, Matrix::from_parts(r, ca, ga));
                acc(*b, Matrix::from_parts(r, cb, gb));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let inv = 1.0 / r as f64;
                let row: Vec<f64> = g.as_slice().iter().map(|x| x * inv).collect();
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend_from_slice(&row);
                }
                acc(*a, Matrix::from_parts(r, c, data));
            }
            Op::GatherRows(table, indices) => {
                let (r, c) = self.value(*table).shape();
                let mut gt = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    let src = g.row_slice(k);
                    let dst = &mut gt.as_mut_slice()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(*table, gt);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let (r, c) = out.shape();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    data.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                }
                acc(*a, Matrix::from_parts(r, c, data));
            }
            Op::MaskedSoftmax(a, mask) => {
                let y = out.as_slice();
                let gy = g.as_slice();
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                let data = (0..y.len())
                    .map(|j| if mask.is_allowed(j) { y[j] * (gy[j] - dot) } else { 0.0 })
                    .collect();
                acc(*a, Matrix::from_parts(out.rows(), out.cols(), data));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).shape();
                let w = out.cols();
                let mut gx = Matrix::zeros(r, c);
                for i in 0..r {
                    gx.as_mut_slice()[i * c + start..i * c + start + w]
                        .copy_from_slice(g.row_slice(i));
                }
                acc(*x, gx);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::Element(a, index) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                ga.as_mut_slice()[*index] = g.as_slice()[0];
                acc(*a, ga);
            }
            Op::Dropout(a, keep) => {
                let data = g.as_slice().iter().zip(keep).map(|(x, k)| x * k).collect();
                acc(*a, Matrix::from_parts(g.rows(), g.cols(), data));
            }
            Op::Bce { p, target, eps } => {
                let pv = self.scalar(*p);
                let d = if pv <= *eps || pv >= 1.0 - eps {
                    0.0
                } else {
                    (pv - target) / (pv * (1.0 - pv))
                };
                acc(*p, Matrix::scalar(g.as_slice()[0] * d));
            }
            Op::SquaredNorm(a) => {
                let s = 2.0 * g.as_slice()[0];
                acc(*a, self.value(*a).map(|x| x * s));
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_parts(a.rows(), a.cols(), data)
}

/// Forward-only masked softmax, shared by the tape op and by callers that
/// need probabilities without recording.
pub fn masked_softmax_values(scores: &Matrix, mask: &BoolMask) -> Result<Matrix> {
    if mask.len() != scores.len() {
        return Err(Error::Dimension {
            op: "masked_softmax",
            left: scores.shape(),
            right: (mask.len(), 1),
        });
    }
    if mask.allowed_count() == 0 {
        return Err(Error::Precondition("masked_softmax: every entry is masked".into()));
    }
    let s = scores.as_slice();
    let max = (0..s.len())
        .filter(|&j| mask.is_allowed(j))
        .map(|j| s[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut data: Vec<f64> = (0..s.len())
        .map(|j| if mask.is_allowed(j) { (s[j] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= z);
    Ok(Matrix::from_parts(scores.rows(), scores.cols(), data))
}
