//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! and [`Graph::backward`] walks the tape in reverse accumulating adjoints.
//! Everything is two-dimensional; frame sequences are `T x D` with time on
//! rows, row vectors are `1 x n`.
//!
//! Graphs are cheap, single-use and single-threaded. Data parallelism happens
//! one level up, one graph per utterance.

use indexmap::IndexMap;
use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2NormRows {
        x: Var,
        inv_norm: Vec<f64>,
    },
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather {
        src: Var,
        index: Vec<Option<usize>>,
    },
    Reshape(Var),
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    ArcMargin {
        cos: Var,
        labels: Vec<usize>,
        slope: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.tensors.values_mut()
    }

    pub fn by_index(&self, i: usize) -> (&str, &Array2<f64>) {
        let (k, v) = self.tensors.get_index(i).expect("param index in range");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Array2<f64> {
        self.tensors.get_index_mut(i).expect("param index in range").1
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }
}

/// Seeded initialiser used by the model builders.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-bound..bound));
        self.store.insert(name, v);
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.store.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.store.insert(name, Array2::ones((rows, cols)));
    }

    /// Dense layer `prefix.w` (`fan_in x fan_out`) and `prefix.b` (`1 x fan_out`).
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.uniform(format!("{prefix}.w"), fan_in, fan_out, fan_in);
        self.zeros(format!("{prefix}.b"), 1, fan_out);
    }

    /// Scale/shift pair `prefix.gamma`, `prefix.beta` of width `dim`.
    pub fn affine(&mut self, prefix: &str, dim: usize) {
        self.ones(format!("{prefix}.gamma"), 1, dim);
        self.zeros(format!("{prefix}.beta"), 1, dim);
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into `acc` (same layout as the store the
    /// graph read from).
    pub fn accumulate_into(&self, acc: &mut ParamStore) {
        for &(node, idx) in &self.params {
            if let Some(g) = &self.grads[node] {
                *acc.by_index_mut(idx) += g;
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf reading parameter `name` from `store`. Panics if the name is absent,
    /// which is a model-construction bug rather than a data error.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.push(store.by_index(idx).1.clone(), Op::Param(idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row` with `row` (`1 x n`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a row vector");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a row vector");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// `a * col` with `col` (`m x 1`) broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects a column vector");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Softmax down each column (over time for `T x D` input).
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let t = self.transpose(a);
        let s = self.softmax_rows(t);
        self.transpose(s)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.fold(0.0, |acc, &d| acc + d * d) / n;
            let is = 1.0 / (var + eps).sqrt();
            row *= is;
            inv_std.push(is);
        }
        self.push(v, Op::LayerNorm { x: a, inv_std })
    }

    /// Scales each row to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let mut inv_norm = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let inv = 1.0 / row.dot(&row).sqrt().max(eps);
            row *= inv;
            inv_norm.push(inv);
        }
        self.push(v, Op::L2NormRows { x: a, inv_norm })
    }

    /// Sum over rows: `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// Sum over columns: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of every entry as a `1 x 1` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let r = self.sum_rows(a);
        self.sum_cols(r)
    }

    /// Repeats a `1 x n` row `m` times.
    pub fn repeat_rows(&mut self, row: Var, m: usize) -> Var {
        let n = self.shape(row).1;
        let index = (0..m).flat_map(|_| (0..n).map(Some)).collect();
        self.gather(row, index, (m, n))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Output entry `i` (row-major) is `src[index[i]]` (row-major) or zero.
    pub fn gather(&mut self, src: Var, index: Vec<Option<usize>>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather index/shape mismatch");
        let flat = self.value(src).as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let data: Vec<f64> = index.iter().map(|i| i.map_or(0.0, |i| flat[i])).collect();
        let v = Array2::from_shape_vec(shape, data).expect("gather shape");
        self.push(v, Op::Gather { src, index })
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let x = self.value(a).as_standard_layout().to_owned();
        let v = x.into_shape_with_order(shape).expect("reshape size mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Depthwise 1-D convolution over time with "same" zero padding.
    /// `x` is `T x D`, `w` is `K x D` with odd `K`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (t_len, d) = xv.dim();
        let k_len = wv.nrows();
        assert_eq!(wv.ncols(), d, "depthwise kernel width mismatch");
        let pad = (k_len - 1) / 2;
        let mut out = Array2::zeros((t_len, d));
        for t in 0..t_len {
            for k in 0..k_len {
                let src = t + k;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xr = xv.row(src - pad);
                let wr = wv.row(k);
                let mut orow = out.row_mut(t);
                Zip::from(&mut orow).and(&xr).and(&wr).for_each(|o, &a, &b| *o += a * b);
            }
        }
        self.push(out, Op::DepthwiseConv { x, w })
    }

    /// Replaces the target-class cosine `c = cos(theta)` of each row with
    /// `cos(theta + m)`, falling back to `c - m sin(m)` once `theta + m`
    /// passes `pi`, which keeps the logit monotone in `theta`.
    pub fn arc_margin(&mut self, cos: Var, labels: &[usize], margin: f64) -> Var {
        let mut v = self.value(cos).clone();
        let (cm, sm) = (margin.cos(), margin.sin());
        let threshold = (std::f64::consts::PI - margin).cos();
        let mut slope = Vec::with_capacity(labels.len());
        for (b, &y) in labels.iter().enumerate() {
            let c = v[[b, y]].clamp(-1.0, 1.0);
            let (phi, d) = if c > threshold {
                let sin = (1.0 - c * c).max(1e-24).sqrt();
                (c * cm - sin * sm, cm + sm * c / sin)
            } else {
                (c - margin * sm, 1.0)
            };
            v[[b, y]] = phi;
            slope.push(d);
        }
        self.push(
            v,
            Op::ArcMargin {
                cos,
                labels: labels.to_vec(),
                slope,
            },
        )
    }

    /// Mean softmax cross-entropy over rows, as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), labels.len(), "one label per row");
        let mut probs = x.clone();
        let mut total = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
            total += lse - row[y];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let loss = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        self.backward_with(out, Array2::ones((1, 1)))
    }

    /// Reverse pass seeded with an arbitrary adjoint for `out`.
    pub fn backward_with(&self, out: Var, seed: Array2<f64>) -> Grads {
        assert_eq!(seed.dim(), self.shape(out));
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(seed);
        let mut params = Vec::new();

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(idx) = node.op {
                params.push((i, idx));
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, params }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
            Some(e) => *e += &d,
            slot => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, r) => {
                acc(*a, g * val(*r));
                let d = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(*r, d);
            }
            Op::MulCol(a, c) => {
                acc(*a, g * val(*c));
                let d = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*c, d);
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g * &y.mapv(|t| 1.0 - t * t)),
            Op::Sigmoid(a) => acc(*a, g * &y.mapv(|s| s * (1.0 - s))),
            Op::Relu(a) => {
                let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g * &mask);
            }
            Op::Sqrt(a) => acc(*a, g / &(y * 2.0)),
            Op::Square(a) => acc(*a, g * &(val(*a) * 2.0)),
            Op::SoftmaxRows(a) => {
                let gy = g * y;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, gy - &(y * &dot));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = y.ncols() as f64;
                let mut d = Array2::zeros(y.raw_dim());
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.sum() / n;
                    let mgy = gr.dot(&yr) / n;
                    Zip::from(d.row_mut(r))
                        .and(&gr)
                        .and(&yr)
                        .for_each(|o, &gi, &yi| *o = is * (gi - mg - yi * mgy));
                }
                acc(*x, d);
            }
            Op::L2NormRows { x, inv_norm } => {
                let mut d = Array2::zeros(y.raw_dim());
                for (r, inv) in inv_norm.iter().enumerate() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let gy = gr.dot(&yr);
                    Zip::from(d.row_mut(r))
                        .and(&gr)
                        .and(&yr)
                        .for_each(|o, &gi, &yi| *o = inv * (gi - yi * gy));
                }
                acc(*x, d);
            }
            Op::SumRows(a) => {
                let shape = val(*a).raw_dim();
                acc(*a, g.broadcast(shape).expect("broadcast").to_owned());
            }
            Op::SumCols(a) => {
                let shape = val(*a).raw_dim();
                acc(*a, g.broadcast(shape).expect("broadcast").to_owned());
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(g);
                acc(*a, d);
            }
            Op::Gather { src, index } => {
                let shape = val(*src).raw_dim();
                let mut d = vec![0.0; shape[0] * shape[1]];
                let gs = g.as_standard_layout();
                for (gi, ix) in gs.iter().zip(index) {
                    if let Some(j) = ix {
                        d[*j] += gi;
                    }
                }
                acc(*src, Array2::from_shape_vec(shape, d).expect("shape"));
            }
            Op::Reshape(a) => {
                let shape = val(*a).raw_dim();
                let d = g.as_standard_layout().to_owned();
                acc(*a, d.into_shape_with_order(shape).expect("shape"));
            }
            Op::DepthwiseConv { x, w } => {
                let xv = val(*x);
                let wv = val(*w);
                let (t_len, _) = xv.dim();
                let k_len = wv.nrows();
                let pad = (k_len - 1) / 2;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dw = Array2::zeros(wv.raw_dim());
                for t in 0..t_len {
                    for k in 0..k_len {
                        let src = t + k;
                        if src < pad || src - pad >= t_len {
                            continue;
                        }
                        let src = src - pad;
                        let gr = g.row(t);
                        Zip::from(dx.row_mut(src))
                            .and(&gr)
                            .and(&wv.row(k))
                            .for_each(|o, &gi, &wi| *o += gi * wi);
                        Zip::from(dw.row_mut(k))
                            .and(&gr)
                            .and(&xv.row(src))
                            .for_each(|o, &gi, &xi| *o += gi * xi);
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::ArcMargin { cos, labels, slope } => {
                let mut d = g.clone();
                for (b, (&yb, &sl)) in labels.iter().zip(slope).enumerate() {
                    d[[b, yb]] *= sl;
                }
                acc(*cos, d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                let mut d = probs.clone();
                for (b, &yb) in labels.iter().enumerate() {
                    d[[b, yb]] -= 1.0;
                }
                acc(*logits, d * scale);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}


#[cfg(test)]
mod tests {
    use super::fd::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(sum(out * proj))/d(input) against finite differences.
    fn check_unary(x: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        check_unary_h(x, 1e-5, 1e-6, build)
    }

    /// Explicit step and tolerance, for steep functions. Entries far below the
    /// largest derivative are compared on the scale of that largest one, since
    /// their difference quotients are dominated by rounding.
    fn check_unary_h(x: Array2<f64>, h: f64, tol: f64, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let o = build(&mut g, v);
            (g, v, o)
        };
        let (g0, _, o0) = eval(&x);
        let proj = rand_mat(&mut rng, g0.shape(o0).0, g0.shape(o0).1);
        let f = |x: &Array2<f64>| {
            let (g, _, o) = eval(x);
            (g.value(o) * &proj).sum()
        };
        let (g, v, o) = eval(&x);
        let grads = g.backward_with(o, proj.clone());
        let analytic = grads.wrt(v).unwrap().clone();
        let numeric = gradient(&x, h, f);
        let floor = analytic.fold(0.0f64, |m, v| m.max(v.abs())) * 1e-4;
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-6))
            .fold(0.0, f64::max);
        assert!(err < tol, "max rel err {err}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 4, 3);
        check_unary(x.clone(), |g, v| g.tanh(v));
        check_unary(x.clone(), |g, v| g.sigmoid(v));
        check_unary(x.clone(), |g, v| g.swish(v));
        check_unary(x.clone(), |g, v| g.square(v));
        check_unary(x.mapv(|v| v.abs() + 0.5), |g, v| g.sqrt(v));
        check_unary(x.clone(), |g, v| g.scale(v, -2.5));
        check_unary(x.clone(), |g, v| g.add_scalar(v, 3.0));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 5, 4);
        check_unary(x.clone(), |g, v| g.softmax_rows(v));
        check_unary(x.clone(), |g, v| g.softmax_cols(v));
        check_unary(x.clone(), |g, v| g.layer_norm(v, 1e-5));
        check_unary(x.clone(), |g, v| g.l2_normalize_rows(v, 1e-12));
        check_unary(x.clone(), |g, v| g.transpose(v));
        check_unary(x.clone(), |g, v| g.sum_rows(v));
        check_unary(x.clone(), |g, v| g.sum_cols(v));
        check_unary(x.clone(), |g, v| g.mean_rows(v));
        check_unary(x.clone(), |g, v| g.slice_cols(v, 1, 3));
        check_unary(x.clone(), |g, v| g.reshape(v, (2, 10)));
        check_unary(x.clone(), |g, v| {
            let a = g.slice_cols(v, 0, 2);
            g.concat_cols(&[v, a])
        });
        check_unary(x.clone(), |g, v| {
            let r = g.slice_cols(v, 0, 4);
            let r = g.sum_rows(r);
            g.repeat_rows(r, 3)
        });
        check_unary(x.clone(), |g, v| {
            g.gather(v, vec![Some(0), None, Some(7), Some(7), Some(19), None], (2, 3))
        });
    }

    #[test]
    fn l2_rows_have_unit_norm() {
        let mut g = Graph::new();
        let x = g.input(ndarray::array![[3.0, 4.0], [0.0, -2.0]]);
        let y = g.l2_normalize_rows(x, 1e-12);
        let want = ndarray::array![[0.6, 0.8], [0.0, -1.0]];
        assert!(g.value(y).iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 3, 5);
        let row = rand_mat(&mut rng, 1, 3);
        let col = rand_mat(&mut rng, 4, 1);
        let same = rand_mat(&mut rng, 4, 3);
        let w = rand_mat(&mut rng, 3, 3);
        check_unary(a.clone(), |g, v| {
            let bb = g.input(b.clone());
            g.matmul(v, bb)
        });
        check_unary(b.clone(), |g, v| {
            let aa = g.input(a.clone());
            g.matmul(aa, v)
        });
        for op in 0..6 {
            check_unary(a.clone(), |g, v| {
                let s = g.input(same.clone());
                let r = g.input(row.clone());
                let c = g.input(col.clone());
                match op {
                    0 => g.add(v, s),
                    1 => g.sub(s, v),
                    2 => g.mul(v, s),
                    3 => g.add_row(v, r),
                    4 => g.mul_row(v, r),
                    _ => g.mul_col(v, c),
                }
            });
        }
        // broadcast operands
        check_unary(row.clone(), |g, r| {
            let v = g.input(a.clone());
            g.mul_row(v, r)
        });
        check_unary(col.clone(), |g, c| {
            let v = g.input(a.clone());
            g.mul_col(v, c)
        });
        check_unary(a.clone(), |g, v| {
            let k = g.input(w.clone());
            g.depthwise_conv(v, k)
        });
        check_unary(w.clone(), |g, k| {
            let v = g.input(a.clone());
            g.depthwise_conv(v, k)
        });
    }

    #[test]
    fn cross_entropy_and_margin_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cos = rand_mat(&mut rng, 3, 4).mapv(|v| v * 0.9);
        let labels = [1, 3, 0];
        check_unary_h(cos.clone(), 1e-6, 1e-5, |g, v| {
            let m = g.arc_margin(v, &labels, 0.3);
            let l = g.scale(m, 30.0);
            g.cross_entropy(l, &labels)
        });
        // fallback branch: target cosine below cos(pi - m)
        let mut low = cos.clone();
        low[[0, 1]] = -0.99;
        check_unary(low, |g, v| g.arc_margin(v, &labels, 0.3));
    }

    #[test]
    fn depthwise_conv_matches_direct_sum() {
        let x = Array2::from_shape_fn((4, 1), |(t, _)| (t + 1) as f64);
        let w = Array2::from_shape_vec((3, 1), vec![1.0, 10.0, 100.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let wv = g.input(w);
        let y = g.depthwise_conv(xv, wv);
        // y[t] = x[t-1] + 10 x[t] + 100 x[t+1]
        let expect = [210.0, 321.0, 432.0, 43.0];
        for (t, e) in expect.iter().enumerate() {
            assert_eq!(g.value(y)[[t, 0]], *e);
        }
    }

    #[test]
    fn params_accumulate_across_uses() {
        let mut store = ParamStore::new();
        store.insert("w", Array2::from_elem((1, 1), 2.0));
        let mut g = Graph::new();
        let a = g.param(&store, "w");
        let b = g.param(&store, "w");
        let y = g.mul(a, b);
        let grads = g.backward(y);
        let mut acc = store.zeros_like();
        grads.accumulate_into(&mut acc);
        assert_eq!(acc.get("w").unwrap()[[0, 0]], 4.0);
    }
}
