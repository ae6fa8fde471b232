//! Define-by-run tape with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever it needs for the backward pass;
//! [`Graph::backward`] walks the nodes in reverse insertion order.

use crate::error::{Error, Result};
use crate::linalg::{col2im_add, conv_out_extent, gemm, im2col};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode BatchNorm, to be folded into
/// the running buffers once the pass is complete.
#[derive(Clone, Debug)]
pub struct BnRecord {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Gather { a: Var, idx: Vec<usize> },
    Broadcast { a: Var },
    VoxelAttention { f: Var, beta: Var, offsets: Vec<usize>, alphas: Vec<Vec<f64>> },
    SegmentMax { f: Var, argmax: Vec<usize> },
    KnnAggregate { f: Var, neighbors: Vec<Vec<usize>>, weights: NeighborWeights },
    ScatterMax { x: Var, source: Vec<Option<usize>> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Upsample2x { a: Var },
    BceMean { z: Var, target: f64 },
    SmoothL1Sum { pred: Var, target: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Per-node weights of the normalized neighbor dot-product aggregation.
#[derive(Clone, Debug, Default)]
pub struct NeighborWeights {
    /// `weights[i][l]` for the `l`-th neighbor of node `i`.
    pub weights: Vec<Vec<f64>>,
    /// Denominators `sum_l f_i . f_il`.
    pub sums: Vec<f64>,
    /// Nodes whose denominator fell below the guard and got uniform weights.
    pub fallback: Vec<bool>,
}

/// Normalized dot-product weights over each node's neighbors:
/// `w_il = (f_i . f_il) / sum_l (f_i . f_il)`, with uniform `1/k` weights when
/// the denominator magnitude is below `eps`.
pub fn neighbor_weights(f: &Tensor, neighbors: &[Vec<usize>], eps: f64) -> NeighborWeights {
    let d = f.shape()[1];
    let data = f.data();
    let mut out = NeighborWeights::default();
    for (i, nbrs) in neighbors.iter().enumerate() {
        let fi = &data[i * d..(i + 1) * d];
        let dots: Vec<f64> = nbrs
            .iter()
            .map(|&l| dot(fi, &data[l * d..(l + 1) * d]))
            .collect();
        let sum: f64 = dots.iter().sum();
        if sum.abs() < eps || !sum.is_finite() {
            out.weights.push(vec![1.0 / nbrs.len() as f64; nbrs.len()]);
            out.fallback.push(true);
        } else {
            out.weights.push(dots.iter().map(|s| s / sum).collect());
            out.fallback.push(false);
        }
        out.sums.push(sum);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable `-log sigmoid(z)` for target 1 or `-log(1 - sigmoid(z))` for target 0,
/// generalised to any target in `[0, 1]`.
pub fn bce_with_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Per-parameter gradients, summed over every leaf bound to the same parameter.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(id, node) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            if let Some((_, acc)) = out.iter_mut().find(|(pid, _)| *pid == id) {
                axpy(1.0, g, acc.data_mut());
            } else {
                out.push((id, Tensor::new(self.shapes[node].clone(), g.clone()).expect("gradient shape")));
            }
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params().into_iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// Reverse-mode tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bn_records: Vec<BnRecord>,
    guard_fallbacks: usize,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn bn_records(&self) -> &[BnRecord] {
        &self.bn_records
    }

    pub(crate) fn record_bn(&mut self, record: BnRecord) {
        self.bn_records.push(record);
    }

    /// Number of neighbor aggregations that fell back to uniform weights.
    pub fn guard_fallbacks(&self) -> usize {
        self.guard_fallbacks
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf(value, requires_grad, None)
    }

    /// Binds a stored parameter as a leaf of this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), p.requires_grad, Some(id))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::Shape(format!("{what}: expected C x H x W, got {s:?}"))),
        }
    }

    /// `x * w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = self.dims2(x, "linear input")?;
        let (fout, win) = self.dims2(w, "linear weight")?;
        if fin != win || self.value(b).numel() != fout {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(n * fout);
        let bias = self.value(b).data();
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        self.push(Tensor::new(vec![n, fout], out)?, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul lhs")?;
        let (k2, m) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { a }, &[a], "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub { a, b }, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.map(a, |x| x * factor);
        self.push(v, Op::Scale { a, factor }, &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu { a }, &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid { a }, &[a], "sigmoid")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a], "sum")
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let m = if n == 0 { 0.0 } else { self.value(a).sum() / n as f64 };
        self.push(Tensor::scalar(m), Op::Mean { a }, &[a], "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape { a }, &[a], "reshape")
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(Error::EmptyAxis);
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { a, outer, len, inner }, &[a], "softmax")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {base:?}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                sizes,
                outer,
                inner,
            },
            parts,
            "concat",
        )
    }

    /// Picks elements of the flattened tensor, producing a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of range {}", src.len())));
        }
        let out: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        self.push(
            Tensor::new(vec![idx.len()], out)?,
            Op::Gather { a, idx: idx.to_vec() },
            &[a],
            "gather",
        )
    }

    /// Repeats a one-element tensor into `shape`.
    pub fn broadcast(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return Err(Error::Shape(format!("broadcast source {:?} is not a scalar", self.shape(a))));
        }
        let v = Tensor::full(shape, self.value(a).data()[0]);
        self.push(v, Op::Broadcast { a }, &[a], "broadcast")
    }

    /// Local complete-graph attention over row segments.
    ///
    /// Rows `offsets[s]..offsets[s+1]` of `f` form segment `s`. For each row
    /// `j` the output is `beta[s] * f_j + sum_{k != j} alpha_jk * f_k` where
    /// `alpha_j.` is the softmax of `f_j . f_k` over the other rows of the
    /// segment. A single-row segment has no neighbor term.
    pub fn voxel_attention(&mut self, f: Var, beta: Var, offsets: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(f, "voxel attention")?;
        let segments = offsets.len().saturating_sub(1);
        if offsets.first() != Some(&0) || offsets.last() != Some(&rows) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Shape(format!("attention offsets do not partition {rows} rows")));
        }
        if self.value(beta).numel() != segments {
            return Err(Error::Shape(format!(
                "attention gate has {} values for {segments} segments",
                self.value(beta).numel()
            )));
        }
        let fv = self.value(f).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; rows * d];
        let mut alphas = Vec::with_capacity(segments);
        for s in 0..segments {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let t = hi - lo;
            let alpha = attention_scores(&fv[lo * d..hi * d], t, d);
            for j in 0..t {
                let oj = &mut out[(lo + j) * d..(lo + j + 1) * d];
                axpy(bv[s], &fv[(lo + j) * d..(lo + j + 1) * d], oj);
                for k in 0..t {
                    let a = alpha[j * t + k];
                    if a != 0.0 {
                        axpy(a, &fv[(lo + k) * d..(lo + k + 1) * d], oj);
                    }
                }
            }
            alphas.push(alpha);
        }
        self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::VoxelAttention {
                f,
                beta,
                offsets: offsets.to_vec(),
                alphas,
            },
            &[f, beta],
            "voxel_attention",
        )
    }

    /// Column-wise maximum of each row segment, `[segments, d]`.
    pub fn segment_max(&mut self, f: Var, offsets: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(f, "segment max")?;
        if offsets.first() != Some(&0) || offsets.last() != Some(&rows) {
            return Err(Error::Shape(format!("segment offsets do not partition {rows} rows")));
        }
        let segments = offsets.len() - 1;
        let fv = self.value(f).data();
        let mut out = vec![0.0; segments * d];
        let mut argmax = vec![0; segments * d];
        for s in 0..segments {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                return Err(Error::Shape(format!("segment {s} is empty")));
            }
            for c in 0..d {
                let mut best = lo;
                for r in lo + 1..hi {
                    if fv[r * d + c] > fv[best * d + c] {
                        best = r;
                    }
                }
                out[s * d + c] = fv[best * d + c];
                argmax[s * d + c] = best * d + c;
            }
        }
        self.push(
            Tensor::new(vec![segments, d], out)?,
            Op::SegmentMax { f, argmax },
            &[f],
            "segment_max",
        )
    }

    /// `g_i = sum_l w_il f_{nbr(i,l)}` with weights from [`neighbor_weights`].
    pub fn knn_aggregate(&mut self, f: Var, neighbors: &[Vec<usize>], eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(f, "knn aggregate")?;
        if neighbors.len() != n {
            return Err(Error::Shape(format!("{} neighbor lists for {n} nodes", neighbors.len())));
        }
        if neighbors.iter().any(|l| l.is_empty() || l.iter().any(|&j| j >= n)) {
            return Err(Error::Shape("neighbor lists must be non-empty and in range".into()));
        }
        let weights = neighbor_weights(self.value(f), neighbors, eps);
        let fallbacks = weights.fallback.iter().filter(|&&b| b).count();
        if fallbacks > 0 {
            log::debug!("neighbor aggregation: {fallbacks} nodes used uniform weights");
        }
        self.guard_fallbacks += fallbacks;
        let fv = self.value(f).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for (&l, &w) in neighbors[i].iter().zip(&weights.weights[i]) {
                axpy(w, &fv[l * d..(l + 1) * d], &mut out[i * d..(i + 1) * d]);
            }
        }
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::KnnAggregate {
                f,
                neighbors: neighbors.to_vec(),
                weights,
            },
            &[f],
            "knn_aggregate",
        )
    }

    /// Scatters rows of `x: [n, c]` into a `[c, height, width]` grid.
    ///
    /// `cells[i]` is the flat cell index of row `i`, or `None` to drop it.
    /// Cells hit by several rows keep the element-wise maximum; untouched
    /// cells are zero.
    pub fn scatter_max(&mut self, x: Var, cells: &[Option<usize>], height: usize, width: usize) -> Result<Var> {
        let (n, c) = self.dims2(x, "scatter")?;
        if cells.len() != n {
            return Err(Error::Shape(format!("{} cells for {n} rows", cells.len())));
        }
        let plane = height * width;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * plane];
        let mut source: Vec<Option<usize>> = vec![None; c * plane];
        for (i, cell) in cells.iter().enumerate() {
            let Some(cell) = *cell else { continue };
            if cell >= plane {
                return Err(Error::Shape(format!("cell {cell} outside {height}x{width} grid")));
            }
            for ch in 0..c {
                let o = ch * plane + cell;
                let v = xv[i * c + ch];
                if source[o].is_none_or(|_| v > out[o]) {
                    out[o] = v;
                    source[o] = Some(i * c + ch);
                }
            }
        }
        self.push(
            Tensor::new(vec![c, height, width], out)?,
            Op::ScatterMax { x, source },
            &[x],
            "scatter_max",
        )
    }

    /// 2D convolution of `x: [c_in, h, w]` by `w: [c_out, c_in, k, k]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = self.dims3(x, "conv2d input")?;
        let (c_out, k) = match self.shape(w) {
            [o, i, k1, k2] if *i == c_in && k1 == k2 => (*o, *k1),
            s => {
                return Err(Error::Shape(format!(
                    "conv2d weight {s:?} does not fit input channels {c_in}"
                )))
            }
        };
        if self.value(b).numel() != c_out {
            return Err(Error::Shape(format!("conv2d bias {:?} for {c_out} outputs", self.shape(b))));
        }
        let (out_h, out_w) = match (conv_out_extent(h, k, stride, pad), conv_out_extent(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d output extent non-positive for {h}x{wd}, k={k}, s={stride}, p={pad}"
                )))
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let positions = out_h * out_w;
        let cols = im2col(self.value(x).data(), c_in, h, wd, k, stride, pad, out_h, out_w);
        let mut out = Vec::with_capacity(c_out * positions);
        for &bias in self.value(b).data() {
            out.extend(std::iter::repeat_n(bias, positions));
        }
        gemm(c_out, c_in * k * k, positions, self.value(w).data(), false, &cols, false, 1.0, &mut out);
        self.push(
            Tensor::new(vec![c_out, out_h, out_w], out)?,
            Op::Conv2d { x, w, b, geom, cols },
            &[x, w, b],
            "conv2d",
        )
    }

    /// Training-mode BatchNorm over the spatial extent of each channel.
    /// Returns the output with the batch mean and unbiased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (c, h, w) = self.dims3(x, "batch norm")?;
        self.check_affine(gamma, beta, c)?;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut unbiased = vec![0.0; c];
        for ch in 0..c {
            let p = &xv[ch * plane..(ch + 1) * plane];
            let m = p.iter().sum::<f64>() / plane as f64;
            let ss: f64 = p.iter().map(|v| (v - m) * (v - m)).sum();
            mean[ch] = m;
            var[ch] = ss / plane as f64;
            unbiased[ch] = if plane > 1 { ss / (plane - 1) as f64 } else { 0.0 };
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.affine_normalize(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((v, mean, unbiased))
    }

    /// Eval-mode BatchNorm using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (c, _, _) = self.dims3(x, "batch norm")?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!("running statistics do not have {c} channels")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.affine_normalize(x, gamma, beta, running_mean, &inv_std, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!("batch norm affine parameters do not have {c} channels")));
        }
        Ok(())
    }

    fn affine_normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let plane = shape[1] * shape[2];
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ch in 0..shape[0] {
            for i in ch * plane..(ch + 1) * plane {
                xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + bt[ch];
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                train,
            },
            &[x, gamma, beta],
            "batch_norm",
        )
    }

    /// Nearest-neighbor 2x upsampling of `[c, h, w]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(a, "upsample")?;
        let src = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(ch * h2 + y) * w2 + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, h2, w2], out)?, Op::Upsample2x { a }, &[a], "upsample2x")
    }

    /// Mean binary cross-entropy of logits `z` against a constant target;
    /// 0 for an empty input.
    pub fn bce_with_logits_mean(&mut self, z: Var, target: f64) -> Result<Var> {
        let zv = self.value(z).data();
        let loss = if zv.is_empty() {
            0.0
        } else {
            zv.iter().map(|&v| bce_with_logits(v, target)).sum::<f64>() / zv.len() as f64
        };
        self.push(Tensor::scalar(loss), Op::BceMean { z, target }, &[z], "bce")
    }

    /// Sum of element-wise smooth-L1 (`delta = 1`) between `pred` and `target`.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred).data();
        if pv.len() != target.len() {
            return Err(Error::Shape(format!(
                "smooth-L1: {} predictions for {} targets",
                pv.len(),
                target.len()
            )));
        }
        let loss: f64 = pv.iter().zip(target).map(|(p, t)| smooth_l1(p - t)).sum();
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1Sum {
                pred,
                target: target.to_vec(),
            },
            &[pred],
            "smooth_l1",
        )
    }

    /// Reverse pass from a scalar `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients {
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
            grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! buf {
            ($v:expr) => {
                grad_buf(grads, nodes, $v)
            };
        }
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, fin) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let fout = nodes[w.0].value.shape()[0];
                if let Some(dx) = buf!(*x) {
                    gemm(n, fout, fin, g, false, val(*w), false, 1.0, dx);
                }
                if let Some(dw) = buf!(*w) {
                    gemm(fout, n, fin, g, true, val(*x), false, 1.0, dw);
                }
                if let Some(db) = buf!(*b) {
                    for r in 0..n {
                        axpy(1.0, &g[r * fout..(r + 1) * fout], db);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let m = nodes[b.0].value.shape()[1];
                if let Some(da) = buf!(*a) {
                    gemm(n, m, k, g, false, val(*b), true, 1.0, da);
                }
                if let Some(db) = buf!(*b) {
                    gemm(k, n, m, val(*a), true, g, false, 1.0, db);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                if let Some(da) = buf!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = buf!(*a) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = buf!(*b) {
                    axpy(1.0, g, db);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = buf!(*a) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = buf!(*b) {
                    axpy(-1.0, g, db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = buf!(*a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = buf!(*b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = buf!(*a) {
                    axpy(*factor, g, da);
                }
            }
            Op::Relu { a } => {
                let av = val(*a);
                if let Some(da) = buf!(*a) {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(da) = buf!(*a) {
                    for ((d, gi), s) in da.iter_mut().zip(g).zip(out) {
                        *d += gi * s * (1.0 - s);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = buf!(*a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(da) = buf!(*a) {
                    let n = da.len().max(1) as f64;
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = buf!(*a) {
                    axpy(1.0, g, da);
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(da) = buf!(*a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let s: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                da[at(j)] += out[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (p, &sz) in parts.iter().zip(sizes) {
                    if let Some(dp) = buf!(*p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            axpy(1.0, src, &mut dp[o * sz * inner..(o + 1) * sz * inner]);
                        }
                    }
                    offset += sz;
                }
            }
            Op::Gather { a, idx } => {
                if let Some(da) = buf!(*a) {
                    for (gi, &k) in g.iter().zip(idx) {
                        da[k] += gi;
                    }
                }
            }
            Op::Broadcast { a } => {
                if let Some(da) = buf!(*a) {
                    da[0] += g.iter().sum::<f64>();
                }
            }
            Op::VoxelAttention { f, beta, offsets, alphas } => {
                let d = nodes[f.0].value.shape()[1];
                let fv = val(*f);
                let bv = val(*beta);
                let mut df = vec![0.0; fv.len()];
                let mut dbeta = vec![0.0; bv.len()];
                for (s, alpha) in alphas.iter().enumerate() {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let t = hi - lo;
                    let row = |j: usize| &fv[(lo + j) * d..(lo + j + 1) * d];
                    for j in 0..t {
                        let gj = &g[(lo + j) * d..(lo + j + 1) * d];
                        dbeta[s] += dot(gj, row(j));
                        axpy(bv[s], gj, &mut df[(lo + j) * d..(lo + j + 1) * d]);
                        if t < 2 {
                            continue;
                        }
                        // d alpha_jk = g_j . f_k, then through the softmax.
                        let dalpha: Vec<f64> = (0..t)
                            .map(|k| if k == j { 0.0 } else { dot(gj, row(k)) })
                            .collect();
                        let mean: f64 = (0..t).map(|k| alpha[j * t + k] * dalpha[k]).sum();
                        for k in 0..t {
                            if k == j {
                                continue;
                            }
                            let a = alpha[j * t + k];
                            let de = a * (dalpha[k] - mean);
                            axpy(a, gj, &mut df[(lo + k) * d..(lo + k + 1) * d]);
                            axpy(de, row(k), &mut df[(lo + j) * d..(lo + j + 1) * d]);
                            axpy(de, row(j), &mut df[(lo + k) * d..(lo + k + 1) * d]);
                        }
                    }
                }
                if let Some(b) = buf!(*f) {
                    axpy(1.0, &df, b);
                }
                if let Some(b) = buf!(*beta) {
                    axpy(1.0, &dbeta, b);
                }
            }
            Op::SegmentMax { f, argmax } => {
                if let Some(df) = buf!(*f) {
                    for (gi, &k) in g.iter().zip(argmax) {
                        df[k] += gi;
                    }
                }
            }
            Op::KnnAggregate { f, neighbors, weights } => {
                let d = nodes[f.0].value.shape()[1];
                let fv = val(*f);
                if let Some(df) = buf!(*f) {
                    for (i, nbrs) in neighbors.iter().enumerate() {
                        let gi = &g[i * d..(i + 1) * d];
                        let w = &weights.weights[i];
                        for (&l, &wl) in nbrs.iter().zip(w) {
                            axpy(wl, gi, &mut df[l * d..(l + 1) * d]);
                        }
                        if weights.fallback[i] {
                            continue;
                        }
                        let c: Vec<f64> = nbrs.iter().map(|&l| dot(gi, &fv[l * d..(l + 1) * d])).collect();
                        let cw: f64 = c.iter().zip(w).map(|(a, b)| a * b).sum();
                        let sum = weights.sums[i];
                        for (m, &l) in nbrs.iter().enumerate() {
                            let ds = (c[m] - cw) / sum;
                            axpy(ds, &fv[l * d..(l + 1) * d], &mut df[i * d..(i + 1) * d]);
                            axpy(ds, &fv[i * d..(i + 1) * d], &mut df[l * d..(l + 1) * d]);
                        }
                    }
                }
            }
            Op::ScatterMax { x, source } => {
                if let Some(dx) = buf!(*x) {
                    for (gi, src) in g.iter().zip(source) {
                        if let Some(k) = src {
                            dx[*k] += gi;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let c_out = nodes[w.0].value.shape()[0];
                let kk = geom.c_in * geom.k * geom.k;
                let positions = geom.out_h * geom.out_w;
                if let Some(dw) = buf!(*w) {
                    gemm(c_out, positions, kk, g, false, cols, true, 1.0, dw);
                }
                if let Some(db) = buf!(*b) {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[o * positions..(o + 1) * positions].iter().sum::<f64>();
                    }
                }
                if let Some(dx) = buf!(*x) {
                    let mut dcols = vec![0.0; kk * positions];
                    gemm(kk, c_out, positions, val(*w), true, g, false, 0.0, &mut dcols);
                    col2im_add(
                        &dcols, geom.c_in, geom.h, geom.w, geom.k, geom.stride, geom.pad, geom.out_h, geom.out_w, dx,
                    );
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = nodes[x.0].value.shape();
                let c = shape[0];
                let plane = shape[1] * shape[2];
                let gv = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ch in 0..c {
                    for k in ch * plane..(ch + 1) * plane {
                        sum_g[ch] += g[k];
                        sum_gx[ch] += g[k] * xhat[k];
                    }
                }
                if let Some(dg) = buf!(*gamma) {
                    axpy(1.0, &sum_gx, dg);
                }
                if let Some(db) = buf!(*beta) {
                    axpy(1.0, &sum_g, db);
                }
                if let Some(dx) = buf!(*x) {
                    let m = plane as f64;
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        for k in ch * plane..(ch + 1) * plane {
                            dx[k] += if *train {
                                scale * (g[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
            }
            Op::Upsample2x { a } => {
                let s = nodes[a.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                if let Some(da) = buf!(*a) {
                    let (h2, w2) = (2 * h, 2 * w);
                    for ch in 0..c {
                        for y in 0..h2 {
                            for x in 0..w2 {
                                da[(ch * h + y / 2) * w + x / 2] += g[(ch * h2 + y) * w2 + x];
                            }
                        }
                    }
                }
            }
            Op::BceMean { z, target } => {
                let zv = val(*z);
                if let Some(dz) = buf!(*z) {
                    let n = zv.len() as f64;
                    for (d, &v) in dz.iter_mut().zip(zv) {
                        *d += g[0] * (sigmoid(v) - target) / n;
                    }
                }
            }
            Op::SmoothL1Sum { pred, target } => {
                let pv = val(*pred);
                if let Some(dp) = buf!(*pred) {
                    for ((d, p), t) in dp.iter_mut().zip(pv).zip(target) {
                        let e = p - t;
                        *d += g[0] * if e.abs() < 1.0 { e } else { e.signum() };
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, or `None` when it needs no gradient.
fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

/// Row-softmax attention weights among `t` rows of width `d`, excluding the
/// diagonal. Returned as a dense `t x t` matrix with zeros on the diagonal.
pub fn attention_scores(f: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; t * t];
    if t < 2 {
        return alpha;
    }
    for j in 0..t {
        let fj = &f[j * d..(j + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for k in 0..t {
            if k != j {
                let e = dot(fj, &f[k * d..(k + 1) * d]);
                alpha[j * t + k] = e;
                max = max.max(e);
            }
        }
        let mut z = 0.0;
        for k in 0..t {
            if k != j {
                let e = (alpha[j * t + k] - max).exp();
                alpha[j * t + k] = e;
                z += e;
            }
        }
        for k in 0..t {
            alpha[j * t + k] /= z;
        }
    }
    alpha
}
