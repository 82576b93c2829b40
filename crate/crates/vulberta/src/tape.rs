//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; each
//! node stores its value and the operation that produced it. [`Tape::backward`]
//! walks the list in reverse accumulating gradients. All arithmetic is f64.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    /// Position of this node on its tape; indexes into [`Tape::backward`]'s
    /// gradient vector.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// Elementwise addition; the right operand may be a 1-D bias broadcast
    /// over the rows of a 2-D left operand.
    Add(VarId, VarId),
    /// Elementwise product with a same-shape operand.
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// Add a constant array (same shape). The constant has no gradient.
    AddConst(VarId),
    /// 2-D matrix product.
    Matmul(VarId, VarId),
    Transpose(VarId),
    Reshape(VarId),
    /// Select rows of a 2-D array.
    GatherRows(VarId, Vec<usize>),
    /// Rectangular block of a 2-D array.
    Slice2D(VarId, [usize; 4]), // row0, row1, col0, col1
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    /// Softmax over the last axis of a 2-D array.
    SoftmaxRows(VarId),
    /// Layer normalization over the last axis with learned gain/bias.
    LayerNorm { x: VarId, gamma: VarId, beta: VarId },
    Gelu(VarId),
    Tanh(VarId),
    Relu(VarId),
    /// Column-wise maximum of a 2-D array -> [1, cols]; argmax rows saved.
    MaxCols(VarId, Vec<usize>),
    /// Mean weighted cross-entropy of row-wise logits against target classes.
    CrossEntropy {
        logits: VarId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn value2(&self, id: VarId) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("node is 2-D")
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Insert a leaf. Leaves are parameters or constants; constants simply
    /// have their gradients ignored.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> VarId {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> VarId {
        self.leaf(value.into_dyn())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let value = if av.shape() == bv.shape() {
            av + bv
        } else {
            // 2-D plus 1-D row-broadcast bias
            let a2 = av.view().into_dimensionality::<Ix2>().expect("lhs 2-D");
            let b1 = bv.view().into_dimensionality::<Ix1>().expect("rhs 1-D bias");
            (&a2 + &b1).into_dyn()
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let value = &self.nodes[a.0].value * factor;
        self.push(value, Op::Scale(a, factor))
    }

    /// Add a constant (no gradient flows into it).
    pub fn add_const(&mut self, a: VarId, constant: &ArrayD<f64>) -> VarId {
        let value = &self.nodes[a.0].value + constant;
        self.push(value, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value2(a).dot(&self.value2(b)).into_dyn();
        self.push(value, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let value = self.value2(a).t().to_owned().into_dyn();
        self.push(value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        self.push(value, Op::Reshape(a))
    }

    pub fn gather_rows(&mut self, a: VarId, rows: Vec<usize>) -> VarId {
        let src = self.value2(a);
        let mut out = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&src.row(r));
        }
        self.push(out.into_dyn(), Op::GatherRows(a, rows))
    }

    pub fn slice2d(&mut self, a: VarId, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> VarId {
        let src = self.value2(a);
        let value = src
            .slice(ndarray::s![rows.start..rows.end, cols.start..cols.end])
            .to_owned()
            .into_dyn();
        self.push(value, Op::Slice2D(a, [rows.start, rows.end, cols.start, cols.end]))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        let views: Vec<_> = parts.iter().map(|&p| self.value2(p)).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("row concat").into_dyn();
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let views: Vec<_> = parts.iter().map(|&p| self.value2(p)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("col concat").into_dyn();
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let src = self.value2(a);
        let mut out = src.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let src = self.value2(x);
        let g = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().expect("gamma 1-D");
        let b = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().expect("beta 1-D");
        let mut out = src.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.mean().expect("non-empty row");
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().expect("non-empty row");
            let denom = (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / denom * g[j] + b[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNorm { x, gamma, beta })
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Column-wise max over the rows of a 2-D array, result shape [1, cols].
    pub fn max_cols(&mut self, a: VarId) -> VarId {
        let src = self.value2(a);
        let mut argmax = vec![0usize; src.ncols()];
        let mut out = Array2::zeros((1, src.ncols()));
        for j in 0..src.ncols() {
            let mut best = f64::NEG_INFINITY;
            for i in 0..src.nrows() {
                if src[[i, j]] > best {
                    best = src[[i, j]];
                    argmax[j] = i;
                }
            }
            out[[0, j]] = best;
        }
        self.push(out.into_dyn(), Op::MaxCols(a, argmax))
    }

    /// Weighted mean cross-entropy over rows of logits; `weights[i]` scales
    /// sample i, and the result is `sum(w_i * ce_i) / sum(w_i)` so uniform
    /// weights equal the unweighted mean exactly.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[usize], weights: Option<&[f64]>) -> VarId {
        let lv = self.value2(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logits row");
        let weights: Vec<f64> = match weights {
            Some(w) => targets.iter().map(|&t| w[t]).collect(),
            None => vec![1.0; targets.len()],
        };
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let logsum = row.mapv(|v| (v - max).exp()).sum().ln() + max;
            total += weights[i] * (logsum - row[t]);
        }
        let wsum: f64 = weights.iter().sum();
        let value = ndarray::arr0(total / wsum).into_dyn();
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
            },
        )
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        *self.nodes[id.0].value.iter().next().expect("scalar node")
    }

    /// Reverse pass from a scalar output. Returns one gradient per node;
    /// callers read off the leaves they care about.
    pub fn backward(&self, output: VarId) -> Vec<ArrayD<f64>> {
        let mut grads: Vec<ArrayD<f64>> = self
            .nodes
            .iter()
            .map(|n| ArrayD::zeros(n.value.raw_dim()))
            .collect();
        grads[output.0] = ArrayD::ones(self.nodes[output.0].value.raw_dim());

        for i in (0..self.nodes.len()).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = grads[i].clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0] += &grad;
                    let bshape = self.nodes[b.0].value.shape().to_vec();
                    if bshape == grad.shape() {
                        grads[b.0] += &grad;
                    } else {
                        // bias broadcast over rows: sum the row axis away
                        let g2 = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                        let summed = g2.sum_axis(Axis(0));
                        grads[b.0] += &summed.into_dyn();
                    }
                }
                Op::Mul(a, b) => {
                    let ga = &grad * &self.nodes[b.0].value;
                    let gb = &grad * &self.nodes[a.0].value;
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::Scale(a, f) => {
                    grads[a.0] += &(&grad * *f);
                }
                Op::AddConst(a) => {
                    grads[a.0] += &grad;
                }
                Op::Matmul(a, b) => {
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    let av = self.value2(*a);
                    let bv = self.value2(*b);
                    let ga = g.dot(&bv.t());
                    let gb = av.t().dot(&g);
                    grads[a.0] += &ga.into_dyn();
                    grads[b.0] += &gb.into_dyn();
                }
                Op::Transpose(a) => {
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    grads[a.0] += &g.t().to_owned().into_dyn();
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let g = grad.clone().into_shape_with_order(shape).expect("reshape grad");
                    grads[a.0] += &g;
                }
                Op::GatherRows(a, rows) => {
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    let ga = grads[a.0].view_mut().into_dimensionality::<Ix2>().expect("2-D");
                    let mut ga = ga;
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                }
                Op::Slice2D(a, [r0, _r1, c0, _c1]) => {
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    let mut ga = grads[a.0].view_mut().into_dimensionality::<Ix2>().expect("2-D");
                    let mut dst = ga.slice_mut(ndarray::s![
                        *r0..*r0 + g.nrows(),
                        *c0..*c0 + g.ncols()
                    ]);
                    dst += &g;
                }
                Op::ConcatRows(parts) => {
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    let mut row = 0;
                    for &p in parts {
                        let n = self.value2(p).nrows();
                        let gp = g.slice(ndarray::s![row..row + n, ..]).to_owned();
                        grads[p.0] += &gp.into_dyn();
                        row += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    let mut col = 0;
                    for &p in parts {
                        let n = self.value2(p).ncols();
                        let gp = g.slice(ndarray::s![.., col..col + n]).to_owned();
                        grads[p.0] += &gp.into_dyn();
                        col += n;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value2(VarId(i));
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    let mut ga = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    grads[a.0] += &ga.into_dyn();
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.value2(*x);
                    let gv = self.nodes[gamma.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix1>()
                        .expect("gamma 1-D");
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    let n = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggamma = Array1::zeros(xv.ncols());
                    let mut gbeta = Array1::zeros(xv.ncols());
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.mean().expect("non-empty");
                        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().expect("non-empty");
                        let denom = (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) / denom).collect();
                        let gr = g.row(r);
                        let gy: Vec<f64> = gr.iter().zip(gv.iter()).map(|(g, gm)| g * gm).collect();
                        let mean_gy: f64 = gy.iter().sum::<f64>() / n;
                        let mean_gy_xhat: f64 =
                            gy.iter().zip(&xhat).map(|(g, x)| g * x).sum::<f64>() / n;
                        for c in 0..xv.ncols() {
                            gx[[r, c]] = (gy[c] - mean_gy - xhat[c] * mean_gy_xhat) / denom;
                            ggamma[c] += gr[c] * xhat[c];
                            gbeta[c] += gr[c];
                        }
                    }
                    grads[x.0] += &gx.into_dyn();
                    grads[gamma.0] += &ggamma.into_dyn();
                    grads[beta.0] += &gbeta.into_dyn();
                }
                Op::Gelu(a) => {
                    let ga = self.nodes[a.0].value.mapv(gelu_grad) * &grad;
                    grads[a.0] += &ga;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = y.mapv(|v| 1.0 - v * v) * &grad;
                    grads[a.0] += &ga;
                }
                Op::Relu(a) => {
                    let ga = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }) * &grad;
                    grads[a.0] += &ga;
                }
                Op::MaxCols(a, argmax) => {
                    let g = grad.view().into_dimensionality::<Ix2>().expect("2-D grad");
                    let mut ga = grads[a.0].view_mut().into_dimensionality::<Ix2>().expect("2-D");
                    for (j, &r) in argmax.iter().enumerate() {
                        ga[[r, j]] += g[[0, j]];
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let gscalar = *grad.iter().next().expect("scalar grad");
                    let lv = self.value2(*logits);
                    let wsum: f64 = weights.iter().sum();
                    let mut gl = Array2::zeros(lv.raw_dim());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row(r);
                        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        let exps = row.mapv(|v| (v - max).exp());
                        let sum = exps.sum();
                        let w = weights[r] / wsum * gscalar;
                        for c in 0..lv.ncols() {
                            let p = exps[c] / sum;
                            gl[[r, c]] = w * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    grads[logits.0] += &gl.into_dyn();
                }
            }
        }
        grads
    }
}

// tanh-form GELU
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Central finite differences on an arbitrary leaf coordinate.
    fn finite_diff<F>(build: F, leaf_values: &mut [ArrayD<f64>], leaf: usize, coord: usize) -> f64
    where
        F: Fn(&mut Tape, &[VarId]) -> VarId,
    {
        let eps = 1e-6;
        let mut eval = |delta: f64| {
            let orig = leaf_values[leaf].as_slice_mut().unwrap()[coord];
            leaf_values[leaf].as_slice_mut().unwrap()[coord] = orig + delta;
            let mut tape = Tape::new();
            let ids: Vec<VarId> = leaf_values.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = build(&mut tape, &ids);
            let val = tape.scalar(out);
            leaf_values[leaf].as_slice_mut().unwrap()[coord] = orig;
            val
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    }

    fn check_all<F>(build: F, mut leaf_values: Vec<ArrayD<f64>>, tol: f64)
    where
        F: Fn(&mut Tape, &[VarId]) -> VarId + Copy,
    {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = leaf_values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out);
        for (li, id) in ids.iter().enumerate() {
            let analytic = grads[id.0].clone();
            for coord in 0..analytic.len() {
                let numeric = finite_diff(build, &mut leaf_values, li, coord);
                let a = analytic.as_slice().unwrap()[coord];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "leaf {li} coord {coord}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let a = arr2(&[[0.5, -1.0], [2.0, 0.3]]).into_dyn();
        let b = arr2(&[[1.5, 0.2], [-0.7, 1.1]]).into_dyn();
        check_all(
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]);
                let s = t.softmax_rows(m);
                t.cross_entropy(s, &[0, 1], None)
            },
            vec![a, b],
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm_gelu() {
        let x = arr2(&[[0.5, -1.0, 0.1], [2.0, 0.3, -0.4]]).into_dyn();
        let gamma = ndarray::arr1(&[1.2, 0.8, 1.0]).into_dyn();
        let beta = ndarray::arr1(&[0.0, 0.1, -0.2]).into_dyn();
        check_all(
            |t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2]);
                let g = t.gelu(ln);
                t.cross_entropy(g, &[2, 0], None)
            },
            vec![x, gamma, beta],
            1e-4,
        );
    }

    #[test]
    fn grad_bias_broadcast_and_tanh() {
        let x = arr2(&[[0.5, -1.0], [2.0, 0.3], [0.1, 0.2]]).into_dyn();
        let bias = ndarray::arr1(&[0.3, -0.2]).into_dyn();
        check_all(
            |t, ids| {
                let s = t.add(ids[0], ids[1]);
                let h = t.tanh(s);
                t.cross_entropy(h, &[0, 1, 0], None)
            },
            vec![x, bias],
            1e-5,
        );
    }

    #[test]
    fn grad_slice_concat_max() {
        let x = arr2(&[[0.5, -1.0, 0.7], [2.0, 0.3, -0.1], [0.9, 0.8, 0.2]]).into_dyn();
        check_all(
            |t, ids| {
                let top = t.slice2d(ids[0], 0..2, 0..3);
                let bottom = t.slice2d(ids[0], 2..3, 0..3);
                let joined = t.concat_rows(&[top, bottom]);
                let relu = t.relu(joined);
                let pooled = t.max_cols(relu);
                t.cross_entropy(pooled, &[1], None)
            },
            vec![x],
            1e-5,
        );
    }

    #[test]
    fn grad_gather_and_transpose() {
        let x = arr2(&[[0.5, -1.0], [2.0, 0.3], [0.4, 0.8]]).into_dyn();
        let w = arr2(&[[0.7, -0.4], [0.1, 0.9]]).into_dyn();
        check_all(
            |t, ids| {
                let g = t.gather_rows(ids[0], vec![2, 0, 2]);
                let wt = t.transpose(ids[1]);
                let m = t.matmul(g, wt);
                t.cross_entropy(m, &[0, 1, 1], None)
            },
            vec![x, w],
            1e-5,
        );
    }

    #[test]
    fn weighted_cross_entropy_matches_manual() {
        let logits = arr2(&[[2.0, 0.5], [0.1, 1.0]]);
        let mut tape = Tape::new();
        let l = tape.leaf2(logits.clone());
        let loss = tape.cross_entropy(l, &[0, 1], Some(&[2.0, 1.0]));
        let mut expected = 0.0;
        let weights = [2.0, 1.0];
        for (i, &t) in [0usize, 1].iter().enumerate() {
            let row = logits.row(i);
            let logsum = row.mapv(f64::exp).sum().ln();
            expected += weights[t] * (logsum - row[t]);
        }
        expected /= 3.0;
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_equal_unweighted() {
        let logits = arr2(&[[2.0, 0.5], [0.1, 1.0], [0.3, 0.3]]);
        let mut tape = Tape::new();
        let l = tape.leaf2(logits.clone());
        let a = tape.cross_entropy(l, &[0, 1, 0], Some(&[1.0, 1.0]));
        let l2 = tape.leaf2(logits);
        let b = tape.cross_entropy(l2, &[0, 1, 0], None);
        assert_eq!(tape.scalar(a), tape.scalar(b));
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let logits = Array2::zeros((4, 20));
        let mut tape = Tape::new();
        let l = tape.leaf2(logits);
        let loss = tape.cross_entropy(l, &[3, 7, 0, 19], None);
        assert!((tape.scalar(loss) - (20.0f64).ln()).abs() < 1e-12);
    }
}
