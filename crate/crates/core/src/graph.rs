//! Reverse-mode autodiff over dense matrices.
//!
//! A [`Graph`] is an eager tape: every op computes its value when it is
//! recorded, and `backward` walks the tape in reverse accumulating gradients
//! into the nodes that asked for them. Ops that the losses need in fused
//! form (cross-entropy, the angular-margin loss, batch-hard triplet mining)
//! are single tape nodes so their backward passes stay exact and cheap.
//!
//! Shape mismatches are programmer errors and panic; data-dependent
//! validation happens in the modules that build graphs.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::matrix::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a @ b
    MatMul { a: usize, b: usize },
    /// a @ b^T
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// rows of `a` plus a 1 x cols bias row
    AddBias { a: usize, bias: usize },
    Scale { a: usize, k: f64 },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, from: usize, to: usize },
    /// single row of `a` as a 1 x cols matrix
    Row { a: usize, index: usize },
    SoftmaxRows { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: usize },
    /// rows divided by max(row L2 norm, eps)
    NormalizeRows { a: usize, inv_norms: Vec<f64>, clamped: Vec<bool> },
    /// sum(a .* w) as a scalar; `w` is constant
    DotConst { a: usize, w: Vec<f64> },
    /// sum_i k_i * t_i over scalar nodes
    SumScaled { terms: Vec<(usize, f64)> },
    /// per-element x * scale[i % period] + shift[i % period]
    AffineChannels { a: usize, scale: Vec<f64> },
    /// clamp(base + mask .* canvas, lo, hi); `base` and `mask` constant
    MaskedAddClamp { canvas: usize, mask: Vec<f64>, lo: f64, hi: f64 },
    /// sliding-window patch extraction from an H x (W*3) image matrix
    Patchify { a: usize, patch: usize, stride: usize, grid_h: usize, grid_w: usize },
    /// mean over rows of -log softmax(logits)[label]
    CrossEntropyMean { logits: usize, labels: Vec<usize>, probs: Matrix },
    /// additive-angular-margin softmax loss on normalized features/weights
    AngularMargin {
        feats: usize,
        weights: usize,
        labels: Vec<usize>,
        margin: f64,
        scale: f64,
        feat_inv_norms: Vec<f64>,
        w_inv_norms: Vec<f64>,
        cos: Matrix,
        probs: Matrix,
    },
    /// batch-hard triplet loss with squared Euclidean distances
    BatchHardTriplet {
        feats: usize,
        hard_pos: Vec<usize>,
        hard_neg: Vec<usize>,
        active: Vec<bool>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Eager autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Tracked input: gradients are accumulated and kept for reading.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input: backward never visits it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the most recent backward pass.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a: a.0, b: b.0 }, needs)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul_nt(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNT { a: a.0, b: b.0 }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add shape");
        let mut value = av.clone();
        value.add_scaled(bv, 1.0);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a: a.0, b: b.0 }, needs)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(bv.rows(), 1, "bias must be a row");
        assert_eq!(av.cols(), bv.cols(), "bias width");
        let mut value = av.clone();
        let b_row = bv.row(0).to_vec();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(b_row.iter()) {
                *x += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddBias { a: a.0, bias: bias.0 }, needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        value.data_mut().iter_mut().for_each(|x| *x *= k);
        let needs = self.needs(a);
        self.push(value, Op::Scale { a: a.0, k }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), rows, "concat_cols height");
            for r in 0..rows {
                out.row_mut(r)[at..at + v.cols()].copy_from_slice(v.row(r));
            }
            at += v.cols();
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(from < to && to <= av.cols(), "slice_cols range");
        let mut out = Matrix::zeros(av.rows(), to - from);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[from..to]);
        }
        let needs = self.needs(a);
        self.push(out, Op::SliceCols { a: a.0, from, to }, needs)
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(index < av.rows(), "row index");
        let out = Matrix::from_vec(1, av.cols(), av.row(index).to_vec());
        let needs = self.needs(a);
        self.push(out, Op::Row { a: a.0, index }, needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let needs = self.needs(a);
        self.push(out, Op::SoftmaxRows { a: a.0 }, needs)
    }

    /// Row-wise layer normalization with learnable gain/offset rows.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert_eq!(gv.shape(), (1, av.cols()), "layer_norm gamma");
        assert_eq!(bv.shape(), (1, av.cols()), "layer_norm beta");
        let n = av.cols() as f64;
        let mut mean = Vec::with_capacity(av.rows());
        let mut inv_std = Vec::with_capacity(av.rows());
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let mu: f64 = row.iter().sum::<f64>() / n;
            let var: f64 = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / fmath::sqrt(var + eps);
            mean.push(mu);
            inv_std.push(inv);
            let out_row = out.row_mut(r);
            for c in 0..row.len() {
                out_row[c] = (row[c] - mu) * inv * gv.row(0)[c] + bv.row(0)[c];
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, mean, inv_std },
            needs,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data_mut().iter_mut().for_each(|x| *x = fmath::gelu(*x));
        let needs = self.needs(a);
        self.push(out, Op::Gelu { a: a.0 }, needs)
    }

    /// Row-wise L2 normalization; rows with norm below `eps` are divided by
    /// `eps` instead (and treated as a plain scaling in backward).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        assert!(eps > 0.0, "normalize_rows eps must be positive");
        let av = &self.nodes[a.0].value;
        let mut inv_norms = Vec::with_capacity(av.rows());
        let mut clamped = Vec::with_capacity(av.rows());
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let norm = fmath::sqrt(row.iter().map(|x| x * x).sum::<f64>());
            clamped.push(norm < eps);
            let inv = 1.0 / norm.max(eps);
            inv_norms.push(inv);
            for (o, x) in out.row_mut(r).iter_mut().zip(row.iter()) {
                *o = x * inv;
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::NormalizeRows { a: a.0, inv_norms, clamped }, needs)
    }

    /// Scalar `sum(a .* w)` against a constant weight vector.
    pub fn dot_const(&mut self, a: Var, w: &[f64]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.len(), w.len(), "dot_const length");
        let s: f64 = av.iter().zip(w.iter()).map(|(x, y)| x * y).sum();
        let needs = self.needs(a);
        self.push(Matrix::scalar(s), Op::DotConst { a: a.0, w: w.to_vec() }, needs)
    }

    /// Scalar linear combination of scalar nodes.
    pub fn sum_scaled(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut s = 0.0;
        for (v, k) in terms {
            assert_eq!(self.nodes[v.0].value.shape(), (1, 1), "sum_scaled term");
            s += k * self.nodes[v.0].value.item();
        }
        let needs = terms.iter().any(|(v, _)| self.needs(*v));
        self.push(
            Matrix::scalar(s),
            Op::SumScaled { terms: terms.iter().map(|(v, k)| (v.0, *k)).collect() },
            needs,
        )
    }

    /// Per-element affine map cycling through `scale`/`shift` (channel
    /// standardization on interleaved images).
    pub fn affine_channels(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Var {
        assert_eq!(scale.len(), shift.len());
        let period = scale.len();
        let mut out = self.nodes[a.0].value.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x * scale[i % period] + shift[i % period];
        }
        let needs = self.needs(a);
        self.push(out, Op::AffineChannels { a: a.0, scale: scale.to_vec() }, needs)
    }

    /// `clamp(base + mask .* canvas, lo, hi)` with constant base and mask.
    pub fn masked_add_clamp(&mut self, canvas: Var, base: Matrix, mask: &[f64], lo: f64, hi: f64) -> Var {
        let cv = &self.nodes[canvas.0].value;
        assert_eq!(cv.shape(), base.shape(), "masked_add_clamp canvas shape");
        assert_eq!(mask.len(), base.len(), "masked_add_clamp mask length");
        let mut out = base.clone();
        for ((o, c), m) in out.data_mut().iter_mut().zip(cv.iter()).zip(mask.iter()) {
            *o = (*o + m * c).clamp(lo, hi);
        }
        let needs = self.needs(canvas);
        self.push(out, Op::MaskedAddClamp { canvas: canvas.0, mask: mask.to_vec(), lo, hi }, needs)
    }

    /// Extract the sliding-window patches of an H x (W*3) image matrix as an
    /// N x (patch*patch*3) matrix in grid row-major order.
    pub fn patchify(&mut self, a: Var, patch: usize, stride: usize, grid_h: usize, grid_w: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.cols() % 3, 0, "image matrix must be H x (W*3)");
        assert!(grid_h > 0 && grid_w > 0, "empty patch grid");
        assert!((grid_h - 1) * stride + patch <= av.rows(), "grid exceeds image height");
        assert!(((grid_w - 1) * stride + patch) * 3 <= av.cols(), "grid exceeds image width");
        let n = grid_h * grid_w;
        let mut out = Matrix::zeros(n, patch * patch * 3);
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let dst = out.row_mut(gy * grid_w + gx);
                for py in 0..patch {
                    let src = av.row(gy * stride + py);
                    let x0 = gx * stride * 3;
                    dst[py * patch * 3..(py + 1) * patch * 3].copy_from_slice(&src[x0..x0 + patch * 3]);
                }
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::Patchify { a: a.0, patch, stride, grid_h, grid_w }, needs)
    }

    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.rows(), labels.len(), "one label per row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < lv.cols(), "label out of range");
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            for x in row.iter_mut() {
                *x = fmath::exp(*x - lse);
            }
        }
        loss /= labels.len() as f64;
        let needs = self.needs(logits);
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropyMean { logits: logits.0, labels: labels.to_vec(), probs },
            needs,
        )
    }

    /// Additive-angular-margin softmax loss. Feature rows and weight rows are
    /// L2-normalized; the true-class logit becomes `scale * cos(theta + margin)`,
    /// the rest `scale * cos(theta)`. Callers must reject zero-norm rows first.
    pub fn angular_margin_loss(&mut self, feats: Var, weights: Var, labels: &[usize], margin: f64, scale: f64) -> Var {
        let fv = &self.nodes[feats.0].value;
        let wv = &self.nodes[weights.0].value;
        assert_eq!(fv.cols(), wv.cols(), "feature/weight width");
        assert_eq!(fv.rows(), labels.len(), "one label per row");
        let (b, c) = (fv.rows(), wv.rows());
        let feat_inv_norms: Vec<f64> = (0..b)
            .map(|i| 1.0 / fmath::sqrt(fv.row(i).iter().map(|x| x * x).sum::<f64>()))
            .collect();
        let w_inv_norms: Vec<f64> = (0..c)
            .map(|j| 1.0 / fmath::sqrt(wv.row(j).iter().map(|x| x * x).sum::<f64>()))
            .collect();
        let cos_m = fmath::cos(margin);
        let sin_m = fmath::sin(margin);
        let mut cos = Matrix::zeros(b, c);
        let mut probs = Matrix::zeros(b, c);
        let mut loss = 0.0;
        for i in 0..b {
            let fi = fv.row(i);
            for (j, &w_inv) in w_inv_norms.iter().enumerate() {
                let dot: f64 = fi.iter().zip(wv.row(j).iter()).map(|(x, y)| x * y).sum();
                cos.set(i, j, dot * feat_inv_norms[i] * w_inv);
            }
            let y = labels[i];
            assert!(y < c, "label out of range");
            let logits = probs.row_mut(i);
            logits.copy_from_slice(cos.row(i));
            let cy = logits[y];
            let sin_theta = fmath::sqrt((1.0 - cy * cy).max(0.0));
            logits[y] = cy * cos_m - sin_theta * sin_m;
            for x in logits.iter_mut() {
                *x *= scale;
            }
            let lse = log_sum_exp(logits);
            loss += lse - logits[y];
            for x in logits.iter_mut() {
                *x = fmath::exp(*x - lse);
            }
        }
        loss /= b as f64;
        let needs = self.needs(feats) || self.needs(weights);
        self.push(
            Matrix::scalar(loss),
            Op::AngularMargin {
                feats: feats.0,
                weights: weights.0,
                labels: labels.to_vec(),
                margin,
                scale,
                feat_inv_norms,
                w_inv_norms,
                cos,
                probs,
            },
            needs,
        )
    }

    /// Batch-hard triplet loss: per anchor, the farthest same-label and the
    /// nearest different-label feature by squared Euclidean distance, hinged
    /// at `margin` and averaged over anchors. Callers guarantee every label
    /// appears at least twice and at least two labels are present.
    pub fn batch_hard_triplet(&mut self, feats: Var, labels: &[usize], margin: f64) -> Var {
        let fv = &self.nodes[feats.0].value;
        let b = fv.rows();
        assert_eq!(b, labels.len(), "one label per row");
        let dist = pairwise_sq_dist(fv);
        let mut hard_pos = vec![0usize; b];
        let mut hard_neg = vec![0usize; b];
        let mut active = vec![false; b];
        let mut loss = 0.0;
        for a in 0..b {
            // total_cmp ranks NaN above +inf, so a NaN distance is mined as
            // the hardest positive and poisons the loss value instead of
            // being silently dropped; the step then aborts on the non-finite
            // check rather than training on garbage
            let mut dp = f64::NEG_INFINITY;
            let mut dn = f64::INFINITY;
            let (mut saw_pos, mut saw_neg) = (false, false);
            for j in 0..b {
                if j == a {
                    continue;
                }
                let d = dist[a * b + j];
                if labels[j] == labels[a] {
                    if !saw_pos || d.total_cmp(&dp) == core::cmp::Ordering::Greater {
                        dp = d;
                        hard_pos[a] = j;
                        saw_pos = true;
                    }
                } else if !saw_neg || d.total_cmp(&dn) == core::cmp::Ordering::Less {
                    dn = d;
                    hard_neg[a] = j;
                    saw_neg = true;
                }
            }
            assert!(saw_pos, "anchor without positive");
            assert!(saw_neg, "anchor without negative");
            let h = margin + dp - dn;
            // not `h > 0.0`: a NaN hinge must stay active so it reaches the
            // loss value instead of being dropped as inactive
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            let hinge_active = !(h <= 0.0);
            if hinge_active {
                active[a] = true;
                loss += h;
            }
        }
        loss /= b as f64;
        let needs = self.needs(feats);
        self.push(
            Matrix::scalar(loss),
            Op::BatchHardTriplet { feats: feats.0, hard_pos, hard_neg, active },
            needs,
        )
    }

    // ---- backward ----

    /// Backward from a scalar node with seed 1.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.shape(), (1, 1), "backward root must be scalar");
        self.backward_seeded(root, Matrix::scalar(1.0));
    }

    /// Backward from any node with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, root: Var, seed: Matrix) {
        assert_eq!(self.nodes[root.0].value.shape(), seed.shape(), "seed shape");
        accumulate(&mut self.grads, root.0, &seed);
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            backward_op(&self.nodes, &mut self.grads, idx, &g);
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: &Matrix) {
    match &mut grads[idx] {
        Some(buf) => buf.add_scaled(g, 1.0),
        slot => {
            *slot = Some(g.clone());
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Matrix>], nodes: &[Node], idx: usize) -> &'a mut Matrix {
    let (r, c) = nodes[idx].value.shape();
    grads[idx].get_or_insert_with(|| Matrix::zeros(r, c))
}

fn backward_op(nodes: &[Node], grads: &mut [Option<Matrix>], idx: usize, g: &Matrix) {
    let wants = |p: usize| nodes[p].needs_grad;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            if wants(*a) {
                g.matmul_nt_acc(&nodes[*b].value, grad_buf(grads, nodes, *a));
            }
            if wants(*b) {
                nodes[*a].value.matmul_tn_acc(g, grad_buf(grads, nodes, *b));
            }
        }
        Op::MatMulNT { a, b } => {
            if wants(*a) {
                g.matmul_acc(&nodes[*b].value, grad_buf(grads, nodes, *a));
            }
            if wants(*b) {
                g.matmul_tn_acc(&nodes[*a].value, grad_buf(grads, nodes, *b));
            }
        }
        Op::Add { a, b } => {
            if wants(*a) {
                grad_buf(grads, nodes, *a).add_scaled(g, 1.0);
            }
            if wants(*b) {
                grad_buf(grads, nodes, *b).add_scaled(g, 1.0);
            }
        }
        Op::AddBias { a, bias } => {
            if wants(*a) {
                grad_buf(grads, nodes, *a).add_scaled(g, 1.0);
            }
            if wants(*bias) {
                let gb = grad_buf(grads, nodes, *bias);
                for r in 0..g.rows() {
                    for (o, x) in gb.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                        *o += x;
                    }
                }
            }
        }
        Op::Scale { a, k } => {
            if wants(*a) {
                grad_buf(grads, nodes, *a).add_scaled(g, *k);
            }
        }
        Op::ConcatRows { parts } => {
            let mut at = 0;
            for p in parts {
                let rows = nodes[*p].value.rows();
                if wants(*p) {
                    let gp = grad_buf(grads, nodes, *p);
                    for r in 0..rows {
                        for (o, x) in gp.row_mut(r).iter_mut().zip(g.row(at + r).iter()) {
                            *o += x;
                        }
                    }
                }
                at += rows;
            }
        }
        Op::ConcatCols { parts } => {
            let mut at = 0;
            for p in parts {
                let cols = nodes[*p].value.cols();
                if wants(*p) {
                    let gp = grad_buf(grads, nodes, *p);
                    for r in 0..g.rows() {
                        for (o, x) in gp.row_mut(r).iter_mut().zip(g.row(r)[at..at + cols].iter()) {
                            *o += x;
                        }
                    }
                }
                at += cols;
            }
        }
        Op::SliceCols { a, from, to } => {
            if wants(*a) {
                let ga = grad_buf(grads, nodes, *a);
                for r in 0..g.rows() {
                    for (o, x) in ga.row_mut(r)[*from..*to].iter_mut().zip(g.row(r).iter()) {
                        *o += x;
                    }
                }
            }
        }
        Op::Row { a, index } => {
            if wants(*a) {
                let ga = grad_buf(grads, nodes, *a);
                for (o, x) in ga.row_mut(*index).iter_mut().zip(g.row(0).iter()) {
                    *o += x;
                }
            }
        }
        Op::SoftmaxRows { a } => {
            if wants(*a) {
                let y = &nodes[idx].value;
                let ga = grad_buf(grads, nodes, *a);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(x, y)| x * y).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *o += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, gamma, beta, mean, inv_std } => {
            let xv = &nodes[*a].value;
            let gv = &nodes[*gamma].value;
            let n = xv.cols() as f64;
            if wants(*beta) {
                let gb = grad_buf(grads, nodes, *beta);
                for r in 0..g.rows() {
                    for (o, x) in gb.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                        *o += x;
                    }
                }
            }
            if wants(*gamma) {
                let gg = grad_buf(grads, nodes, *gamma);
                for r in 0..g.rows() {
                    let xr = xv.row(r);
                    for (c, o) in gg.row_mut(0).iter_mut().enumerate() {
                        *o += g.row(r)[c] * (xr[c] - mean[r]) * inv_std[r];
                    }
                }
            }
            if wants(*a) {
                let ga = grad_buf(grads, nodes, *a);
                for r in 0..g.rows() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let gam = gv.row(0);
                    let mut sum_gy = 0.0;
                    let mut sum_gyx = 0.0;
                    for c in 0..xr.len() {
                        let gy = gr[c] * gam[c];
                        let xh = (xr[c] - mean[r]) * inv_std[r];
                        sum_gy += gy;
                        sum_gyx += gy * xh;
                    }
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        let gy = gr[c] * gam[c];
                        let xh = (xr[c] - mean[r]) * inv_std[r];
                        *o += inv_std[r] * (gy - sum_gy / n - xh * sum_gyx / n);
                    }
                }
            }
        }
        Op::Gelu { a } => {
            if wants(*a) {
                let xv = &nodes[*a].value;
                let ga = grad_buf(grads, nodes, *a);
                for ((o, &x), &gv) in ga.data_mut().iter_mut().zip(xv.iter()).zip(g.iter()) {
                    *o += gv * fmath::gelu_grad(x);
                }
            }
        }
        Op::NormalizeRows { a, inv_norms, clamped } => {
            if wants(*a) {
                let y = &nodes[idx].value;
                let ga = grad_buf(grads, nodes, *a);
                for r in 0..y.rows() {
                    let inv = inv_norms[r];
                    if clamped[r] {
                        // Division by the constant eps.
                        for (o, &gx) in ga.row_mut(r).iter_mut().zip(g.row(r).iter()) {
                            *o += gx * inv;
                        }
                    } else {
                        // d(x/|x|) = (I - y y^T) / |x| applied to the upstream row.
                        let yr = y.row(r);
                        let dot: f64 =
                            g.row(r).iter().zip(yr.iter()).map(|(gx, yx)| gx * yx).sum();
                        for ((o, &gx), &yx) in
                            ga.row_mut(r).iter_mut().zip(g.row(r).iter()).zip(yr.iter())
                        {
                            *o += inv * (gx - dot * yx);
                        }
                    }
                }
            }
        }
        Op::DotConst { a, w } => {
            if wants(*a) {
                let s = g.item();
                let ga = grad_buf(grads, nodes, *a);
                for (o, &wv) in ga.data_mut().iter_mut().zip(w.iter()) {
                    *o += s * wv;
                }
            }
        }
        Op::SumScaled { terms } => {
            let s = g.item();
            for (t, k) in terms {
                if wants(*t) {
                    grad_buf(grads, nodes, *t).data_mut()[0] += s * k;
                }
            }
        }
        Op::AffineChannels { a, scale, .. } => {
            if wants(*a) {
                let period = scale.len();
                let ga = grad_buf(grads, nodes, *a);
                for (i, (o, &gv)) in ga.data_mut().iter_mut().zip(g.iter()).enumerate() {
                    *o += gv * scale[i % period];
                }
            }
        }
        Op::MaskedAddClamp { canvas, mask, lo, hi, .. } => {
            if wants(*canvas) {
                let out = &nodes[idx].value;
                let gc = grad_buf(grads, nodes, *canvas);
                for (((o, &gv), &m), &y) in
                    gc.data_mut().iter_mut().zip(g.iter()).zip(mask.iter()).zip(out.iter())
                {
                    if y > *lo && y < *hi {
                        *o += gv * m;
                    }
                }
            }
        }
        Op::Patchify { a, patch, stride, grid_h, grid_w, .. } => {
            if wants(*a) {
                let ga = grad_buf(grads, nodes, *a);
                for gy in 0..*grid_h {
                    for gx in 0..*grid_w {
                        let src = g.row(gy * grid_w + gx);
                        for py in 0..*patch {
                            let dst = ga.row_mut(gy * stride + py);
                            let x0 = gx * stride * 3;
                            for (o, x) in dst[x0..x0 + patch * 3]
                                .iter_mut()
                                .zip(src[py * patch * 3..(py + 1) * patch * 3].iter())
                            {
                                *o += x;
                            }
                        }
                    }
                }
            }
        }
        Op::CrossEntropyMean { logits, labels, probs } => {
            if wants(*logits) {
                let s = g.item() / labels.len() as f64;
                let gl = grad_buf(grads, nodes, *logits);
                for (r, &y) in labels.iter().enumerate() {
                    let pr = probs.row(r);
                    let o = gl.row_mut(r);
                    for c in 0..pr.len() {
                        let delta = if c == y { 1.0 } else { 0.0 };
                        o[c] += s * (pr[c] - delta);
                    }
                }
            }
        }
        Op::AngularMargin {
            feats,
            weights,
            labels,
            margin,
            scale,
            feat_inv_norms,
            w_inv_norms,
            cos,
            probs,
        } => {
            let fv = &nodes[*feats].value;
            let wv = &nodes[*weights].value;
            let (b, c) = cos.shape();
            let s_up = g.item() / b as f64;
            let cos_m = fmath::cos(*margin);
            let sin_m = fmath::sin(*margin);
            // d loss / d cos[i][j]
            let mut dcos = Matrix::zeros(b, c);
            for (i, &y) in labels.iter().enumerate() {
                let pr = probs.row(i);
                let out = dcos.row_mut(i);
                for j in 0..c {
                    let delta = if j == y { 1.0 } else { 0.0 };
                    let dz = s_up * (pr[j] - delta) * scale;
                    if j == y {
                        let cy = cos.get(i, y);
                        let sin_theta = fmath::sqrt((1.0 - cy * cy).max(0.0)).max(1e-7);
                        out[j] = dz * (cos_m + sin_m * cy / sin_theta);
                    } else {
                        out[j] = dz;
                    }
                }
            }
            if wants(*feats) {
                let gf = grad_buf(grads, nodes, *feats);
                for (i, &f_inv) in feat_inv_norms.iter().enumerate() {
                    let fi = fv.row(i);
                    let out = gf.row_mut(i);
                    for (j, &w_inv) in w_inv_norms.iter().enumerate() {
                        let d = dcos.get(i, j);
                        if d == 0.0 {
                            continue;
                        }
                        let wj = wv.row(j);
                        let cij = cos.get(i, j);
                        for k in 0..fi.len() {
                            let u = fi[k] * f_inv;
                            let v = wj[k] * w_inv;
                            out[k] += d * (v - cij * u) * f_inv;
                        }
                    }
                }
            }
            if wants(*weights) {
                let gw = grad_buf(grads, nodes, *weights);
                for (i, &f_inv) in feat_inv_norms.iter().enumerate() {
                    let fi = fv.row(i);
                    for (j, &w_inv) in w_inv_norms.iter().enumerate() {
                        let d = dcos.get(i, j);
                        if d == 0.0 {
                            continue;
                        }
                        let cij = cos.get(i, j);
                        let wj = wv.row(j);
                        let out = gw.row_mut(j);
                        for k in 0..fi.len() {
                            let u = fi[k] * f_inv;
                            let v = wj[k] * w_inv;
                            out[k] += d * (u - cij * v) * w_inv;
                        }
                    }
                }
            }
        }
        Op::BatchHardTriplet { feats, hard_pos, hard_neg, active } => {
            if wants(*feats) {
                let fv = &nodes[*feats].value;
                let b = fv.rows();
                let s = g.item() / b as f64;
                let gf = grad_buf(grads, nodes, *feats);
                for a in 0..b {
                    if !active[a] {
                        continue;
                    }
                    let (p, n) = (hard_pos[a], hard_neg[a]);
                    for k in 0..fv.cols() {
                        let dap = fv.get(a, k) - fv.get(p, k);
                        let dan = fv.get(a, k) - fv.get(n, k);
                        // d(margin + |a-p|^2 - |a-n|^2)
                        gf.row_mut(a)[k] += s * 2.0 * (dap - dan);
                        gf.row_mut(p)[k] += s * -2.0 * dap;
                        gf.row_mut(n)[k] += s * 2.0 * dan;
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = fmath::exp(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| fmath::exp(x - max)).sum();
    max + fmath::ln(sum)
}

/// Squared Euclidean distances between all row pairs, computed as direct
/// difference sums so tests can reproduce values term for term.
pub fn pairwise_sq_dist(m: &Matrix) -> Vec<f64> {
    let b = m.rows();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let mut d = 0.0;
            for (x, y) in m.row(i).iter().zip(m.row(j).iter()) {
                let t = x - y;
                d += t * t;
            }
            out[i * b + j] = d;
            out[j * b + i] = d;
        }
    }
    out
}
