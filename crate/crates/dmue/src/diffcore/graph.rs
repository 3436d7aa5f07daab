//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node replays the tape in reverse and
//! accumulates gradients on every reachable node that requires them.
//!
//! Conventions, fixed so results are bit-reproducible across runs:
//! - all reductions run left-to-right in row-major order;
//! - `relu`/`prelu` use the negative-side slope at exactly 0;
//! - `row_l2_normalize` maps a zero row to a zero row with zero gradient
//!   (in checked mode a zero row is an error instead).
//!
//! Shape violations are programming errors and panic. Checked mode (see
//! [`Graph::new_checked`]) additionally panics on non-finite values and on
//! `log` of a non-positive input, naming the offending operation.

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    /// Parameter or constant input.
    Leaf,
    /// x·W + b with b broadcast over rows.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Multiplication by a compile-time constant factor.
    Scale { x: NodeId, factor: f64 },
    Square { x: NodeId },
    Relu { x: NodeId },
    /// Leaky rectifier with a learnable 1x1 slope.
    Prelu { x: NodeId, slope: NodeId },
    Sigmoid { x: NodeId },
    Log { x: NodeId },
    Exp { x: NodeId },
    RowSoftmax { x: NodeId },
    RowL2Normalize { x: NodeId },
    Mean { x: NodeId },
    Sum { x: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    FrobeniusNormSq { x: NodeId },
    /// Row-major selection of the entries where `mask` is true, as a 1xK row.
    MaskedSelect { x: NodeId, mask: Vec<bool> },
    /// Repeats an Nx1 column k times into an Nxk matrix.
    TileCols { x: NodeId, reps: usize },
    /// Identity on values; backward treats the input as a constant. The
    /// input id is kept so the provenance graph stays complete.
    StopGradient { #[allow(dead_code)] x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Square { .. } => "square",
            Op::Relu { .. } => "relu",
            Op::Prelu { .. } => "prelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::RowSoftmax { .. } => "row_softmax",
            Op::RowL2Normalize { .. } => "row_l2_normalize",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::FrobeniusNormSq { .. } => "frobenius_norm_sq",
            Op::MaskedSelect { .. } => "masked_select",
            Op::TileCols { .. } => "tile_cols",
            Op::StopGradient { .. } => "stop_gradient",
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape. Build the forward pass, call `backward`
/// once, read gradients, drop. A graph is confined to one thread; distinct
/// graphs are independent.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    checked: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), checked: false }
    }

    /// Like [`Graph::new`] but every op validates that its output is finite
    /// (and `log` that its input is positive), panicking otherwise.
    pub fn new_checked() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), checked: true }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(values.len(), rows * cols);
        if self.checked {
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                panic!("diffcore: op `{}` produced non-finite value {bad} (checked mode)", op.name());
            }
        }
        self.nodes.push(Node { rows, cols, values, op, requires_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.node(id).values
    }

    /// Copies a node's values out as a [`Tensor`].
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.rows, n.cols, n.values.clone())
    }

    /// The value of a scalar node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let n = self.node(id);
        assert_eq!(n.values.len(), 1, "scalar_value on non-scalar node");
        n.values[0]
    }

    /// Gradient accumulated by the last `backward`, if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Registers a trainable leaf. The graph snapshots the data.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers a constant leaf. No gradient will flow to it.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(&Tensor::scalar(value))
    }

    // ── Operations ──────────────────────────────────────────────────────

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, d) = self.shape(x);
        let (dw, m) = self.shape(w);
        let (br, bc) = self.shape(b);
        assert_eq!(d, dw, "affine: x cols {d} != w rows {dw}");
        assert!(br == 1 && bc == m, "affine: bias must be 1x{m}, got {br}x{bc}");
        let mut out = vec![0.0; n * m];
        {
            let xv = self.values(x);
            let wv = self.values(w);
            let bv = self.values(b);
            matmul_into(xv, n, d, wv, m, &mut out);
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] += bv[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(n, m, out, Op::Affine { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = self.shape(a);
        let (kb, m) = self.shape(b);
        assert_eq!(k, kb, "matmul: inner dimensions {k} vs {kb}");
        let mut out = vec![0.0; n * m];
        matmul_into(self.values(a), n, k, self.values(b), m, &mut out);
        let rg = self.requires(a) || self.requires(b);
        self.push(n, m, out, Op::Matmul { a, b }, rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        transpose_into(self.values(x), r, c, &mut out);
        let rg = self.requires(x);
        self.push(c, r, out, Op::Transpose { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert!(
            ra == rb && ca == cb,
            "elementwise op: shape {ra}x{ca} vs {rb}x{cb}"
        );
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(ra, ca, out, op(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.values(x).iter().map(|v| v * factor).collect();
        let rg = self.requires(x);
        self.push(r, c, out, Op::Scale { x, factor }, rg)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, |v| v * v, |x| Op::Square { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, |v| if v > 0.0 { v } else { 0.0 }, |x| Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        if self.checked {
            if let Some(bad) = self.values(x).iter().find(|v| **v <= 0.0) {
                panic!("diffcore: log of non-positive value {bad} (checked mode)");
            }
        }
        self.map_op(x, |v| v.ln(), |x| Op::Log { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, |v| v.exp(), |x| Op::Exp { x })
    }

    fn map_op(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: impl Fn(NodeId) -> Op) -> NodeId {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.values(x).iter().map(|v| f(*v)).collect();
        let rg = self.requires(x);
        self.push(r, c, out, op(x), rg)
    }

    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(slope), (1, 1), "prelu: slope must be 1x1");
        let s = self.values(slope)[0];
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .map(|v| if *v > 0.0 { *v } else { s * *v })
            .collect();
        let rg = self.requires(x) || self.requires(slope);
        self.push(r, c, out, Op::Prelu { x, slope }, rg)
    }

    /// Softmax over each row, computed with max subtraction.
    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(c >= 1, "row_softmax: empty rows");
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v));
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let rg = self.requires(x);
        self.push(r, c, out, Op::RowSoftmax { x }, rg)
    }

    /// Scales each row to unit Euclidean norm. A zero row maps to a zero
    /// row (checked mode: error).
    pub fn row_l2_normalize(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                if self.checked {
                    panic!("diffcore: row_l2_normalize on zero-norm row {i} (checked mode)");
                }
                continue; // leave zeros
            }
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let rg = self.requires(x);
        self.push(r, c, out, Op::RowL2Normalize { x }, rg)
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.node(x).values.len();
        assert!(n > 0, "mean of empty tensor");
        let total: f64 = self.values(x).iter().sum();
        let rg = self.requires(x);
        self.push(1, 1, vec![total / n as f64], Op::Mean { x }, rg)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.values(x).iter().sum();
        let rg = self.requires(x);
        self.push(1, 1, vec![total], Op::Sum { x }, rg)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "concat_rows: column mismatch {ca} vs {cb}");
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.values(a));
        out.extend_from_slice(self.values(b));
        let rg = self.requires(a) || self.requires(b);
        self.push(ra + rb, ca, out, Op::ConcatRows { a, b }, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols: row mismatch {ra} vs {rb}");
        let mut out = Vec::with_capacity(ra * (ca + cb));
        let av = self.values(a);
        let bv = self.values(b);
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(ra, ca + cb, out, Op::ConcatCols { a, b }, rg)
    }

    /// Sum of squared entries (squared Frobenius norm), as a scalar node.
    pub fn frobenius_norm_sq(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.values(x).iter().map(|v| v * v).sum();
        let rg = self.requires(x);
        self.push(1, 1, vec![total], Op::FrobeniusNormSq { x }, rg)
    }

    /// Picks the entries where `mask` is true (row-major order) into a 1xK
    /// row vector. The mask must match the input's element count and select
    /// at least one entry.
    pub fn masked_select(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let n = self.node(x).values.len();
        assert_eq!(mask.len(), n, "masked_select: mask length {} vs {} elements", mask.len(), n);
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .zip(mask.iter())
            .filter(|(_, keep)| **keep)
            .map(|(v, _)| *v)
            .collect();
        assert!(!out.is_empty(), "masked_select: mask selects no entries");
        let k = out.len();
        let rg = self.requires(x);
        self.push(1, k, out, Op::MaskedSelect { x, mask: mask.to_vec() }, rg)
    }

    /// Repeats an Nx1 column `reps` times to an Nxreps matrix.
    pub fn tile_cols(&mut self, x: NodeId, reps: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(c, 1, "tile_cols: input must be a column vector, got {r}x{c}");
        assert!(reps >= 1, "tile_cols: reps must be >= 1");
        let xv = self.values(x);
        let mut out = Vec::with_capacity(r * reps);
        for i in 0..r {
            for _ in 0..reps {
                out.push(xv[i]);
            }
        }
        let rg = self.requires(x);
        self.push(r, reps, out, Op::TileCols { x, reps }, rg)
    }

    /// Identity on values; the backward pass treats the result as a constant.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let out = self.values(x).to_vec();
        self.push(r, c, out, Op::StopGradient { x }, false)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulates `d root / d node` into every node reachable from `root`
    /// that requires gradients. `root` must be scalar. Gradients from a
    /// previous `backward` on the same graph are cleared first.
    pub fn backward(&mut self, root: NodeId) {
        let n = self.node(root);
        assert_eq!(
            (n.rows, n.cols),
            (1, 1),
            "backward: root must be scalar, got {}x{}",
            n.rows,
            n.cols
        );
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[root.0].requires_grad {
            return; // purely constant graph
        }
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].clone() else { continue };
            propagate(&self.nodes, &mut self.grads, idx, &g);
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// out += contribution, allocating on first touch. Only called for nodes
/// that require gradients.
fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => {
            debug_assert_eq!(acc.len(), contribution.len());
            for (a, c) in acc.iter_mut().zip(contribution.iter()) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn matmul_into(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn transpose_into(x: &[f64], r: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
}

/// Applies one op's vector-Jacobian product, scattering `g` (the gradient at
/// `idx`) into the op's inputs.
fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    let node = &nodes[idx];
    let req = |id: NodeId| nodes[id.0].requires_grad;
    match &node.op {
        Op::Leaf | Op::StopGradient { .. } => {}
        Op::Affine { x, w, b } => {
            let (n, d) = (nodes[x.0].rows, nodes[x.0].cols);
            let m = node.cols;
            if req(*x) {
                // dX = g · Wᵀ
                let mut wt = vec![0.0; d * m];
                transpose_into(&nodes[w.0].values, d, m, &mut wt);
                let mut dx = vec![0.0; n * d];
                matmul_into(g, n, m, &wt, d, &mut dx);
                accumulate(grads, *x, dx);
            }
            if req(*w) {
                // dW = Xᵀ · g
                let mut xt = vec![0.0; n * d];
                transpose_into(&nodes[x.0].values, n, d, &mut xt);
                let mut dw = vec![0.0; d * m];
                matmul_into(&xt, d, n, g, m, &mut dw);
                accumulate(grads, *w, dw);
            }
            if req(*b) {
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += g[i * m + j];
                    }
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Matmul { a, b } => {
            let (n, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let m = node.cols;
            if req(*a) {
                let mut bt = vec![0.0; k * m];
                transpose_into(&nodes[b.0].values, k, m, &mut bt);
                let mut da = vec![0.0; n * k];
                matmul_into(g, n, m, &bt, k, &mut da);
                accumulate(grads, *a, da);
            }
            if req(*b) {
                let mut at = vec![0.0; n * k];
                transpose_into(&nodes[a.0].values, n, k, &mut at);
                let mut db = vec![0.0; k * m];
                matmul_into(&at, k, n, g, m, &mut db);
                accumulate(grads, *b, db);
            }
        }
        Op::Transpose { x } => {
            if req(*x) {
                let (r, c) = (node.rows, node.cols); // output shape
                let mut dx = vec![0.0; r * c];
                transpose_into(g, r, c, &mut dx);
                accumulate(grads, *x, dx);
            }
        }
        Op::Add { a, b } => {
            if req(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if req(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Sub { a, b } => {
            if req(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if req(*b) {
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul { a, b } => {
            if req(*a) {
                let bv = &nodes[b.0].values;
                accumulate(grads, *a, g.iter().zip(bv.iter()).map(|(g, b)| g * b).collect());
            }
            if req(*b) {
                let av = &nodes[a.0].values;
                accumulate(grads, *b, g.iter().zip(av.iter()).map(|(g, a)| g * a).collect());
            }
        }
        Op::Scale { x, factor } => {
            if req(*x) {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
        }
        Op::Square { x } => {
            if req(*x) {
                let xv = &nodes[x.0].values;
                accumulate(grads, *x, g.iter().zip(xv.iter()).map(|(g, x)| 2.0 * x * g).collect());
            }
        }
        Op::Relu { x } => {
            if req(*x) {
                let xv = &nodes[x.0].values;
                accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::Prelu { x, slope } => {
            let s = nodes[slope.0].values[0];
            let xv = &nodes[x.0].values;
            if req(*x) {
                accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { s * *g })
                        .collect(),
                );
            }
            if req(*slope) {
                let mut ds = 0.0;
                for (g, x) in g.iter().zip(xv.iter()) {
                    if *x <= 0.0 {
                        ds += g * x;
                    }
                }
                accumulate(grads, *slope, vec![ds]);
            }
        }
        Op::Sigmoid { x } => {
            if req(*x) {
                let yv = &node.values;
                accumulate(grads, *x, g.iter().zip(yv.iter()).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
        }
        Op::Log { x } => {
            if req(*x) {
                let xv = &nodes[x.0].values;
                accumulate(grads, *x, g.iter().zip(xv.iter()).map(|(g, x)| g / x).collect());
            }
        }
        Op::Exp { x } => {
            if req(*x) {
                let yv = &node.values;
                accumulate(grads, *x, g.iter().zip(yv.iter()).map(|(g, y)| g * y).collect());
            }
        }
        Op::RowSoftmax { x } => {
            if req(*x) {
                let (r, c) = (node.rows, node.cols);
                let yv = &node.values;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &yv[i * c..(i + 1) * c];
                    let go = &g[i * c..(i + 1) * c];
                    let dot: f64 = go.iter().zip(y.iter()).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[j] * (go[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::RowL2Normalize { x } => {
            if req(*x) {
                let (r, c) = (node.rows, node.cols);
                let xv = &nodes[x.0].values;
                let yv = &node.values;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let xr = &xv[i * c..(i + 1) * c];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue; // zero row convention: zero gradient
                    }
                    let y = &yv[i * c..(i + 1) * c];
                    let go = &g[i * c..(i + 1) * c];
                    let dot: f64 = go.iter().zip(y.iter()).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        dx[i * c + j] = (go[j] - y[j] * dot) / norm;
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::Mean { x } => {
            if req(*x) {
                let n = nodes[x.0].values.len();
                let v = g[0] / n as f64;
                accumulate(grads, *x, vec![v; n]);
            }
        }
        Op::Sum { x } => {
            if req(*x) {
                let n = nodes[x.0].values.len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
        }
        Op::ConcatRows { a, b } => {
            let na = nodes[a.0].values.len();
            if req(*a) {
                accumulate(grads, *a, g[..na].to_vec());
            }
            if req(*b) {
                accumulate(grads, *b, g[na..].to_vec());
            }
        }
        Op::ConcatCols { a, b } => {
            let (r, ca) = (nodes[a.0].rows, nodes[a.0].cols);
            let cb = nodes[b.0].cols;
            let total = ca + cb;
            if req(*a) {
                let mut da = Vec::with_capacity(r * ca);
                for i in 0..r {
                    da.extend_from_slice(&g[i * total..i * total + ca]);
                }
                accumulate(grads, *a, da);
            }
            if req(*b) {
                let mut db = Vec::with_capacity(r * cb);
                for i in 0..r {
                    db.extend_from_slice(&g[i * total + ca..(i + 1) * total]);
                }
                accumulate(grads, *b, db);
            }
        }
        Op::FrobeniusNormSq { x } => {
            if req(*x) {
                let xv = &nodes[x.0].values;
                accumulate(grads, *x, xv.iter().map(|v| 2.0 * v * g[0]).collect());
            }
        }
        Op::MaskedSelect { x, mask } => {
            if req(*x) {
                let mut dx = vec![0.0; nodes[x.0].values.len()];
                let mut k = 0;
                for (slot, keep) in dx.iter_mut().zip(mask.iter()) {
                    if *keep {
                        *slot = g[k];
                        k += 1;
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::TileCols { x, reps } => {
            if req(*x) {
                let r = nodes[x.0].rows;
                let mut dx = vec![0.0; r];
                for i in 0..r {
                    for j in 0..*reps {
                        dx[i] += g[i * reps + j];
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}
