//! Dynamic reverse-mode tape over dense f64 tensors.
//!
//! The tape is rebuilt every training step, which keeps the episodic loss
//! composition trivial: whatever ops ran forward get differentiated, nothing
//! else. Backward visits each node exactly once in reverse construction
//! order; gradients are only ever allocated for nodes on a path from a
//! `requires_grad` leaf.
//!
//! Element order is fixed everywhere (row-major loops, matmul via a
//! sequential dgemm), so identical inputs give bitwise-identical values and
//! gradients.

use super::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(VarId, VarId),
    Add(VarId, VarId),
    /// `[m,n] + [n]`, bias broadcast over rows.
    BiasAdd(VarId, VarId),
    Sub(VarId, VarId),
    /// Elementwise product, same shapes.
    Mul(VarId, VarId),
    ScalarMul(VarId, f64),
    Relu(VarId),
    Tanh(VarId),
    Abs(VarId),
    Square(VarId),
    Sqrt(VarId),
    Concat {
        inputs: Vec<VarId>,
        axis: usize,
    },
    ReduceMean(VarId),
    ReduceSum(VarId),
    /// `[n,c] -> [1,c]` column-wise max; ties keep the lowest row.
    MaxPoolOverPoints {
        input: VarId,
        argmax: Vec<u32>,
    },
    /// `[1,c]` or `[c]` tiled to `[rows,c]`.
    RepeatRows {
        input: VarId,
        rows: usize,
    },
    /// Per-point features averaged onto the nearest node of a `res^3`
    /// lattice spanning [-1,1]^3. Positions are compile-time constants of
    /// the op (the conditioning cloud), so only features get gradients.
    GridScatterMean {
        feats: VarId,
        cells: Vec<u32>,
        counts: Vec<u32>,
    },
    /// Trilinear interpolation of a `[res^3, c]` lattice at query positions
    /// (`[q,3]`). Differentiable in both the lattice and the positions.
    GridGatherTrilinear {
        grid: VarId,
        positions: VarId,
        res: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::BiasAdd(..) => "bias_add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Concat { .. } => "concat",
            Op::ReduceMean(..) => "reduce_mean",
            Op::ReduceSum(..) => "reduce_sum",
            Op::MaxPoolOverPoints { .. } => "max_pool_over_points",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::GridScatterMean { .. } => "grid_scatter_mean",
            Op::GridGatherTrilinear { .. } => "grid_gather_trilinear",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded forward computation plus gradient buffers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    kink: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True if any relu/abs/sqrt was evaluated at its non-differentiable
    /// point during the forward pass.
    pub fn has_kink(&self) -> bool {
        self.kink
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`, if the
    /// node participates in differentiation.
    pub fn grad(&self, id: VarId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.clone()).expect("grad matches value")
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: "leaf".into(),
                detail: "non-finite input".into(),
            });
        }
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: op.name().into(),
                detail: "non-finite output".into(),
            });
        }
        Ok(self.push(op, value, requires_grad))
    }

    fn needs_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Graph(format!(
                "matmul shapes {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        dgemm_rowmajor(m, k, n, 1.0, ta.data(), tb.data(), 0.0, &mut out);
        let rg = self.needs_grad(&[a, b]);
        self.push_checked(Op::Matmul(a, b), Tensor::from_vec(vec![m, n], out)?, rg)
    }

    /// Elementwise add for equal shapes, or `[m,n] + [n]` bias broadcast.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            let shape = ta.shape().to_vec();
            let rg = self.needs_grad(&[a, b]);
            return self.push_checked(Op::Add(a, b), Tensor::from_vec(shape, data)?, rg);
        }
        if ta.rank() == 2 && tb.rank() == 1 && ta.shape()[1] == tb.shape()[0] {
            let (m, n) = (ta.shape()[0], ta.shape()[1]);
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                for c in 0..n {
                    data.push(ta.data()[r * n + c] + tb.data()[c]);
                }
            }
            let rg = self.needs_grad(&[a, b]);
            return self.push_checked(Op::BiasAdd(a, b), Tensor::from_vec(vec![m, n], data)?, rg);
        }
        Err(Error::Graph(format!(
            "add shapes {:?} + {:?}",
            ta.shape(),
            tb.shape()
        )))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Graph(format!(
                "sub shapes {:?} - {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        self.push_checked(Op::Sub(a, b), Tensor::from_vec(shape, data)?, rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Graph(format!(
                "mul shapes {:?} * {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        self.push_checked(Op::Mul(a, b), Tensor::from_vec(shape, data)?, rg)
    }

    pub fn scalar_mul(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(&[a]);
        self.push_checked(Op::ScalarMul(a, s), Tensor::from_vec(shape, data)?, rg)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let kink = ta.data().iter().any(|&x| x == 0.0);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape().to_vec();
        self.kink |= kink;
        let rg = self.needs_grad(&[a]);
        self.push_checked(Op::Relu(a), Tensor::from_vec(shape, data)?, rg)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(&[a]);
        self.push_checked(Op::Tanh(a), Tensor::from_vec(shape, data)?, rg)
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let kink = ta.data().iter().any(|&x| x == 0.0);
        let data = ta.data().iter().map(|x| x.abs()).collect();
        let shape = ta.shape().to_vec();
        self.kink |= kink;
        let rg = self.needs_grad(&[a]);
        self.push_checked(Op::Abs(a), Tensor::from_vec(shape, data)?, rg)
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * x).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(&[a]);
        self.push_checked(Op::Square(a), Tensor::from_vec(shape, data)?, rg)
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let kink = ta.data().iter().any(|&x| x <= 0.0);
        let data = ta.data().iter().map(|x| x.sqrt()).collect();
        let shape = ta.shape().to_vec();
        self.kink |= kink;
        let rg = self.needs_grad(&[a]);
        self.push_checked(Op::Sqrt(a), Tensor::from_vec(shape, data)?, rg)
    }

    /// Concatenates rank-1 tensors end to end, or rank-2 tensors along
    /// `axis` 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[VarId], axis: usize) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(Error::Graph("concat of zero tensors".into()));
        }
        let rank = self.value(inputs[0]).rank();
        let value = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &id in inputs {
                    let t = self.value(id);
                    if t.rank() != 1 {
                        return Err(Error::Graph("concat mixes ranks".into()));
                    }
                    data.extend_from_slice(t.data());
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let cols = self.value(inputs[0]).shape()[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for &id in inputs {
                    let t = self.value(id);
                    if t.rank() != 2 || t.shape()[1] != cols {
                        return Err(Error::Graph("concat axis 0 column mismatch".into()));
                    }
                    rows += t.shape()[0];
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(vec![rows, cols], data)?
            }
            (2, 1) => {
                let rows = self.value(inputs[0]).shape()[0];
                let mut cols = 0;
                for &id in inputs {
                    let t = self.value(id);
                    if t.rank() != 2 || t.shape()[0] != rows {
                        return Err(Error::Graph("concat axis 1 row mismatch".into()));
                    }
                    cols += t.shape()[1];
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &id in inputs {
                        let t = self.value(id);
                        let c = t.shape()[1];
                        data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                    }
                }
                Tensor::from_vec(vec![rows, cols], data)?
            }
            _ => {
                return Err(Error::Graph(format!(
                    "concat axis {axis} on rank-{rank} tensors"
                )))
            }
        };
        let rg = self.needs_grad(inputs);
        self.push_checked(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        )
    }

    pub fn reduce_mean(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let mean = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.needs_grad(&[a]);
        self.push_checked(Op::ReduceMean(a), Tensor::scalar(mean), rg)
    }

    pub fn reduce_sum(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let sum = ta.data().iter().sum::<f64>();
        let rg = self.needs_grad(&[a]);
        self.push_checked(Op::ReduceSum(a), Tensor::scalar(sum), rg)
    }

    /// Column-wise max over the rows of `[n,c]`, producing `[1,c]`.
    pub fn max_pool_over_points(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::Graph(format!(
                "max_pool_over_points on shape {:?}",
                ta.shape()
            )));
        }
        let (n, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0u32; c];
        for r in 0..n {
            for j in 0..c {
                let v = ta.data()[r * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = r as u32;
                }
            }
        }
        let rg = self.needs_grad(&[a]);
        self.push_checked(
            Op::MaxPoolOverPoints { input: a, argmax },
            Tensor::from_vec(vec![1, c], out)?,
            rg,
        )
    }

    /// Tiles a `[1,c]` or `[c]` tensor into `rows` identical rows.
    pub fn repeat_rows(&mut self, a: VarId, rows: usize) -> Result<VarId> {
        let ta = self.value(a);
        if ta.rows() != 1 {
            return Err(Error::Graph(format!(
                "repeat_rows on shape {:?}",
                ta.shape()
            )));
        }
        let c = ta.cols();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(ta.data());
        }
        let rg = self.needs_grad(&[a]);
        self.push_checked(
            Op::RepeatRows { input: a, rows },
            Tensor::from_vec(vec![rows, c], data)?,
            rg,
        )
    }

    /// Averages per-point features `[n,c]` onto the nearest node of a
    /// `res^3` lattice over [-1,1]^3; empty nodes stay zero. `positions`
    /// are constants of the op, so gradients flow into features only.
    pub fn grid_scatter_mean(
        &mut self,
        feats: VarId,
        positions: &[Point3],
        res: usize,
    ) -> Result<VarId> {
        let tf = self.value(feats);
        if tf.rank() != 2 || tf.shape()[0] != positions.len() {
            return Err(Error::Graph(format!(
                "grid_scatter_mean feats {:?} vs {} positions",
                tf.shape(),
                positions.len()
            )));
        }
        if res < 2 {
            return Err(Error::Graph("grid resolution must be >= 2".into()));
        }
        let c = tf.shape()[1];
        let cells: Vec<u32> = positions
            .iter()
            .map(|p| nearest_node(p, res) as u32)
            .collect();
        let g3 = res * res * res;
        let mut counts = vec![0u32; g3];
        for &cell in &cells {
            counts[cell as usize] += 1;
        }
        let mut out = vec![0.0; g3 * c];
        for (row, &cell) in cells.iter().enumerate() {
            let base = cell as usize * c;
            for j in 0..c {
                out[base + j] += tf.data()[row * c + j];
            }
        }
        for (cell, &count) in counts.iter().enumerate() {
            if count > 1 {
                let inv = 1.0 / count as f64;
                for j in 0..c {
                    out[cell * c + j] *= inv;
                }
            }
        }
        let rg = self.needs_grad(&[feats]);
        self.push_checked(
            Op::GridScatterMean {
                feats,
                cells,
                counts,
            },
            Tensor::from_vec(vec![g3, c], out)?,
            rg,
        )
    }

    /// Trilinear interpolation of lattice features at `positions` (`[q,3]`).
    /// Positions outside [-1,1] clamp to the boundary cell.
    pub fn grid_gather_trilinear(
        &mut self,
        grid: VarId,
        positions: VarId,
        res: usize,
    ) -> Result<VarId> {
        let tg = self.value(grid);
        let tp = self.value(positions);
        let g3 = res * res * res;
        if tg.rank() != 2 || tg.shape()[0] != g3 {
            return Err(Error::Graph(format!(
                "grid_gather_trilinear grid {:?} vs res {res}",
                tg.shape()
            )));
        }
        if tp.rank() != 2 || tp.shape()[1] != 3 {
            return Err(Error::Graph(format!(
                "grid_gather_trilinear positions {:?}",
                tp.shape()
            )));
        }
        let q = tp.shape()[0];
        let c = tg.shape()[1];
        let mut out = vec![0.0; q * c];
        let mut clamped = 0usize;
        for row in 0..q {
            let p = &tp.data()[row * 3..row * 3 + 3];
            let (corners, weights, was_clamped) = trilinear_stencil(p, res);
            if was_clamped {
                clamped += 1;
            }
            for (corner, w) in corners.iter().zip(weights.iter()) {
                let base = corner * c;
                for j in 0..c {
                    out[row * c + j] += w * tg.data()[base + j];
                }
            }
        }
        if clamped > 0 {
            log::debug!("grid_gather_trilinear clamped {clamped}/{q} queries to the boundary");
        }
        let rg = self.needs_grad(&[grid, positions]);
        self.push_checked(
            Op::GridGatherTrilinear {
                grid,
                positions,
                res,
            },
            Tensor::from_vec(vec![q, c], out)?,
            rg,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d`loss`/d`node` for every node that requires gradients.
    /// `loss` must be a one-element tensor; calling twice on one tape is an
    /// error (the tape is rebuilt per step, never reset).
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; build a fresh tape".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: VarId) {
        let node = &mut self.nodes[id.0];
        if node.requires_grad && node.grad.is_none() {
            node.grad = Some(vec![0.0; node.value.len()]);
        }
    }

    /// Grad buffer of `id`, allocating it; returns None for nodes outside
    /// the differentiated subgraph.
    fn grad_mut(&mut self, id: VarId) -> Option<&mut [f64]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        self.ensure_grad(id);
        self.nodes[id.0].grad.as_mut().map(|g| g.as_mut_slice())
    }

    fn backprop_node(&mut self, i: usize) {
        // Take the output grad by value to appease the borrow checker; it is
        // put back untouched.
        let go = self.nodes[i].grad.take().expect("grad present");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bt = transpose(self.nodes[b.0].value.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    dgemm_rowmajor(m, n, k, 1.0, &go, &bt, 0.0, &mut da);
                    accumulate(self.grad_mut(a).unwrap(), &da);
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose(self.nodes[a.0].value.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    dgemm_rowmajor(k, m, n, 1.0, &at, &go, 0.0, &mut db);
                    accumulate(self.grad_mut(b).unwrap(), &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = self.grad_mut(a) {
                    accumulate(ga, &go);
                }
                if let Some(gb) = self.grad_mut(b) {
                    accumulate(gb, &go);
                }
            }
            Op::BiasAdd(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.nodes[b.0].value.len();
                if let Some(ga) = self.grad_mut(a) {
                    accumulate(ga, &go);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.grad_mut(b).unwrap();
                    for (idx, v) in go.iter().enumerate() {
                        gb[idx % n] += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = self.grad_mut(a) {
                    accumulate(ga, &go);
                }
                if let Some(gb) = self.grad_mut(b) {
                    for (g, v) in gb.iter_mut().zip(&go) {
                        *g -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let ga = self.grad_mut(a).unwrap();
                    for ((g, v), x) in ga.iter_mut().zip(&go).zip(&bv) {
                        *g += v * x;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let gb = self.grad_mut(b).unwrap();
                    for ((g, v), x) in gb.iter_mut().zip(&go).zip(&av) {
                        *g += v * x;
                    }
                }
            }
            Op::ScalarMul(a, s) => {
                let (a, s) = (*a, *s);
                if let Some(ga) = self.grad_mut(a) {
                    for (g, v) in ga.iter_mut().zip(&go) {
                        *g += v * s;
                    }
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let ga = self.grad_mut(a).unwrap();
                    for ((g, v), x) in ga.iter_mut().zip(&go).zip(&av) {
                        // Subgradient 0 at the kink.
                        if *x > 0.0 {
                            *g += v;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let out = self.nodes[i].value.data().to_vec();
                    let ga = self.grad_mut(a).unwrap();
                    for ((g, v), y) in ga.iter_mut().zip(&go).zip(&out) {
                        *g += v * (1.0 - y * y);
                    }
                }
            }
            Op::Abs(a) => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let ga = self.grad_mut(a).unwrap();
                    for ((g, v), x) in ga.iter_mut().zip(&go).zip(&av) {
                        // Subgradient 0 at the kink.
                        if *x > 0.0 {
                            *g += v;
                        } else if *x < 0.0 {
                            *g -= v;
                        }
                    }
                }
            }
            Op::Square(a) => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let ga = self.grad_mut(a).unwrap();
                    for ((g, v), x) in ga.iter_mut().zip(&go).zip(&av) {
                        *g += v * 2.0 * x;
                    }
                }
            }
            Op::Sqrt(a) => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let out = self.nodes[i].value.data().to_vec();
                    let ga = self.grad_mut(a).unwrap();
                    for ((g, v), y) in ga.iter_mut().zip(&go).zip(&out) {
                        if *y > 0.0 {
                            *g += v * 0.5 / y;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let rank = self.nodes[inputs[0].0].value.rank();
                match (rank, axis) {
                    (1, 0) | (2, 0) => {
                        let mut offset = 0;
                        for id in inputs {
                            let len = self.nodes[id.0].value.len();
                            if let Some(g) = self.grad_mut(id) {
                                accumulate(g, &go[offset..offset + len]);
                            }
                            offset += len;
                        }
                    }
                    (2, 1) => {
                        let rows = self.nodes[inputs[0].0].value.shape()[0];
                        let total_cols: usize = inputs
                            .iter()
                            .map(|id| self.nodes[id.0].value.shape()[1])
                            .sum();
                        let mut col_off = 0;
                        for id in inputs {
                            let c = self.nodes[id.0].value.shape()[1];
                            if self.nodes[id.0].requires_grad {
                                let g = self.grad_mut(id).unwrap();
                                for r in 0..rows {
                                    for j in 0..c {
                                        g[r * c + j] += go[r * total_cols + col_off + j];
                                    }
                                }
                            }
                            col_off += c;
                        }
                    }
                    _ => unreachable!("validated at construction"),
                }
            }
            Op::ReduceMean(a) => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let n = self.nodes[a.0].value.len() as f64;
                    let v = go[0] / n;
                    let ga = self.grad_mut(a).unwrap();
                    for g in ga.iter_mut() {
                        *g += v;
                    }
                }
            }
            Op::ReduceSum(a) => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let v = go[0];
                    let ga = self.grad_mut(a).unwrap();
                    for g in ga.iter_mut() {
                        *g += v;
                    }
                }
            }
            Op::MaxPoolOverPoints { input, argmax } => {
                let input = *input;
                let argmax = argmax.clone();
                if self.nodes[input.0].requires_grad {
                    let c = argmax.len();
                    let g = self.grad_mut(input).unwrap();
                    for (j, &row) in argmax.iter().enumerate() {
                        g[row as usize * c + j] += go[j];
                    }
                }
            }
            Op::RepeatRows { input, rows } => {
                let (input, rows) = (*input, *rows);
                if self.nodes[input.0].requires_grad {
                    let c = self.nodes[input.0].value.cols();
                    let g = self.grad_mut(input).unwrap();
                    for r in 0..rows {
                        for j in 0..c {
                            g[j] += go[r * c + j];
                        }
                    }
                }
            }
            Op::GridScatterMean {
                feats,
                cells,
                counts,
            } => {
                let feats = *feats;
                let cells = cells.clone();
                let counts = counts.clone();
                if self.nodes[feats.0].requires_grad {
                    let c = self.nodes[feats.0].value.shape()[1];
                    let g = self.grad_mut(feats).unwrap();
                    for (row, &cell) in cells.iter().enumerate() {
                        let inv = 1.0 / counts[cell as usize] as f64;
                        let base = cell as usize * c;
                        for j in 0..c {
                            g[row * c + j] += go[base + j] * inv;
                        }
                    }
                }
            }
            Op::GridGatherTrilinear {
                grid,
                positions,
                res,
            } => {
                let (grid, positions, res) = (*grid, *positions, *res);
                let q = self.nodes[positions.0].value.shape()[0];
                let c = self.nodes[grid.0].value.shape()[1];
                let pos = self.nodes[positions.0].value.data().to_vec();
                if self.nodes[grid.0].requires_grad {
                    let gg = self.grad_mut(grid).unwrap();
                    for row in 0..q {
                        let (corners, weights, _) =
                            trilinear_stencil(&pos[row * 3..row * 3 + 3], res);
                        for (corner, w) in corners.iter().zip(weights.iter()) {
                            for j in 0..c {
                                gg[corner * c + j] += w * go[row * c + j];
                            }
                        }
                    }
                }
                if self.nodes[positions.0].requires_grad {
                    let grid_vals = self.nodes[grid.0].value.data().to_vec();
                    let gp = self.grad_mut(positions).unwrap();
                    for row in 0..q {
                        let (corners, dweights) =
                            trilinear_stencil_derivative(&pos[row * 3..row * 3 + 3], res);
                        for axis in 0..3 {
                            let mut acc = 0.0;
                            for (ci, corner) in corners.iter().enumerate() {
                                let dw = dweights[ci][axis];
                                if dw != 0.0 {
                                    for j in 0..c {
                                        acc += dw * grid_vals[corner * c + j] * go[row * c + j];
                                    }
                                }
                            }
                            gp[row * 3 + axis] += acc;
                        }
                    }
                }
            }
        }
        self.nodes[i].grad = Some(go);
    }
}

/// Index of the lattice node nearest to `p` (clamped into the lattice).
fn nearest_node(p: &Point3, res: usize) -> usize {
    let g = res as f64 - 1.0;
    let idx = |v: f64| -> usize {
        let u = ((v + 1.0) * 0.5 * g).round();
        (u.clamp(0.0, g)) as usize
    };
    (idx(p.x) * res + idx(p.y)) * res + idx(p.z)
}

/// Lattice coordinates in [0, res-1] per axis, with a clamped flag.
fn lattice_coords(p: &[f64], res: usize) -> ([f64; 3], bool) {
    let g = res as f64 - 1.0;
    let mut u = [0.0; 3];
    let mut clamped = false;
    for a in 0..3 {
        let raw = (p[a] + 1.0) * 0.5 * g;
        let c = raw.clamp(0.0, g);
        if c != raw {
            clamped = true;
        }
        u[a] = c;
    }
    (u, clamped)
}

/// The 8 lattice corners around `p` and their trilinear weights.
fn trilinear_stencil(p: &[f64], res: usize) -> ([usize; 8], [f64; 8], bool) {
    let (u, clamped) = lattice_coords(p, res);
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let base = (u[a].floor() as usize).min(res - 2);
        i0[a] = base;
        f[a] = u[a] - base as f64;
    }
    let mut corners = [0usize; 8];
    let mut weights = [0.0; 8];
    for (k, corner) in corners.iter_mut().enumerate() {
        let dx = k >> 2 & 1;
        let dy = k >> 1 & 1;
        let dz = k & 1;
        *corner = ((i0[0] + dx) * res + i0[1] + dy) * res + i0[2] + dz;
        let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
        let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
        let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
        weights[k] = wx * wy * wz;
    }
    (corners, weights, clamped)
}

/// Corner weights differentiated with respect to the world coordinates.
/// Zero where the position clamps to the lattice boundary.
fn trilinear_stencil_derivative(p: &[f64], res: usize) -> ([usize; 8], [[f64; 3]; 8]) {
    let g = res as f64 - 1.0;
    let (u, _) = lattice_coords(p, res);
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    let mut du_dx = [0.0; 3];
    for a in 0..3 {
        let base = (u[a].floor() as usize).min(res - 2);
        i0[a] = base;
        f[a] = u[a] - base as f64;
        let raw = (p[a] + 1.0) * 0.5 * g;
        du_dx[a] = if (0.0..=g).contains(&raw) { 0.5 * g } else { 0.0 };
    }
    let mut corners = [0usize; 8];
    let mut dw = [[0.0; 3]; 8];
    for k in 0..8 {
        let d = [k >> 2 & 1, k >> 1 & 1, k & 1];
        corners[k] = ((i0[0] + d[0]) * res + i0[1] + d[1]) * res + i0[2] + d[2];
        let w = |a: usize| if d[a] == 1 { f[a] } else { 1.0 - f[a] };
        let s = |a: usize| if d[a] == 1 { 1.0 } else { -1.0 };
        dw[k][0] = s(0) * w(1) * w(2) * du_dx[0];
        dw[k][1] = w(0) * s(1) * w(2) * du_dx[1];
        dw[k][2] = w(0) * w(1) * s(2) * du_dx[2];
    }
    (corners, dw)
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Row-major `C = alpha * A(m,k) * B(k,n) + beta * C`.
fn dgemm_rowmajor(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &mut Tape, v: f64) -> VarId {
        tape.leaf(Tensor::scalar(v), true).unwrap()
    }

    #[test]
    fn relu_value_and_subgradient() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, -1.0);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn relu_at_zero_sets_kink_flag() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 0.0);
        let _ = tape.relu(x).unwrap();
        assert!(tape.has_kink());
    }

    #[test]
    fn one_by_one_matmul_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap(), true).unwrap();
        let b = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap(), true).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).item(), 6.0);
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 3.0);
        assert_eq!(tape.grad(b).unwrap().item(), 2.0);
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]), true).unwrap();
        let sq = tape.square(x).unwrap();
        let loss = tape.reduce_sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn independent_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let y = tape.leaf(Tensor::vector(vec![5.0, 5.0]), true).unwrap();
        let s = tape.reduce_sum(x).unwrap();
        tape.backward(s).unwrap();
        // y is never touched: its grad buffer was never allocated.
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_requires_grad_leaves_never_allocate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]), false).unwrap();
        let y = tape.square(x).unwrap();
        let s = tape.reduce_sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(s).is_none());
    }

    #[test]
    fn repeated_backward_errors() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 2.0);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_is_a_graph_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(), false).unwrap();
        let b = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(), false).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Graph(_))));
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1e308), false).unwrap();
        let b = tape.leaf(Tensor::scalar(1e308), false).unwrap();
        match tape.add(a, b) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn bias_add_broadcasts_rows() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true)
            .unwrap();
        let b = tape.leaf(Tensor::vector(vec![10.0, 20.0]), true).unwrap();
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.reduce_sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn max_pool_breaks_ties_to_lowest_row() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(
                Tensor::matrix(3, 2, vec![1.0, 5.0, 1.0, 2.0, 0.0, 5.0]).unwrap(),
                true,
            )
            .unwrap();
        let p = tape.max_pool_over_points(a).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 5.0]);
        let s = tape.reduce_sum(p).unwrap();
        tape.backward(s).unwrap();
        // Column 0 max first occurs at row 0; column 1 max at row 0 too.
        assert_eq!(
            tape.grad(a).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn gather_at_node_returns_node_value() {
        let res = 3;
        let mut grid = Tensor::zeros(vec![res * res * res, 1]);
        // Node (1,1,1) is the lattice center at world (0,0,0).
        let center = (1 * res + 1) * res + 1;
        grid.data_mut()[center] = 42.0;
        let mut tape = Tape::new();
        let g = tape.leaf(grid, false).unwrap();
        let p = tape
            .leaf(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap(), false)
            .unwrap();
        let out = tape.grid_gather_trilinear(g, p, res).unwrap();
        assert_eq!(tape.value(out).data(), &[42.0]);
    }

    #[test]
    fn gather_midpoint_is_arithmetic_mean() {
        let res = 3;
        let mut grid = Tensor::zeros(vec![res * res * res, 1]);
        let n0 = (1 * res + 1) * res + 1; // world (0,0,0)
        let n1 = (2 * res + 1) * res + 1; // world (1,0,0)
        grid.data_mut()[n0] = 2.0;
        grid.data_mut()[n1] = 6.0;
        let mut tape = Tape::new();
        let g = tape.leaf(grid, false).unwrap();
        let p = tape
            .leaf(Tensor::matrix(1, 3, vec![0.5, 0.0, 0.0]).unwrap(), false)
            .unwrap();
        let out = tape.grid_gather_trilinear(g, p, res).unwrap();
        assert!((tape.value(out).data()[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn scatter_then_gather_reproduces_cell_means_on_nodes() {
        // Points exactly on lattice nodes: gather at those points returns the
        // per-node mean of the scattered features.
        let res = 3;
        let positions = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
        ];
        let feats = Tensor::matrix(3, 1, vec![2.0, 4.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(feats, false).unwrap();
        let grid = tape.grid_scatter_mean(f, &positions, res).unwrap();
        let q = tape
            .leaf(
                Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
                false,
            )
            .unwrap();
        let out = tape.grid_gather_trilinear(grid, q, res).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g), exactly in f64 for
        // power-of-two coefficients.
        let run = |wa: f64, wb: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![1.5, -2.0, 0.25]), true).unwrap();
            let f = {
                let sq = tape.square(x).unwrap();
                tape.reduce_sum(sq).unwrap()
            };
            let g = tape.reduce_mean(x).unwrap();
            let fa = tape.scalar_mul(f, wa).unwrap();
            let gb = tape.scalar_mul(g, wb).unwrap();
            let total = tape.add(fa, gb).unwrap();
            tape.backward(total).unwrap();
            tape.grad(x).unwrap().data().to_vec()
        };
        let g_f = run(1.0, 0.0);
        let g_g = run(0.0, 1.0);
        let g_mix = run(2.0, 4.0);
        for i in 0..3 {
            assert!((g_mix[i] - (2.0 * g_f[i] + 4.0 * g_g[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_axis1_splits_gradients() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let b = tape
            .leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap(), true)
            .unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape
            .leaf(Tensor::matrix(2, 3, vec![1.0, 10.0, 100.0, 2.0, 20.0, 200.0]).unwrap(), false)
            .unwrap();
        let prod = tape.mul(c, w).unwrap();
        let s = tape.reduce_sum(prod).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[10.0, 100.0, 20.0, 200.0]);
    }
}
