use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node inside a [`GradGraph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

/// Op record: which inputs produced a node, plus anything saved for backward.
#[derive(Clone, Debug)]
enum OpRecord {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[r x c]` matrix plus a length-`c` row vector.
    AddBias { x: Var, bias: Var },
    /// `[n x c x h x w]` feature map plus a length-`c` channel vector.
    AddChanBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Matmul { lhs: Var, rhs: Var },
    Relu(Var),
    Conv2d { x: Var, w: Var },
    /// 2x2 max pool, stride 2; saves the flat input index of each maximum.
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    SumAll(Var),
    /// ln(max(x, floor)); gradient is zero where the clamp is active.
    LnClamped { x: Var, floor: f64 },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: OpRecord,
}

/// Reverse-mode tape over [`Tensor`] values.
///
/// Nodes are stored in construction order, which is a topological order by
/// construction: an op can only reference already-created [`Var`]s. Backward
/// walks the records once, in reverse, accumulating gradients additively, so
/// a value used twice receives the sum of both path gradients.
#[derive(Default)]
pub struct GradGraph {
    nodes: Vec<Node>,
}

impl GradGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: OpRecord) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; gradient flows into it iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            OpRecord::Leaf,
        )
    }

    /// Registers a tensor as a constant regardless of its `requires_grad` flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, OpRecord::Leaf)
    }

    pub fn constant_from(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(data, shape)?;
        Ok(self.constant(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward) pass;
    /// `None` for nodes off the gradient path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies the node's value out as a standalone tensor.
    pub fn tensor_of(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].data.clone(), &self.nodes[v.0].shape)
            .expect("node shape/data are consistent by construction")
    }

    /// Writes the node's gradient (zeros if absent) into `t.grad`, accumulating.
    pub fn write_grad_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; self.numel(v)]),
        }
    }

    // ---- ops -----------------------------------------------------------

    fn same_shape_binary(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, OpRecord::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, OpRecord::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, OpRecord::Mul(a, b)))
    }

    /// `[r x c]` matrix plus a broadcast length-`c` bias row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::Dimension(format!(
                "add_bias: expected [r x c] + [c], got {xs:?} + {bs:?}"
            )));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let mut data = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[bias.0].data[c];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(vec![rows, cols], data, rg, OpRecord::AddBias { x, bias }))
    }

    /// `[n x c x h x w]` feature map plus a broadcast per-channel bias.
    pub fn add_chan_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if xs.len() != 4 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::Dimension(format!(
                "add_chan_bias: expected [n x c x h x w] + [c], got {xs:?} + {bs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let mut data = self.nodes[x.0].data.clone();
        for ni in 0..n {
            for ci in 0..c {
                let b = self.nodes[bias.0].data[ci];
                let base = (ni * c + ci) * plane;
                for p in 0..plane {
                    data[base + p] += b;
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(xs, data, rg, OpRecord::AddChanBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), data, rg, OpRecord::Scale { x, factor })
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions of {ls:?} and {rs:?} do not agree"
            )));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let data = matmul_raw(&self.nodes[lhs.0].data, &self.nodes[rhs.0].data, m, k, n);
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(vec![m, n], data, rg, OpRecord::Matmul { lhs, rhs }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), data, rg, OpRecord::Relu(x))
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1; spatial extents are
    /// preserved. `x: [n x c x h x w]`, `w: [f x c x 3 x 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Dimension(format!(
                "conv2d: expected x [n x c x h x w] and w [f x c x 3 x 3], got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::Dimension(format!(
                "conv2d: channel mismatch between input {xs:?} and kernel {ws:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let f = ws[0];
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[w.0].data;
        let mut data = vec![0.0; n * f * h * wd];
        for ni in 0..n {
            for fi in 0..f {
                for i in 0..h {
                    for j in 0..wd {
                        let mut s = 0.0;
                        for ci in 0..c {
                            let xb = (ni * c + ci) * h * wd;
                            let kb = (fi * c + ci) * 9;
                            for di in 0..3usize {
                                let ii = i as isize + di as isize - 1;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for dj in 0..3usize {
                                    let jj = j as isize + dj as isize - 1;
                                    if jj < 0 || jj >= wd as isize {
                                        continue;
                                    }
                                    s += xd[xb + ii as usize * wd + jj as usize]
                                        * kd[kb + di * 3 + dj];
                                }
                            }
                        }
                        data[((ni * f + fi) * h + i) * wd + j] = s;
                    }
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w);
        Ok(self.push(vec![n, f, h, wd], data, rg, OpRecord::Conv2d { x, w }))
    }

    /// 2x2 max pool with stride 2; trailing odd rows/columns are dropped.
    /// Ties resolve to the first maximum in row-major scan order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::Dimension(format!(
                "max_pool2: expected [n x c x h x w] with h, w >= 2, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = base + (2 * i + di) * w + (2 * j + dj);
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ci) * ho + i) * wo + j;
                        data[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![n, c, ho, wo], data, rg, OpRecord::MaxPool2 { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::Dimension(format!(
                "reshape: {:?} ({} elements) to {:?} ({} elements)",
                self.shape(x),
                self.numel(x),
                shape,
                numel
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), data, rg, OpRecord::Reshape(x)))
    }

    /// Sum of all elements; the result is a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.requires_grad(x);
        self.push(Vec::new(), vec![s], rg, OpRecord::SumAll(x))
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// ln(max(x, floor)) elementwise; `floor` must be positive so the output
    /// stays finite under saturated inputs.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        debug_assert!(floor > 0.0);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(floor).ln()).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), data, rg, OpRecord::LnClamped { x, floor })
    }

    /// Row-wise softmax of a `[rows x cols]` matrix, computed with
    /// max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "softmax_rows: expected rank-2 input, got {xs:?}"
            )));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(xs, data, rg, OpRecord::SoftmaxRows(x)))
    }

    /// Row-wise log-softmax (log-sum-exp stabilized).
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "log_softmax_rows: expected rank-2 input, got {xs:?}"
            )));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(xs, data, rg, OpRecord::LogSoftmaxRows(x)))
    }

    // ---- backward ------------------------------------------------------

    fn add_grad(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let grad = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse pass from a scalar root. Every grad-requiring node reachable
    /// from the root receives `d root / d node`, accumulated additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.requires_grad(root) {
            // Constant graph: nothing to propagate, all leaf grads stay zero.
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let g = self.nodes[id].grad.clone().expect("checked above");
            match op {
                OpRecord::Leaf => {}
                OpRecord::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                OpRecord::Sub(a, b) => {
                    self.add_grad(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_grad(b, &neg);
                }
                OpRecord::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                OpRecord::AddBias { x, bias } => {
                    self.add_grad(x, &g);
                    let cols = self.shape(bias)[0];
                    let rows = g.len() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    self.add_grad(bias, &db);
                }
                OpRecord::AddChanBias { x, bias } => {
                    self.add_grad(x, &g);
                    let xs = self.shape(x).to_vec();
                    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                db[ci] += g[base + p];
                            }
                        }
                    }
                    self.add_grad(bias, &db);
                }
                OpRecord::Scale { x, factor } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    self.add_grad(x, &dx);
                }
                OpRecord::Matmul { lhs, rhs } => {
                    let (m, k) = (self.shape(lhs)[0], self.shape(lhs)[1]);
                    let n = self.shape(rhs)[1];
                    // d lhs = g . rhs^T, d rhs = lhs^T . g
                    let da = matmul_nt(&g, &self.nodes[rhs.0].data, m, n, k);
                    let db = matmul_tn(&self.nodes[lhs.0].data, &g, m, k, n);
                    self.add_grad(lhs, &da);
                    self.add_grad(rhs, &db);
                }
                OpRecord::Relu(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                OpRecord::Conv2d { x, w } => {
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let f = ws[0];
                    let mut dx = vec![0.0; n * c * h * wd];
                    let mut dw = vec![0.0; f * c * 9];
                    {
                        let xd = &self.nodes[x.0].data;
                        let kd = &self.nodes[w.0].data;
                        for ni in 0..n {
                            for fi in 0..f {
                                for i in 0..h {
                                    for j in 0..wd {
                                        let go = g[((ni * f + fi) * h + i) * wd + j];
                                        if go == 0.0 {
                                            continue;
                                        }
                                        for ci in 0..c {
                                            let xb = (ni * c + ci) * h * wd;
                                            let kb = (fi * c + ci) * 9;
                                            for di in 0..3usize {
                                                let ii = i as isize + di as isize - 1;
                                                if ii < 0 || ii >= h as isize {
                                                    continue;
                                                }
                                                for dj in 0..3usize {
                                                    let jj = j as isize + dj as isize - 1;
                                                    if jj < 0 || jj >= wd as isize {
                                                        continue;
                                                    }
                                                    let xi = xb + ii as usize * wd + jj as usize;
                                                    dx[xi] += go * kd[kb + di * 3 + dj];
                                                    dw[kb + di * 3 + dj] += go * xd[xi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(w, &dw);
                }
                OpRecord::MaxPool2 { x, argmax } => {
                    let mut dx = vec![0.0; self.numel(x)];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                    self.add_grad(x, &dx);
                }
                OpRecord::Reshape(x) => {
                    self.add_grad(x, &g);
                }
                OpRecord::SumAll(x) => {
                    let dx = vec![g[0]; self.numel(x)];
                    self.add_grad(x, &dx);
                }
                OpRecord::LnClamped { x, floor } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(gi, xi)| if *xi > floor { gi / xi } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                OpRecord::SoftmaxRows(x) => {
                    let xs = self.shape(x).to_vec();
                    let (rows, cols) = (xs[0], xs[1]);
                    let p = &self.nodes[id].data;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| g[base + c] * p[base + c]).sum();
                        for c in 0..cols {
                            dx[base + c] = p[base + c] * (g[base + c] - dot);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                OpRecord::LogSoftmaxRows(x) => {
                    let xs = self.shape(x).to_vec();
                    let (rows, cols) = (xs[0], xs[1]);
                    let lp = &self.nodes[id].data;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let gsum: f64 = (0..cols).map(|c| g[base + c]).sum();
                        for c in 0..cols {
                            dx[base + c] = g[base + c] - lp[base + c].exp() * gsum;
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
        }
        Ok(())
    }
}

/// `a [m x k] . b [k x n]`, row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let ob = i * n;
            let bb = p * n;
            for j in 0..n {
                out[ob + j] += av * b[bb + j];
            }
        }
    }
    out
}

/// `a [m x n] . b^T` where `b` is `[k x n]`; result `[m x k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += a[i * n + j] * b[p * n + j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// `a^T . b` where `a` is `[m x k]` and `b` is `[m x n]`; result `[k x n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let ob = p * n;
            let bb = i * n;
            for j in 0..n {
                out[ob + j] += av * b[bb + j];
            }
        }
    }
    out
}
