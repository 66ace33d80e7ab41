use super::{DiffError, DiffTensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Sum(TensorId),
    Mean(TensorId),
    Square(TensorId),
    Sqrt(TensorId),
    Exp(TensorId),
    Relu(TensorId),
    Matmul(TensorId, TensorId),
    /// A · Bᵀ for 2-D operands.
    MatmulTransB(TensorId, TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    AddChanBias(TensorId, TensorId),
    AddRowBias(TensorId, TensorId),
    AvgPoolGlobal(TensorId),
    Reshape(TensorId),
    Detach,
    /// d[i][j] = ‖a_i − b_j‖² over row vectors of two 2-D point sets.
    PairwiseSqDist(TensorId, TensorId),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of executed operations. Adjoints replay in exact reverse
/// execution order; gradients accumulate additively into per-node buffers
/// until [`Tape::zero_grads`] or [`Tape::clear`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops all recorded nodes. Leaf `DiffTensor` values held by the caller
    /// are unaffected.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, t: &DiffTensor) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// A leaf that participates in backward regardless of the tensor's own
    /// `requires_grad` flag; used when registering model parameters.
    pub fn leaf_with_grad(&mut self, t: &DiffTensor) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![1], vec![v])
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar convenience accessor; panics if the node is not a single value.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        assert_eq!(self.nodes[id.0].data.len(), 1, "scalar_value on non-scalar");
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { shape, data, requires_grad, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, rg, Op::MulScalar(a, c))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s / n], rg, Op::Mean(a))
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, rg, op)
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Value-equal copy that stops gradient flow.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.clone();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, false, Op::Detach)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, DiffError> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    pub fn flatten(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len();
        self.reshape(a, vec![n]).expect("flatten cannot fail")
    }

    /// Collapses all trailing axes: [N, ...] → [N, rest].
    pub fn flatten_rows(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(DiffError::ShapeMismatch { op: "flatten_rows", lhs: shape, rhs: vec![] });
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, vec![n, rest.max(1)])
    }

    fn dims2(&self, op: &'static str, a: TensorId) -> Result<(usize, usize), DiffError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(DiffError::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![] });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    /// A[m×k] · (B[n×k])ᵀ → [m×n].
    pub fn matmul_trans_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (m, k) = self.dims2("matmul_trans_b", a)?;
        let (n, k2) = self.dims2("matmul_trans_b", b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_trans_b",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatmulTransB(a, b)))
    }

    /// Cross-correlation with zero padding. x: [N,C,H,W], w: [K,C,kh,kw].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<TensorId, DiffError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride.0 < 1 || stride.1 < 1 {
            return Err(DiffError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh > h + 2 * pad.0 || kw > wd + 2 * pad.1 {
            return Err(DiffError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
        let mut out = vec![0.0; n * k * ho * wo];
        let mut cols = vec![0.0; c * kh * kw * ho * wo];
        for i in 0..n {
            im2col(
                &self.nodes[x.0].data[i * c * h * wd..(i + 1) * c * h * wd],
                c, h, wd, kh, kw, stride, pad, ho, wo, &mut cols,
            );
            // out_i[K][Ho*Wo] = W[K][C*kh*kw] · cols
            let oi = matmul_nn(&self.nodes[w.0].data, &cols, k, c * kh * kw, ho * wo);
            out[i * k * ho * wo..(i + 1) * k * ho * wo].copy_from_slice(&oi);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![n, k, ho, wo], out, rg, Op::Conv2d { x, w, stride, pad }))
    }

    /// x: [N,K,H,W] plus per-channel bias b: [K].
    pub fn add_chan_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(DiffError::ShapeMismatch { op: "add_chan_bias", lhs: xs, rhs: bs });
        }
        let (n, k, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..n {
            for ch in 0..k {
                let bv = self.nodes[b.0].data[ch];
                let base = (i * k + ch) * h * w;
                for v in data[base..base + h * w].iter_mut() {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(xs, data, rg, Op::AddChanBias(x, b)))
    }

    /// x: [M,N] plus row-broadcast bias b: [N].
    pub fn add_row_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (m, n) = self.dims2("add_row_bias", x)?;
        let bs = self.shape(b).to_vec();
        if bs.len() != 1 || bs[0] != n {
            return Err(DiffError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: bs,
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[b.0].data[j];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(vec![m, n], data, rg, Op::AddRowBias(x, b)))
    }

    /// Mean over the two spatial axes: [N,C,H,W] → [N,C].
    pub fn avg_pool_global(&mut self, x: TensorId) -> Result<TensorId, DiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(DiffError::ShapeMismatch { op: "avg_pool_global", lhs: xs, rhs: vec![] });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = self.nodes[x.0].data[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c], out, rg, Op::AvgPoolGlobal(x)))
    }

    /// Squared Euclidean distances between rows of a [m×d] and b [n×d].
    pub fn pairwise_sq_dist(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (m, d) = self.dims2("pairwise_sq_dist", a)?;
        let (n, d2) = self.dims2("pairwise_sq_dist", b)?;
        if d != d2 {
            return Err(DiffError::ShapeMismatch {
                op: "pairwise_sq_dist",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ra = &self.nodes[a.0].data[i * d..(i + 1) * d];
            for j in 0..n {
                let rb = &self.nodes[b.0].data[j * d..(j + 1) * d];
                out[i * n + j] = ra
                    .iter()
                    .zip(rb)
                    .map(|(&x, &y)| {
                        let t = x - y;
                        t * t
                    })
                    .sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::PairwiseSqDist(a, b)))
    }

    /// Propagates adjoints from `root` back through the tape, accumulating
    /// into per-node gradient buffers. A non-scalar root is seeded with ones.
    pub fn backward(&mut self, root: TensorId) {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[root.0] = Some(vec![1.0; self.nodes[root.0].data.len()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                None => node.grad = Some(g),
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        let send = |tape: &Tape, id: TensorId, contrib: Vec<f64>, adj: &mut [Option<Vec<f64>>]| {
            if !tape.nodes[id.0].requires_grad {
                return;
            }
            match adj[id.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &v)| *a += v),
                None => adj[id.0] = Some(contrib),
            }
        };
        match op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                send(self, a, g.to_vec(), adj);
                send(self, b, g.to_vec(), adj);
            }
            Op::Sub(a, b) => {
                send(self, a, g.to_vec(), adj);
                send(self, b, g.iter().map(|&v| -v).collect(), adj);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> =
                    g.iter().zip(&self.nodes[b.0].data).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<f64> =
                    g.iter().zip(&self.nodes[a.0].data).map(|(&gv, &av)| gv * av).collect();
                send(self, a, da, adj);
                send(self, b, db, adj);
            }
            Op::AddScalar(a) | Op::Reshape(a) => send(self, a, g.to_vec(), adj),
            Op::MulScalar(a, c) => send(self, a, g.iter().map(|&v| v * c).collect(), adj),
            Op::Sum(a) => {
                send(self, a, vec![g[0]; self.nodes[a.0].data.len()], adj);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len();
                send(self, a, vec![g[0] / n as f64; n], adj);
            }
            Op::Square(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &xv)| gv * 2.0 * xv)
                    .collect();
                send(self, a, da, adj);
            }
            Op::Sqrt(a) => {
                // d/dx sqrt(x) = 1/(2 sqrt(x)); output value is the sqrt.
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&gv, &yv)| gv / (2.0 * yv))
                    .collect();
                send(self, a, da, adj);
            }
            Op::Exp(a) => {
                let da: Vec<f64> =
                    g.iter().zip(&self.nodes[i].data).map(|(&gv, &yv)| gv * yv).collect();
                send(self, a, da, adj);
            }
            Op::Relu(a) => {
                // Subgradient at exactly 0 is taken as 0.
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                send(self, a, da, adj);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                let da = matmul_nt(g, &self.nodes[b.0].data, m, n, k);
                let db = matmul_tn(&self.nodes[a.0].data, g, m, k, n);
                send(self, a, da, adj);
                send(self, b, db, adj);
            }
            Op::MatmulTransB(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = matmul_nn(g, &self.nodes[b.0].data, m, n, k);
                let db = matmul_tn(g, &self.nodes[a.0].data, m, n, k);
                send(self, a, da, adj);
                send(self, b, db, adj);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (k, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
                let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
                let ckk = c * kh * kw;
                let mut dx = vec![0.0; n * c * h * wd];
                let mut dw = vec![0.0; k * ckk];
                let mut cols = vec![0.0; ckk * ho * wo];
                for idx in 0..n {
                    let gi = &g[idx * k * ho * wo..(idx + 1) * k * ho * wo];
                    im2col(
                        &self.nodes[x.0].data[idx * c * h * wd..(idx + 1) * c * h * wd],
                        c, h, wd, kh, kw, stride, pad, ho, wo, &mut cols,
                    );
                    // dW += G_i · colsᵀ
                    let dwi = matmul_nt(gi, &cols, k, ho * wo, ckk);
                    dw.iter_mut().zip(&dwi).for_each(|(a, &v)| *a += v);
                    // dcols = Wᵀ · G_i, then scatter back
                    let dcols = matmul_tn(&self.nodes[w.0].data, gi, k, ckk, ho * wo);
                    col2im(
                        &dcols,
                        c, h, wd, kh, kw, stride, pad, ho, wo,
                        &mut dx[idx * c * h * wd..(idx + 1) * c * h * wd],
                    );
                }
                send(self, x, dx, adj);
                send(self, w, dw, adj);
            }
            Op::AddChanBias(x, b) => {
                let xs = self.shape(x);
                let (n, k, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut db = vec![0.0; k];
                for i2 in 0..n {
                    for ch in 0..k {
                        let base = (i2 * k + ch) * h * w;
                        db[ch] += g[base..base + h * w].iter().sum::<f64>();
                    }
                }
                send(self, x, g.to_vec(), adj);
                send(self, b, db, adj);
            }
            Op::AddRowBias(x, b) => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                let mut db = vec![0.0; n];
                for i2 in 0..m {
                    for j in 0..n {
                        db[j] += g[i2 * n + j];
                    }
                }
                send(self, x, g.to_vec(), adj);
                send(self, b, db, adj);
            }
            Op::AvgPoolGlobal(x) => {
                let xs = self.shape(x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = (h * w) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for i2 in 0..n * c {
                    let gv = g[i2] / hw;
                    dx[i2 * h * w..(i2 + 1) * h * w].iter_mut().for_each(|v| *v = gv);
                }
                send(self, x, dx, adj);
            }
            Op::PairwiseSqDist(a, b) => {
                let (m, d) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i2 in 0..m {
                    for j in 0..n {
                        let gv = g[i2 * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff =
                                self.nodes[a.0].data[i2 * d + t] - self.nodes[b.0].data[j * d + t];
                            da[i2 * d + t] += 2.0 * gv * diff;
                            db[j * d + t] -= 2.0 * gv * diff;
                        }
                    }
                }
                send(self, a, da, adj);
                send(self, b, db, adj);
            }
        }
    }

    /// Adds each leaf's tape gradient into the corresponding tensor's
    /// accumulator, enabling `requires_grad` buffers as needed.
    pub fn accumulate_leaf_grad(&self, id: TensorId, target: &mut DiffTensor) {
        if let Some(g) = self.grad(id) {
            let acc = target.grad.get_or_insert_with(|| vec![0.0; target.data.len()]);
            acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
        }
    }
}

// Row-major f64 matmul kernels. The ikj loop order keeps the inner loop
// contiguous in both operands.

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

/// A[m×k] · (B[n×k])ᵀ → [m×n]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// (A[m×k])ᵀ · B[m×n] → [k×n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            let or = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ch in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ch * kh + dy) * kw + dx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride.0 + dy) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xb = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride.1 + dx) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = x[xb + ix as usize];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    ho: usize,
    wo: usize,
    dx_out: &mut [f64],
) {
    for ch in 0..c {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = ((ch * kh + dy) * kw + dxk) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride.0 + dy) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xb = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride.1 + dxk) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx_out[xb + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}
