//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding the output value plus whatever
//! the chain rule needs (input ids, pooling argmaxes, loss targets). Node
//! indices are already a topological order, so `backward` is a single reverse
//! sweep that accumulates gradients. A tape serves one forward/backward pass
//! and is confined to one thread; persistent parameters enter through
//! [`Tape::leaf`] and their gradients are read back with [`Tape::grad`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TensorId = usize;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Conv2d {
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: TensorId,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        input: TensorId,
        alpha: f64,
    },
    Elu {
        input: TensorId,
    },
    /// Also covers the masked variant: the stored output already has exact
    /// zeros outside the support, which the backward formula preserves.
    SoftmaxRows {
        input: TensorId,
    },
    Bce {
        probs: TensorId,
        targets: Vec<f64>,
    },
    AddRowBias {
        x: TensorId,
        bias: TensorId,
    },
    OuterSum {
        u: TensorId,
        v: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    ScalarMul {
        a: TensorId,
        c: f64,
    },
    Sum {
        input: TensorId,
    },
    MeanRows {
        input: TensorId,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    SelectRows {
        input: TensorId,
        rows: Vec<usize>,
    },
    Reshape {
        input: TensorId,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Gradient accumulated by `backward`; `None` until one has run for a
    /// node that requires gradients.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    /// Records a persistent tensor as a tape input.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a constant (no-gradient) input from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::Dimension {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- forward ops ----

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    /// Cross-correlation of `input [C,H,W]` with `kernels [F,C,k,k]` plus a
    /// per-filter bias, zero padding, square stride. Output extents must be
    /// exact integers.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        if sb.len() != 1 || sb[0] != sk[0] {
            return Err(Error::Dimension {
                op: "conv2d_bias",
                lhs: sk,
                rhs: sb,
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (f, k) = (sk[0], sk[2]);
        let (oh, ow) = conv_out_extents(h, w, k, stride, padding)?;
        let cols_rows = c * k * k;
        let mut cols = vec![0.0; cols_rows * oh * ow];
        im2col(
            self.data(input),
            c,
            h,
            w,
            k,
            stride,
            padding,
            oh,
            ow,
            &mut cols,
        );
        let mut out = vec![0.0; f * oh * ow];
        matmul_acc(self.data(kernels), &cols, f, cols_rows, oh * ow, &mut out);
        let bias_data = self.data(bias);
        for fi in 0..f {
            let bv = bias_data[fi];
            for v in &mut out[fi * oh * ow..(fi + 1) * oh * ow] {
                *v += bv;
            }
        }
        let rg = self.any_requires(&[input, kernels, bias]);
        Ok(self.push(
            vec![f, oh, ow],
            out,
            rg,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel max pooling with a square window that must divide both
    /// spatial extents. Ties resolve to the first occurrence in row-major
    /// window order.
    pub fn maxpool2d(&mut self, input: TensorId, window: usize) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 || window == 0 || si[1] % window != 0 || si[2] % window != 0 {
            return Err(Error::Dimension {
                op: "maxpool2d",
                lhs: si,
                rhs: vec![window, window],
            });
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (oh, ow) = (h / window, w / window);
        let x = self.data(input);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..window {
                        let iy = py * window + dy;
                        let base = (ci * h + iy) * w + px * window;
                        for dx in 0..window {
                            let v = x[base + dx];
                            if v > best {
                                best = v;
                                best_at = base + dx;
                            }
                        }
                    }
                    let o = (ci * oh + py) * ow + px;
                    out[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(vec![c, oh, ow], out, rg, Op::MaxPool2d { input, argmax }))
    }

    /// `x if x > 0 else alpha * x`, slope 1 at exactly 0. `alpha` in `[0, 1)`.
    pub fn leaky_relu(&mut self, input: TensorId, alpha: f64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "leaky_relu alpha must lie in [0, 1), got {alpha}"
            )));
        }
        let out: Vec<f64> = self
            .data(input)
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(shape, out, rg, Op::LeakyRelu { input, alpha }))
    }

    /// `x if x > 0 else exp(x) - 1` (C1-smooth at 0).
    pub fn elu(&mut self, input: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self
            .data(input)
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(shape, out, rg, Op::Elu { input }))
    }

    /// Row-wise softmax of a `[m,n]` tensor with max-subtraction stability.
    pub fn softmax_rows(&mut self, input: TensorId) -> Result<TensorId> {
        self.softmax_rows_inner(input, None)
    }

    /// Row-wise softmax restricted to entries where `support` is nonzero;
    /// excluded entries are exactly 0. Every row needs nonempty support.
    pub fn masked_softmax_rows(&mut self, input: TensorId, support: &[u8]) -> Result<TensorId> {
        self.softmax_rows_inner(input, Some(support))
    }

    fn softmax_rows_inner(&mut self, input: TensorId, support: Option<&[u8]>) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: shape,
                rhs: vec![2],
            });
        }
        let (m, n) = (shape[0], shape[1]);
        if let Some(s) = support {
            if s.len() != m * n {
                return Err(Error::Dimension {
                    op: "masked_softmax_rows",
                    lhs: shape,
                    rhs: vec![s.len()],
                });
            }
        }
        let x = self.data(input);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let included = |j: usize| support.map_or(true, |s| s[i * n + j] != 0);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if included(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::DegenerateInput(format!(
                    "softmax row {i} has empty support"
                )));
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if included(j) {
                    let e = (v - mx).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if included(j) {
                    out[i * n + j] /= sum;
                }
            }
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(shape, out, rg, Op::SoftmaxRows { input }))
    }

    /// Mean over elements of the cross-entropy `-(y ln p + (1-y) ln(1-p))`,
    /// with probabilities clamped away from 0 and 1. Scalar output.
    pub fn binary_cross_entropy(&mut self, probs: TensorId, targets: &[f64]) -> Result<TensorId> {
        let numel = self.data(probs).len();
        if targets.len() != numel {
            return Err(Error::Dimension {
                op: "binary_cross_entropy",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(Error::Usage(
                "binary_cross_entropy targets must lie in [0, 1]".into(),
            ));
        }
        let x = self.data(probs);
        let mut acc = 0.0;
        for (&p, &y) in x.iter().zip(targets) {
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let val = acc / numel as f64;
        let rg = self.nodes[probs].requires_grad;
        Ok(self.push(
            vec![1],
            vec![val],
            rg,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Adds a length-`n` bias vector to every row of a `[m,n]` tensor.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.any_requires(&[x, bias]);
        Ok(self.push(vec![m, n], out, rg, Op::AddRowBias { x, bias }))
    }

    /// `out[i,j] = u[i] + v[j]` for vectors of length m and n (rank 1 or a
    /// single-column matrix).
    pub fn outer_sum(&mut self, u: TensorId, v: TensorId) -> Result<TensorId> {
        let su = self.shape(u).to_vec();
        let sv = self.shape(v).to_vec();
        let vec_len = |s: &[usize]| -> Option<usize> {
            match s {
                [m] => Some(*m),
                [m, 1] => Some(*m),
                _ => None,
            }
        };
        let (m, n) = match (vec_len(&su), vec_len(&sv)) {
            (Some(m), Some(n)) => (m, n),
            _ => {
                return Err(Error::Dimension {
                    op: "outer_sum",
                    lhs: su,
                    rhs: sv,
                })
            }
        };
        let (ud, vd) = (self.data(u).to_vec(), self.data(v).to_vec());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = ud[i] + vd[j];
            }
        }
        let rg = self.any_requires(&[u, v]);
        Ok(self.push(vec![m, n], out, rg, Op::OuterSum { u, v }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(sa, out, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(sa, out, rg, Op::Mul { a, b }))
    }

    pub fn scalar_mul(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a].requires_grad;
        self.push(shape, out, rg, Op::ScalarMul { a, c })
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let v: f64 = self.data(input).iter().sum();
        let rg = self.nodes[input].requires_grad;
        self.push(vec![1], vec![v], rg, Op::Sum { input })
    }

    /// Column means of a `[m,n]` tensor as `[1,n]`.
    pub fn mean_rows(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Dimension {
                op: "mean_rows",
                lhs: s,
                rhs: vec![2],
            });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data(input);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(vec![1, n], out, rg, Op::MeanRows { input }))
    }

    /// Stacks `[r_i, n]` tensors into `[sum r_i, n]`.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows needs at least one part".into()));
        }
        let n = {
            let s = self.shape(parts[0]);
            if s.len() != 2 {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: s.to_vec(),
                    rhs: vec![2],
                });
            }
            s[1]
        };
        let mut rows = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = self.any_requires(parts);
        Ok(self.push(
            vec![rows, n],
            out,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Gathers slices along axis 0; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn select_rows(&mut self, input: TensorId, rows: &[usize]) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if rows.is_empty() {
            return Err(Error::Usage("select_rows needs at least one index".into()));
        }
        let axis0 = s[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= axis0) {
            return Err(Error::Bounds {
                op: "select_rows",
                detail: format!("index {bad} out of {axis0} rows"),
            });
        }
        let row_size: usize = s[1..].iter().product::<usize>().max(1);
        let x = self.data(input);
        let mut out = Vec::with_capacity(rows.len() * row_size);
        for &r in rows {
            out.extend_from_slice(&x[r * row_size..(r + 1) * row_size]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&s[1..]);
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(
            shape,
            out,
            rg,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.data(input).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(input).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(input).to_vec();
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape { input }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable node that requires them (the caller zeroes between steps).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss].requires_grad {
            // Loss has no differentiable ancestry; all gradients are zero.
            return Ok(());
        }
        for node in &mut self.nodes[..=loss] {
            if !node.requires_grad {
                continue;
            }
            match node.op {
                // Leaves accumulate across backward calls; the caller zeroes
                // between optimizer steps.
                Op::Leaf => {
                    if node.grad.is_none() {
                        node.grad = Some(vec![0.0; node.data.len()]);
                    }
                }
                // Intermediates are scratch space for this sweep only.
                _ => node.grad = Some(vec![0.0; node.data.len()]),
            }
        }
        self.nodes[loss].grad.as_mut().unwrap()[0] += 1.0;
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op, &g);
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: TensorId, delta: &[f64]) {
        let node = &mut self.nodes[id];
        debug_assert!(node.requires_grad);
        let grad = node.grad.as_mut().expect("grad allocated before sweep");
        for (gv, dv) in grad.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    fn backward_op(&mut self, id: TensorId, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_abt_acc(g, self.data(b), m, n, k, &mut da);
                    self.acc_grad(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_atb_acc(self.data(a), g, m, k, n, &mut db);
                    self.acc_grad(b, &db);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernels).to_vec();
                let (c, h, w) = (si[0], si[1], si[2]);
                let (f, k) = (sk[0], sk[2]);
                let (oh, ow) =
                    conv_out_extents(h, w, k, stride, padding).expect("validated at forward time");
                let plane = oh * ow;
                let q = c * k * k;
                if self.nodes[bias].requires_grad {
                    let mut db = vec![0.0; f];
                    for fi in 0..f {
                        db[fi] = g[fi * plane..(fi + 1) * plane].iter().sum();
                    }
                    self.acc_grad(bias, &db);
                }
                let need_k = self.nodes[kernels].requires_grad;
                let need_in = self.nodes[input].requires_grad;
                if need_k || need_in {
                    if need_k {
                        let mut cols = vec![0.0; q * plane];
                        im2col(
                            self.data(input),
                            c,
                            h,
                            w,
                            k,
                            stride,
                            padding,
                            oh,
                            ow,
                            &mut cols,
                        );
                        let mut dk = vec![0.0; f * q];
                        matmul_abt_acc(g, &cols, f, plane, q, &mut dk);
                        self.acc_grad(kernels, &dk);
                    }
                    if need_in {
                        let mut dcols = vec![0.0; q * plane];
                        matmul_atb_acc(self.data(kernels), g, f, q, plane, &mut dcols);
                        let mut din = vec![0.0; c * h * w];
                        col2im_acc(&dcols, c, h, w, k, stride, padding, oh, ow, &mut din);
                        self.acc_grad(input, &din);
                    }
                }
            }
            Op::MaxPool2d { input, ref argmax } => {
                if self.nodes[input].requires_grad {
                    let mut din = vec![0.0; self.data(input).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        din[src] += g[o];
                    }
                    self.acc_grad(input, &din);
                }
            }
            Op::LeakyRelu { input, alpha } => {
                if self.nodes[input].requires_grad {
                    let din: Vec<f64> = self
                        .data(input)
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x >= 0.0 { gv } else { alpha * gv })
                        .collect();
                    self.acc_grad(input, &din);
                }
            }
            Op::Elu { input } => {
                if self.nodes[input].requires_grad {
                    let out = self.data(id).to_vec();
                    let din: Vec<f64> = self
                        .data(input)
                        .iter()
                        .zip(out.iter().zip(g))
                        .map(|(&x, (&y, &gv))| if x > 0.0 { gv } else { (y + 1.0) * gv })
                        .collect();
                    self.acc_grad(input, &din);
                }
            }
            Op::SoftmaxRows { input } => {
                if self.nodes[input].requires_grad {
                    let shape = self.shape(id).to_vec();
                    let (m, n) = (shape[0], shape[1]);
                    let y = self.data(id).to_vec();
                    let mut din = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &y[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            din[i * n + j] = row[j] * (grow[j] - dot);
                        }
                    }
                    self.acc_grad(input, &din);
                }
            }
            Op::Bce { probs, ref targets } => {
                if self.nodes[probs].requires_grad {
                    let n = targets.len() as f64;
                    let gs = g[0];
                    let din: Vec<f64> = self
                        .data(probs)
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if p < BCE_EPS || p > 1.0 - BCE_EPS {
                                0.0 // clamp is flat outside the interval
                            } else {
                                gs * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    self.acc_grad(probs, &din);
                }
            }
            Op::AddRowBias { x, bias } => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                if self.nodes[x].requires_grad {
                    self.acc_grad(x, g);
                }
                if self.nodes[bias].requires_grad {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for (d, gv) in db.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d += gv;
                        }
                    }
                    self.acc_grad(bias, &db);
                }
            }
            Op::OuterSum { u, v } => {
                let (m, n) = (self.shape(id)[0], self.shape(id)[1]);
                if self.nodes[u].requires_grad {
                    let mut du = vec![0.0; m];
                    for i in 0..m {
                        du[i] = g[i * n..(i + 1) * n].iter().sum();
                    }
                    self.acc_grad(u, &du);
                }
                if self.nodes[v].requires_grad {
                    let mut dv = vec![0.0; n];
                    for i in 0..m {
                        for (d, gv) in dv.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d += gv;
                        }
                    }
                    self.acc_grad(v, &dv);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a].requires_grad {
                    self.acc_grad(a, g);
                }
                if self.nodes[b].requires_grad {
                    self.acc_grad(b, g);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let da: Vec<f64> = self.data(b).iter().zip(g).map(|(x, gv)| x * gv).collect();
                    self.acc_grad(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<f64> = self.data(a).iter().zip(g).map(|(x, gv)| x * gv).collect();
                    self.acc_grad(b, &db);
                }
            }
            Op::ScalarMul { a, c } => {
                if self.nodes[a].requires_grad {
                    let da: Vec<f64> = g.iter().map(|gv| c * gv).collect();
                    self.acc_grad(a, &da);
                }
            }
            Op::Sum { input } => {
                if self.nodes[input].requires_grad {
                    let din = vec![g[0]; self.data(input).len()];
                    self.acc_grad(input, &din);
                }
            }
            Op::MeanRows { input } => {
                if self.nodes[input].requires_grad {
                    let (m, n) = (self.shape(input)[0], self.shape(input)[1]);
                    let scale = 1.0 / m as f64;
                    let mut din = vec![0.0; m * n];
                    for i in 0..m {
                        for (d, gv) in din[i * n..(i + 1) * n].iter_mut().zip(g) {
                            *d = gv * scale;
                        }
                    }
                    self.acc_grad(input, &din);
                }
            }
            Op::ConcatRows { ref parts } => {
                let n = self.shape(id)[1];
                let mut offset = 0usize;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    let len = rows * n;
                    if self.nodes[p].requires_grad {
                        let slice = g[offset..offset + len].to_vec();
                        self.acc_grad(p, &slice);
                    }
                    offset += len;
                }
            }
            Op::SelectRows { input, ref rows } => {
                if self.nodes[input].requires_grad {
                    let row_size: usize = self.shape(input)[1..].iter().product::<usize>().max(1);
                    let mut din = vec![0.0; self.data(input).len()];
                    for (oi, &r) in rows.iter().enumerate() {
                        let dst = &mut din[r * row_size..(r + 1) * row_size];
                        for (d, gv) in dst.iter_mut().zip(&g[oi * row_size..(oi + 1) * row_size]) {
                            *d += gv;
                        }
                    }
                    self.acc_grad(input, &din);
                }
            }
            Op::Reshape { input } => {
                if self.nodes[input].requires_grad {
                    self.acc_grad(input, g);
                }
            }
        }
    }
}

fn conv_out_extents(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let span_h = (h + 2 * padding).checked_sub(k);
    let span_w = (w + 2 * padding).checked_sub(k);
    match (span_h, span_w) {
        (Some(sh), Some(sw)) if sh % stride == 0 && sw % stride == 0 => {
            Ok((sh / stride + 1, sw / stride + 1))
        }
        _ => Err(Error::Config(format!(
            "conv2d output extent is not an integer for input {h}x{w}, \
             kernel {k}, stride {stride}, padding {padding}"
        ))),
    }
}

// ---- raw kernels ----

/// `out[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (aik, brow) in arow.iter().zip(b.chunks_exact(n)) {
            let aik = *aik;
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T` (row-by-row dot products).
fn matmul_abt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for (j, brow) in b.chunks_exact(k).enumerate() {
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out[m,n] += a[r,m]^T * b[r,n]` (rank-1 accumulation per shared row).
fn matmul_atb_acc(a: &[f64], b: &[f64], r: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..r {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[i * n..(i + 1) * n];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
}

/// Unrolls conv windows into a `[c*k*k, oh*ow]` matrix (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue; // cols is pre-zeroed
                    }
                    let src_base = (ci * h + iy as usize) * w;
                    let dst_base = row + oy * ow;
                    if stride == 1 {
                        // Valid ox range is contiguous; copy it as one slice.
                        let lo = pad.saturating_sub(kx).min(ow);
                        let hi = (w + pad - kx).min(ow);
                        if lo < hi {
                            let ix0 = lo + kx - pad;
                            cols[dst_base + lo..dst_base + hi].copy_from_slice(
                                &input[src_base + ix0..src_base + ix0 + (hi - lo)],
                            );
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst_base + ox] = input[src_base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulates column gradients back into image layout.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    dcols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dinput: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w;
                    let src_base = row + oy * ow;
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx).min(ow);
                        let hi = (w + pad - kx).min(ow);
                        if lo < hi {
                            let ix0 = lo + kx - pad;
                            let dst = &mut dinput[dst_base + ix0..dst_base + ix0 + (hi - lo)];
                            for (d, s) in dst.iter_mut().zip(&dcols[src_base + lo..src_base + hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dinput[dst_base + ix as usize] += dcols[src_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
