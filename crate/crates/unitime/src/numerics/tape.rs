//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation appends one node holding its output value
//! and a record of its inputs. Because nodes are appended in execution order,
//! the tape is topologically sorted by construction, and [`Tape::backward`]
//! is a single reverse sweep that visits each node exactly once.
//!
//! The engine works in f64. Shapes must conform exactly; the only permitted
//! coercion is a rank-0 scalar against any shape in `add`/`sub`/`mul`, and
//! that case is handled explicitly, never by silent broadcasting.

use crate::error::{Error, Result};
use crate::numerics::tensor::{strides_of, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddBiasRows(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        input: Var,
        scale: Var,
        shift: Var,
        axis: usize,
        eps: f64,
    },
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Mean(Var, usize),
    MaskedFill {
        input: Var,
        mask: Tensor,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
}

/// The ordered record of executed operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn matmul_abt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow.iter()) {
                acc += gv * bv;
            }
            orow[p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_atb_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

/// Iteration geometry for reductions along one axis of a row-major buffer.
/// Returns (outer, axis_len, inner): slice j of outer block o starts at
/// o * axis_len * inner + r for r in 0..inner, stepping by inner.
fn axis_geometry(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidOperand {
            op,
            reason: format!("axis {} out of range for shape {:?}", axis, shape),
        });
    }
    if shape[axis] == 0 {
        return Err(Error::InvalidOperand {
            op,
            reason: format!("axis {} of shape {:?} has extent 0", axis, shape),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A non-differentiable input (data, targets, constants).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf whose differentiability is chosen by the caller.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- ops ---------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::Matmul(a, b)))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data().iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let y = vb.data()[0];
            let data = va.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.is_scalar() {
            let x = va.data()[0];
            let data = vb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(vb.shape().to_vec(), data)?
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0].value.data().iter().map(|&x| x + c).collect(),
        )
        .expect("shape preserved");
        let rg = self.requires(a);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0].value.data().iter().map(|&x| x * c).collect(),
        )
        .expect("shape preserved");
        let rg = self.requires(a);
        self.push(value, rg, Op::MulScalar(a, c))
    }

    /// Adds a length-`d` bias vector to every row of an `[n, d]` matrix.
    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if vx.ndim() != 2 || vb.ndim() != 1 || vx.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_rows",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let mut data = vx.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += vb.data()[c];
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(Tensor::new(vec![n, d], data)?, rg, Op::AddBiasRows(x, bias)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .map(|&x| 1.0 / (1.0 + (-x).exp()))
                .collect(),
        )
        .expect("shape preserved");
        let rg = self.requires(a);
        self.push(value, rg, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0].value.data().iter().map(|&x| gelu_scalar(x)).collect(),
        )
        .expect("shape preserved");
        let rg = self.requires(a);
        self.push(value, rg, Op::Gelu(a))
    }

    /// Softmax along `axis`. `-inf` entries receive exactly zero weight.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let (outer, axis_len, inner) = axis_geometry(v.shape(), axis, "softmax")?;
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for r in 0..inner {
                let base = o * axis_len * inner + r;
                let mut max = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    max = max.max(data[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..axis_len {
                    let idx = base + j * inner;
                    let e = (data[idx] - max).exp();
                    data[idx] = e;
                    sum += e;
                }
                for j in 0..axis_len {
                    data[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(v.shape().to_vec(), data)?, rg, Op::Softmax(a, axis)))
    }

    /// Layer normalization along `axis` with learnable scale and shift of
    /// length `shape[axis]`.
    pub fn layer_norm(
        &mut self,
        input: Var,
        axis: usize,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        let v = &self.nodes[input.0].value;
        let (outer, axis_len, inner) = axis_geometry(v.shape(), axis, "layer_norm")?;
        let vs = &self.nodes[scale.0].value;
        let vb = &self.nodes[shift.0].value;
        if vs.shape() != [axis_len] || vb.shape() != [axis_len] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vs.shape().to_vec(),
                rhs: vec![axis_len],
            });
        }
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for r in 0..inner {
                let base = o * axis_len * inner + r;
                let mut mean = 0.0;
                for j in 0..axis_len {
                    mean += data[base + j * inner];
                }
                mean /= axis_len as f64;
                let mut var = 0.0;
                for j in 0..axis_len {
                    let d = data[base + j * inner] - mean;
                    var += d * d;
                }
                var /= axis_len as f64;
                let denom = (var + eps).sqrt();
                for j in 0..axis_len {
                    let idx = base + j * inner;
                    let xhat = (data[idx] - mean) / denom;
                    data[idx] = xhat * vs.data()[j] + vb.data()[j];
                }
            }
        }
        let rg = self.requires(input) || self.requires(scale) || self.requires(shift);
        Ok(self.push(
            Tensor::new(v.shape().to_vec(), data)?,
            rg,
            Op::LayerNorm {
                input,
                scale,
                shift,
                axis,
                eps,
            },
        ))
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.ndim() != 2 {
            return Err(Error::InvalidOperand {
                op: "transpose",
                reason: format!("expected rank 2, got shape {:?}", v.shape()),
            });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.data()[i * n + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(vec![n, m], data)?, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let expect: usize = shape.iter().product();
        if expect != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Concatenation along `axis`. All other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidOperand {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidOperand {
                op: "concat",
                reason: format!("axis {} out of range for shape {:?}", axis, first),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let out_axis = out_shape[axis];
        let mut data = vec![0.0; outer * out_axis * inner];
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let a_len = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * a_len * inner..(o + 1) * a_len * inner];
                let dst_start = (o * out_axis + offset) * inner;
                data[dst_start..dst_start + a_len * inner].copy_from_slice(src);
            }
            offset += a_len;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            rg,
            Op::Concat(parts.to_vec(), axis),
        ))
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidOperand {
                op: "narrow",
                reason: format!(
                    "range {}..{} on axis {} of shape {:?}",
                    start,
                    start + len,
                    axis,
                    shape
                ),
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let a_len = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * a_len + start) * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&v.data()[src_start..src_start + len * inner]);
        }
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            rg,
            Op::Narrow { input: a, axis, start },
        ))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let (outer, axis_len, inner) = axis_geometry(v.shape(), axis, "mean")?;
        let mut out_shape = v.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * axis_len * inner + r;
                let mut acc = 0.0;
                for j in 0..axis_len {
                    acc += v.data()[base + j * inner];
                }
                data[o * inner + r] = acc / axis_len as f64;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Mean(a, axis)))
    }

    /// Replaces entries where `mask` is nonzero with `value`.
    /// The mask is a constant and receives no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &Tensor, value: f64) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: v.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let data = v
            .data()
            .iter()
            .zip(mask.data().iter())
            .map(|(&x, &m)| if m != 0.0 { value } else { x })
            .collect();
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(v.shape().to_vec(), data)?,
            rg,
            Op::MaskedFill {
                input: a,
                mask: mask.clone(),
            },
        ))
    }

    /// Selects rows `ids` of a `[v, d]` table into an `[ids.len(), d]` matrix.
    /// Backward scatter-adds into exactly the selected rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = &self.nodes[table.0].value;
        if v.ndim() != 2 {
            return Err(Error::InvalidOperand {
                op: "gather_rows",
                reason: format!("expected rank 2 table, got {:?}", v.shape()),
            });
        }
        let (rows, d) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidOperand {
                op: "gather_rows",
                reason: format!("row {} out of range for table with {} rows", bad, rows),
            });
        }
        let mut data = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&v.data()[id * d..(id + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates gradients of `loss` into every node with
    /// `requires_grad = true`. Repeated calls accumulate; there is no
    /// implicit zeroing.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidOperand {
                op: "backward",
                reason: format!(
                    "loss must be a scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        let mut scratch: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            scratch[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = scratch[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut scratch)?;
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(scratch: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) -> Result<()> {
        if !nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut scratch[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Reduces an upstream gradient to a scalar operand by total summation.
    fn reduce_to_scalar(g: &Tensor) -> Tensor {
        Tensor::scalar(g.data().iter().sum())
    }

    fn propagate(&self, idx: usize, g: &Tensor, scratch: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_abt_acc(g.data(), vb.data(), &mut da, m, k, n);
                    Self::accumulate(scratch, nodes, *a, Tensor::new(vec![m, k], da)?)?;
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_atb_acc(va.data(), g.data(), &mut db, m, k, n);
                    Self::accumulate(scratch, nodes, *b, Tensor::new(vec![k, n], db)?)?;
                }
            }
            Op::Add(a, b) => {
                for (v, _sign) in [(*a, 1.0), (*b, 1.0)] {
                    if !nodes[v.0].requires_grad {
                        continue;
                    }
                    let gv = if nodes[v.0].value.shape() == g.shape() {
                        g.clone()
                    } else {
                        Self::reduce_to_scalar(g)
                    };
                    Self::accumulate(scratch, nodes, v, gv)?;
                }
            }
            Op::Sub(a, b) => {
                if nodes[a.0].requires_grad {
                    let ga = if nodes[a.0].value.shape() == g.shape() {
                        g.clone()
                    } else {
                        Self::reduce_to_scalar(g)
                    };
                    Self::accumulate(scratch, nodes, *a, ga)?;
                }
                if nodes[b.0].requires_grad {
                    let neg =
                        Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| -x).collect())?;
                    let gb = if nodes[b.0].value.shape() == g.shape() {
                        neg
                    } else {
                        Self::reduce_to_scalar(&neg)
                    };
                    Self::accumulate(scratch, nodes, *b, gb)?;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if nodes[a.0].requires_grad {
                    let ga = Self::mul_grad_side(g, va, vb)?;
                    Self::accumulate(scratch, nodes, *a, ga)?;
                }
                if nodes[b.0].requires_grad {
                    let gb = Self::mul_grad_side(g, vb, va)?;
                    Self::accumulate(scratch, nodes, *b, gb)?;
                }
            }
            Op::AddScalar(a) => {
                Self::accumulate(scratch, nodes, *a, g.clone())?;
            }
            Op::MulScalar(a, c) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|x| x * c).collect(),
                )?;
                Self::accumulate(scratch, nodes, *a, ga)?;
            }
            Op::AddBiasRows(x, bias) => {
                if nodes[x.0].requires_grad {
                    Self::accumulate(scratch, nodes, *x, g.clone())?;
                }
                if nodes[bias.0].requires_grad {
                    let (n, d) = (g.shape()[0], g.shape()[1]);
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += g.data()[r * d + c];
                        }
                    }
                    Self::accumulate(scratch, nodes, *bias, Tensor::new(vec![d], db)?)?;
                }
            }
            Op::Sigmoid(a) => {
                let y = &nodes[idx].value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data().iter())
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect(),
                )?;
                Self::accumulate(scratch, nodes, *a, ga)?;
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data().iter())
                        .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                        .collect(),
                )?;
                Self::accumulate(scratch, nodes, *a, ga)?;
            }
            Op::Softmax(a, axis) => {
                let y = &nodes[idx].value;
                let (outer, axis_len, inner) = axis_geometry(y.shape(), *axis, "softmax")?;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * axis_len * inner + r;
                        let mut dot = 0.0;
                        for j in 0..axis_len {
                            let idx2 = base + j * inner;
                            dot += g.data()[idx2] * y.data()[idx2];
                        }
                        for j in 0..axis_len {
                            let idx2 = base + j * inner;
                            dx[idx2] = y.data()[idx2] * (g.data()[idx2] - dot);
                        }
                    }
                }
                Self::accumulate(scratch, nodes, *a, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::LayerNorm {
                input,
                scale,
                shift,
                axis,
                eps,
            } => {
                let x = &nodes[input.0].value;
                let vs = &nodes[scale.0].value;
                let (outer, axis_len, inner) = axis_geometry(x.shape(), *axis, "layer_norm")?;
                let n = axis_len as f64;
                let mut dx = vec![0.0; x.len()];
                let mut dscale = vec![0.0; axis_len];
                let mut dshift = vec![0.0; axis_len];
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * axis_len * inner + r;
                        let mut mean = 0.0;
                        for j in 0..axis_len {
                            mean += x.data()[base + j * inner];
                        }
                        mean /= n;
                        let mut var = 0.0;
                        for j in 0..axis_len {
                            let d = x.data()[base + j * inner] - mean;
                            var += d * d;
                        }
                        var /= n;
                        let denom = (var + eps).sqrt();
                        // dxhat = g * scale; dx = (dxhat - mean(dxhat)
                        //   - xhat * mean(dxhat * xhat)) / denom
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..axis_len {
                            let idx2 = base + j * inner;
                            let xhat = (x.data()[idx2] - mean) / denom;
                            let dxhat = g.data()[idx2] * vs.data()[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                            dscale[j] += g.data()[idx2] * xhat;
                            dshift[j] += g.data()[idx2];
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        for j in 0..axis_len {
                            let idx2 = base + j * inner;
                            let xhat = (x.data()[idx2] - mean) / denom;
                            let dxhat = g.data()[idx2] * vs.data()[j];
                            dx[idx2] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) / denom;
                        }
                    }
                }
                if nodes[input.0].requires_grad {
                    Self::accumulate(scratch, nodes, *input, Tensor::new(x.shape().to_vec(), dx)?)?;
                }
                if nodes[scale.0].requires_grad {
                    Self::accumulate(scratch, nodes, *scale, Tensor::new(vec![axis_len], dscale)?)?;
                }
                if nodes[shift.0].requires_grad {
                    Self::accumulate(scratch, nodes, *shift, Tensor::new(vec![axis_len], dshift)?)?;
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = g.data()[i * n + j];
                    }
                }
                Self::accumulate(scratch, nodes, *a, Tensor::new(vec![n, m], dx)?)?;
            }
            Op::Reshape(a) => {
                let ga = Tensor::new(nodes[a.0].value.shape().to_vec(), g.data().to_vec())?;
                Self::accumulate(scratch, nodes, *a, ga)?;
            }
            Op::Concat(parts, axis) => {
                let out_shape = nodes[idx].value.shape();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let out_axis = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let p_shape = nodes[p.0].value.shape().to_vec();
                    let a_len = p_shape[*axis];
                    if nodes[p.0].requires_grad {
                        let mut dp = vec![0.0; nodes[p.0].value.len()];
                        for o in 0..outer {
                            let src_start = (o * out_axis + offset) * inner;
                            let dst_start = o * a_len * inner;
                            dp[dst_start..dst_start + a_len * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + a_len * inner]);
                        }
                        Self::accumulate(scratch, nodes, p, Tensor::new(p_shape, dp)?)?;
                    }
                    offset += a_len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = nodes[input.0].value.shape().to_vec();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let a_len = in_shape[*axis];
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; nodes[input.0].value.len()];
                for o in 0..outer {
                    let dst_start = (o * a_len + start) * inner;
                    let src_start = o * len * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g.data()[src_start..src_start + len * inner]);
                }
                Self::accumulate(scratch, nodes, *input, Tensor::new(in_shape, dx)?)?;
            }
            Op::Mean(a, axis) => {
                let in_shape = nodes[a.0].value.shape().to_vec();
                let (outer, axis_len, inner) = axis_geometry(&in_shape, *axis, "mean")?;
                let scale = 1.0 / axis_len as f64;
                let mut dx = vec![0.0; nodes[a.0].value.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let gv = g.data()[o * inner + r] * scale;
                        let base = o * axis_len * inner + r;
                        for j in 0..axis_len {
                            dx[base + j * inner] = gv;
                        }
                    }
                }
                Self::accumulate(scratch, nodes, *a, Tensor::new(in_shape, dx)?)?;
            }
            Op::MaskedFill { input, mask } => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(mask.data().iter())
                        .map(|(&gv, &m)| if m != 0.0 { 0.0 } else { gv })
                        .collect(),
                )?;
                Self::accumulate(scratch, nodes, *input, dx)?;
            }
            Op::GatherRows { table, ids } => {
                let t_shape = nodes[table.0].value.shape().to_vec();
                let d = t_shape[1];
                let mut dt = vec![0.0; nodes[table.0].value.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g.data()[r * d + c];
                    }
                }
                Self::accumulate(scratch, nodes, *table, Tensor::new(t_shape, dt)?)?;
            }
        }
        Ok(())
    }

    fn mul_grad_side(g: &Tensor, this: &Tensor, other: &Tensor) -> Result<Tensor> {
        // grad wrt `this` is g * other, reduced to a scalar if `this` is one.
        if this.shape() == g.shape() {
            if other.is_scalar() {
                let c = other.data()[0];
                Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| x * c).collect())
            } else {
                Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(other.data().iter())
                        .map(|(&gv, &ov)| gv * ov)
                        .collect(),
                )
            }
        } else {
            // `this` is the scalar operand
            let acc = g
                .data()
                .iter()
                .zip(other.data().iter())
                .map(|(&gv, &ov)| gv * ov)
                .sum();
            Ok(Tensor::scalar(acc))
        }
    }
}

/// Upper-triangular causal mask: entry (i, j) is 1 when key position j lies
/// after query position i, so those scores get filled with `-inf`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = 1.0;
        }
    }
    Tensor::new(vec![n, n], data).expect("consistent by construction")
}

// keep strides_of linked in for potential external rank-N indexing helpers
#[allow(dead_code)]
fn _touch(shape: &[usize]) -> Vec<usize> {
    strides_of(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(tape: &mut Tape, v: Var) -> Var {
        // mean over all axes until rank 0
        let mut cur = v;
        while !tape.value(cur).shape().is_empty() {
            cur = tape.mean(cur, 0).unwrap();
        }
        cur
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn softmax_assigns_zero_weight_to_neg_inf() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1.0, f64::NEG_INFINITY, 2.0]));
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.value(y).data().to_vec();
        assert_eq!(out[1], 0.0);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out[2] > out[0]);
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 0]));
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, -2.0, 3.0]));
        let m = tape.mean(x, 0).unwrap();
        let loss = tape.mul_scalar(m, 3.0); // sum = 3 * mean
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn mse_gradient_vanishes_at_equality() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[0.5, -1.5]));
        let y = tape.constant(Tensor::vector(&[0.5, -1.5]));
        let d = tape.sub(x, y).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean(sq, 0).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[2.0, 4.0]));
        let loss = scalar_loss(&mut tape, x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn layer_norm_output_is_standardized_before_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 2.0, 0.0]).unwrap());
        let scale = tape.constant(Tensor::ones(&[4]));
        let shift = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, 1, scale, shift, 1e-5).unwrap();
        for row in 0..2 {
            let vals: Vec<f64> = (0..4).map(|c| tape.value(y).at2(row, c)).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6, "row {row} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {row} var {var}");
        }
    }

    #[test]
    fn reshape_and_transpose_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let r = tape.reshape(x, &[3, 2]).unwrap();
        let back = tape.reshape(r, &[2, 3]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let t = tape.transpose(x).unwrap();
        let tt = tape.transpose(t).unwrap();
        assert_eq!(tape.value(tt), tape.value(x));
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 2, vec![5., 6.]).unwrap());
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        let tail = tape.narrow(c, 0, 2, 1).unwrap();
        assert_eq!(tape.value(tail).data(), &[5.0, 6.0]);
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let m = causal_mask(3);
        assert_eq!(m.data(), &[0., 1., 1., 0., 0., 1., 0., 0., 0.]);
    }

    #[test]
    fn gather_rows_routes_gradient_to_selected_rows_only() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let picked = tape.gather_rows(table, &[2, 2]).unwrap();
        let loss = scalar_loss(&mut tape, picked);
        tape.backward(loss).unwrap();
        let g = tape.grad(table).unwrap();
        assert_eq!(g.data()[0..4], [0.0, 0.0, 0.0, 0.0]);
        assert!(g.data()[4] > 0.0 && g.data()[5] > 0.0);
    }
}
