//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! cached state to run its backward rule. Nodes only ever reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! the backward pass is a single reverse sweep. A tape supports exactly one
//! backward pass; build a fresh tape per batch.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast {
        x: Var,
        y: Var,
    },
    MulRows {
        x: Var,
        s: Var,
    },
    Reshape(Var),
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    MaskedSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation and differentiates it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

/// `c = a · b + beta · c` for row-major `c` of shape `[m, n]`, with
/// arbitrary strides on the operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the strided extents, and `c`
    // is a distinct, contiguous `[m, n]` buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes `data` laid out as `shape` so that output axis `i` is input
/// axis `axes[i]`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Logistic function evaluated without overflow for any finite input.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; it receives a gradient iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well formed")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dimensions of `a` are
    /// flattened into the row dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product over matching leading dimensions:
    /// `a[..., m, k] · b[..., k, n]`, or `a · bᵀ` with `b[..., n, k]` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::DimensionMismatch {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let (rsb, csb) = if trans_b {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                gemm(
                    m,
                    k,
                    n,
                    ab,
                    k as isize,
                    1,
                    bb,
                    rsb,
                    csb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            shape,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Scale(a, c), rg)
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape; `y` is
    /// repeated over the leading dimensions (bias rows, positional tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::DimensionMismatch {
                op: "add_broadcast",
                lhs: sx.to_vec(),
                rhs: sy.to_vec(),
            });
        }
        let width = numel(sy);
        let yv = self.value(y);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yv[i % width])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(out, shape, Op::AddBroadcast { x, y }, rg))
    }

    /// Scales row `i` of `x` (viewed as `[n, rest]`) by `s[i]`; `s` holds
    /// `n` elements.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.is_empty() || numel(ss) != sx[0] {
            return Err(Error::DimensionMismatch {
                op: "mul_rows",
                lhs: sx.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let width = numel(sx) / sx[0];
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / width])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, shape, Op::MulRows { x, s }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Sigmoid(a), rg)
    }

    // ----- shape manipulation ----------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) || shape.iter().any(|&d| d == 0) {
            return Err(Error::DimensionMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(a), rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        for &ax in axes {
            if ax >= rank || std::mem::replace(&mut seen[ax], true) {
                return Err(Error::Shape {
                    op: "permute",
                    msg: format!("invalid axes {axes:?} for rank {rank}"),
                });
            }
        }
        if axes.len() != rank {
            return Err(Error::Shape {
                op: "permute",
                msg: format!("invalid axes {axes:?} for rank {rank}"),
            });
        }
        let (out, shape) = permute_data(self.value(a), self.shape(a), axes);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            shape,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", self.shape(a)),
            });
        }
        self.permute(a, &[1, 0])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Empty("concat input".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::DimensionMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Selects rows of `table` (viewed as `[n, rest]`) by index; rows may
    /// repeat. Output shape is `[idx.len(), rest...]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.is_empty() || idx.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                msg: format!("cannot gather {} rows from {st:?}", idx.len()),
            });
        }
        let rows = st[0];
        let width = numel(&st[1..]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let mut shape = st;
        shape[0] = idx.len();
        let rg = self.rg(table);
        Ok(self.push(
            out,
            shape,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ----- normalisation ----------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, shape, Op::Softmax { a, axis }, rg))
    }

    /// Softmax over the last axis with excluded keys. `a` has shape
    /// `[batch, ..., keys]` and `key_mask` holds `batch * keys` flags
    /// (`true` = attend), shared across the middle dimensions. Excluded
    /// keys get exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, key_mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape {
                op: "masked_softmax",
                msg: format!("expected rank >= 2, got {shape:?}"),
            });
        }
        let batch = shape[0];
        let keys = shape[shape.len() - 1];
        if key_mask.len() != batch * keys {
            return Err(Error::Shape {
                op: "masked_softmax",
                msg: format!(
                    "mask of {} flags for batch {batch} x {keys} keys",
                    key_mask.len()
                ),
            });
        }
        let x = self.value(a);
        let rows = x.len() / keys;
        let rows_per_batch = rows / batch;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let mask = &key_mask[(r / rows_per_batch) * keys..(r / rows_per_batch + 1) * keys];
            let xr = &x[r * keys..(r + 1) * keys];
            let max = xr
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMasked(r));
            }
            let yr = &mut out[r * keys..(r + 1) * keys];
            let mut sum = 0.0;
            for j in 0..keys {
                if mask[j] {
                    yr[j] = (xr[j] - max).exp();
                    sum += yr[j];
                }
            }
            for y in yr.iter_mut() {
                *y /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, shape, Op::MaskedSoftmax { a }, rg))
    }

    /// Layer normalisation over the last axis using the population
    /// variance, followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::DimensionMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape {
            op: "l2_normalize_rows",
            msg: "scalar input".into(),
        })?;
        let av = self.value(a);
        let rows = av.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(av.len());
        for r in 0..rows {
            let row = &av[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm(r));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let rg = self.rg(a);
        Ok(self.push(out, shape, Op::L2NormalizeRows { a, norms }, rg))
    }

    // ----- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], Vec::new(), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![s], Vec::new(), Op::Mean(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                msg: format!("logits {shape:?} with {} labels", labels.len()),
            });
        }
        let c = shape[1];
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: c,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            Vec::new(),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----- backward -----------------------------------------------------------

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Propagates gradients from the scalar `loss` back to every node that
    /// requires them. Gradient-requiring leaves that do not influence the
    /// loss receive zero gradients. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            self.fill_leaf_zeros();
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        self.fill_leaf_zeros();
        Ok(())
    }

    fn fill_leaf_zeros(&mut self) {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; n.value.len()]);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily detach the op so operand values can be borrowed while
        // gradients are accumulated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, n as isize, 1, self.value(b), 1, n as isize, 0.0, &mut da);
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a), 1, k as isize, g, n as isize, 1, 0.0, &mut db);
                    self.accumulate(b, &db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if self.rg(a) {
                    let mut da = vec![0.0; batch * m * k];
                    let bv = self.value(b);
                    for t in 0..batch {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let bb = &bv[t * k * n..(t + 1) * k * n];
                        // dA = dC · Bᵀ, where B is [k, n] (or stored [n, k]).
                        let (rs, cs) = if trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        gemm(
                            m,
                            n,
                            k,
                            gb,
                            n as isize,
                            1,
                            bb,
                            rs,
                            cs,
                            0.0,
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; batch * k * n];
                    let av = self.value(a);
                    for t in 0..batch {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let ab = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut db[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // d(B stored [n, k]) = dCᵀ · A
                            gemm(n, m, k, gb, 1, n as isize, ab, k as isize, 1, 0.0, out);
                        } else {
                            gemm(k, m, n, ab, 1, k as isize, gb, n as isize, 1, 0.0, out);
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    self.accumulate(b, &db);
                }
            }
            &Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(a, &da);
            }
            &Op::AddBroadcast { x, y } => {
                self.accumulate(x, g);
                if self.rg(y) {
                    let width = self.value(y).len();
                    let mut dy = vec![0.0; width];
                    for (i, v) in g.iter().enumerate() {
                        dy[i % width] += v;
                    }
                    self.accumulate(y, &dy);
                }
            }
            &Op::MulRows { x, s } => {
                let rows = self.value(s).len();
                let width = g.len() / rows;
                if self.rg(x) {
                    let sv = self.value(s);
                    let dx: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * sv[i / width]).collect();
                    self.accumulate(x, &dx);
                }
                if self.rg(s) {
                    let xv = self.value(x);
                    let ds: Vec<f64> = (0..rows)
                        .map(|r| {
                            (r * width..(r + 1) * width).map(|j| g[j] * xv[j]).sum::<f64>()
                        })
                        .collect();
                    self.accumulate(s, &ds);
                }
            }
            &Op::Reshape(a) => self.accumulate(a, g),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (da, _) = permute_data(g, &self.nodes[i].shape, &inverse);
                self.accumulate(*a, &da);
            }
            Op::Concat { inputs, axis } => {
                let shape = &self.nodes[i].shape;
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(v, &dv);
                    }
                    offset += chunk;
                }
            }
            Op::GatherRows { table, idx } => {
                let tlen = self.value(*table).len();
                let width = tlen / self.shape(*table)[0];
                let mut dt = vec![0.0; tlen];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..width {
                        dt[src * width + j] += g[r * width + j];
                    }
                }
                self.accumulate(*table, &dt);
            }
            &Op::Softmax { a, axis } => {
                let shape = &self.nodes[i].shape;
                let outer = numel(&shape[..axis]);
                let len = shape[axis];
                let inner = numel(&shape[axis + 1..]);
                let y = &self.nodes[i].value;
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for t in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + t;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            &Op::MaskedSoftmax { a } => {
                let keys = *self.nodes[i].shape.last().unwrap();
                let y = &self.nodes[i].value;
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / keys {
                    let span = r * keys..(r + 1) * keys;
                    let dot: f64 = span.clone().map(|j| g[j] * y[j]).sum();
                    for j in span {
                        da[j] = y[j] * (g[j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let rows = xhat.len() / d;
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (idx, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[idx % d] += gv * h;
                    }
                    self.accumulate(*gain, &dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; d];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % d] += gv;
                    }
                    self.accumulate(*bias, &db);
                }
                if self.rg(*x) {
                    let gain_v = self.value(*gain);
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = span.clone().map(|j| g[j] * gain_v[j - r * d]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat
                            .iter()
                            .zip(&xhat[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for (j, dh) in span.zip(&dxhat) {
                            dx[j] = inv_std[r] * (dh - mean_d - xhat[j] * mean_dh);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            &Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(g, &x)| g * gelu_deriv(x))
                    .collect();
                self.accumulate(a, &da);
            }
            &Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(a, &da);
            }
            &Op::Sum(a) => {
                let da = vec![g[0]; self.value(a).len()];
                self.accumulate(a, &da);
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(a, &da);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * c + label] -= scale;
                }
                self.accumulate(*logits, &dl);
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = &self.nodes[i].value;
                let d = y.len() / norms.len();
                let mut da = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let dot: f64 = span.clone().map(|j| g[j] * y[j]).sum();
                    for j in span {
                        da[j] = (g[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate(*a, &da);
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]).with_grad());
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.leaf(&t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.leaf(&t(&[2], &[1f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.75).abs() < 1e-15);

        assert!(matches!(tape.softmax(x, 1), Err(Error::AxisOutOfRange { .. })));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_excluded_keys() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2, 3], &[1.0, 2.0, 50.0, 0.0, 0.0, -9.0]));
        let y = tape.masked_softmax(x, &[true, true, false]).unwrap();
        let v = tape.value(y);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        assert_eq!(v[3], 0.5);
        assert!(matches!(
            tape.masked_softmax(x, &[false, false, false]),
            Err(Error::FullyMasked(0))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.leaf(&Tensor::ones(&[3]));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let x = tape.leaf(&t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

        let g = tape.leaf(&Tensor::ones(&[2]));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let x = tape.leaf(&t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 1.0]);
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, 40.0, -40.0]));
        let y = tape.gelu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 40.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(ce)[0] - 2f64.ln()).abs() < 1e-15);

        let l = tape.leaf(&t(&[1, 2], &[30.0, -30.0]));
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        assert!(tape.value(ce)[0] < 1e-25);

        let l = tape.leaf(&t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        match tape.cross_entropy(l, &[0, 2]) {
            Err(Error::LabelOutOfRange { row, .. }) => assert_eq!(row, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let l = tape.leaf(&t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 0.0, 0.0]).with_grad());
        let ce = tape.cross_entropy(l, &[2, 0]).unwrap();
        tape.backward(ce).unwrap();
        let g = tape.grad(l).unwrap().to_vec();
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        let p0 = [0.5f64.exp() / z, (-1f64).exp() / z, 2f64.exp() / z];
        let expected = [
            p0[0] / 2.0,
            p0[1] / 2.0,
            (p0[2] - 1.0) / 2.0,
            (1.0 / 3.0 - 1.0) / 2.0,
            1.0 / 6.0,
            1.0 / 6.0,
        ];
        for (a, e) in g.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_sum_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 3]).with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[4]).with_grad());
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let s = tape.add(s1, s2).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn backward_is_single_use_and_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[3]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn unused_gradient_leaves_get_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[2]).with_grad());
        let unused = tape.leaf(&Tensor::ones(&[3]).with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.leaf(&t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element (k, i, j) of p == x[i, j, k]
        assert_eq!(tape.value(p)[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), &data[..]);
    }

    #[test]
    fn concat_and_gather() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[1, 1, 2], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let flat = tape.reshape(c, &[3, 2]).unwrap();
        let g = tape.gather_rows(flat, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(stable_sigmoid(0.0), 0.5);
        assert!(stable_sigmoid(-1000.0) >= 0.0);
        assert!(stable_sigmoid(1000.0).is_finite());
        assert!((stable_sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }
}
