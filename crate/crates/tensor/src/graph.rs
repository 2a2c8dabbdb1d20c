//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it in reverse
//! once and returns the gradient of a scalar loss with respect to every leaf
//! and parameter that requires one.
//!
//! Parameters live in a [`ParamStore`] borrowed for the graph's lifetime;
//! parameter nodes read from the store instead of copying it.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, gemm};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
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
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Unfold1d {
        x: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Splits a shape around `axis` into (outer, len, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<'p> Graph<'p> {
    /// A graph without parameters (leaves and constants only).
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("parameter node without store").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `[..., q] x [q, r] -> [..., r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Batched product over matching leading dims:
    /// `[..., m, k] x [..., k, n]`, or `[..., m, k] x [..., n, k]ᵀ` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = if trans_b {
            (sb[ra - 1], sb[ra - 2])
        } else {
            (sb[ra - 2], sb[ra - 1])
        };
        if k != kb {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out_shape = sa[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &av[i * m * k..],
                false,
                &bv[i * k * n..],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
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

    // ── elementwise ──────────────────────────────────────────────────

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        self.check_suffix(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let w = bv.len();
        let mut out = Vec::with_capacity(av.numel());
        for chunk in av.data().chunks_exact(w) {
            out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        Ok((t, self.requires(a) || self.requires(b)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over leading dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        let rg = self.requires(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    // ── normalisation ────────────────────────────────────────────────

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap();
        let mut out = vec![0.0; xv.numel()];
        kernels::softmax_rows(xv.data(), w, &mut out);
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.requires(x);
        self.push(t, Op::Softmax { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &xs, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gv[i] + bv[i];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of the last axis scaled to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut norms = Vec::with_capacity(xv.numel() / d);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.requires(x);
        self.push(t, Op::L2Normalize { x, norms }, rg)
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Mean negative log-likelihood over positions whose target is `Some`.
    /// `logits` is viewed as `[rows, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let v = *lv.shape().last().unwrap();
        let rows = lv.numel() / v;
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; lv.numel()];
        kernels::softmax_rows(lv.data(), v, &mut probs);
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(TensorError::TargetOutOfRange { index: t, classes: v });
                }
                let row = &lv.data()[r * v..(r + 1) * v];
                total += kernels::log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    // ── indexing and layout ──────────────────────────────────────────

    /// Selects rows of a `[rows, d]` table: output `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(invalid("gather_rows", format!("table must be 2-D, got {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(invalid("gather_rows", format!("index {i} >= {rows} rows")));
            }
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.requires(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != xv.shape().len() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(invalid("permute", format!("{perm:?} for shape {:?}", xv.shape())));
        }
        let (shape, data) = kernels::permute(xv.data(), xv.shape(), perm);
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(invalid("slice", format!("[{start}, {}) on axis {axis} of {xs:?}", start + len)));
        }
        let (outer, full, inner) = around(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start, len },
            rg,
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs.len() < 2 {
            return Err(invalid("mean_axis", format!("axis {axis} of {xs:?}")));
        }
        let (outer, len, inner) = around(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = xs;
        shape.remove(axis);
        let rg = self.requires(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, rg))
    }

    // ── temporal ─────────────────────────────────────────────────────

    /// Sliding windows for 1-D convolution: `[B, T, C] -> [B, T_out, kernel*C]`
    /// with zero padding, window-major then channel.
    pub fn unfold1d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || kernel == 0 || stride == 0 || xs[1] + pad_left + pad_right < kernel {
            return Err(invalid(
                "unfold1d",
                format!("input {xs:?}, kernel {kernel}, stride {stride}"),
            ));
        }
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        let t_out = (t + pad_left + pad_right - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * t_out * kernel * c];
        for bi in 0..b {
            for to in 0..t_out {
                let dst = &mut out[(bi * t_out + to) * kernel * c..][..kernel * c];
                for k in 0..kernel {
                    let ti = (to * stride + k) as isize - pad_left as isize;
                    if ti >= 0 && (ti as usize) < t {
                        let src = &xv[(bi * t + ti as usize) * c..][..c];
                        dst[k * c..(k + 1) * c].copy_from_slice(src);
                    }
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, t_out, kernel * c], out),
            Op::Unfold1d {
                x,
                kernel,
                stride,
                pad_left,
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling along axis 1 of `[B, T, C]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || factor == 0 {
            return Err(invalid("upsample", format!("input {xs:?}, factor {factor}")));
        }
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * t * factor * c);
        for row in xv.chunks_exact(c) {
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, t * factor, c], out),
            Op::Upsample { x, factor },
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads, nodes_param: self.bound.iter().map(|(&p, &v)| (p, v)).collect() })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_suffix(&self, grads: &mut [Option<Vec<f64>>], b: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.requires(b) {
            return;
        }
        let w = self.value(b).numel();
        let mut gb = vec![0.0; w];
        for (idx, &gv) in g.iter().enumerate() {
            gb[idx % w] += f(idx, gv);
        }
        self.acc(grads, b, gb);
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value_ref(self);
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.requires(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, false, self.value(b).data(), true, 0.0, &mut ga);
                    self.acc(grads, a, ga);
                }
                if self.requires(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(a).data(), true, g, false, 0.0, &mut gb);
                    self.acc(grads, b, gb);
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
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.requires(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let gi = &g[bi * m * n..];
                        let bi_v = &bv[bi * k * n..];
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, 1.0, gi, false, bi_v, !trans_b, 0.0, &mut ga[bi * m * k..(bi + 1) * m * k]);
                    }
                    self.acc(grads, a, ga);
                }
                if self.requires(b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let gi = &g[bi * m * n..];
                        let ai = &av[bi * m * k..];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // B stored [n, k]: dB = dCᵀ · A
                            gemm(n, m, k, 1.0, gi, true, ai, false, 0.0, dst);
                        } else {
                            gemm(k, m, n, 1.0, ai, true, gi, false, 0.0, dst);
                        }
                    }
                    self.acc(grads, b, gb);
                }
            }
            &Op::Add { a, b } => {
                self.acc(grads, a, g.to_vec());
                self.acc_suffix(grads, b, g, |_, v| v);
            }
            &Op::Sub { a, b } => {
                self.acc(grads, a, g.to_vec());
                self.acc_suffix(grads, b, g, |_, v| -v);
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let w = bv.len();
                if self.requires(a) {
                    let ga = g.iter().enumerate().map(|(idx, v)| v * bv[idx % w]).collect();
                    self.acc(grads, a, ga);
                }
                self.acc_suffix(grads, b, g, |idx, v| v * av[idx]);
            }
            &Op::Scale { x, s } => self.acc(grads, x, g.iter().map(|v| v * s).collect()),
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                let gx = g.iter().zip(xv).map(|(v, &xi)| if xi > 0.0 { *v } else { 0.0 }).collect();
                self.acc(grads, x, gx);
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                let gx = g.iter().zip(xv).map(|(v, &xi)| v * kernels::gelu_grad(xi)).collect();
                self.acc(grads, x, gx);
            }
            &Op::Abs { x } => {
                let xv = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(v, &xi)| if xi > 0.0 { *v } else if xi < 0.0 { -*v } else { 0.0 })
                    .collect();
                self.acc(grads, x, gx);
            }
            &Op::Softmax { x } => {
                let y = out.data();
                let w = *out.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), dst) in y.chunks_exact(w).zip(g.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let rows = xhat.len() / d;
                if self.requires(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires(*gain) {
                    let mut gg = vec![0.0; d];
                    for (idx, v) in g.iter().enumerate() {
                        gg[idx % d] += v * xhat[idx];
                    }
                    self.acc(grads, *gain, gg);
                }
                self.acc_suffix(grads, *bias, g, |_, v| v);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = *self.shape(*logits).last().unwrap();
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (dst, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *dst = p * scale;
                        }
                        row[t] -= scale;
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::GatherRows { table, indices } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut gt = vec![0.0; tv.numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    for (dst, v) in gt[idx * d..(idx + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *dst += v;
                    }
                }
                self.acc(grads, *table, gt);
            }
            &Op::Reshape { x } => self.acc(grads, x, g.to_vec()),
            Op::Permute { x, perm } => {
                let (_, gx) = kernels::permute(g, out.shape(), &kernels::inverse_perm(perm));
                self.acc(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = around(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start, len } => {
                let xs = self.shape(x);
                let (outer, full, inner) = around(xs, axis);
                let mut gx = vec![0.0; numel(xs)];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, x, gx);
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                self.acc(grads, x, vec![g[0]; n]);
            }
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                self.acc(grads, x, vec![g[0] / n as f64; n]);
            }
            &Op::MeanAxis { x, axis } => {
                let xs = self.shape(x);
                let (outer, len, inner) = around(xs, axis);
                let inv = 1.0 / len as f64;
                let mut gx = Vec::with_capacity(numel(xs));
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(src.iter().map(|v| v * inv));
                    }
                }
                self.acc(grads, x, gx);
            }
            &Op::Unfold1d {
                x,
                kernel,
                stride,
                pad_left,
            } => {
                let xs = self.shape(x);
                let (b, t, c) = (xs[0], xs[1], xs[2]);
                let t_out = out.shape()[1];
                let mut gx = vec![0.0; b * t * c];
                for bi in 0..b {
                    for to in 0..t_out {
                        let src = &g[(bi * t_out + to) * kernel * c..][..kernel * c];
                        for k in 0..kernel {
                            let ti = (to * stride + k) as isize - pad_left as isize;
                            if ti >= 0 && (ti as usize) < t {
                                let dst = &mut gx[(bi * t + ti as usize) * c..][..c];
                                for (d, s) in dst.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, x, gx);
            }
            &Op::Upsample { x, factor } => {
                let c = *self.shape(x).last().unwrap();
                let rows = self.value(x).numel() / c;
                let mut gx = vec![0.0; rows * c];
                for r in 0..rows {
                    for f in 0..factor {
                        let src = &g[(r * factor + f) * c..][..c];
                        for (d, s) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.acc(grads, x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.acc(grads, *x, gx);
            }
        }
    }
}

impl Node {
    fn value_ref<'a>(&'a self, g: &'a Graph<'_>) -> &'a Tensor {
        match &self.value {
            Value::Owned(t) => t,
            Value::Param(id) => g.store.expect("parameter node without store").get(*id),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    nodes_param: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient for a leaf or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of the bound parameters, aligned with `store`.
    pub fn param_grads(&self, store: &ParamStore) -> Grads {
        let mut out = Grads::zeros_like(store);
        self.accumulate_into(&mut out);
        out
    }

    pub fn accumulate_into(&self, out: &mut Grads) {
        let mut pairs = self.nodes_param.clone();
        pairs.sort_by_key(|(p, _)| *p);
        for (p, v) in pairs {
            if let Some(g) = self.wrt(v) {
                out.accumulate(p, g);
            }
        }
    }
}
