//! Differentiable primitives and their backward rules.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{
    broadcast_shape, numel_of, permute_data, reduce_broadcast, AxisSplit, Tensor,
};

const LAYER_NORM_EPS: f64 = 1e-6;
const L2_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Softplus,
    Gelu,
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf_exact())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf_exact());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let (da, db) = (va.data(), vb.data());
        let (na, nb) = (da.len(), db.len());
        let n = numel_of(&shape);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = if na == nb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % na], db[i % nb])).collect()
        };
        let op = match kind {
            Binary::Add => Op::Add(ia, ib),
            Binary::Sub => Op::Sub(ia, ib),
            Binary::Mul => Op::Mul(ia, ib),
            Binary::Div => Op::Div(ia, ib),
        };
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let c = T::lit(factor);
        let value = self.nodes[ia].value.map(|x| x * c);
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(value, Op::Scale(ia, c), rg))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let (value, op) = match kind {
            Unary::Exp => (v.map(T::exp), Op::Exp(ia)),
            Unary::Log => (v.map(T::ln), Op::Log(ia)),
            Unary::Softplus => (v.map(softplus), Op::Softplus(ia)),
            Unary::Gelu => (v.map(gelu), Op::Gelu(ia)),
        };
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(value, op, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    /// Exact GeLU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`. `b` is either `[k, n]`, shared by every leading
    /// index of `a`, or `[..., k, n]` with the same leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let mismatch = |detail: String| TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
            detail,
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("both operands need rank >= 2".into()));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch(format!("inner extents differ: {k} vs {kb}")));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead != &sb[..sb.len() - 2] {
            return Err(mismatch("batch extents differ".into()));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        if shared_b {
            T::gemm(
                batch * m,
                k,
                n,
                va.data(),
                (k as isize, 1),
                vb.data(),
                (n as isize, 1),
                &mut out,
                (n as isize, 1),
                false,
            );
        } else {
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    (n as isize, 1),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                    false,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Matmul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let split = AxisSplit::new("softmax", v.shape(), axis)?;
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        split.for_each_lane(|base, stride| {
            let at = |j: usize| base + j * stride;
            let max = (0..split.len)
                .map(|j| x[at(j)])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..split.len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            if log {
                let lse = sum.ln();
                for j in 0..split.len {
                    out[at(j)] = x[at(j)] - max - lse;
                }
            } else {
                for j in 0..split.len {
                    out[at(j)] /= sum;
                }
            }
        });
        let shape = v.shape().to_vec();
        let op = if log {
            Op::LogSoftmax { x: ia, split }
        } else {
            Op::Softmax { x: ia, split }
        };
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance
    /// (epsilon 1e-6 under the root), then applies `gain` and `bias`, both of
    /// which have the axis extent.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gain)?, self.index(bias)?);
        let v = &self.nodes[ix].value;
        let split = AxisSplit::new("layer_norm", v.shape(), axis)?;
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        for (p, name) in [(g, "gain"), (b, "bias")] {
            if p.numel() != split.len {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: v.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                    detail: format!("{name} must match the normalized axis extent {}", split.len),
                });
            }
        }
        let data = v.data();
        let (gd, bd) = (g.data(), b.data());
        let mut out = vec![T::zero(); data.len()];
        let mut xhat = vec![T::zero(); data.len()];
        let mut rstd = Vec::with_capacity(split.outer * split.inner);
        let inv_len = T::lit(1.0 / split.len as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        split.for_each_lane(|base, stride| {
            let at = |j: usize| base + j * stride;
            let mean = (0..split.len).map(|j| data[at(j)]).sum::<T>() * inv_len;
            let var = (0..split.len)
                .map(|j| {
                    let d = data[at(j)] - mean;
                    d * d
                })
                .sum::<T>()
                * inv_len;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..split.len {
                let h = (data[at(j)] - mean) * r;
                xhat[at(j)] = h;
                out[at(j)] = h * gd[j] + bd[j];
            }
        });
        let shape = v.shape().to_vec();
        let rg = self.needs_grad(&[ix, ig, ib]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                split,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let split = AxisSplit::new("mean_pool", v.shape(), axis)?;
        let x = v.data();
        let inv = T::lit(1.0 / split.len as f64);
        let mut out = vec![T::zero(); split.outer * split.inner];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let base = split.offset(o, i);
                let s: T = (0..split.len).map(|j| x[base + j * split.inner]).sum();
                out[o * split.inner + i] = s * inv;
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MeanAxis { x: ia, split },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let s = self.nodes[ia].value.sum();
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let s = v.sum() / T::lit(v.numel() as f64);
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(ia), rg))
    }

    /// Selects rows (first-axis slices) of `x` in the order of `indices`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() == 0 {
            return Err(TensorError::Axis {
                op: "gather_rows",
                axis: 0,
                rank: 0,
            });
        }
        let rows = v.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                extent: rows,
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Invalid("gather_rows: empty index list".into()));
        }
        let width = v.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.needs_grad(&[ix]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x: ix,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Adds row `r` of `x` into row `indices[r]` of a zero tensor with
    /// `rows` rows. Duplicate targets accumulate. Adjoint of [`Tape::gather_rows`].
    pub fn scatter_add_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() == 0 || v.shape()[0] != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![indices.len()],
                detail: "one index per source row".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "scatter_add_rows",
                index: bad,
                extent: rows,
            });
        }
        let width = v.numel() / indices.len();
        let mut out = vec![T::zero(); rows * width];
        for (r, &i) in indices.iter().enumerate() {
            let src = &v.data()[r * width..(r + 1) * width];
            for (o, &s) in out[i * width..(i + 1) * width].iter_mut().zip(src) {
                *o += s;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows;
        let rg = self.needs_grad(&[ix]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ScatterAddRows {
                x: ix,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Picks individual elements by flat (row-major) index into a `[len]` vector.
    pub fn gather_elements(&mut self, x: Var, flat_indices: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        if let Some(&bad) = flat_indices.iter().find(|&&i| i >= v.numel()) {
            return Err(TensorError::Index {
                op: "gather_elements",
                index: bad,
                extent: v.numel(),
            });
        }
        if flat_indices.is_empty() {
            return Err(TensorError::Invalid("gather_elements: empty index list".into()));
        }
        let out: Vec<T> = flat_indices.iter().map(|&i| v.data()[i]).collect();
        let rg = self.needs_grad(&[ix]);
        Ok(self.push(
            Tensor::from_parts(vec![out.len()], out),
            Op::GatherElements {
                x: ix,
                indices: flat_indices.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies row `i` of `x` by `w[i]`.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.index(x)?, self.index(w)?);
        let (vx, vw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        if vx.rank() == 0 || vw.numel() != vx.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "row_scale",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
                detail: "one weight per row".into(),
            });
        }
        let width = vx.numel() / vw.numel();
        let mut out = vx.data().to_vec();
        for (row, &s) in out.chunks_exact_mut(width).zip(vw.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let shape = vx.shape().to_vec();
        let rg = self.needs_grad(&[ix, iw]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::RowScale { x: ix, w: iw },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let value = self.nodes[ix].value.reshape(shape)?;
        let rg = self.needs_grad(&[ix]);
        Ok(self.push(value, Op::Reshape(ix), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let mut seen = vec![false; v.rank()];
        let valid = perm.len() == v.rank()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                v.rank()
            )));
        }
        let (shape, data) = permute_data(v.data(), v.shape(), perm);
        let rg = self.needs_grad(&[ix]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: ix,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x)?.len();
        if rank < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Scales each last-axis lane to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let rank = v.rank();
        if rank == 0 {
            return Err(TensorError::Axis {
                op: "l2_normalize",
                axis: 0,
                rank,
            });
        }
        let width = v.shape()[rank - 1];
        let eps = T::lit(L2_NORM_EPS);
        let mut norms = Vec::with_capacity(v.numel() / width);
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(width) {
            let n = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            norms.push(n);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let shape = v.shape().to_vec();
        let rg = self.needs_grad(&[ix]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize { x: ix, norms },
            rg,
        ))
    }

    /// Gradient contributions of node `id` to its inputs, given its output
    /// gradient `g`.
    pub(crate) fn backward_node(&self, id: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Add(a, b) => {
                let (na, nb) = (val(a).len(), val(b).len());
                vec![(a, reduce_broadcast(g, na)), (b, reduce_broadcast(g, nb))]
            }
            &Op::Sub(a, b) => {
                let (na, nb) = (val(a).len(), val(b).len());
                let gb = reduce_broadcast(g, nb).into_iter().map(|x| -x).collect();
                vec![(a, reduce_broadcast(g, na)), (b, gb)]
            }
            &Op::Mul(a, b) => {
                let (xa, xb) = (val(a), val(b));
                let (na, nb) = (xa.len(), xb.len());
                let ga: Vec<T> = (0..g.len()).map(|i| g[i] * xb[i % nb]).collect();
                let gb: Vec<T> = (0..g.len()).map(|i| g[i] * xa[i % na]).collect();
                vec![(a, reduce_broadcast(&ga, na)), (b, reduce_broadcast(&gb, nb))]
            }
            &Op::Div(a, b) => {
                let (xa, xb) = (val(a), val(b));
                let (na, nb) = (xa.len(), xb.len());
                let ga: Vec<T> = (0..g.len()).map(|i| g[i] / xb[i % nb]).collect();
                let gb: Vec<T> = (0..g.len())
                    .map(|i| {
                        let d = xb[i % nb];
                        -g[i] * xa[i % na] / (d * d)
                    })
                    .collect();
                vec![(a, reduce_broadcast(&ga, na)), (b, reduce_broadcast(&gb, nb))]
            }
            &Op::Scale(a, c) => vec![(a, g.iter().map(|&x| x * c).collect())],
            &Op::Exp(a) => vec![(a, g.iter().zip(out).map(|(&g, &y)| g * y).collect())],
            &Op::Log(a) => vec![(a, g.iter().zip(val(a)).map(|(&g, &x)| g / x).collect())],
            &Op::Softplus(a) => vec![(
                a,
                g.iter().zip(val(a)).map(|(&g, &x)| g * sigmoid(x)).collect(),
            )],
            &Op::Gelu(a) => vec![(
                a,
                g.iter().zip(val(a)).map(|(&g, &x)| g * gelu_grad(x)).collect(),
            )],
            &Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (xa, xb) = (val(a), val(b));
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                let need_a = self.nodes[a].requires_grad;
                let need_b = self.nodes[b].requires_grad;
                if shared_b {
                    let rows = batch * m;
                    if need_a {
                        ga = vec![T::zero(); rows * k];
                        // dA = dC * B^T
                        T::gemm(rows, n, k, g, (n as isize, 1), xb, (1, n as isize), &mut ga, (k as isize, 1), false);
                    }
                    if need_b {
                        gb = vec![T::zero(); k * n];
                        // dB = A^T * dC
                        T::gemm(k, rows, n, xa, (1, k as isize), g, (n as isize, 1), &mut gb, (n as isize, 1), false);
                    }
                } else {
                    if need_a {
                        ga = vec![T::zero(); batch * m * k];
                    }
                    if need_b {
                        gb = vec![T::zero(); batch * k * n];
                    }
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        if need_a {
                            let bb = &xb[bi * k * n..(bi + 1) * k * n];
                            T::gemm(m, n, k, gc, (n as isize, 1), bb, (1, n as isize), &mut ga[bi * m * k..(bi + 1) * m * k], (k as isize, 1), false);
                        }
                        if need_b {
                            let aa = &xa[bi * m * k..(bi + 1) * m * k];
                            T::gemm(k, m, n, aa, (1, k as isize), gc, (n as isize, 1), &mut gb[bi * k * n..(bi + 1) * k * n], (n as isize, 1), false);
                        }
                    }
                }
                let mut res = Vec::new();
                if need_a {
                    res.push((a, ga));
                }
                if need_b {
                    res.push((b, gb));
                }
                res
            }
            &Op::Softmax { x, split } => {
                let mut gx = vec![T::zero(); g.len()];
                split.for_each_lane(|base, stride| {
                    let dot: T = (0..split.len)
                        .map(|j| g[base + j * stride] * out[base + j * stride])
                        .sum();
                    for j in 0..split.len {
                        let p = base + j * stride;
                        gx[p] = out[p] * (g[p] - dot);
                    }
                });
                vec![(x, gx)]
            }
            &Op::LogSoftmax { x, split } => {
                let mut gx = vec![T::zero(); g.len()];
                split.for_each_lane(|base, stride| {
                    let total: T = (0..split.len).map(|j| g[base + j * stride]).sum();
                    for j in 0..split.len {
                        let p = base + j * stride;
                        gx[p] = g[p] - out[p].exp() * total;
                    }
                });
                vec![(x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                split,
                xhat,
                rstd,
            } => {
                let gd = val(*gain);
                let mut gx = vec![T::zero(); g.len()];
                let mut ggain = vec![T::zero(); split.len];
                let mut gbias = vec![T::zero(); split.len];
                let inv_len = T::lit(1.0 / split.len as f64);
                let mut lane = 0;
                split.for_each_lane(|base, stride| {
                    let at = |j: usize| base + j * stride;
                    let r = rstd[lane];
                    lane += 1;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..split.len {
                        let p = at(j);
                        let d = g[p] * gd[j];
                        mean_d += d;
                        mean_dx += d * xhat[p];
                        ggain[j] += g[p] * xhat[p];
                        gbias[j] += g[p];
                    }
                    mean_d *= inv_len;
                    mean_dx *= inv_len;
                    for j in 0..split.len {
                        let p = at(j);
                        gx[p] = r * (g[p] * gd[j] - mean_d - xhat[p] * mean_dx);
                    }
                });
                vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
            }
            &Op::MeanAxis { x, split } => {
                let inv = T::lit(1.0 / split.len as f64);
                let mut gx = vec![T::zero(); split.outer * split.len * split.inner];
                for o in 0..split.outer {
                    for i in 0..split.inner {
                        let gi = g[o * split.inner + i] * inv;
                        let base = split.offset(o, i);
                        for j in 0..split.len {
                            gx[base + j * split.inner] = gi;
                        }
                    }
                }
                vec![(x, gx)]
            }
            &Op::SumAll(x) => vec![(x, vec![g[0]; val(x).len()])],
            &Op::MeanAll(x) => {
                let n = val(x).len();
                vec![(x, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::GatherRows { x, indices } => {
                let n = val(*x).len();
                let width = g.len() / indices.len();
                let mut gx = vec![T::zero(); n];
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &s) in gx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                    {
                        *o += s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ScatterAddRows { x, indices } => {
                let width = val(*x).len() / indices.len();
                let mut gx = Vec::with_capacity(val(*x).len());
                for &i in indices {
                    gx.extend_from_slice(&g[i * width..(i + 1) * width]);
                }
                vec![(*x, gx)]
            }
            Op::GatherElements { x, indices } => {
                let mut gx = vec![T::zero(); val(*x).len()];
                for (&i, &gi) in indices.iter().zip(g) {
                    gx[i] += gi;
                }
                vec![(*x, gx)]
            }
            &Op::RowScale { x, w } => {
                let (xv, wv) = (val(x), val(w));
                let width = xv.len() / wv.len();
                let mut gx = g.to_vec();
                let mut gw = vec![T::zero(); wv.len()];
                for (r, &s) in wv.iter().enumerate() {
                    let span = r * width..(r + 1) * width;
                    gx[span.clone()].iter_mut().for_each(|v| *v *= s);
                    gw[r] = g[span.clone()].iter().zip(&xv[span]).map(|(&a, &b)| a * b).sum();
                }
                vec![(x, gx), (w, gw)]
            }
            &Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, gx) = permute_data(g, node.value.shape(), &inverse);
                vec![(*x, gx)]
            }
            Op::L2Normalize { x, norms } => {
                let width = *node.value.shape().last().expect("rank >= 1");
                let mut gx = vec![T::zero(); g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * width..(r + 1) * width;
                    let y = &out[span.clone()];
                    let gr = &g[span.clone()];
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &gg) in gx[span].iter_mut().zip(y).zip(gr) {
                        *o = (gg - yy * dot) / n;
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}
