//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Every value in the models is a row-major `[rows, cols]` buffer; scalars
//! are `[1, 1]`. Tensors are immutable once created. Ops that can produce a
//! gradient record a backward closure and keep handles to their parents, so
//! calling [`Tensor::backward`] on a scalar loss walks the graph once and
//! returns per-leaf gradients.
//!
//! Reductions that contract over a *set* axis (attention mixing, masked
//! pooling, softmax denominators) sum their addends in value-sorted order.
//! Summation order is then a function of the multiset of addends rather than
//! of row order, which makes encoder/decoder outputs bit-identical under
//! input permutations.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

type BackFn<R> = Box<dyn Fn(&Node<R>, &[R]) -> Vec<Vec<R>> + Send + Sync>;

struct Node<R: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
    parents: Vec<Tensor<R>>,
    backward: Option<BackFn<R>>,
    requires_grad: bool,
}

/// Handle to an immutable tensor value (and, transitively, the graph that
/// produced it).
#[derive(Clone)]
pub struct Tensor<R: Scalar> {
    inner: Arc<Node<R>>,
}

impl<R: Scalar> std::fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows(), self.cols())
    }
}

fn ensure_finite<R: Scalar>(op: &'static str, data: &[R]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Sum in value-sorted order: permutation-invariant for a fixed multiset.
fn canonical_sum<R: Scalar>(buf: &mut Vec<R>) -> R {
    buf.sort_unstable_by(|a, b| a.total_cmp(b));
    let mut acc = R::ZERO;
    for v in buf.iter() {
        acc += *v;
    }
    acc
}

fn mm_nn<R: Scalar>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &aik) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a [m,k] x b^T` where `b` is stored `[n,k]`.
fn mm_nt<R: Scalar>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = R::ZERO;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// `a^T x b` where `a` is stored `[r,p]` and `b` `[r,q]`; result `[p,q]`.
fn mm_tn<R: Scalar>(a: &[R], b: &[R], r: usize, p: usize, q: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; p * q];
    for t in 0..r {
        let arow = &a[t * p..(t + 1) * p];
        let brow = &b[t * q..(t + 1) * q];
        for (i, &ati) in arow.iter().enumerate() {
            let orow = &mut out[i * q..(i + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += ati * bv;
            }
        }
    }
    out
}

impl<R: Scalar> Tensor<R> {
    fn new_node(
        rows: usize,
        cols: usize,
        data: Vec<R>,
        parents: Vec<Tensor<R>>,
        backward: Option<BackFn<R>>,
    ) -> Self {
        let requires_grad = backward.is_some();
        // History is only needed when a gradient will flow through this node.
        let parents = if requires_grad { parents } else { Vec::new() };
        Tensor {
            inner: Arc::new(Node {
                rows,
                cols,
                data,
                parents,
                backward,
                requires_grad,
            }),
        }
    }

    fn leaf(rows: usize, cols: usize, data: Vec<R>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(Node {
                rows,
                cols,
                data,
                parents: Vec::new(),
                backward: None,
                requires_grad,
            }),
        }
    }

    /// Constant leaf (no gradient tracked).
    pub fn constant(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "constant",
                detail: format!("{}x{} vs buffer of {}", rows, cols, data.len()),
            });
        }
        ensure_finite("constant", &data)?;
        Ok(Self::leaf(rows, cols, data, false))
    }

    /// Trainable leaf.
    pub fn param(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "param",
                detail: format!("{}x{} vs buffer of {}", rows, cols, data.len()),
            });
        }
        ensure_finite("param", &data)?;
        Ok(Self::leaf(rows, cols, data, true))
    }

    pub fn scalar(v: R) -> Self {
        Self::leaf(1, 1, vec![v], false)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::leaf(rows, cols, vec![R::ZERO; rows * cols], false)
    }

    pub fn from_f64s(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::constant(rows, cols, data.iter().map(|&v| R::from_f64(v)).collect())
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }
    pub fn cols(&self) -> usize {
        self.inner.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }
    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }
    pub fn data(&self) -> &[R] {
        &self.inner.data
    }
    pub fn row(&self, r: usize) -> &[R] {
        let c = self.inner.cols;
        &self.inner.data[r * c..(r + 1) * c]
    }
    pub fn at(&self, r: usize, c: usize) -> R {
        self.inner.data[r * self.inner.cols + c]
    }
    pub fn item(&self) -> R {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }
    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.to_f64()).collect()
    }
    fn ptr(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }
    /// Same underlying buffer (identity, not value equality).
    pub fn same_node(&self, other: &Tensor<R>) -> bool {
        self.ptr() == other.ptr()
    }

    /// Copy of the value with no graph history.
    pub fn detach(&self) -> Tensor<R> {
        Self::leaf(self.rows(), self.cols(), self.inner.data.clone(), false)
    }

    fn same_shape(&self, other: &Tensor<R>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        Ok(())
    }

    fn unary(
        &self,
        op: &'static str,
        data: Vec<R>,
        back: Option<BackFn<R>>,
    ) -> Result<Tensor<R>> {
        ensure_finite(op, &data)?;
        let backward = if self.requires_grad() { back } else { None };
        Ok(Tensor::new_node(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone()],
            backward,
        ))
    }

    pub fn add(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        self.same_shape(other, "add")?;
        let data: Vec<R> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        ensure_finite("add", &data)?;
        let backward: Option<BackFn<R>> = if self.requires_grad() || other.requires_grad() {
            Some(Box::new(|_n: &Node<R>, g: &[R]| {
                vec![g.to_vec(), g.to_vec()]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    pub fn sub(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        self.same_shape(other, "sub")?;
        let data: Vec<R> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        ensure_finite("sub", &data)?;
        let backward: Option<BackFn<R>> = if self.requires_grad() || other.requires_grad() {
            Some(Box::new(|_n: &Node<R>, g: &[R]| {
                vec![g.to_vec(), g.iter().map(|&v| -v).collect()]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    pub fn mul(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        self.same_shape(other, "mul")?;
        let data: Vec<R> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        ensure_finite("mul", &data)?;
        let backward: Option<BackFn<R>> = if self.requires_grad() || other.requires_grad() {
            Some(Box::new(|n: &Node<R>, g: &[R]| {
                let a = n.parents[0].data();
                let b = n.parents[1].data();
                vec![
                    g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect(),
                    g.iter().zip(a).map(|(&gv, &av)| gv * av).collect(),
                ]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<R>> {
        let cv = R::from_f64(c);
        let data = self.data().iter().map(|&a| a + cv).collect();
        self.unary(
            "add_scalar",
            data,
            Some(Box::new(|_n, g| vec![g.to_vec()])),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor<R>> {
        let cv = R::from_f64(c);
        let data = self.data().iter().map(|&a| a * cv).collect();
        self.unary(
            "mul_scalar",
            data,
            Some(Box::new(move |_n, g| {
                vec![g.iter().map(|&v| v * cv).collect()]
            })),
        )
    }

    /// Elementwise x * Phi(x) with the exact-erf normal CDF.
    pub fn gelu(&self) -> Result<Tensor<R>> {
        let half = R::from_f64(0.5);
        let inv_sqrt2 = R::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data: Vec<R> = self
            .data()
            .iter()
            .map(|&x| x * (half * (R::ONE + (x * inv_sqrt2).erf())))
            .collect();
        self.unary(
            "gelu",
            data,
            Some(Box::new(move |n: &Node<R>, g: &[R]| {
                let inv_sqrt_2pi = R::from_f64(0.3989422804014327);
                let x = n.parents[0].data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        let cdf = half * (R::ONE + (xv * inv_sqrt2).erf());
                        let pdf = (-(half * xv * xv)).exp() * inv_sqrt_2pi;
                        gv * (cdf + xv * pdf)
                    })
                    .collect();
                vec![dx]
            })),
        )
    }

    pub fn exp(&self) -> Result<Tensor<R>> {
        let data: Vec<R> = self.data().iter().map(|&x| x.exp()).collect();
        self.unary(
            "exp",
            data,
            Some(Box::new(|n: &Node<R>, g: &[R]| {
                vec![n.data.iter().zip(g).map(|(&y, &gv)| y * gv).collect()]
            })),
        )
    }

    pub fn matmul(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        self.matmul_impl(other, false)
    }

    /// Matmul whose contraction sums addends in value-sorted order. Used
    /// where the contracted axis is a set axis (attention value mixing), so
    /// the result is invariant to permutations of that axis.
    pub fn matmul_canonical(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor<R>, canonical: bool) -> Result<Tensor<R>> {
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(), other.shape()),
            });
        }
        let data = if canonical {
            let a = self.data();
            let b = other.data();
            let mut out = vec![R::ZERO; m * n];
            let mut scratch: Vec<R> = Vec::with_capacity(k);
            for i in 0..m {
                for j in 0..n {
                    scratch.clear();
                    for t in 0..k {
                        scratch.push(a[i * k + t] * b[t * n + j]);
                    }
                    out[i * n + j] = canonical_sum(&mut scratch);
                }
            }
            out
        } else {
            mm_nn(self.data(), other.data(), m, k, n)
        };
        ensure_finite("matmul", &data)?;
        let backward: Option<BackFn<R>> = if self.requires_grad() || other.requires_grad() {
            Some(Box::new(move |node: &Node<R>, g: &[R]| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                let da = mm_nt(g, b, m, n, k);
                let db = mm_tn(a, g, m, k, n);
                vec![da, db]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            m,
            n,
            data,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<R>> {
        let (m, n) = self.shape();
        let a = self.data();
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a[i * n + j];
            }
        }
        let backward: Option<BackFn<R>> = if self.requires_grad() {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                let mut dg = vec![R::ZERO; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dg[i * n + j] = g[j * m + i];
                    }
                }
                vec![dg]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(n, m, data, vec![self.clone()], backward))
    }

    pub fn sum_all(&self) -> Result<Tensor<R>> {
        let mut acc = R::ZERO;
        for &v in self.data() {
            acc += v;
        }
        ensure_finite("sum_all", &[acc])?;
        let (m, n) = self.shape();
        let backward: Option<BackFn<R>> = if self.requires_grad() {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                vec![vec![g[0]; m * n]]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(1, 1, vec![acc], vec![self.clone()], backward))
    }

    pub fn mean_all(&self) -> Result<Tensor<R>> {
        let n = self.numel();
        self.sum_all()?.mul_scalar(1.0 / n as f64)
    }

    /// Row-broadcast add: `self [m,n] + bias [1,n]`.
    pub fn add_row(&self, bias: &Tensor<R>) -> Result<Tensor<R>> {
        let (m, n) = self.shape();
        if bias.shape() != (1, n) {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("{:?} + {:?}", self.shape(), bias.shape()),
            });
        }
        let b = bias.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(self.data()[i * n + j] + b[j]);
            }
        }
        ensure_finite("add_row", &data)?;
        let backward: Option<BackFn<R>> = if self.requires_grad() || bias.requires_grad() {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                let mut db = vec![R::ZERO; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                vec![g.to_vec(), db]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            m,
            n,
            data,
            vec![self.clone(), bias.clone()],
            backward,
        ))
    }

    /// Tile a `[1,n]` row `count` times.
    pub fn repeat_row(&self, count: usize) -> Result<Tensor<R>> {
        let (m, n) = self.shape();
        if m != 1 {
            return Err(Error::Shape {
                op: "repeat_row",
                detail: format!("expected single row, got {:?}", self.shape()),
            });
        }
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            data.extend_from_slice(self.data());
        }
        let backward: Option<BackFn<R>> = if self.requires_grad() {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                let mut dg = vec![R::ZERO; n];
                for i in 0..count {
                    for j in 0..n {
                        dg[j] += g[i * n + j];
                    }
                }
                vec![dg]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            count,
            n,
            data,
            vec![self.clone()],
            backward,
        ))
    }

    pub fn concat_rows(parts: &[&Tensor<R>]) -> Result<Tensor<R>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let cols = parts[0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("col mismatch {} vs {}", p.cols(), cols),
                });
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        let any_grad = parts.iter().any(|p| p.requires_grad());
        let backward: Option<BackFn<R>> = if any_grad {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &sz in &sizes {
                    out.push(g[offset * cols..(offset + sz) * cols].to_vec());
                    offset += sz;
                }
                out
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            rows,
            cols,
            data,
            parts.iter().map(|&p| p.clone()).collect(),
            backward,
        ))
    }

    pub fn concat_cols(parts: &[&Tensor<R>]) -> Result<Tensor<R>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        for p in parts {
            if p.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row mismatch {} vs {}", p.rows(), rows),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        let any_grad = parts.iter().any(|p| p.requires_grad());
        let bw_widths = widths.clone();
        let backward: Option<BackFn<R>> = if any_grad {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                let mut out: Vec<Vec<R>> = bw_widths
                    .iter()
                    .map(|w| Vec::with_capacity(rows * w))
                    .collect();
                for r in 0..rows {
                    let mut offset = 0;
                    for (pi, &w) in bw_widths.iter().enumerate() {
                        out[pi].extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        offset += w;
                    }
                }
                out
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            rows,
            total,
            data,
            parts.iter().map(|&p| p.clone()).collect(),
            backward,
        ))
    }

    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor<R>> {
        let (m, n) = self.shape();
        if start + len > m {
            return Err(Error::Shape {
                op: "narrow_rows",
                detail: format!("rows {}..{} of {}", start, start + len, m),
            });
        }
        let data = self.data()[start * n..(start + len) * n].to_vec();
        let backward: Option<BackFn<R>> = if self.requires_grad() {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                let mut dg = vec![R::ZERO; m * n];
                dg[start * n..(start + len) * n].copy_from_slice(g);
                vec![dg]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(len, n, data, vec![self.clone()], backward))
    }

    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<R>> {
        let (m, n) = self.shape();
        if start + len > n {
            return Err(Error::Shape {
                op: "narrow_cols",
                detail: format!("cols {}..{} of {}", start, start + len, n),
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.data()[r * n + start..r * n + start + len]);
        }
        let backward: Option<BackFn<R>> = if self.requires_grad() {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                let mut dg = vec![R::ZERO; m * n];
                for r in 0..m {
                    dg[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![dg]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(m, len, data, vec![self.clone()], backward))
    }

    /// Per-row normalization to zero mean / unit variance (eps 1e-5), then
    /// elementwise affine with `gain` and `bias` rows.
    pub fn layer_norm(&self, gain: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
        let (m, n) = self.shape();
        if n == 0 {
            return Err(Error::InvalidArgument {
                op: "layer_norm",
                detail: "zero-length rows".into(),
            });
        }
        if gain.shape() != (1, n) || bias.shape() != (1, n) {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} for input {:?}",
                    gain.shape(),
                    bias.shape(),
                    self.shape()
                ),
            });
        }
        let eps = R::from_f64(1e-5);
        let inv_n = R::from_f64(1.0 / n as f64);
        let x = self.data();
        let gw = gain.data();
        let bw = bias.data();
        let mut data = vec![R::ZERO; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mut mean = R::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = R::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let inv_std = R::ONE / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                data[r * n + j] = xhat * gw[j] + bw[j];
            }
        }
        ensure_finite("layer_norm", &data)?;
        let any_grad = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let backward: Option<BackFn<R>> = if any_grad {
            Some(Box::new(move |node: &Node<R>, g: &[R]| {
                let x = node.parents[0].data();
                let gw = node.parents[1].data();
                let mut dx = vec![R::ZERO; m * n];
                let mut dgain = vec![R::ZERO; n];
                let mut dbias = vec![R::ZERO; n];
                for r in 0..m {
                    let row = &x[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mut mean = R::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_n;
                    let mut var = R::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_n;
                    let inv_std = R::ONE / (var + eps).sqrt();
                    // dxhat = g * gain; dx = inv_std*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut sum_dxhat = R::ZERO;
                    let mut sum_dxhat_xhat = R::ZERO;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gw[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    let mean_dxhat = sum_dxhat * inv_n;
                    let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gw[j];
                        dx[r * n + j] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                vec![dx, dgain, dbias]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            m,
            n,
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            backward,
        ))
    }

    /// Row-wise softmax over the active columns of `key_mask`; masked columns
    /// get probability zero. The normalizer sums in value-sorted order.
    pub fn softmax_rows(&self, key_mask: &[bool]) -> Result<Tensor<R>> {
        let (m, n) = self.shape();
        if key_mask.len() != n {
            return Err(Error::Shape {
                op: "softmax_rows",
                detail: format!("mask len {} for {} cols", key_mask.len(), n),
            });
        }
        if !key_mask.iter().any(|&b| b) {
            return Err(Error::EmptyMask {
                context: "softmax_rows",
            });
        }
        let x = self.data();
        let mut data = vec![R::ZERO; m * n];
        let mut scratch: Vec<R> = Vec::with_capacity(n);
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mut maxv: Option<R> = None;
            for (j, &v) in row.iter().enumerate() {
                if key_mask[j] && maxv.map_or(true, |m| v > m) {
                    maxv = Some(v);
                }
            }
            let maxv = maxv.unwrap();
            scratch.clear();
            for (j, &v) in row.iter().enumerate() {
                if key_mask[j] {
                    scratch.push((v - maxv).exp());
                }
            }
            let mut exps: Vec<R> = Vec::with_capacity(n);
            for (j, &v) in row.iter().enumerate() {
                exps.push(if key_mask[j] {
                    (v - maxv).exp()
                } else {
                    R::ZERO
                });
            }
            let denom = canonical_sum(&mut scratch);
            let inv = R::ONE / denom;
            for j in 0..n {
                data[r * n + j] = exps[j] * inv;
            }
        }
        ensure_finite("softmax_rows", &data)?;
        let mask = key_mask.to_vec();
        let backward: Option<BackFn<R>> = if self.requires_grad() {
            Some(Box::new(move |node: &Node<R>, g: &[R]| {
                let p = &node.data;
                let mut dx = vec![R::ZERO; m * n];
                for r in 0..m {
                    let prow = &p[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mut dot = R::ZERO;
                    for j in 0..n {
                        if mask[j] {
                            dot += grow[j] * prow[j];
                        }
                    }
                    for j in 0..n {
                        if mask[j] {
                            dx[r * n + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                }
                vec![dx]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(m, n, data, vec![self.clone()], backward))
    }

    /// Column-wise sum over active rows, in value-sorted order per column.
    /// Returns `[1, cols]`.
    pub fn sum_rows_canonical(&self, row_mask: &[bool]) -> Result<Tensor<R>> {
        let (m, n) = self.shape();
        if row_mask.len() != m {
            return Err(Error::Shape {
                op: "sum_rows_canonical",
                detail: format!("mask len {} for {} rows", row_mask.len(), m),
            });
        }
        if !row_mask.iter().any(|&b| b) {
            return Err(Error::EmptyMask {
                context: "sum_rows_canonical",
            });
        }
        let x = self.data();
        let mut data = vec![R::ZERO; n];
        let mut scratch: Vec<R> = Vec::with_capacity(m);
        for j in 0..n {
            scratch.clear();
            for r in 0..m {
                if row_mask[r] {
                    scratch.push(x[r * n + j]);
                }
            }
            data[j] = canonical_sum(&mut scratch);
        }
        ensure_finite("sum_rows_canonical", &data)?;
        let mask = row_mask.to_vec();
        let backward: Option<BackFn<R>> = if self.requires_grad() {
            Some(Box::new(move |_node: &Node<R>, g: &[R]| {
                let mut dx = vec![R::ZERO; m * n];
                for r in 0..m {
                    if mask[r] {
                        dx[r * n..(r + 1) * n].copy_from_slice(g);
                    }
                }
                vec![dx]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(1, n, data, vec![self.clone()], backward))
    }

    /// Masked mean over active rows: `[1, cols]`.
    pub fn mean_rows_canonical(&self, row_mask: &[bool]) -> Result<Tensor<R>> {
        let count = row_mask.iter().filter(|&&b| b).count();
        self.sum_rows_canonical(row_mask)?
            .mul_scalar(1.0 / count as f64)
    }

    /// Pairwise masked squared distances between `self` rows (predictions)
    /// and constant target rows: `C[i][j] = sum_w mask[j][w]*(s[i][w]-t[j][w])^2`.
    /// Gradient flows to `self` only.
    pub fn pairwise_sq_cost(&self, targets: &[R], tmask: &[R], t_rows: usize) -> Result<Tensor<R>> {
        let (s, w) = self.shape();
        if targets.len() != t_rows * w || tmask.len() != t_rows * w {
            return Err(Error::Shape {
                op: "pairwise_sq_cost",
                detail: format!(
                    "targets {} / mask {} vs {} rows x {} cols",
                    targets.len(),
                    tmask.len(),
                    t_rows,
                    w
                ),
            });
        }
        let x = self.data();
        let mut data = vec![R::ZERO; s * t_rows];
        for i in 0..s {
            let srow = &x[i * w..(i + 1) * w];
            for j in 0..t_rows {
                let trow = &targets[j * w..(j + 1) * w];
                let mrow = &tmask[j * w..(j + 1) * w];
                let mut acc = R::ZERO;
                for ((sv, tv), mv) in srow.iter().zip(trow).zip(mrow) {
                    let d = *sv - *tv;
                    acc += *mv * d * d;
                }
                data[i * t_rows + j] = acc;
            }
        }
        ensure_finite("pairwise_sq_cost", &data)?;
        let targets_c = targets.to_vec();
        let tmask_c = tmask.to_vec();
        let backward: Option<BackFn<R>> = if self.requires_grad() {
            Some(Box::new(move |node: &Node<R>, g: &[R]| {
                let x = node.parents[0].data();
                let two = R::from_f64(2.0);
                let mut dx = vec![R::ZERO; s * w];
                for i in 0..s {
                    for j in 0..t_rows {
                        let gv = g[i * t_rows + j];
                        for wi in 0..w {
                            let m = tmask_c[j * w + wi];
                            let d = x[i * w + wi] - targets_c[j * w + wi];
                            dx[i * w + wi] += gv * m * two * d;
                        }
                    }
                }
                vec![dx]
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            s,
            t_rows,
            data,
            vec![self.clone()],
            backward,
        ))
    }

    /// Reverse-mode gradients of this scalar with respect to every
    /// grad-requiring node in its history.
    pub fn backward(&self) -> Result<GradMap<R>> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape()),
            });
        }
        // Iterative postorder DFS; traversal order depends only on graph
        // structure, so gradient accumulation order is reproducible.
        let mut order: Vec<Tensor<R>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<R>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, child)) = stack.pop() {
            let parents = &node.inner.parents;
            if child < parents.len() {
                let next = parents[child].clone();
                stack.push((node, child + 1));
                if next.inner.requires_grad && visited.insert(next.ptr()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        let mut grads: HashMap<usize, Vec<R>> = HashMap::new();
        grads.insert(self.ptr(), vec![R::ONE]);
        for node in order.iter().rev() {
            let Some(g) = grads.get(&node.ptr()).cloned() else {
                continue;
            };
            if let Some(back) = &node.inner.backward {
                let contribs = back(&node.inner, &g);
                debug_assert_eq!(contribs.len(), node.inner.parents.len());
                for (parent, contrib) in node.inner.parents.iter().zip(contribs) {
                    if !parent.inner.requires_grad {
                        continue;
                    }
                    let entry = grads
                        .entry(parent.ptr())
                        .or_insert_with(|| vec![R::ZERO; parent.numel()]);
                    for (e, c) in entry.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
            }
        }
        Ok(GradMap { grads })
    }
}

/// Gradients keyed by node identity; query with the tensor handle.
pub struct GradMap<R: Scalar> {
    grads: HashMap<usize, Vec<R>>,
}

impl<R: Scalar> GradMap<R> {
    pub fn get(&self, t: &Tensor<R>) -> Option<&[R]> {
        self.grads
            .get(&(Arc::as_ptr(&t.inner) as usize))
            .map(|v| v.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff<F>(f: F, data: &[f64], h: f64) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut g = vec![0.0; data.len()];
        for i in 0..data.len() {
            let mut plus = data.to_vec();
            let mut minus = data.to_vec();
            plus[i] += h;
            minus[i] -= h;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / scale < tol,
                "element {}: {} vs {}",
                i,
                x,
                y
            );
        }
    }

    #[test]
    fn gelu_reference_values() {
        let x = Tensor::<f64>::from_f64s(1, 3, &[0.0, 10.0, 1.0]).unwrap();
        let y = x.gelu().unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // x * 0.5 * (1 + erf(x/sqrt(2))) at x=1 with libm as the
        // high-precision oracle.
        let oracle = 0.5 * (1.0 + libm::erf(1.0 / std::f64::consts::SQRT_2));
        assert!((y.data()[2] - oracle).abs() < 1e-9);
    }

    #[test]
    fn gelu_rejects_non_finite_input() {
        assert!(Tensor::<f64>::from_f64s(1, 1, &[f64::NAN]).is_err());
        assert!(Tensor::<f64>::from_f64s(1, 1, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f64>::from_f64s(1, 4, &[3.0, 3.0, 3.0, 3.0]).unwrap();
        let g = Tensor::<f64>::from_f64s(1, 4, &[1.0; 4]).unwrap();
        let b = Tensor::<f64>::zeros(1, 4);
        let y = x.layer_norm(&g, &b).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = Tensor::<f64>::from_f64s(1, 2, &[1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::from_f64s(1, 2, &[1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros(1, 2);
        let y = x.layer_norm(&g, &b).unwrap();
        // variance 1, eps shifts the scale slightly below 1
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
        assert!((y.data()[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let x = Tensor::<f64>::from_f64s(1, 3, &[0.3, -2.0, 5.0]).unwrap();
        let g = Tensor::<f64>::zeros(1, 3);
        let b = Tensor::<f64>::from_f64s(1, 3, &[7.0, 7.0, 7.0]).unwrap();
        let y = x.layer_norm(&g, &b).unwrap();
        for &v in y.data() {
            assert_eq!(v, 7.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences_composite() {
        // f(x) = sum(gelu(x @ w) * x_sub) style composite over several ops
        let xd = [0.3, -0.7, 1.2, 0.05, -1.4, 0.9];
        let wd = [0.5, -0.2, 0.8, 0.1, -0.6, 0.4];
        let eval = |xv: &[f64]| -> f64 {
            let x = Tensor::<f64>::param(2, 3, xv.to_vec()).unwrap();
            let w = Tensor::<f64>::from_f64s(3, 2, &wd).unwrap();
            let h = x.matmul(&w).unwrap().gelu().unwrap();
            let s = h.mul(&h).unwrap().sum_all().unwrap();
            s.item()
        };
        let x = Tensor::<f64>::param(2, 3, xd.to_vec()).unwrap();
        let w = Tensor::<f64>::from_f64s(3, 2, &wd).unwrap();
        let h = x.matmul(&w).unwrap().gelu().unwrap();
        let loss = h.mul(&h).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let analytic = grads.get(&x).unwrap().to_vec();
        let numeric = finite_diff(eval, &xd, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn backward_layer_norm_and_softmax() {
        let xd = [0.2, -0.1, 0.7, 1.5, -0.4, 0.3, 0.9, -1.2];
        let mask = vec![true, true, true, false];
        let eval = |xv: &[f64]| -> f64 {
            let x = Tensor::<f64>::param(2, 4, xv.to_vec()).unwrap();
            let g = Tensor::<f64>::from_f64s(1, 4, &[1.1, 0.9, 1.0, 1.2]).unwrap();
            let b = Tensor::<f64>::from_f64s(1, 4, &[0.1, -0.1, 0.0, 0.2]).unwrap();
            let ln = x.layer_norm(&g, &b).unwrap();
            let sm = ln.softmax_rows(&[true, true, true, false]).unwrap();
            sm.mul(&sm).unwrap().sum_all().unwrap().item()
        };
        let x = Tensor::<f64>::param(2, 4, xd.to_vec()).unwrap();
        let g = Tensor::<f64>::from_f64s(1, 4, &[1.1, 0.9, 1.0, 1.2]).unwrap();
        let b = Tensor::<f64>::from_f64s(1, 4, &[0.1, -0.1, 0.0, 0.2]).unwrap();
        let ln = x.layer_norm(&g, &b).unwrap();
        let sm = ln.softmax_rows(&mask).unwrap();
        let loss = sm.mul(&sm).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let analytic = grads.get(&x).unwrap().to_vec();
        let numeric = finite_diff(eval, &xd, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn backward_concat_narrow_repeat() {
        let xd = [0.5, -0.3, 0.8, 0.2];
        let eval = |xv: &[f64]| -> f64 {
            let x = Tensor::<f64>::param(1, 4, xv.to_vec()).unwrap();
            let rep = x.repeat_row(3).unwrap();
            let left = rep.narrow_cols(0, 2).unwrap();
            let right = rep.narrow_cols(2, 2).unwrap();
            let cat = Tensor::concat_cols(&[&right, &left]).unwrap();
            let top = cat.narrow_rows(0, 2).unwrap();
            top.mul(&top).unwrap().sum_all().unwrap().item()
        };
        let x = Tensor::<f64>::param(1, 4, xd.to_vec()).unwrap();
        let rep = x.repeat_row(3).unwrap();
        let left = rep.narrow_cols(0, 2).unwrap();
        let right = rep.narrow_cols(2, 2).unwrap();
        let cat = Tensor::concat_cols(&[&right, &left]).unwrap();
        let top = cat.narrow_rows(0, 2).unwrap();
        let loss = top.mul(&top).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_close(&grads.get(&x).unwrap().to_vec(), &finite_diff(eval, &xd, 1e-6), 1e-6);
    }

    #[test]
    fn backward_pairwise_cost() {
        let xd = [0.1, 0.9, -0.5, 0.4, 0.25, -0.75];
        let targets = [0.0f64, 1.0, 0.0, 1.0, 0.0, 0.5];
        let tmask = [1.0f64, 1.0, 0.0, 1.0, 1.0, 1.0];
        let eval = |xv: &[f64]| -> f64 {
            let x = Tensor::<f64>::param(2, 3, xv.to_vec()).unwrap();
            let c = x.pairwise_sq_cost(&targets, &tmask, 2).unwrap();
            c.sum_all().unwrap().item()
        };
        let x = Tensor::<f64>::param(2, 3, xd.to_vec()).unwrap();
        let c = x.pairwise_sq_cost(&targets, &tmask, 2).unwrap();
        let loss = c.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_close(&grads.get(&x).unwrap().to_vec(), &finite_diff(eval, &xd, 1e-6), 1e-6);
    }

    #[test]
    fn repeated_parent_accumulates() {
        // f(x) = sum(x*x), grad = 2x
        let x = Tensor::<f64>::param(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn deterministic_forward_bitwise() {
        let make = || {
            let x = Tensor::<f32>::from_f64s(3, 4, &[0.1; 12]).unwrap();
            let w = Tensor::<f32>::from_f64s(4, 4, &[0.37; 16]).unwrap();
            x.matmul(&w).unwrap().gelu().unwrap().data().to_vec()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn canonical_matmul_row_permutation_invariant_sum() {
        // contract over the set axis: out = probs[1,k] x values[k,d] must be
        // bit-identical when rows of (probs, values) are co-permuted.
        let probs = [0.31f64, 0.17, 0.52];
        let vals = [0.97f64, -0.33, 0.11, 0.71, -0.913, 0.5];
        let run = |perm: &[usize]| {
            let p: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let mut v = Vec::new();
            for &i in perm {
                v.extend_from_slice(&vals[i * 2..i * 2 + 2]);
            }
            let pt = Tensor::<f64>::from_f64s(1, 3, &p).unwrap();
            let vt = Tensor::<f64>::from_f64s(3, 2, &v).unwrap();
            pt.matmul_canonical(&vt).unwrap().data().to_vec()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        let c = run(&[1, 2, 0]);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn softmax_rejects_all_masked() {
        let x = Tensor::<f64>::from_f64s(1, 3, &[0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            x.softmax_rows(&[false, false, false]),
            Err(Error::EmptyMask { .. })
        ));
    }
}
