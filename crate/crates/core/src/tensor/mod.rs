//! Dense, contiguous, row-major `f64` tensors and the raw kernels the
//! autograd tape is built from. Nothing in here tracks gradients.

mod conv;

pub use conv::{conv2d, conv2d_backward, upsample_nearest2x, upsample_nearest2x_backward, ConvGeom};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading a tensor of `shape` as if it had `out` shape (0 on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every index of `out_shape` in row-major order, handing the caller
/// the flat output offset and the matching offsets into two strided inputs.
fn walk2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out_shape);
    if n == 0 {
        return;
    }
    if out_shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // odometer over the outer axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base_a -= sa[d] * out_shape[d];
            base_b -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel(shape)).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        if lo == hi {
            return Tensor::full(shape, lo);
        }
        let dist = Uniform::new(lo, hi).expect("valid range");
        let data = (0..numel(shape)).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Tensor { shape: self.shape.clone(), data };
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape, other.shape)
        });
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = vec![0.0; numel(&out_shape)];
        walk2(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(self.data[ia], other.data[ib]));
        Tensor { shape: out_shape, data }
    }

    pub fn add(&self, o: &Tensor) -> Tensor {
        self.zip_with(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Tensor) -> Tensor {
        self.zip_with(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &Tensor) -> Tensor {
        self.zip_with(o, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, o: &Tensor) {
        assert_eq!(self.shape, o.shape);
        self.data.iter_mut().zip(&o.data).for_each(|(a, &b)| *a += b);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sums over broadcast axes so the result has `target` shape. `target`
    /// must broadcast to `self.shape()`.
    pub fn sum_to_shape(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let ts = broadcast_strides(target, &self.shape);
        let own = strides(&self.shape);
        let mut out = vec![0.0; numel(target)];
        walk2(&self.shape, &own, &ts, |_, i, t| out[t] += self.data[i]);
        Tensor { shape: target.to_vec(), data: out }
    }

    /// Materializes a broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let s = broadcast_strides(&self.shape, shape);
        let mut data = vec![0.0; numel(shape)];
        walk2(shape, &s, &s, |o, i, _| data[o] = self.data[i]);
        Tensor { shape: shape.to_vec(), data }
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut target = self.shape.clone();
        for &a in axes {
            target[a] = 1;
        }
        self.sum_to_shape(&target)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.rank());
        let own = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let mut data = vec![0.0; self.data.len()];
        walk2(&out_shape, &src, &src, |o, i, _| data[o] = self.data[i]);
        Tensor { shape: out_shape, data }
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape[axis]);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor { shape, data }
    }

    pub fn cat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        for p in parts {
            assert_eq!(p.rank(), first.len());
            for (d, (&a, &b)) in p.shape.iter().zip(first).enumerate() {
                assert!(d == axis || a == b, "cat: incompatible shapes");
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor { shape, data }
    }

    /// `(m,k) x (k,n)` with optional transposes of either operand.
    pub fn matmul_t(&self, trans_a: bool, other: &Tensor, trans_b: bool) -> Tensor {
        assert_eq!(self.rank(), 2);
        assert_eq!(other.rank(), 2);
        let (m, k, rsa, csa) = if trans_a {
            (self.shape[1], self.shape[0], 1, self.shape[1])
        } else {
            (self.shape[0], self.shape[1], self.shape[1], 1)
        };
        let (k2, n, rsb, csb) = if trans_b {
            (other.shape[1], other.shape[0], 1, other.shape[1])
        } else {
            (other.shape[0], other.shape[1], other.shape[1], 1)
        };
        assert_eq!(k, k2, "matmul inner dims differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, rsa, csa, &other.data, rsb, csb, &mut out, n, 0.0);
        Tensor { shape: vec![m, n], data: out }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(false, other, false)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let mut out = self.clone();
        let (outer, n, inner) = split3(&self.shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| self.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (self.data[at(j)] - mx).exp();
                    out.data[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out.data[at(j)] /= z;
                }
            }
        }
        out
    }

    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let mut out = self.clone();
        let (outer, n, inner) = split3(&self.shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| self.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..n).map(|j| (self.data[at(j)] - mx).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out.data[at(j)] = self.data[at(j)] - lse;
                }
            }
        }
        out
    }
}

/// `(outer, n, inner)` sizes around `axis`.
pub(crate) fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = alpha_one * a·b + beta * c` over strided row/col layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + usize::from(k > 0));
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the debug assertions above (and the callers' shape checks)
    // guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
