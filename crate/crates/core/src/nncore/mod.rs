//! Minimal reverse-mode autodiff over a taped graph.
//!
//! Every op the model needs has a forward on [`Tape`] and a hand-written
//! backward. Values are generic over [`Real`] so the same graph runs in `f32`
//! for training and `f64` for finite-difference verification.

mod check;
mod kernels;
mod layers;
mod params;

pub use check::{grad_check, grad_check_sampled, project_to_scalar, GRAD_CHECK_FLOOR};
pub use layers::{
    conv_layer, cross_attention, fpn_merge, linear_layer, resnet_block, Activation, AttentionOutput, ConvParams,
    CrossAttentionParams, FpnParams, LinearParams, ResBlockParams,
};
pub use params::{BoundParams, Init, ParamId, ParamStore};

use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{0} requires at least one reference")]
    EmptyRefs(&'static str),
}

pub type Result<T> = std::result::Result<T, NnError>;

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(NnError::Shape { op, detail })
}

/// Scalar type of a tape. Implemented for `f32` and `f64`.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c` on row-major matrices, with
    /// `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the slices cover every element addressed by the
                // strides above, checked by the assert.
                unsafe {
                    $gemm(
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

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[], vec![v])
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v as f64)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: kernels::ConvGeom,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRows(Var, usize),
    ColAffine {
        x: Var,
        scale: Vec<T>,
    },
    Bilinear {
        fmap: Var,
        coords: Var,
        hwc: Vec<T>,
    },
    GroupDot {
        q: Var,
        k: Var,
        scale: T,
    },
    SoftmaxRows(Var),
    GroupWeightedSum {
        w: Var,
        v: Var,
    },
    BceLogitsMean {
        logits: Var,
        targets: Vec<T>,
    },
    MaskedL2 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        inner: usize,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

/// Single-owner record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            first_nonfinite: None,
        }
    }

    /// Enables or disables the per-op finiteness scan.
    pub fn set_nan_check(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Node index and op name of the first non-finite value produced while
    /// the finiteness scan was on.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Var {
        if self.check_finite && self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true, "param")
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn bind(&mut self, store: &ParamStore<T>) -> BoundParams {
        let base = self.nodes.len();
        for (_, t, _) in store.iter() {
            self.param(t.clone());
        }
        BoundParams::new(base, store.len())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(&self.value(a).shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng, "add"))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let src = self.value(a);
        let t = Tensor::new(&src.shape, src.data.iter().map(|x| *x * s).collect());
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor::new(&src.shape, src.data.iter().map(|x| x.max(T::zero())).collect());
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor::new(&src.shape, src.data.iter().map(|&x| kernels::sigmoid(x)).collect());
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape(a), shape));
        }
        let t = Tensor::new(shape, self.value(a).data.clone());
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng, "reshape"))
    }

    /// `x (N, in) -> x W^T + b`, `W (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("x {xs:?}, w {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return shape_err("linear", format!("bias {:?} for {dout} outputs", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(n, din, dout, &self.value(x).data, false, &self.value(w).data, true, beta, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&[n, dout], out), Op::Linear { x, w, b }, ng, "linear"))
    }

    /// Cross-correlation of `x (Cin, H, W)` with `w (Cout, Cin, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] || stride == 0 {
            return shape_err("conv2d", format!("x {xs:?}, w {ws:?}, stride {stride}"));
        }
        if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[3] {
            return shape_err("conv2d", format!("kernel {:?} larger than padded input {:?}", &ws[2..], &xs[1..]));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err("conv2d", format!("bias {:?} for {cout} channels", self.shape(b)));
            }
        }
        let geom = kernels::ConvGeom::new(xs[0], xs[1], xs[2], ws[2], ws[3], stride, pad);
        let cols = kernels::im2col(&self.value(x).data, &geom);
        let hw = geom.ho * geom.wo;
        let mut out = vec![T::zero(); cout * hw];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_exact_mut(hw).zip(&self.value(b).data) {
                row.fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(cout, geom.ckk(), hw, &self.value(w).data, false, &cols, false, beta, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(&[cout, geom.ho, geom.wo], out);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, ng, "conv2d"))
    }

    /// Nearest-neighbour x2 upsampling of `(C, H, W)`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return shape_err("upsample2x", format!("{s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = &self.value(a).data;
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for r in 0..2 * h {
                for col in 0..2 * w {
                    out[(ch * 2 * h + r) * 2 * w + col] = src[(ch * h + r / 2) * w + col / 2];
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[c, 2 * h, 2 * w], out), Op::Upsample2x(a), ng, "upsample2x"))
    }

    /// Concatenation along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return shape_err("concat_rows", format!("{first:?} vs {s:?}"));
            }
            lead += s[0];
            data.extend_from_slice(&self.value(p).data);
        }
        let mut shape = first;
        shape[0] = lead;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&shape, data), Op::ConcatRows(parts.to_vec()), ng, "concat_rows"))
    }

    /// Concatenation of `(N, d_i)` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return shape_err("concat_cols", format!("expected ({n}, _), got {s:?}"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&[n, total], out), Op::ConcatCols(parts.to_vec()), ng, "concat_cols"))
    }

    /// Repeats each row of `(N, d)` `k` times consecutively: `(N*k, d)`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err("repeat_rows", format!("{s:?}"));
        }
        let d = s[1];
        let src = &self.value(a).data;
        let mut out = Vec::with_capacity(s[0] * k * d);
        for row in src.chunks_exact(d.max(1)).take(s[0]) {
            for _ in 0..k {
                out.extend_from_slice(row);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[s[0] * k, d], out), Op::RepeatRows(a, k), ng, "repeat_rows"))
    }

    /// Per-column affine map `x[:, j] * scale[j] + shift[j]` on `(N, d)`.
    pub fn col_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] != scale.len() || s[1] != shift.len() {
            return shape_err("col_affine", format!("{s:?} with {} columns of coefficients", scale.len()));
        }
        let d = s[1];
        let src = &self.value(x).data;
        let out = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i % d] + shift[i % d])
            .collect();
        let ng = self.ng(x);
        let op = Op::ColAffine {
            x,
            scale: scale.to_vec(),
        };
        Ok(self.push(Tensor::new(&s, out), op, ng, "col_affine"))
    }

    /// Samples `fmap (C, H, W)` at continuous `coords (N, 2)` given as
    /// `(col, row)` with integers on cell centers. Zero outside the map.
    pub fn bilinear(&mut self, fmap: Var, coords: Var) -> Result<Var> {
        let fs = self.shape(fmap).to_vec();
        let cs = self.shape(coords).to_vec();
        if fs.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return shape_err("bilinear", format!("fmap {fs:?}, coords {cs:?}"));
        }
        let hwc = kernels::chw_to_hwc(&self.value(fmap).data, fs[0], fs[1], fs[2]);
        let out = kernels::bilinear_forward(&hwc, fs[0], fs[1], fs[2], &self.value(coords).data);
        let ng = self.ng(fmap) || self.ng(coords);
        let t = Tensor::new(&[cs[0], fs[0]], out);
        Ok(self.push(t, Op::Bilinear { fmap, coords, hwc }, ng, "bilinear"))
    }

    /// `s[n, j] = scale * <q[n], k[n*K + j]>` for `q (N, d)`, `k (N*K, d)`.
    pub fn group_dot(&mut self, q: Var, k: Var, scale: T) -> Result<Var> {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || qs[0] == 0 || ks[0] % qs[0] != 0 {
            return shape_err("group_dot", format!("q {qs:?}, k {ks:?}"));
        }
        let (n, d, kk) = (qs[0], qs[1], ks[0] / qs[0]);
        let (qd, kd) = (&self.value(q).data, &self.value(k).data);
        let mut out = vec![T::zero(); n * kk];
        for i in 0..n {
            let qi = &qd[i * d..(i + 1) * d];
            for j in 0..kk {
                let kj = &kd[(i * kk + j) * d..(i * kk + j + 1) * d];
                out[i * kk + j] = scale * qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<T>();
            }
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(Tensor::new(&[n, kk], out), Op::GroupDot { q, k, scale }, ng, "group_dot"))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return shape_err("softmax_rows", format!("{s:?}"));
        }
        let mut out = self.value(a).data.clone();
        for row in out.chunks_exact_mut(s[1]) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&s, out), Op::SoftmaxRows(a), ng, "softmax_rows"))
    }

    /// `out[n] = sum_j w[n, j] * v[n*K + j]` for `w (N, K)`, `v (N*K, d)`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (ws, vs) = (self.shape(w).to_vec(), self.shape(v).to_vec());
        if ws.len() != 2 || vs.len() != 2 || ws[0] * ws[1] != vs[0] {
            return shape_err("group_weighted_sum", format!("w {ws:?}, v {vs:?}"));
        }
        let (n, kk, d) = (ws[0], ws[1], vs[1]);
        let (wd, vd) = (&self.value(w).data, &self.value(v).data);
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..kk {
                let wij = wd[i * kk + j];
                for (ov, vv) in o.iter_mut().zip(&vd[(i * kk + j) * d..(i * kk + j + 1) * d]) {
                    *ov = *ov + wij * *vv;
                }
            }
        }
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(Tensor::new(&[n, d], out), Op::GroupWeightedSum { w, v }, ng, "group_weighted_sum"))
    }

    /// Mean binary cross entropy of `sigmoid(logits)` against `targets`,
    /// evaluated stably from the logits.
    pub fn bce_logits_mean(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = &self.value(logits).data;
        if z.len() != targets.len() || z.is_empty() {
            return shape_err("bce_logits_mean", format!("{} logits vs {} targets", z.len(), targets.len()));
        }
        let n = T::from_f64(z.len() as f64);
        let total: T = z.iter().zip(targets).map(|(&z, &o)| kernels::bce_with_logits(z, o)).sum();
        let ng = self.ng(logits);
        let op = Op::BceLogitsMean {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / n), op, ng, "bce_logits_mean"))
    }

    /// `(1/norm) * sum_i mask_i * ||pred_i - target_i||_2` over 2-vectors.
    ///
    /// Component `c` of vector `(g, s)` sits at `g*2*inner + c*inner + s`, so
    /// `inner = 1` reads `(N, 2)` rows and `inner = H*W` reads `(T, 2, H, W)`.
    pub fn masked_l2(&mut self, pred: Var, target: &[T], mask: &[T], inner: usize, norm: T) -> Result<Var> {
        let p = &self.value(pred).data;
        if inner == 0 || p.len() != target.len() || p.len() != 2 * mask.len() || !mask.len().is_multiple_of(inner) {
            return shape_err(
                "masked_l2",
                format!("pred {} values, target {}, mask {}, inner {inner}", p.len(), target.len(), mask.len()),
            );
        }
        let mut total = T::zero();
        for (i, &m) in mask.iter().enumerate() {
            if m == T::zero() {
                continue;
            }
            let (a, b) = kernels::pair_index(i, inner);
            total = total + m * (p[a] - target[a]).hypot(p[b] - target[b]);
        }
        let value = if norm > T::zero() { total / norm } else { T::zero() };
        let ng = self.ng(pred);
        let op = Op::MaskedL2 {
            pred,
            target: target.to_vec(),
            mask: mask.to_vec(),
            inner,
            norm,
        };
        Ok(self.push(Tensor::scalar(value), op, ng, "masked_l2"))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward from non-scalar node");
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.backward_node(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        Grads { slots: g }
    }

    fn acc(&self, g: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let slot = g[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(&self, i: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(g, v, |s| s.iter_mut().zip(gout).for_each(|(s, d)| *s = *s + *d));
                }
            }
            Op::Scale(a, k) => self.acc(g, *a, |s| s.iter_mut().zip(gout).for_each(|(s, d)| *s = *s + *d * *k)),
            Op::Relu(a) => {
                let y = &node.value.data;
                self.acc(g, *a, |s| {
                    for ((s, d), y) in s.iter_mut().zip(gout).zip(y) {
                        if *y > T::zero() {
                            *s = *s + *d;
                        }
                    }
                })
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                self.acc(g, *a, |s| {
                    for ((s, d), y) in s.iter_mut().zip(gout).zip(y) {
                        *s = *s + *d * *y * (T::one() - *y);
                    }
                })
            }
            Op::Reshape(a) => self.acc(g, *a, |s| s.iter_mut().zip(gout).for_each(|(s, d)| *s = *s + *d)),
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                let (xd, wd) = (&self.value(*x).data, &self.value(*w).data);
                self.acc(g, *x, |s| T::gemm(n, dout, din, gout, false, wd, false, T::one(), s));
                self.acc(g, *w, |s| T::gemm(dout, n, din, gout, true, xd, false, T::one(), s));
                if let Some(b) = b {
                    self.acc(g, *b, |s| {
                        for row in gout.chunks_exact(dout) {
                            s.iter_mut().zip(row).for_each(|(s, d)| *s = *s + *d);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cout = self.shape(*w)[0];
                let hw = geom.ho * geom.wo;
                self.acc(g, *w, |s| T::gemm(cout, hw, geom.ckk(), gout, false, cols, true, T::one(), s));
                if self.ng(*x) {
                    let mut dcols = vec![T::zero(); geom.ckk() * hw];
                    T::gemm(geom.ckk(), cout, hw, &self.value(*w).data, true, gout, false, T::zero(), &mut dcols);
                    self.acc(g, *x, |s| kernels::col2im_add(&dcols, geom, s));
                }
                if let Some(b) = b {
                    self.acc(g, *b, |s| {
                        for (sv, row) in s.iter_mut().zip(gout.chunks_exact(hw)) {
                            *sv = *sv + row.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Upsample2x(a) => {
                let sh = self.shape(*a);
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                self.acc(g, *a, |s| {
                    for ch in 0..c {
                        for r in 0..2 * h {
                            for col in 0..2 * w {
                                let d = gout[(ch * 2 * h + r) * 2 * w + col];
                                let t = &mut s[(ch * h + r / 2) * w + col / 2];
                                *t = *t + d;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(g, p, |s| s.iter_mut().zip(&gout[off..off + len]).for_each(|(s, d)| *s = *s + *d));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let n = node.value.shape[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc(g, p, |s| {
                        for r in 0..n {
                            for c in 0..w {
                                s[r * w + c] = s[r * w + c] + gout[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::RepeatRows(a, k) => {
                let d = self.shape(*a)[1];
                self.acc(g, *a, |s| {
                    for (r, row) in s.chunks_exact_mut(d.max(1)).enumerate() {
                        for j in 0..*k {
                            let src = &gout[(r * k + j) * d..(r * k + j + 1) * d];
                            row.iter_mut().zip(src).for_each(|(s, d)| *s = *s + *d);
                        }
                    }
                })
            }
            Op::ColAffine { x, scale } => {
                let d = scale.len();
                self.acc(g, *x, |s| {
                    for (i, (s, gv)) in s.iter_mut().zip(gout).enumerate() {
                        *s = *s + *gv * scale[i % d];
                    }
                })
            }
            Op::Bilinear { fmap, coords, hwc } => {
                let fs = self.shape(*fmap);
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                let cd = &self.value(*coords).data;
                if self.ng(*fmap) {
                    self.acc(g, *fmap, |s| kernels::bilinear_backward_fmap(c, h, w, cd, gout, s));
                }
                if self.ng(*coords) {
                    self.acc(g, *coords, |s| kernels::bilinear_backward_coords(hwc, c, h, w, cd, gout, s));
                }
            }
            Op::GroupDot { q, k, scale } => {
                let d = self.shape(*q)[1];
                let n = self.shape(*q)[0];
                let kk = self.shape(*k)[0] / n;
                let (qd, kd) = (&self.value(*q).data, &self.value(*k).data);
                self.acc(g, *q, |s| {
                    for i in 0..n {
                        for j in 0..kk {
                            let gij = gout[i * kk + j] * *scale;
                            for t in 0..d {
                                s[i * d + t] = s[i * d + t] + gij * kd[(i * kk + j) * d + t];
                            }
                        }
                    }
                });
                self.acc(g, *k, |s| {
                    for i in 0..n {
                        for j in 0..kk {
                            let gij = gout[i * kk + j] * *scale;
                            for t in 0..d {
                                let idx = (i * kk + j) * d + t;
                                s[idx] = s[idx] + gij * qd[i * d + t];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let kk = node.value.shape[1];
                let y = &node.value.data;
                self.acc(g, *a, |s| {
                    for ((srow, yrow), grow) in s.chunks_exact_mut(kk).zip(y.chunks_exact(kk)).zip(gout.chunks_exact(kk)) {
                        let dot: T = yrow.iter().zip(grow).map(|(a, b)| *a * *b).sum();
                        for ((sv, yv), gv) in srow.iter_mut().zip(yrow).zip(grow) {
                            *sv = *sv + *yv * (*gv - dot);
                        }
                    }
                });
            }
            Op::GroupWeightedSum { w, v } => {
                let (n, kk) = (self.shape(*w)[0], self.shape(*w)[1]);
                let d = self.shape(*v)[1];
                let (wd, vd) = (&self.value(*w).data, &self.value(*v).data);
                self.acc(g, *w, |s| {
                    for i in 0..n {
                        let go = &gout[i * d..(i + 1) * d];
                        for j in 0..kk {
                            let vj = &vd[(i * kk + j) * d..(i * kk + j + 1) * d];
                            s[i * kk + j] = s[i * kk + j] + go.iter().zip(vj).map(|(a, b)| *a * *b).sum::<T>();
                        }
                    }
                });
                self.acc(g, *v, |s| {
                    for i in 0..n {
                        let go = &gout[i * d..(i + 1) * d];
                        for j in 0..kk {
                            let wij = wd[i * kk + j];
                            let sj = &mut s[(i * kk + j) * d..(i * kk + j + 1) * d];
                            sj.iter_mut().zip(go).for_each(|(s, g)| *s = *s + wij * *g);
                        }
                    }
                });
            }
            Op::BceLogitsMean { logits, targets } => {
                let z = &self.value(*logits).data;
                let scale = gout[0] / T::from_f64(z.len() as f64);
                self.acc(g, *logits, |s| {
                    for ((s, &z), &o) in s.iter_mut().zip(z).zip(targets) {
                        *s = *s + scale * (kernels::sigmoid(z) - o);
                    }
                });
            }
            Op::MaskedL2 {
                pred,
                target,
                mask,
                inner,
                norm,
            } => {
                if *norm <= T::zero() {
                    return;
                }
                let p = &self.value(*pred).data;
                let scale = gout[0] / *norm;
                self.acc(g, *pred, |s| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m == T::zero() {
                            continue;
                        }
                        let (a, b) = kernels::pair_index(i, *inner);
                        let (ex, ey) = (p[a] - target[a], p[b] - target[b]);
                        let len = ex.hypot(ey);
                        if len > T::zero() {
                            s[a] = s[a] + scale * m * ex / len;
                            s[b] = s[b] + scale * m * ey / len;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
