//! Small tape-based reverse-mode differentiation engine over `ndarray`.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; parents
//! always precede children, so the reverse sweep in [`Tape::backward`] is a
//! topological traversal. The op set is exactly what the networks here need:
//! dense/conv layers, group normalization, FiLM modulation, multi-head
//! self-attention, pooling/upsampling, elementwise nonlinearities, and two
//! fused losses. Convolution lowers to im2col + GEMM; the column matrix is
//! recomputed in the backward pass instead of stored.
//!
//! Generic over `f32`/`f64`: production runs in single precision, gradient
//! checks run the same code in double precision.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};
use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};

/// Element type for tape computations.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// a·x + b elementwise; only the slope matters for the gradient.
    Affine {
        x: usize,
        a: T,
    },
    Exp(usize),
    /// ln(max(x, min)); gradient is zero where clamped.
    LnClamped {
        x: usize,
        min: T,
    },
    Tanh(usize),
    Sigmoid(usize),
    Silu(usize),
    Square(usize),
    MeanAll(usize),
    /// x (N,D) · w (D,O) + b (O).
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    /// x (N,C,H,W), w (O,C,k,k), b (O); stride 1, zero padding `pad`.
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        pad: usize,
    },
    AvgPool2(usize),
    UpsampleNearest2(usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Array2<T>,
        invstd: Array2<T>,
    },
    /// x (N,C,H,W) modulated per channel: x·(1+scale) + shift, scale/shift (N,C).
    Film {
        x: usize,
        scale: usize,
        shift: usize,
    },
    ConcatC(usize, usize),
    SliceC {
        x: usize,
        start: usize,
        len: usize,
    },
    /// Fused multi-head self-attention over spatial tokens.
    /// qkv (N,3C,H,W) → out (N,C,H,W); `attn` holds one (L,L) matrix per (n, head).
    Attention {
        qkv: usize,
        heads: usize,
        attn: Vec<Array2<T>>,
    },
    GlobalAvgPool(usize),
    /// Row gather: table (R,D) indexed per batch element → (N,D).
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    /// Rows normalized to unit L2 norm; `norms` saved per row.
    L2NormalizeRows {
        x: usize,
        norms: Vec<T>,
    },
    /// Mean cross-entropy of logits (N,K) against class targets.
    CrossEntropyLogits {
        logits: usize,
        targets: Vec<usize>,
        softmax: Array2<T>,
    },
}

struct Node<T: Real> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter id, as returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    by_param: HashMap<ParamId, ArrayD<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &ArrayD<T>)> {
        self.by_param.iter()
    }

    /// Global L2 norm over all parameter gradients.
    pub fn l2_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as4<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d tensor")
}

fn as2<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

/// im2col for stride-1 convolution with zero padding.
/// x (N,C,H,W), kernel k → (N·OH·OW, C·k·k) with OH = H + 2p − k + 1.
fn im2col<T: Real>(x: &ndarray::ArrayView4<'_, T>, k: usize, pad: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut cols = Array2::<T>::zeros((n * oh * ow, c * k * k));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let mut col_idx = 0usize;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            col_idx += k;
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..k {
                            let ix = ox + kx;
                            if ix >= pad && ix < w + pad {
                                cols[[row, col_idx]] = x[[ni, ci, iy, ix - pad]];
                            }
                            col_idx += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of [`im2col`].
fn col2im<T: Real>(
    cols: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Array4<T> {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut x = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let mut col_idx = 0usize;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            col_idx += k;
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..k {
                            let ix = ox + kx;
                            if ix >= pad && ix < w + pad {
                                x[[ni, ci, iy, ix - pad]] += cols[[row, col_idx]];
                            }
                            col_idx += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Normalize rows to unit L2 norm; shared by the tape op and by inference-time
/// embedding lookups so both produce bit-identical vectors.
pub fn l2_normalize_rows<T: Real>(x: &Array2<T>) -> (Array2<T>, Vec<T>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let norm = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
            .max(T::from_f64(1e-12));
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    (out, norms)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.iter().next().unwrap().as_f64()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; its gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Identity with a severed gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::Detach, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.req(a.0) || self.req(b.0);
        self.push(v, Op::Add(a.0, b.0), req)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let req = self.req(a.0) || self.req(b.0);
        self.push(v, Op::Sub(a.0, b.0), req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let req = self.req(a.0) || self.req(b.0);
        self.push(v, Op::Mul(a.0, b.0), req)
    }

    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (ta, tb) = (T::from_f64(a), T::from_f64(b));
        let v = self.nodes[x.0].value.mapv(|e| ta * e + tb);
        let req = self.req(x.0);
        self.push(v, Op::Affine { x: x.0, a: ta }, req)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.exp());
        let req = self.req(x.0);
        self.push(v, Op::Exp(x.0), req)
    }

    pub fn ln_clamped(&mut self, x: Var, min: f64) -> Var {
        let m = T::from_f64(min);
        let v = self.nodes[x.0].value.mapv(|e| e.max(m).ln());
        let req = self.req(x.0);
        self.push(v, Op::LnClamped { x: x.0, min: m }, req)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.tanh());
        let req = self.req(x.0);
        self.push(v, Op::Tanh(x.0), req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let v = self.nodes[x.0].value.mapv(|e| one / (one + (-e).exp()));
        let req = self.req(x.0);
        self.push(v, Op::Sigmoid(x.0), req)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let one = T::one();
        let v = self.nodes[x.0].value.mapv(|e| e / (one + (-e).exp()));
        let req = self.req(x.0);
        self.push(v, Op::Silu(x.0), req)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e * e);
        let req = self.req(x.0);
        self.push(v, Op::Square(x.0), req)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.nodes[x.0].value.len() as f64);
        let sum = self.nodes[x.0].value.iter().fold(T::zero(), |a, &v| a + v);
        let v = ArrayD::from_elem(IxDyn(&[]), sum / n);
        let req = self.req(x.0);
        self.push(v, Op::MeanAll(x.0), req)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let wv = as2(&self.nodes[w.0].value);
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.ncols(), wv.nrows(), "linear shape mismatch");
        let mut out = xv.dot(&wv);
        let bview = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in out.rows_mut() {
            row += &bview;
        }
        let req = self.req(x.0) || self.req(w.0) || self.req(b.0);
        self.push(out.into_dyn(), Op::Linear { x: x.0, w: w.0, b: b.0 }, req)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let (n, c, h, wd) = xv.dim();
        let (o, ci, k, k2) = wv.dim();
        assert_eq!(c, ci, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernel must be square");
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let cols = im2col(&xv, k, pad);
        let w_mat = wv.to_shape((o, c * k * k)).unwrap().to_owned();
        let mut out_rows = cols.dot(&w_mat.t()); // (N·OH·OW, O)
        let bview = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        for mut row in out_rows.rows_mut() {
            row += &bview;
        }
        let out = out_rows
            .into_shape_with_order((n, oh, ow, o))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        let req = self.req(x.0) || self.req(w.0) || self.req(b.0);
        self.push(
            out.into_dyn(),
            Op::Conv2d { x: x.0, w: w.0, b: b.0, pad },
            req,
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let quarter = T::from_f64(0.25);
        let mut out = Array4::<T>::zeros((n, c, h / 2, w / 2));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for x2 in 0..w / 2 {
                        let s = xv[[ni, ci, 2 * y, 2 * x2]]
                            + xv[[ni, ci, 2 * y, 2 * x2 + 1]]
                            + xv[[ni, ci, 2 * y + 1, 2 * x2]]
                            + xv[[ni, ci, 2 * y + 1, 2 * x2 + 1]];
                        out[[ni, ci, y, x2]] = s * quarter;
                    }
                }
            }
        }
        let req = self.req(x.0);
        self.push(out.into_dyn(), Op::AvgPool2(x.0), req)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<T>::zeros((n, c, h * 2, w * 2));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h * 2 {
                    for x2 in 0..w * 2 {
                        out[[ni, ci, y, x2]] = xv[[ni, ci, y / 2, x2 / 2]];
                    }
                }
            }
        }
        let req = self.req(x.0);
        self.push(out.into_dyn(), Op::UpsampleNearest2(x.0), req)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = as4(&self.nodes[x.0].value).to_owned();
        let (n, c, h, w) = xv.dim();
        assert!(c % groups == 0, "group_norm channels {c} not divisible by {groups}");
        let cpg = c / groups;
        let m = T::from_f64((cpg * h * w) as f64);
        let epsv = T::from_f64(eps);
        let mut mean = Array2::<T>::zeros((n, groups));
        let mut invstd = Array2::<T>::zeros((n, groups));
        let mut out = xv.clone();
        for ni in 0..n {
            for g in 0..groups {
                let sl = xv.slice(ndarray::s![ni, g * cpg..(g + 1) * cpg, .., ..]);
                let mu = sl.iter().fold(T::zero(), |a, &v| a + v) / m;
                let var = sl.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / m;
                let is = T::one() / (var + epsv).sqrt();
                mean[[ni, g]] = mu;
                invstd[[ni, g]] = is;
                let mut osl = out.slice_mut(ndarray::s![ni, g * cpg..(g + 1) * cpg, .., ..]);
                osl.mapv_inplace(|v| (v - mu) * is);
            }
        }
        let gview = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let bview = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let (gc, bc) = (gview[ci], bview[ci]);
                let mut sl = out.slice_mut(ndarray::s![ni, ci, .., ..]);
                sl.mapv_inplace(|v| v * gc + bc);
            }
        }
        let req = self.req(x.0) || self.req(gamma.0) || self.req(beta.0);
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean,
                invstd,
            },
            req,
        )
    }

    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let sv = as2(&self.nodes[scale.0].value);
        let bv = as2(&self.nodes[shift.0].value);
        let (n, c, _, _) = xv.dim();
        assert_eq!(sv.dim(), (n, c), "film scale shape mismatch");
        assert_eq!(bv.dim(), (n, c), "film shift shape mismatch");
        let mut out = xv.to_owned();
        let one = T::one();
        for ni in 0..n {
            for ci in 0..c {
                let (s, b) = (sv[[ni, ci]], bv[[ni, ci]]);
                let mut sl = out.slice_mut(ndarray::s![ni, ci, .., ..]);
                sl.mapv_inplace(|v| v * (one + s) + b);
            }
        }
        let req = self.req(x.0) || self.req(scale.0) || self.req(shift.0);
        self.push(
            out.into_dyn(),
            Op::Film { x: x.0, scale: scale.0, shift: shift.0 },
            req,
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = as4(&self.nodes[a.0].value);
        let bv = as4(&self.nodes[b.0].value);
        let out = ndarray::concatenate(Axis(1), &[av, bv]).expect("concat shape mismatch");
        let req = self.req(a.0) || self.req(b.0);
        self.push(
            out.as_standard_layout().to_owned().into_dyn(),
            Op::ConcatC(a.0, b.0),
            req,
        )
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let out = xv
            .slice(ndarray::s![.., start..start + len, .., ..])
            .as_standard_layout()
            .to_owned();
        let req = self.req(x.0);
        self.push(out.into_dyn(), Op::SliceC { x: x.0, start, len }, req)
    }

    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let qv = as4(&self.nodes[qkv.0].value);
        let (n, c3, h, w) = qv.dim();
        assert!(c3 % 3 == 0, "attention expects 3C channels");
        let c = c3 / 3;
        assert!(c % heads == 0, "attention channels {c} not divisible by {heads} heads");
        let dh = c / heads;
        let l = h * w;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let flat = qv.to_shape((n, c3, l)).unwrap().to_owned();
        let mut out = ndarray::Array3::<T>::zeros((n, c, l));
        let mut saved = Vec::with_capacity(n * heads);
        for ni in 0..n {
            for hd in 0..heads {
                let q = flat.slice(ndarray::s![ni, hd * dh..(hd + 1) * dh, ..]);
                let k = flat.slice(ndarray::s![ni, c + hd * dh..c + (hd + 1) * dh, ..]);
                let v = flat.slice(ndarray::s![ni, 2 * c + hd * dh..2 * c + (hd + 1) * dh, ..]);
                let mut scores = q.t().dot(&k); // (L, L)
                scores.mapv_inplace(|s| s * scale);
                // Row softmax with max subtraction.
                for mut row in scores.rows_mut() {
                    let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                    row.mapv_inplace(|s| (s - mx).exp());
                    let sum = row.iter().fold(T::zero(), |a, &v| a + v);
                    row.mapv_inplace(|s| s / sum);
                }
                let attn = scores;
                let oh = v.dot(&attn.t()); // (dh, L)
                out.slice_mut(ndarray::s![ni, hd * dh..(hd + 1) * dh, ..])
                    .assign(&oh);
                saved.push(attn);
            }
        }
        let out = out
            .into_shape_with_order((n, c, h, w))
            .unwrap();
        let req = self.req(qkv.0);
        self.push(
            out.into_dyn(),
            Op::Attention { qkv: qkv.0, heads, attn: saved },
            req,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        let m = T::from_f64((h * w) as f64);
        let mut out = Array2::<T>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let s = xv
                    .slice(ndarray::s![ni, ci, .., ..])
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                out[[ni, ci]] = s / m;
            }
        }
        let req = self.req(x.0);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x.0), req)
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = as2(&self.nodes[table.0].value);
        let d = tv.ncols();
        let mut out = Array2::<T>::zeros((indices.len(), d));
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < tv.nrows(), "gather index {idx} out of range");
            out.row_mut(i).assign(&tv.row(idx));
        }
        let req = self.req(table.0);
        self.push(
            out.into_dyn(),
            Op::Gather { table: table.0, indices: indices.to_vec() },
            req,
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let (out, norms) = l2_normalize_rows(&xv);
        let req = self.req(x.0);
        self.push(out.into_dyn(), Op::L2NormalizeRows { x: x.0, norms }, req)
    }

    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = as2(&self.nodes[logits.0].value).to_owned();
        let (n, k) = lv.dim();
        assert_eq!(n, targets.len(), "cross entropy target count mismatch");
        let mut softmax = lv.clone();
        let mut loss = T::zero();
        for (i, mut row) in softmax.rows_mut().into_iter().enumerate() {
            let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            row.mapv_inplace(|s| (s - mx).exp());
            let sum = row.iter().fold(T::zero(), |a, &v| a + v);
            row.mapv_inplace(|s| s / sum);
            let t = targets[i];
            assert!(t < k, "target class {t} out of range");
            loss -= row[t].max(T::from_f64(1e-30)).ln();
        }
        loss /= T::from_f64(n as f64);
        let req = self.req(logits.0);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::CrossEntropyLogits {
                logits: logits.0,
                targets: targets.to_vec(),
                softmax,
            },
            req,
        )
    }

    /// Reverse sweep from a scalar loss; returns gradients for parameter leafs.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if let Op::Param(_) = self.nodes[i].op {
                grads[i] = Some(g);
            }
        }

        let mut by_param = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads[i].take() {
                    by_param.insert(pid, g);
                }
            }
        }
        Grads { by_param }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<T>>], idx: usize, contrib: ArrayD<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    self.accumulate(grads, *a, g * &self.nodes[*b].value);
                }
                if self.req(*b) {
                    self.accumulate(grads, *b, g * &self.nodes[*a].value);
                }
            }
            Op::Affine { x, a, .. } => {
                let a = *a;
                self.accumulate(grads, *x, g.mapv(|v| v * a));
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, g * &self.nodes[i].value);
            }
            Op::LnClamped { x, min } => {
                let min = *min;
                let mut dx = self.nodes[*x].value.mapv(|v| {
                    if v > min {
                        T::one() / v
                    } else {
                        T::zero()
                    }
                });
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = self.nodes[i].value.mapv(|y| T::one() - y * y);
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = self.nodes[i].value.mapv(|y| y * (T::one() - y));
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::Silu(x) => {
                let one = T::one();
                let mut dx = self.nodes[*x].value.mapv(|v| {
                    let s = one / (one + (-v).exp());
                    s * (one + v * (one - s))
                });
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let mut dx = self.nodes[*x].value.mapv(|v| two * v);
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let n = T::from_f64(self.nodes[*x].value.len() as f64);
                let gv = *g.iter().next().unwrap();
                let dx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), gv / n);
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let gv = as2(g);
                let xv = as2(&self.nodes[*x].value);
                let wv = as2(&self.nodes[*w].value);
                if self.req(*x) {
                    self.accumulate(grads, *x, gv.dot(&wv.t()).into_dyn());
                }
                if self.req(*w) {
                    self.accumulate(grads, *w, xv.t().dot(&gv).into_dyn());
                }
                if self.req(*b) {
                    let db = gv.sum_axis(Axis(0));
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let gv = as4(g);
                let (n, o, oh, ow) = gv.dim();
                let wv = as4(&self.nodes[*w].value);
                let (_, c, k, _) = wv.dim();
                let xv = as4(&self.nodes[*x].value);
                let (_, _, h, wd) = xv.dim();
                // (N·OH·OW, O) view of the output gradient.
                let g_rows = gv
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((n * oh * ow, o))
                    .unwrap();
                let w_mat = wv.to_shape((o, c * k * k)).unwrap().to_owned();
                if self.req(*x) {
                    let dcols = g_rows.dot(&w_mat); // (N·OH·OW, C·k·k)
                    let dx = col2im(&dcols, n, c, h, wd, k, *pad);
                    self.accumulate(grads, *x, dx.into_dyn());
                }
                if self.req(*w) {
                    let cols = im2col(&xv, k, *pad);
                    let dw = g_rows.t().dot(&cols); // (O, C·k·k)
                    let dw = dw.into_shape_with_order((o, c, k, k)).unwrap();
                    self.accumulate(grads, *w, dw.into_dyn());
                }
                if self.req(*b) {
                    let db = g_rows.sum_axis(Axis(0));
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::AvgPool2(x) => {
                let gv = as4(g);
                let (n, c, oh, ow) = gv.dim();
                let quarter = T::from_f64(0.25);
                let mut dx = Array4::<T>::zeros((n, c, oh * 2, ow * 2));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..oh {
                            for x2 in 0..ow {
                                let v = gv[[ni, ci, y, x2]] * quarter;
                                dx[[ni, ci, 2 * y, 2 * x2]] = v;
                                dx[[ni, ci, 2 * y, 2 * x2 + 1]] = v;
                                dx[[ni, ci, 2 * y + 1, 2 * x2]] = v;
                                dx[[ni, ci, 2 * y + 1, 2 * x2 + 1]] = v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::UpsampleNearest2(x) => {
                let gv = as4(g);
                let (n, c, oh, ow) = gv.dim();
                let mut dx = Array4::<T>::zeros((n, c, oh / 2, ow / 2));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..oh {
                            for x2 in 0..ow {
                                dx[[ni, ci, y / 2, x2 / 2]] += gv[[ni, ci, y, x2]];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                invstd,
            } => {
                let gv = as4(g);
                let xv = as4(&self.nodes[*x].value);
                let (n, c, h, w) = xv.dim();
                let cpg = c / groups;
                let m = T::from_f64((cpg * h * w) as f64);
                let gamma_v = self.nodes[*gamma].value.clone();
                let gamma_1 = gamma_v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if self.req(*beta) {
                    let mut db = Array1::<T>::zeros(c);
                    for ci in 0..c {
                        let s = gv
                            .slice(ndarray::s![.., ci, .., ..])
                            .iter()
                            .fold(T::zero(), |a, &v| a + v);
                        db[ci] = s;
                    }
                    self.accumulate(grads, *beta, db.into_dyn());
                }
                // Normalized activations are recomputed from saved stats.
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dx = Array4::<T>::zeros((n, c, h, w));
                for ni in 0..n {
                    for gi in 0..*groups {
                        let mu = mean[[ni, gi]];
                        let is = invstd[[ni, gi]];
                        // First pass: per-group reductions of dxh and dxh·xh.
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for ci in gi * cpg..(gi + 1) * cpg {
                            let gc = gamma_1[ci];
                            for y in 0..h {
                                for x2 in 0..w {
                                    let xh = (xv[[ni, ci, y, x2]] - mu) * is;
                                    let dxh = gv[[ni, ci, y, x2]] * gc;
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * xh;
                                    dgamma[ci] += gv[[ni, ci, y, x2]] * xh;
                                }
                            }
                        }
                        let mean_dxh = sum_dxh / m;
                        let mean_dxh_xh = sum_dxh_xh / m;
                        for ci in gi * cpg..(gi + 1) * cpg {
                            let gc = gamma_1[ci];
                            for y in 0..h {
                                for x2 in 0..w {
                                    let xh = (xv[[ni, ci, y, x2]] - mu) * is;
                                    let dxh = gv[[ni, ci, y, x2]] * gc;
                                    dx[[ni, ci, y, x2]] =
                                        is * (dxh - mean_dxh - xh * mean_dxh_xh);
                                }
                            }
                        }
                    }
                }
                if self.req(*gamma) {
                    self.accumulate(grads, *gamma, dgamma.into_dyn());
                }
                if self.req(*x) {
                    self.accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::Film { x, scale, shift } => {
                let gv = as4(g);
                let xv = as4(&self.nodes[*x].value);
                let sv = as2(&self.nodes[*scale].value);
                let (n, c, h, w) = xv.dim();
                let one = T::one();
                if self.req(*x) {
                    let mut dx = gv.to_owned();
                    for ni in 0..n {
                        for ci in 0..c {
                            let s = sv[[ni, ci]];
                            let mut sl = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                            sl.mapv_inplace(|v| v * (one + s));
                        }
                    }
                    self.accumulate(grads, *x, dx.into_dyn());
                }
                if self.req(*scale) || self.req(*shift) {
                    let mut ds = Array2::<T>::zeros((n, c));
                    let mut db = Array2::<T>::zeros((n, c));
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut acc_s = T::zero();
                            let mut acc_b = T::zero();
                            for y in 0..h {
                                for x2 in 0..w {
                                    acc_s += gv[[ni, ci, y, x2]] * xv[[ni, ci, y, x2]];
                                    acc_b += gv[[ni, ci, y, x2]];
                                }
                            }
                            ds[[ni, ci]] = acc_s;
                            db[[ni, ci]] = acc_b;
                        }
                    }
                    if self.req(*scale) {
                        self.accumulate(grads, *scale, ds.into_dyn());
                    }
                    if self.req(*shift) {
                        self.accumulate(grads, *shift, db.into_dyn());
                    }
                }
            }
            Op::ConcatC(a, b) => {
                let gv = as4(g);
                let ca = self.nodes[*a].value.shape()[1];
                let cb = self.nodes[*b].value.shape()[1];
                if self.req(*a) {
                    let da = gv
                        .slice(ndarray::s![.., 0..ca, .., ..])
                        .as_standard_layout()
                        .to_owned();
                    self.accumulate(grads, *a, da.into_dyn());
                }
                if self.req(*b) {
                    let db = gv
                        .slice(ndarray::s![.., ca..ca + cb, .., ..])
                        .as_standard_layout()
                        .to_owned();
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::SliceC { x, start, len } => {
                let gv = as4(g);
                let xs = self.nodes[*x].value.shape();
                let mut dx = Array4::<T>::zeros((xs[0], xs[1], xs[2], xs[3]));
                dx.slice_mut(ndarray::s![.., *start..*start + *len, .., ..])
                    .assign(&gv);
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::Attention { qkv, heads, attn } => {
                let gv = as4(g);
                let (n, c, h, w) = gv.dim();
                let l = h * w;
                let dh = c / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let flat = as4(&self.nodes[*qkv].value)
                    .to_shape((n, 3 * c, l))
                    .unwrap()
                    .to_owned();
                let gflat = gv.to_shape((n, c, l)).unwrap().to_owned();
                let mut dqkv = ndarray::Array3::<T>::zeros((n, 3 * c, l));
                for ni in 0..n {
                    for hd in 0..*heads {
                        let a = &attn[ni * heads + hd]; // (L, L)
                        let q = flat.slice(ndarray::s![ni, hd * dh..(hd + 1) * dh, ..]);
                        let k = flat.slice(ndarray::s![ni, c + hd * dh..c + (hd + 1) * dh, ..]);
                        let v = flat
                            .slice(ndarray::s![ni, 2 * c + hd * dh..2 * c + (hd + 1) * dh, ..]);
                        let go = gflat.slice(ndarray::s![ni, hd * dh..(hd + 1) * dh, ..]);
                        // dV = go · attn (dh,L)·(L,L) with attn already (query, key).
                        let dv = go.dot(a);
                        let dattn = go.t().dot(&v); // (L_q, L_k)
                        // Softmax backward per query row.
                        let mut dscores = dattn.clone();
                        for (mut dsrow, arow) in
                            dscores.rows_mut().into_iter().zip(a.rows())
                        {
                            let dot = dsrow
                                .iter()
                                .zip(arow.iter())
                                .fold(T::zero(), |acc, (&d, &p)| acc + d * p);
                            dsrow
                                .iter_mut()
                                .zip(arow.iter())
                                .for_each(|(d, &p)| *d = p * (*d - dot));
                        }
                        let dq = k.dot(&dscores.t()).mapv(|x| x * scale); // (dh, L)
                        let dk = q.dot(&dscores).mapv(|x| x * scale); // (dh, L)
                        dqkv.slice_mut(ndarray::s![ni, hd * dh..(hd + 1) * dh, ..])
                            .assign(&dq);
                        dqkv.slice_mut(ndarray::s![ni, c + hd * dh..c + (hd + 1) * dh, ..])
                            .assign(&dk);
                        dqkv.slice_mut(ndarray::s![ni, 2 * c + hd * dh..2 * c + (hd + 1) * dh, ..])
                            .assign(&dv);
                    }
                }
                let dqkv = dqkv.into_shape_with_order((n, 3 * c, h, w)).unwrap();
                self.accumulate(grads, *qkv, dqkv.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let gv = as2(g);
                let xs = self.nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let m = T::from_f64((h * w) as f64);
                let mut dx = Array4::<T>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = gv[[ni, ci]] / m;
                        dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(v);
                    }
                }
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::Gather { table, indices } => {
                let gv = as2(g);
                let ts = self.nodes[*table].value.shape();
                let mut dt = Array2::<T>::zeros((ts[0], ts[1]));
                for (i, &idx) in indices.iter().enumerate() {
                    let mut row = dt.row_mut(idx);
                    row += &gv.row(i);
                }
                self.accumulate(grads, *table, dt.into_dyn());
            }
            Op::L2NormalizeRows { x, norms } => {
                let gv = as2(g);
                let yv = as2(&self.nodes[i].value);
                let mut dx = Array2::<T>::zeros(gv.dim());
                for r in 0..gv.nrows() {
                    let dot = gv
                        .row(r)
                        .iter()
                        .zip(yv.row(r).iter())
                        .fold(T::zero(), |a, (&gd, &y)| a + gd * y);
                    let inv_n = T::one() / norms[r];
                    for cidx in 0..gv.ncols() {
                        dx[[r, cidx]] = (gv[[r, cidx]] - yv[[r, cidx]] * dot) * inv_n;
                    }
                }
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::CrossEntropyLogits {
                logits,
                targets,
                softmax,
            } => {
                let gv = *g.iter().next().unwrap();
                let n = targets.len();
                let scale = gv / T::from_f64(n as f64);
                let mut dl = softmax.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[[i, t]] -= T::one();
                }
                dl.mapv_inplace(|v| v * scale);
                self.accumulate(grads, *logits, dl.into_dyn());
            }
        }
    }
}
