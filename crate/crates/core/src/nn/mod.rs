//! Minimal dense layers with explicit forward and backward passes.
//!
//! Every layer keeps its parameters in [`Param`] values and exposes a
//! `forward` that returns whatever the matching `backward` needs. Buffers are
//! plain row-major `Vec<T>`; shapes are tracked by the callers.

mod adamw;
mod attention;
mod conv;
mod linear;
mod norm;

pub use adamw::{AdamW, AdamWConfig};
pub use attention::{AttentionCache, KeyMask, MultiHeadAttention};
pub use conv::{Conv2d, ConvCache, MaxPool};
pub use linear::{Embedding, Linear};
pub use norm::{LayerNorm, LayerNormCache};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Floating point element type the layers are generic over.
///
/// Training runs in `f32`; `f64` exists so finite-difference gradient checks
/// are meaningful.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Raw strided GEMM: `C = alpha * A B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major `[rows, cols]` view of the whole slice.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        View { data, offset: 0, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `[rows, cols]` matrix.
    pub fn t(data: &'a [T], cols: usize) -> Self {
        View { data, offset: 0, rs: 1, cs: cols }
    }

    pub fn at(data: &'a [T], offset: usize, rs: usize, cs: usize) -> Self {
        View { data, offset, rs, cs }
    }

    fn check(&self, r: usize, c: usize) {
        if r > 0 && c > 0 {
            let last = self.offset + (r - 1) * self.rs + (c - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Mutable strided matrix view.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn rows(data: &'a mut [T], cols: usize) -> Self {
        ViewMut { data, offset: 0, rs: cols, cs: 1 }
    }

    pub fn at(data: &'a mut [T], offset: usize, rs: usize, cs: usize) -> Self {
        ViewMut { data, offset, rs, cs }
    }
}

/// `C[m,n] = alpha * A[m,k] B[k,n] + beta * C`. With `beta == 0` the previous
/// contents of `C` are ignored.
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: ViewMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[c.offset + i * c.rs + j * c.cs];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Row-major `out[m,n] = a[m,k] @ b[k,n]` (allocating).
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, T::one(), View::rows(a, k), View::rows(b, n), T::zero(), ViewMut::rows(&mut out, n));
    out
}

/// Parameter groups used for component-selective fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    ConvBackbone,
    EncoderMha,
    EncoderRest,
    DecoderMha,
    DecoderRest,
    EmbedAndHead,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::ConvBackbone,
        Group::EncoderMha,
        Group::EncoderRest,
        Group::DecoderMha,
        Group::DecoderRest,
        Group::EmbedAndHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::ConvBackbone => "conv_backbone",
            Group::EncoderMha => "encoder_mha",
            Group::EncoderRest => "encoder_rest",
            Group::DecoderMha => "decoder_mha",
            Group::DecoderRest => "decoder_rest",
            Group::EmbedAndHead => "embed_and_head",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, group: Group, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            group,
            shape: shape.to_vec(),
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    pub fn filled(name: impl Into<String>, group: Group, shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(name, group, shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn normal<R: Rng>(name: impl Into<String>, group: Group, shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, group, shape);
        for x in p.value.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = T::lit(z * std);
        }
        p
    }

    pub fn uniform<R: Rng>(name: impl Into<String>, group: Group, shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, group, shape);
        for x in p.value.iter_mut() {
            *x = T::lit(rng.gen_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Same parameter converted to another element type.
    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            group: self.group,
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| U::lit(v.to_f64().unwrap())).collect(),
            grad: vec![U::zero(); self.value.len()],
        }
    }
}

/// Elementwise ReLU in place.
pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the forward ReLU output was not positive.
pub fn relu_backward<T: Real>(out: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Adds `b` elementwise into `a`.
pub fn add_into<T: Real>(a: &mut [T], b: &[T]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// In-place log-softmax over rows of width `cols`.
pub fn log_softmax_rows<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
}

/// Static sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64) * (10000f64).ln() / dim as f64).exp();
            let angle = pos as f64 * freq;
            out[pos * dim + 2 * i] = T::lit(angle.sin());
            out[pos * dim + 2 * i + 1] = T::lit(angle.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views_match_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // [3,4]
        let c = matmul(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (A^T)^T B via a transposed view of the stored transpose.
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64)).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, View::t(&at, 2), View::rows(&b, 4), 0.0, ViewMut::rows(&mut c2, 4));
        assert_eq!(c, c2);
    }

    #[test]
    fn log_softmax_rows_normalizes() {
        let mut x = vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0];
        log_softmax_rows(&mut x, 3);
        for row in x.chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_first_row() {
        let pe: Vec<f64> = sinusoidal_positions(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
