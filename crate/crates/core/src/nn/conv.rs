use rand::Rng;

use super::{gemm, Group, Param, Real, View, ViewMut};

/// 3x3 same-padded convolution fused with bias, width masking and ReLU.
///
/// Activations are `[batch, channels, height, width]`. Columns at or beyond an
/// image's valid width are forced to zero after every layer so padded batches
/// produce the same valid-region activations as an unpadded image would.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>, // [out, in * 9]
    pub bias: Param<T>,   // [out]
    pub c_in: usize,
    pub c_out: usize,
}

/// Output of [`Conv2d::forward`] kept for the backward pass: the layer
/// output (pooled when a pool follows) and, with pooling, the per-sample
/// flat index of each window's maximum.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub out: Vec<T>,
    pub idx: Option<Vec<u32>>,
}

const K: usize = 3;

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(name: &str, group: Group, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * K * K) as f64;
        Conv2d {
            weight: Param::normal(format!("{name}.weight"), group, &[c_out, c_in * K * K], (2.0 / fan_in).sqrt(), rng),
            bias: Param::zeros(format!("{name}.bias"), group, &[c_out]),
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let hw = h * w;
        for c in 0..self.c_in {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..K {
                for kx in 0..K {
                    let row = &mut cols[((c * K + ky) * K + kx) * hw..((c * K + ky) * K + kx + 1) * hw];
                    for y in 0..h {
                        let dst = &mut row[y * w..(y + 1) * w];
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                dst[0] = T::zero();
                                dst[1..].copy_from_slice(&src[..w - 1]);
                            }
                            1 => dst.copy_from_slice(src),
                            _ => {
                                dst[..w - 1].copy_from_slice(&src[1..]);
                                dst[w - 1] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let hw = h * w;
        for c in 0..self.c_in {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..K {
                for kx in 0..K {
                    let row = &cols[((c * K + ky) * K + kx) * hw..((c * K + ky) * K + kx + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[y * w..(y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                    *d += s;
                                }
                            }
                            1 => {
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            _ => {
                                for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Convolution, bias, width mask and ReLU, optionally followed by max
    /// pooling, processed one sample at a time so full-resolution activations
    /// are never stored for the whole batch.
    pub fn forward(&self, x: &[T], batch: usize, h: usize, w: usize, valid_w: &[usize], pool: Option<MaxPool>) -> ConvCache<T> {
        let hw = h * w;
        let kk = self.c_in * K * K;
        let (oh, ow) = pool.map_or((h, w), |p| (h / p.ph, w / p.pw));
        let per_out = self.c_out * oh * ow;
        let mut cols = if self.c_in == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
        let mut buf = vec![T::zero(); self.c_out * hw];
        let mut out = vec![T::zero(); batch * per_out];
        let mut idx = pool.map(|_| vec![0u32; batch * per_out]);
        for b in 0..batch {
            for (c, plane) in buf.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.value[c]);
            }
            let xb = &x[b * self.c_in * hw..(b + 1) * self.c_in * hw];
            if self.c_in == 1 {
                self.direct_single_channel(xb, h, w, &mut buf);
            } else {
                self.im2col(xb, h, w, &mut cols);
                gemm(
                    self.c_out,
                    kk,
                    hw,
                    T::one(),
                    View::rows(&self.weight.value, kk),
                    View::rows(&cols, hw),
                    T::one(),
                    ViewMut::rows(&mut buf, hw),
                );
            }
            Self::mask_relu(&mut buf, w, valid_w[b]);
            let ob = &mut out[b * per_out..(b + 1) * per_out];
            match (pool, idx.as_mut()) {
                (Some(p), Some(idx)) => p.forward_into(&buf, self.c_out, h, w, ob, &mut idx[b * per_out..(b + 1) * per_out]),
                _ => ob.copy_from_slice(&buf),
            }
        }
        ConvCache { out, idx }
    }

    fn mask_relu(o: &mut [T], w: usize, vw: usize) {
        for v_row in o.chunks_mut(w) {
            for v in &mut v_row[vw..] {
                *v = T::zero();
            }
            for v in &mut v_row[..vw] {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    }

    /// Shift-and-accumulate convolution for one input channel; `o` already
    /// holds the bias.
    fn direct_single_channel(&self, x: &[T], h: usize, w: usize, o: &mut [T]) {
        let hw = h * w;
        for (c, plane) in o.chunks_mut(hw).enumerate() {
            let k = &self.weight.value[c * K * K..(c + 1) * K * K];
            for y in 0..h {
                let dst = &mut plane[y * w..(y + 1) * w];
                for ky in 0..K {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &x[sy as usize * w..(sy as usize + 1) * w];
                    let (k0, k1, k2) = (k[ky * K], k[ky * K + 1], k[ky * K + 2]);
                    dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += k0 * s);
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += k1 * s);
                    dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += k2 * s);
                }
            }
        }
    }

    /// `dout` is the gradient w.r.t. the layer output (pooled if `pool`).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &mut self,
        x: &[T],
        cache: &ConvCache<T>,
        dout: &[T],
        batch: usize,
        h: usize,
        w: usize,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let hw = h * w;
        let kk = self.c_in * K * K;
        let per_out = cache.out.len() / batch.max(1);
        let mut dx = if need_dx { vec![T::zero(); batch * self.c_in * hw] } else { Vec::new() };
        // Gradient reaches the pre-activation only where the (pooled) output
        // is positive; masked and rectified positions are exactly zero.
        let mut dconv = vec![T::zero(); self.c_out * hw];
        let mut cols = if self.c_in == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
        for b in 0..batch {
            let ob = &cache.out[b * per_out..(b + 1) * per_out];
            let gb = &dout[b * per_out..(b + 1) * per_out];
            let xb = &x[b * self.c_in * hw..(b + 1) * self.c_in * hw];
            let pos = |j: usize| cache.idx.as_ref().map_or(j, |idx| idx[b * per_out + j] as usize);
            if self.c_in == 1 {
                let dxb = if need_dx { Some(&mut dx[b * hw..(b + 1) * hw]) } else { None };
                self.single_channel_backward(xb, ob, gb, &pos, h, w, dxb);
                continue;
            }
            dconv.iter_mut().for_each(|v| *v = T::zero());
            for (j, (&o, &g)) in ob.iter().zip(gb).enumerate() {
                if o > T::zero() {
                    dconv[pos(j)] += g;
                }
            }
            self.im2col(xb, h, w, &mut cols);
            gemm(
                self.c_out,
                hw,
                kk,
                T::one(),
                View::rows(&dconv, hw),
                View::t(&cols, hw),
                T::one(),
                ViewMut::rows(&mut self.weight.grad, kk),
            );
            for (c, plane) in dconv.chunks(hw).enumerate() {
                self.bias.grad[c] += plane.iter().copied().sum::<T>();
            }
            if need_dx {
                gemm(
                    kk,
                    self.c_out,
                    hw,
                    T::one(),
                    View::t(&self.weight.value, kk),
                    View::rows(&dconv, hw),
                    T::zero(),
                    ViewMut::rows(&mut cols, hw),
                );
                self.col2im(&cols, h, w, &mut dx[b * self.c_in * hw..(b + 1) * self.c_in * hw]);
            }
        }
        need_dx.then_some(dx)
    }

    /// Sparse backward for a single input channel: only positions that
    /// survived ReLU and pooling contribute.
    #[allow(clippy::too_many_arguments)]
    fn single_channel_backward(
        &mut self,
        x: &[T],
        out: &[T],
        dout: &[T],
        pos: &dyn Fn(usize) -> usize,
        h: usize,
        w: usize,
        mut dx: Option<&mut [T]>,
    ) {
        let hw = h * w;
        for (j, (&o, &g)) in out.iter().zip(dout).enumerate() {
            if o <= T::zero() || g == T::zero() {
                continue;
            }
            let p = pos(j);
            let (c, y, xx) = (p / hw, (p % hw) / w, p % w);
            self.bias.grad[c] += g;
            for ky in 0..K {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..K {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let xi = sy as usize * w + sx as usize;
                    self.weight.grad[c * K * K + ky * K + kx] += g * x[xi];
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xi] += g * self.weight.value[c * K * K + ky * K + kx];
                    }
                }
            }
        }
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Non-overlapping max pooling with a `(ph, pw)` window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub ph: usize,
    pub pw: usize,
}

impl MaxPool {
    /// Returns pooled activations and the flat source index of each maximum.
    /// Ties resolve to the first position in row-major window order.
    pub fn forward<T: Real>(&self, x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
        let n = planes * (h / self.ph) * (w / self.pw);
        let (mut out, mut idx) = (vec![T::zero(); n], vec![0u32; n]);
        self.forward_into(x, planes, h, w, &mut out, &mut idx);
        (out, idx)
    }

    pub fn forward_into<T: Real>(&self, x: &[T], planes: usize, h: usize, w: usize, out: &mut [T], idx: &mut [u32]) {
        let (oh, ow) = (h / self.ph, w / self.pw);
        for p in 0..planes {
            for oy in 0..oh {
                let o = (p * oh + oy) * ow;
                let (orow, irow) = (&mut out[o..o + ow], &mut idx[o..o + ow]);
                for dy in 0..self.ph {
                    let start = p * h * w + (oy * self.ph + dy) * w;
                    let src = &x[start..start + ow * self.pw];
                    for (ox, win) in src.chunks_exact(self.pw).enumerate() {
                        for (dx, &v) in win.iter().enumerate() {
                            if (dy == 0 && dx == 0) || v > orow[ox] {
                                orow[ox] = v;
                                irow[ox] = (start + ox * self.pw + dx) as u32;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn backward<T: Real>(&self, idx: &[u32], dout: &[T], input_len: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); input_len];
        for (&i, &g) in idx.iter().zip(dout) {
            dx[i as usize] += g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; conv.c_out * h * w];
        for o in 0..conv.c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = conv.bias.value[o];
                    for c in 0..conv.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    s += conv.weight.value[o * conv.c_in * 9 + c * 9 + ky * 3 + kx]
                                        * x[c * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[o * h * w + y * w + xx] = s.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new("c", Group::ConvBackbone, 2, 3, &mut rng);
        let (h, w) = (4, 5);
        let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let got = conv.forward(&x, 1, h, w, &[w], None).out;
        let want = naive_conv(&conv, &x, h, w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = vec![1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let pool = MaxPool { ph: 2, pw: 2 };
        let (out, idx) = pool.forward(&x, 1, 2, 4);
        assert_eq!(out, vec![5.0, 9.0]);
        let dx = pool.backward(&idx, &[1.0, 2.0], x.len());
        assert_eq!(dx, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
