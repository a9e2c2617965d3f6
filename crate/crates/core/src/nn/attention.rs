use rand::Rng;

use super::{gemm, Group, Linear, Param, Real, View, ViewMut};

/// Which keys each query may attend to.
#[derive(Debug, Clone)]
pub enum KeyMask {
    /// Per-batch number of valid keys; later keys are padding.
    Lengths(Vec<usize>),
    /// Query `i` sees keys `0..=i` (requires equal query/key lengths).
    Causal,
}

/// Multi-head scaled dot-product attention with separate Q/K/V/O projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    xq: Vec<T>,
    xkv: Option<Vec<T>>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    batch: usize,
    tq: usize,
    tk: usize,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new<R: Rng>(name: &str, group: Group, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        MultiHeadAttention {
            q: Linear::new(&format!("{name}.q"), group, dim, dim, rng),
            k: Linear::new(&format!("{name}.k"), group, dim, dim, rng),
            v: Linear::new(&format!("{name}.v"), group, dim, dim, rng),
            o: Linear::new(&format!("{name}.o"), group, dim, dim, rng),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale(&self) -> T {
        T::one() / T::lit((self.head_dim() as f64).sqrt())
    }

    /// `xq` is `[batch * tq, dim]`; `xkv` is `[batch * tk, dim]` or `None` for
    /// self-attention over `xq`.
    pub fn forward(
        &self,
        xq: &[T],
        xkv: Option<&[T]>,
        batch: usize,
        tq: usize,
        tk: usize,
        mask: &KeyMask,
    ) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim;
        let dh = self.head_dim();
        let src = xkv.unwrap_or(xq);
        let q = self.q.forward(xq, batch * tq);
        let k = self.k.forward(src, batch * tk);
        let v = self.v.forward(src, batch * tk);
        let mut probs = vec![T::zero(); batch * self.heads * tq * tk];
        let mut ctx = vec![T::zero(); batch * tq * d];
        let scale = self.scale();
        for b in 0..batch {
            for h in 0..self.heads {
                let p_off = (b * self.heads + h) * tq * tk;
                let p = &mut probs[p_off..p_off + tq * tk];
                gemm(
                    tq,
                    dh,
                    tk,
                    scale,
                    View::at(&q, b * tq * d + h * dh, d, 1),
                    View::at(&k, b * tk * d + h * dh, 1, d),
                    T::zero(),
                    ViewMut::rows(p, tk),
                );
                for i in 0..tq {
                    let valid = match mask {
                        KeyMask::Lengths(l) => l[b],
                        KeyMask::Causal => i + 1,
                    };
                    softmax_prefix(&mut p[i * tk..(i + 1) * tk], valid);
                }
                gemm(
                    tq,
                    tk,
                    dh,
                    T::one(),
                    View::rows(p, tk),
                    View::at(&v, b * tk * d + h * dh, d, 1),
                    T::zero(),
                    ViewMut::at(&mut ctx, b * tq * d + h * dh, d, 1),
                );
            }
        }
        let y = self.o.forward(&ctx, batch * tq);
        let cache = AttentionCache {
            xq: xq.to_vec(),
            xkv: xkv.map(|x| x.to_vec()),
            q,
            k,
            v,
            probs,
            ctx,
            batch,
            tq,
            tk,
        };
        (y, cache)
    }

    /// Returns `(dxq, dxkv)`. For self-attention the key/value contribution is
    /// folded into `dxq` and the second element is `None`.
    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &[T], need_dkv: bool) -> (Vec<T>, Option<Vec<T>>) {
        let (batch, tq, tk) = (cache.batch, cache.tq, cache.tk);
        let d = self.dim;
        let dh = self.head_dim();
        let scale = self.scale();
        let dctx = self.o.backward(&cache.ctx, dy, batch * tq, true).expect("dx requested");
        let mut dq = vec![T::zero(); batch * tq * d];
        let mut dk = vec![T::zero(); batch * tk * d];
        let mut dv = vec![T::zero(); batch * tk * d];
        let mut ds = vec![T::zero(); tq * tk];
        for b in 0..batch {
            for h in 0..self.heads {
                let p_off = (b * self.heads + h) * tq * tk;
                let p = &cache.probs[p_off..p_off + tq * tk];
                let ctx_view = View::at(&dctx, b * tq * d + h * dh, d, 1);
                gemm(tq, dh, tk, T::one(), ctx_view, View::at(&cache.v, b * tk * d + h * dh, 1, d), T::zero(), ViewMut::rows(&mut ds, tk));
                gemm(
                    tk,
                    tq,
                    dh,
                    T::one(),
                    View::t(p, tk),
                    ctx_view,
                    T::zero(),
                    ViewMut::at(&mut dv, b * tk * d + h * dh, d, 1),
                );
                for i in 0..tq {
                    let pr = &p[i * tk..(i + 1) * tk];
                    let dr = &mut ds[i * tk..(i + 1) * tk];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                gemm(
                    tq,
                    tk,
                    dh,
                    scale,
                    View::rows(&ds, tk),
                    View::at(&cache.k, b * tk * d + h * dh, d, 1),
                    T::zero(),
                    ViewMut::at(&mut dq, b * tq * d + h * dh, d, 1),
                );
                gemm(
                    tk,
                    tq,
                    dh,
                    scale,
                    View::t(&ds, tk),
                    View::at(&cache.q, b * tq * d + h * dh, d, 1),
                    T::zero(),
                    ViewMut::at(&mut dk, b * tk * d + h * dh, d, 1),
                );
            }
        }
        let src = cache.xkv.as_deref().unwrap_or(&cache.xq);
        let mut dxq = self.q.backward(&cache.xq, &dq, batch * tq, true).expect("dx requested");
        let self_attn = cache.xkv.is_none();
        let want_kv = need_dkv || self_attn;
        let dk_x = self.k.backward(src, &dk, batch * tk, want_kv);
        let dv_x = self.v.backward(src, &dv, batch * tk, want_kv);
        let dkv = match (dk_x, dv_x) {
            (Some(mut a), Some(b)) => {
                super::add_into(&mut a, &b);
                Some(a)
            }
            _ => None,
        };
        if self_attn {
            super::add_into(&mut dxq, &dkv.expect("self-attention kv grad"));
            (dxq, None)
        } else {
            (dxq, dkv)
        }
    }

    /// Projects keys and values for `rows` inputs (used by incremental decoding).
    pub fn project_kv(&self, x: &[T], rows: usize) -> (Vec<T>, Vec<T>) {
        (self.k.forward(x, rows), self.v.forward(x, rows))
    }

    /// Attention for a single query per batch element against precomputed
    /// keys/values laid out as `[batch, stride, dim]`, of which the first
    /// `lens[b]` rows are valid. Returns the projected output `[batch, dim]`.
    pub fn attend_one(&self, xq: &[T], batch: usize, keys: &[T], values: &[T], stride: usize, lens: &[usize]) -> Vec<T> {
        let d = self.dim;
        let dh = self.head_dim();
        let scale = self.scale();
        let q = self.q.forward(xq, batch);
        let mut ctx = vec![T::zero(); batch * d];
        let mut p = vec![T::zero(); stride];
        for b in 0..batch {
            let n = lens[b];
            for h in 0..self.heads {
                let pr = &mut p[..n];
                gemm(
                    1,
                    dh,
                    n,
                    scale,
                    View::at(&q, b * d + h * dh, d, 1),
                    View::at(keys, b * stride * d + h * dh, 1, d),
                    T::zero(),
                    ViewMut::rows(pr, n),
                );
                softmax_prefix(pr, n);
                gemm(
                    1,
                    n,
                    dh,
                    T::one(),
                    View::rows(pr, n),
                    View::at(values, b * stride * d + h * dh, d, 1),
                    T::zero(),
                    ViewMut::at(&mut ctx, b * d + h * dh, d, 1),
                );
            }
        }
        self.o.forward(&ctx, batch)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        [&self.q, &self.k, &self.v, &self.o].into_iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o].into_iter().flat_map(|l| l.params_mut())
    }
}

/// Softmax over the first `valid` entries; the rest become exact zeros.
fn softmax_prefix<T: Real>(row: &mut [T], valid: usize) {
    let (head, tail) = row.split_at_mut(valid);
    let max = head.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in head.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in head.iter_mut() {
        *v = *v / sum;
    }
    tail.iter_mut().for_each(|v| *v = T::zero());
}
