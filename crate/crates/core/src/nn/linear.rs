use rand::Rng;

use super::{gemm, Group, Param, Real, View, ViewMut};

/// Affine map `y = x W + b` over rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>, // [in, out]
    pub bias: Param<T>,   // [out]
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Real> Linear<T> {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng>(name: &str, group: Group, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Self::with_bound(name, group, d_in, d_out, bound, rng)
    }

    pub fn with_bound<R: Rng>(name: &str, group: Group, d_in: usize, d_out: usize, bound: f64, rng: &mut R) -> Self {
        Linear {
            weight: Param::uniform(format!("{name}.weight"), group, &[d_in, d_out], bound, rng),
            bias: Param::zeros(format!("{name}.bias"), group, &[d_out]),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.d_in);
        let mut y = Vec::with_capacity(rows * self.d_out);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            rows,
            self.d_in,
            self.d_out,
            T::one(),
            View::rows(x, self.d_in),
            View::rows(&self.weight.value, self.d_out),
            T::one(),
            ViewMut::rows(&mut y, self.d_out),
        );
        y
    }

    /// Accumulates parameter gradients; returns `dx` when `need_dx`.
    pub fn backward(&mut self, x: &[T], dy: &[T], rows: usize, need_dx: bool) -> Option<Vec<T>> {
        debug_assert_eq!(dy.len(), rows * self.d_out);
        gemm(
            self.d_in,
            rows,
            self.d_out,
            T::one(),
            View::t(x, self.d_in),
            View::rows(dy, self.d_out),
            T::one(),
            ViewMut::rows(&mut self.weight.grad, self.d_out),
        );
        for row in dy.chunks(self.d_out) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.d_in];
            gemm(
                rows,
                self.d_out,
                self.d_in,
                T::one(),
                View::rows(dy, self.d_out),
                View::t(&self.weight.value, self.d_out),
                T::zero(),
                ViewMut::rows(&mut dx, self.d_in),
            );
            dx
        })
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Token lookup table `[vocab, dim]`; rows are scaled by `sqrt(dim)` on lookup.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    pub table: Param<T>,
    pub vocab: usize,
    pub dim: usize,
}

impl<T: Real> Embedding<T> {
    pub fn new<R: Rng>(name: &str, group: Group, vocab: usize, dim: usize, rng: &mut R) -> Self {
        Embedding {
            table: Param::normal(format!("{name}.table"), group, &[vocab, dim], 1.0 / (dim as f64).sqrt(), rng),
            vocab,
            dim,
        }
    }

    fn scale(&self) -> T {
        T::lit((self.dim as f64).sqrt())
    }

    pub fn forward(&self, ids: &[u32]) -> Vec<T> {
        let s = self.scale();
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            let row = &self.table.value[id as usize * self.dim..(id as usize + 1) * self.dim];
            out.extend(row.iter().map(|&v| v * s));
        }
        out
    }

    pub fn backward(&mut self, ids: &[u32], dy: &[T]) {
        let s = self.scale();
        for (&id, d) in ids.iter().zip(dy.chunks(self.dim)) {
            let row = &mut self.table.grad[id as usize * self.dim..(id as usize + 1) * self.dim];
            for (g, &v) in row.iter_mut().zip(d) {
                *g += v * s;
            }
        }
    }
}
