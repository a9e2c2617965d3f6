use super::{Group, Param, Real};

const EPS: f64 = 1e-5;

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, group: Group, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::filled(format!("{name}.gamma"), group, &[dim], T::one()),
            beta: Param::zeros(format!("{name}.beta"), group, &[dim]),
            dim,
        }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let n = T::lit(d as f64);
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::lit(EPS)).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * self.gamma.value[j] + self.beta.value[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
        let d = self.dim;
        let n = T::lit(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); d];
        for (r, &rs) in cache.rstd.iter().enumerate() {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            let mut sum = T::zero();
            let mut sum_x = T::zero();
            for j in 0..d {
                self.gamma.grad[j] += g[j] * xh[j];
                self.beta.grad[j] += g[j];
                dxhat[j] = g[j] * self.gamma.value[j];
                sum += dxhat[j];
                sum_x += dxhat[j] * xh[j];
            }
            let mean = sum / n;
            let mean_x = sum_x / n;
            for j in 0..d {
                dx[r * d + j] = rs * (dxhat[j] - mean - xh[j] * mean_x);
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
