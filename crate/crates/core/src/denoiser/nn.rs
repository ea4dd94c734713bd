//! Layer primitives with explicit forward caches and reverse-mode backward
//! passes. Activations are `tokens × features` matrices; parameters live in
//! one flat buffer addressed through [`TensorSpec`]s.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct TensorSpec {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn view<'a>(&self, p: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(&p[self.offset..self.offset + self.len()], self.rows, self.cols)
    }

    pub fn view_mut<'a>(&self, p: &'a mut [f64]) -> DMatrixViewMut<'a, f64> {
        DMatrixViewMut::from_slice(
            &mut p[self.offset..self.offset + self.len()],
            self.rows,
            self.cols,
        )
    }

    pub fn slice<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len()]
    }

    pub fn slice_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len()]
    }
}

/// Hands out consecutive tensor slots in the flat parameter buffer.
#[derive(Default)]
pub(crate) struct Allocator {
    pub next: usize,
    pub specs: Vec<(String, TensorSpec)>,
}

impl Allocator {
    pub fn alloc(&mut self, name: String, rows: usize, cols: usize) -> TensorSpec {
        let spec = TensorSpec {
            offset: self.next,
            rows,
            cols,
        };
        self.next += rows * cols;
        self.specs.push((name, spec));
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Linear {
    pub w: TensorSpec,
    pub b: TensorSpec,
}

impl Linear {
    pub fn new(alloc: &mut Allocator, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: alloc.alloc(format!("{name}.weight"), d_in, d_out),
            b: alloc.alloc(format!("{name}.bias"), 1, d_out),
        }
    }

    pub fn forward(&self, p: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * self.w.view(p);
        let b = self.b.slice(p);
        for (c, bc) in b.iter().enumerate() {
            y.column_mut(c).add_scalar_mut(*bc);
        }
        y
    }

    /// Accumulates weight gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
        self.w.view_mut(g).gemm_tr(1.0, x, dy, 1.0);
        let gb = self.b.slice_mut(g);
        for (c, gc) in gb.iter_mut().enumerate() {
            *gc += dy.column(c).sum();
        }
        dy * self.w.view(p).transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LayerNorm {
    pub gamma: TensorSpec,
    pub beta: TensorSpec,
}

pub(crate) struct LayerNormCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(alloc: &mut Allocator, name: &str, d: usize) -> Self {
        Self {
            gamma: alloc.alloc(format!("{name}.gamma"), 1, d),
            beta: alloc.alloc(format!("{name}.beta"), 1, d),
        }
    }

    pub fn forward(&self, p: &[f64], x: &DMatrix<f64>) -> (DMatrix<f64>, LayerNormCache) {
        let (n, d) = x.shape();
        let gamma = self.gamma.slice(p);
        let beta = self.beta.slice(p);
        let mut xhat = DMatrix::zeros(n, d);
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = x.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                xhat[(r, c)] = (x[(r, c)] - mean) * inv;
            }
        }
        let mut y = xhat.clone();
        for c in 0..d {
            let mut col = y.column_mut(c);
            col *= gamma[c];
            col.add_scalar_mut(beta[c]);
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &LayerNormCache, dy: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, d) = dy.shape();
        let gamma = self.gamma.slice(p);
        {
            let gg = self.gamma.slice_mut(g);
            for c in 0..d {
                gg[c] += dy.column(c).dot(&cache.xhat.column(c));
            }
        }
        {
            let gb = self.beta.slice_mut(g);
            for c in 0..d {
                gb[c] += dy.column(c).sum();
            }
        }
        let mut dx = DMatrix::zeros(n, d);
        for r in 0..n {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                let dxh = dy[(r, c)] * gamma[c];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * cache.xhat[(r, c)];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for c in 0..d {
                let dxh = dy[(r, c)] * gamma[c];
                dx[(r, c)] =
                    cache.inv_std[r] * (dxh - mean_dxhat - cache.xhat[(r, c)] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub(crate) fn gelu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward(x: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    x.zip_map(dy, |v, g| {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let th = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
    })
}

/// Multi-head self-attention over the token set. No positional terms: the
/// layer is equivariant to token permutations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub(crate) struct AttentionCache {
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    concat: DMatrix<f64>,
}

impl SelfAttention {
    pub fn new(alloc: &mut Allocator, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(alloc, &format!("{name}.q"), d, d),
            k: Linear::new(alloc, &format!("{name}.k"), d, d),
            v: Linear::new(alloc, &format!("{name}.v"), d, d),
            o: Linear::new(alloc, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(&self, p: &[f64], x: &DMatrix<f64>) -> (DMatrix<f64>, AttentionCache) {
        let (n, d) = x.shape();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        let mut concat = DMatrix::zeros(n, d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.columns(h * dh, dh);
            let kh = k.columns(h * dh, dh);
            let vh = v.columns(h * dh, dh);
            let mut s = qh * kh.transpose() * scale;
            for r in 0..n {
                let mut row = s.row_mut(r);
                let m = row.max();
                row.apply(|e| *e = (*e - m).exp());
                let z = row.sum();
                row /= z;
            }
            concat.columns_mut(h * dh, dh).copy_from(&(&s * vh));
            probs.push(s);
        }
        let out = self.o.forward(p, &concat);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &AttentionCache, dy: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, d) = dy.shape();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.o.backward(p, g, &cache.concat, dy);
        let mut dq = DMatrix::zeros(n, d);
        let mut dk = DMatrix::zeros(n, d);
        let mut dv = DMatrix::zeros(n, d);
        for h in 0..self.heads {
            let prob = &cache.probs[h];
            let doh = dconcat.columns(h * dh, dh);
            let qh = cache.q.columns(h * dh, dh);
            let kh = cache.k.columns(h * dh, dh);
            let vh = cache.v.columns(h * dh, dh);
            dv.columns_mut(h * dh, dh).copy_from(&(prob.transpose() * doh));
            let dp = doh * vh.transpose();
            let mut ds = prob.component_mul(&dp);
            for r in 0..n {
                let dot = ds.row(r).sum();
                for c in 0..n {
                    ds[(r, c)] -= prob[(r, c)] * dot;
                }
            }
            ds *= scale;
            dq.columns_mut(h * dh, dh).copy_from(&(&ds * kh));
            dk.columns_mut(h * dh, dh).copy_from(&(ds.transpose() * qh));
        }
        let mut dx = self.q.backward(p, g, &cache.x, &dq);
        dx += self.k.backward(p, g, &cache.x, &dk);
        dx += self.v.backward(p, g, &cache.x, &dv);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    /// Checks `backward` of a scalar objective `Σ w ⊙ f(x)` against central
    /// differences for both inputs and parameters.
    fn check<F, B>(p: &mut Vec<f64>, x: &DMatrix<f64>, fwd: F, bwd: B)
    where
        F: Fn(&[f64], &DMatrix<f64>) -> DMatrix<f64>,
        B: Fn(&[f64], &mut [f64], &DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    {
        let mut seed = 99;
        let y = fwd(p, x);
        let w = DMatrix::from_fn(y.nrows(), y.ncols(), |_, _| lcg(&mut seed));
        let obj = |p: &[f64], x: &DMatrix<f64>| fwd(p, x).component_mul(&w).sum();
        let mut g = vec![0.0; p.len()];
        let dx = bwd(p, &mut g, x, &w);
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (obj(p, &xp) - obj(p, &xm)) / (2.0 * h);
            assert!((fd - dx[k]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{k}]: fd {fd} vs {}", dx[k]);
        }
        for k in 0..p.len() {
            let orig = p[k];
            p[k] = orig + h;
            let fp = obj(p, x);
            p[k] = orig - h;
            let fm = obj(p, x);
            p[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "dp[{k}]: fd {fd} vs {}", g[k]);
        }
    }

    fn random_params(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n).map(|_| lcg(&mut s)).collect()
    }

    fn random_input(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        DMatrix::from_fn(n, d, |_, _| lcg(&mut s))
    }

    #[test]
    fn linear_backward() {
        let mut a = Allocator::default();
        let lin = Linear::new(&mut a, "l", 4, 3);
        let mut p = random_params(a.next, 1);
        let x = random_input(5, 4, 2);
        check(&mut p, &x, |p, x| lin.forward(p, x), |p, g, x, dy| lin.backward(p, g, x, dy));
    }

    #[test]
    fn layer_norm_backward() {
        let mut a = Allocator::default();
        let ln = LayerNorm::new(&mut a, "ln", 6);
        let mut p = random_params(a.next, 3);
        let x = random_input(4, 6, 4);
        check(
            &mut p,
            &x,
            |p, x| ln.forward(p, x).0,
            |p, g, x, dy| {
                let (_, c) = ln.forward(p, x);
                ln.backward(p, g, &c, dy)
            },
        );
    }

    #[test]
    fn attention_backward() {
        let mut a = Allocator::default();
        let att = SelfAttention::new(&mut a, "att", 6, 2);
        let mut p = random_params(a.next, 5);
        let x = random_input(4, 6, 6);
        check(
            &mut p,
            &x,
            |p, x| att.forward(p, x).0,
            |p, g, x, dy| {
                let (_, c) = att.forward(p, x);
                att.backward(p, g, &c, dy)
            },
        );
    }

    #[test]
    fn gelu_backward_matches() {
        let x = random_input(3, 5, 7);
        let mut p = Vec::new();
        check(&mut p, &x, |_, x| gelu(x), |_, _, x, dy| gelu_backward(x, dy));
    }
}
