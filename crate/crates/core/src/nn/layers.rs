use rand::Rng;

use super::{matmul_at, matmul_bt, matmul, Grads, Init, ParamId, ParamStore, Real};
use crate::voldata::{flat_index, voxel_count, Shape3};

/// Affine map over rows: `y = x W^T + b`, `W` stored `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, bias: bool, init: Init, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.weight"), &[out_dim, in_dim], init, rng);
        let b = bias.then(|| ps.add(format!("{name}.bias"), &[out_dim], Init::Zeros, rng));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = vec![T::zero(); rows * self.out_dim];
        if let Some(b) = self.b {
            let b = ps.get(b);
            for r in y.chunks_exact_mut(self.out_dim) {
                r.copy_from_slice(b);
            }
            matmul_bt(rows, self.in_dim, self.out_dim, x, ps.get(self.w), T::one(), &mut y);
        } else {
            matmul_bt(rows, self.in_dim, self.out_dim, x, ps.get(self.w), T::zero(), &mut y);
        }
        y
    }

    /// Accumulates parameter gradients; returns `dx` when `want_dx`.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], dy: &[T], rows: usize, grads: &mut Grads<T>, want_dx: bool) -> Vec<T> {
        matmul_at(self.out_dim, rows, self.in_dim, dy, x, T::one(), grads.slot(self.w));
        if let Some(b) = self.b {
            let gb = grads.slot(b);
            for r in dy.chunks_exact(self.out_dim) {
                for (g, &v) in gb.iter_mut().zip(r) {
                    *g += v;
                }
            }
        }
        if !want_dx {
            return Vec::new();
        }
        let mut dx = vec![T::zero(); rows * self.in_dim];
        matmul(rows, self.out_dim, self.in_dim, dy, ps.get(self.w), T::zero(), &mut dx);
        dx
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

/// Normalization over the channel axis of each row.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: ps.add(format!("{name}.weight"), &[dim], Init::Ones, rng),
            beta: ps.add(format!("{name}.bias"), &[dim], Init::Zeros, rng),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> (Vec<T>, LnCache<T>) {
        let d = self.dim;
        let g = ps.get(self.gamma);
        let b = ps.get(self.beta);
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = T::one() / T::of(d as f64);
        for ((xr, yr), hr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).zip(xhat.chunks_exact_mut(d)) {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            for i in 0..d {
                let h = (xr[i] - mean) * r;
                hr[i] = h;
                yr[i] = h * g[i] + b[i];
            }
            rstd.push(r);
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn infer<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> Vec<T> {
        self.forward(ps, x).0
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &LnCache<T>, dy: &[T], grads: &mut Grads<T>) -> Vec<T> {
        let d = self.dim;
        let g = ps.get(self.gamma);
        {
            let gg = grads.slot(self.gamma);
            for (dr, hr) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                for i in 0..d {
                    gg[i] += dr[i] * hr[i];
                }
            }
        }
        {
            let gb = grads.slot(self.beta);
            for dr in dy.chunks_exact(d) {
                for i in 0..d {
                    gb[i] += dr[i];
                }
            }
        }
        let inv_d = T::one() / T::of(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for (((dr, hr), xr), &r) in dy
            .chunks_exact(d)
            .zip(cache.xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .zip(&cache.rstd)
        {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for i in 0..d {
                let dh = dr[i] * g[i];
                m1 += dh;
                m2 += dh * hr[i];
            }
            m1 = m1 * inv_d;
            m2 = m2 * inv_d;
            for i in 0..d {
                xr[i] = r * (dr[i] * g[i] - m1 - hr[i] * m2);
            }
        }
        dx
    }
}

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K1: f64 = 0.044_715;

/// `tanh(k0 (v + k1 v^3))` for every element, via one exponential each.
fn gelu_tanh<T: Real>(x: &[T]) -> Vec<T> {
    let (k0, k1, two) = (T::of(GELU_K0), T::of(GELU_K1), T::of(2.0));
    let lim = T::of(40.0);
    let mut e: Vec<T> = x.iter().map(|&v| (two * k0 * (v + k1 * v * v * v)).max(-lim).min(lim)).collect();
    T::exp_in_place(&mut e);
    e.iter_mut().for_each(|v| *v = T::one() - two / (*v + T::one()));
    e
}

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let half = T::of(0.5);
    let mut t = gelu_tanh(x);
    for (t, &v) in t.iter_mut().zip(x) {
        *t = half * v * (T::one() + *t);
    }
    t
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let (k0, k1, half, three) = (T::of(GELU_K0), T::of(GELU_K1), T::of(0.5), T::of(3.0));
    let mut t = gelu_tanh(x);
    for ((t, &v), &g) in t.iter_mut().zip(x).zip(dy) {
        let d = half * (T::one() + *t) + half * v * (T::one() - *t * *t) * k0 * (T::one() + three * k1 * v * v);
        *t = g * d;
    }
    t
}

/// Same-padded, stride-1 3D convolution over a channels-last grid.
#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub kernel: usize,
    pub lin: Linear,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3d {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_ch * kernel.pow(3);
        let lin = Linear::new(ps, name, fan_in, out_ch, true, Init::Kaiming { fan_in }, rng);
        Self {
            kernel,
            lin,
            in_ch,
            out_ch,
        }
    }

    /// Column matrix `[voxels, k^3 * in_ch]` with zero padding.
    fn im2col<T: Real>(&self, x: &[T], dims: Shape3) -> Vec<T> {
        let k = self.kernel as i64;
        let r = k / 2;
        let c = self.in_ch;
        let n = voxel_count(dims);
        let width = (k * k * k) as usize * c;
        let mut cols = vec![T::zero(); n * width];
        let mut row = 0;
        for z in 0..dims[0] as i64 {
            for y in 0..dims[1] as i64 {
                for x0 in 0..dims[2] as i64 {
                    let out = &mut cols[row * width..(row + 1) * width];
                    let mut tap = 0;
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (zz, yy, xx) = (z + dz, y + dy, x0 + dx);
                                if zz >= 0 && yy >= 0 && xx >= 0 && zz < dims[0] as i64 && yy < dims[1] as i64 && xx < dims[2] as i64 {
                                    let src = flat_index(dims, zz as usize, yy as usize, xx as usize) * c;
                                    out[tap * c..(tap + 1) * c].copy_from_slice(&x[src..src + c]);
                                }
                                tap += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, dcols: &[T], dims: Shape3) -> Vec<T> {
        let k = self.kernel as i64;
        let r = k / 2;
        let c = self.in_ch;
        let width = (k * k * k) as usize * c;
        let mut dx = vec![T::zero(); voxel_count(dims) * c];
        let mut row = 0;
        for z in 0..dims[0] as i64 {
            for y in 0..dims[1] as i64 {
                for x0 in 0..dims[2] as i64 {
                    let src = &dcols[row * width..(row + 1) * width];
                    let mut tap = 0;
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx_ in -r..=r {
                                let (zz, yy, xx) = (z + dz, y + dy, x0 + dx_);
                                if zz >= 0 && yy >= 0 && xx >= 0 && zz < dims[0] as i64 && yy < dims[1] as i64 && xx < dims[2] as i64 {
                                    let dst = flat_index(dims, zz as usize, yy as usize, xx as usize) * c;
                                    for i in 0..c {
                                        dx[dst + i] += src[tap * c + i];
                                    }
                                }
                                tap += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        dx
    }

    /// Returns the output and the layer input as seen by the matmul (the
    /// column matrix for kernels above 1).
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], dims: Shape3) -> (Vec<T>, Vec<T>) {
        let n = voxel_count(dims);
        if self.kernel == 1 {
            (self.lin.forward(ps, x, n), x.to_vec())
        } else {
            let cols = self.im2col(x, dims);
            (self.lin.forward(ps, &cols, n), cols)
        }
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cached: &[T], dy: &[T], dims: Shape3, grads: &mut Grads<T>) -> Vec<T> {
        let n = voxel_count(dims);
        let d = self.lin.backward(ps, cached, dy, n, grads, true);
        if self.kernel == 1 {
            d
        } else {
            self.col2im(&d, dims)
        }
    }
}

/// Transposed convolution with kernel 2 and stride 2: doubles each spatial
/// extent. Weight rows are ordered `(dz, dy, dx, out_channel)`.
#[derive(Debug, Clone, Copy)]
pub struct UpConv {
    pub lin: Linear,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl UpConv {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let lin = Linear::new(ps, name, in_ch, 8 * out_ch, false, Init::Kaiming { fan_in: in_ch }, rng);
        let bias = ps.add(format!("{name}.bias"), &[out_ch], Init::Zeros, rng);
        Self { lin, bias, in_ch, out_ch }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], dims: Shape3) -> Vec<T> {
        let n = voxel_count(dims);
        let t = self.lin.forward(ps, x, n);
        let od = dims.map(|d| 2 * d);
        let c = self.out_ch;
        let b = ps.get(self.bias);
        let mut y = vec![T::zero(); 8 * n * c];
        for z in 0..dims[0] {
            for yy in 0..dims[1] {
                for x0 in 0..dims[2] {
                    let src = &t[flat_index(dims, z, yy, x0) * 8 * c..][..8 * c];
                    for s in 0..8 {
                        let (a, bb, cc) = (s >> 2, (s >> 1) & 1, s & 1);
                        let dst = flat_index(od, 2 * z + a, 2 * yy + bb, 2 * x0 + cc) * c;
                        for o in 0..c {
                            y[dst + o] = src[s * c + o] + b[o];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], dy: &[T], dims: Shape3, grads: &mut Grads<T>) -> Vec<T> {
        let n = voxel_count(dims);
        let od = dims.map(|d| 2 * d);
        let c = self.out_ch;
        let mut dt = vec![T::zero(); n * 8 * c];
        {
            let gb = grads.slot(self.bias);
            for r in dy.chunks_exact(c) {
                for o in 0..c {
                    gb[o] += r[o];
                }
            }
        }
        for z in 0..dims[0] {
            for yy in 0..dims[1] {
                for x0 in 0..dims[2] {
                    let dst = flat_index(dims, z, yy, x0) * 8 * c;
                    for s in 0..8 {
                        let (a, bb, cc) = (s >> 2, (s >> 1) & 1, s & 1);
                        let src = flat_index(od, 2 * z + a, 2 * yy + bb, 2 * x0 + cc) * c;
                        dt[dst + s * c..dst + (s + 1) * c].copy_from_slice(&dy[src..src + c]);
                    }
                }
            }
        }
        self.lin.backward(ps, x, &dt, n, grads, true)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    /// Checks `backward` against central differences of `loss = <forward(p), r>`.
    pub(crate) fn fd_check(
        ps: &mut ParamStore<f64>,
        input: &mut Vec<f64>,
        forward: &dyn Fn(&ParamStore<f64>, &[f64]) -> Vec<f64>,
        backward: &dyn Fn(&ParamStore<f64>, &[f64], &[f64], &mut Grads<f64>) -> Vec<f64>,
        seed: u64,
    ) {
        let mut rng = crate::rng::stream(seed);
        let out = forward(ps, input);
        let r: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |ps: &ParamStore<f64>, x: &[f64]| -> f64 { forward(ps, x).iter().zip(&r).map(|(a, b)| a * b).sum() };
        let mut grads = Grads::new(ps);
        let dx = backward(ps, input, &r, &mut grads);
        let eps = 1e-6;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let tol = 1e-5 * analytic.abs().max(numeric.abs()) + 1e-8;
            assert!((analytic - numeric).abs() < tol, "{what}: analytic {analytic} numeric {numeric}");
        };
        for i in 0..input.len() {
            let orig = input[i];
            input[i] = orig + eps;
            let lp = loss(ps, input);
            input[i] = orig - eps;
            let lm = loss(ps, input);
            input[i] = orig;
            check(dx[i], (lp - lm) / (2.0 * eps), &format!("input[{i}]"));
        }
        for p in 0..ps.len() {
            let id = ParamId(p);
            for i in 0..ps.get(id).len() {
                let orig = ps.get(id)[i];
                ps.get_mut(id)[i] = orig + eps;
                let lp = loss(ps, input);
                ps.get_mut(id)[i] = orig - eps;
                let lm = loss(ps, input);
                ps.get_mut(id)[i] = orig;
                let a = grads.get(id).map_or(0.0, |g| g[i]);
                check(a, (lp - lm) / (2.0 * eps), &format!("{}[{i}]", ps.entries()[p].name));
            }
        }
    }

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn perturb(ps: &mut ParamStore<f64>, seed: u64) {
        let mut rng = crate::rng::stream(seed);
        for e in ps.entries_mut() {
            for v in &mut e.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = crate::rng::stream(0);
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, "l", 4, 3, true, Init::TruncNormal(0.5), &mut rng);
        perturb(&mut ps, 1);
        let mut x = random_input(5 * 4, 2);
        fd_check(&mut ps, &mut x, &|ps, x| lin.forward(ps, x, 5), &|ps, x, dy, g| lin.backward(ps, x, dy, 5, g, true), 3);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = crate::rng::stream(0);
        let mut ps = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "n", 6, &mut rng);
        perturb(&mut ps, 1);
        let mut x = random_input(4 * 6, 2);
        fd_check(&mut ps, &mut x, &|ps, x| ln.forward(ps, x).0, &|ps, x, dy, g| {
            let (_, c) = ln.forward(ps, x);
            ln.backward(ps, &c, dy, g)
        }, 3);
    }

    #[test]
    fn gelu_gradient_and_values() {
        let mut ps = ParamStore::<f64>::new();
        let mut x = random_input(12, 5).into_iter().map(|v| v * 3.0).collect();
        fd_check(&mut ps, &mut x, &|_, x| gelu(x), &|_, x, dy, _| gelu_backward(x, dy), 1);
        let y = gelu(&[0.0f64, 10.0, -10.0]);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-9 && y[2].abs() < 1e-9);
    }

    #[test]
    fn conv3d_gradients() {
        for kernel in [1, 3] {
            let mut rng = crate::rng::stream(0);
            let mut ps = ParamStore::<f64>::new();
            let conv = Conv3d::new(&mut ps, "c", 2, 3, kernel, &mut rng);
            perturb(&mut ps, 1);
            let dims = [2, 3, 2];
            let mut x = random_input(12 * 2, 2);
            fd_check(&mut ps, &mut x, &|ps, x| conv.forward(ps, x, dims).0, &|ps, x, dy, g| {
                let (_, cols) = conv.forward(ps, x, dims);
                conv.backward(ps, &cols, dy, dims, g)
            }, 3);
        }
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut rng = crate::rng::stream(0);
        let mut ps = ParamStore::<f64>::new();
        let conv = Conv3d::new(&mut ps, "c", 1, 1, 3, &mut rng);
        let dims = [3, 3, 3];
        let x = random_input(27, 4);
        let (y, _) = conv.forward(&ps, &x, dims);
        let w = ps.get(conv.lin.w);
        // Centre voxel sees the whole input.
        let direct: f64 = (0..27).map(|t| w[t] * x[t]).sum();
        assert!((y[13] - direct).abs() < 1e-12);
    }

    #[test]
    fn upconv_gradients_and_shape() {
        let mut rng = crate::rng::stream(0);
        let mut ps = ParamStore::<f64>::new();
        let up = UpConv::new(&mut ps, "u", 3, 2, &mut rng);
        perturb(&mut ps, 1);
        let dims = [1, 2, 1];
        let mut x = random_input(2 * 3, 2);
        assert_eq!(up.forward(&ps, &x, dims).len(), 2 * 4 * 2 * 2);
        fd_check(&mut ps, &mut x, &|ps, x| up.forward(ps, x, dims), &|ps, x, dy, g| up.backward(ps, x, dy, dims, g), 3);
    }
}
