//! Transformer block with windowed multi-head self-attention.

use rand::Rng;

use super::window::{relative_table_len, AttentionLayout};
use crate::nn::{gelu, gelu_backward, Grads, Init, LayerNorm, LnCache, Linear, ParamId, ParamStore, Real};

#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    /// Per window: `heads x T x T` attention probabilities.
    probs: Vec<Vec<T>>,
    attn: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, window: usize, mlp_ratio: usize, shifted: bool, rng: &mut impl Rng) -> Self {
        let tn = Init::TruncNormal(0.02);
        let norm1 = LayerNorm::new(ps, &format!("{name}.norm1"), dim, rng);
        let qkv = Linear::new(ps, &format!("{name}.attn.qkv"), dim, 3 * dim, true, tn, rng);
        let proj = Linear::new(ps, &format!("{name}.attn.proj"), dim, dim, true, tn, rng);
        let bias_table = ps.add(format!("{name}.attn.relative_bias"), &[relative_table_len(window), heads], tn, rng);
        ps.entries_mut()[bias_table.0].decay = false;
        let norm2 = LayerNorm::new(ps, &format!("{name}.norm2"), dim, rng);
        let fc1 = Linear::new(ps, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, true, tn, rng);
        let fc2 = Linear::new(ps, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, true, tn, rng);
        Self {
            dim,
            heads,
            window,
            shifted,
            norm1,
            qkv,
            proj,
            bias_table,
            norm2,
            fc1,
            fc2,
        }
    }

    /// `keep` retains activations for [`SwinBlock::backward`].
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], layout: &AttentionLayout, keep: bool) -> (Vec<T>, BlockCache<T>) {
        let n = x.len() / self.dim;
        let (h1, ln1) = self.norm1.forward(ps, x);
        let qkv = self.qkv.forward(ps, &h1, n);
        let (attn, probs) = self.attention(ps, &qkv, layout, keep);
        let mut y = self.proj.forward(ps, &attn, n);
        for (a, &b) in y.iter_mut().zip(x) {
            *a += b;
        }
        let (h2, ln2) = self.norm2.forward(ps, &y);
        let u = self.fc1.forward(ps, &h2, n);
        let g = gelu(&u);
        let m = self.fc2.forward(ps, &g, n);
        for (a, b) in y.iter_mut().zip(m) {
            *a += b;
        }
        let cache = if keep {
            BlockCache {
                ln1,
                h1,
                qkv,
                probs,
                attn,
                ln2,
                h2,
                u,
                g,
            }
        } else {
            BlockCache::default()
        };
        (y, cache)
    }

    /// Additive bias per pattern: `heads x T x T`, `-inf` where masked.
    fn pattern_bias<T: Real>(&self, ps: &ParamStore<T>, layout: &AttentionLayout) -> Vec<Vec<T>> {
        let table = ps.get(self.bias_table);
        layout
            .patterns
            .iter()
            .map(|p| {
                let tt = p.len * p.len;
                let mut b = vec![T::neg_infinity(); self.heads * tt];
                for (k, r) in p.rel.iter().enumerate() {
                    if let Some(r) = r {
                        for h in 0..self.heads {
                            b[h * tt + k] = table[*r as usize * self.heads + h];
                        }
                    }
                }
                b
            })
            .collect()
    }

    fn attention<T: Real>(&self, ps: &ParamStore<T>, qkv: &[T], layout: &AttentionLayout, keep: bool) -> (Vec<T>, Vec<Vec<T>>) {
        let c = self.dim;
        let hd = c / self.heads;
        let scale = T::of((hd as f64).powf(-0.5));
        let bias = self.pattern_bias(ps, layout);
        let n = qkv.len() / (3 * c);
        let mut out = vec![T::zero(); n * c];
        let mut all_probs = Vec::with_capacity(if keep { layout.windows.len() } else { 0 });
        let mut buf = Vec::new();
        let mut tmp = Vec::new();
        let mut probs = Vec::new();
        for w in &layout.windows {
            let t = w.tokens.len();
            let tt = t * t;
            let pb = &bias[w.pattern];
            gather_rows(qkv, 3 * c, &w.tokens, &mut buf);
            probs.clear();
            probs.resize(self.heads * tt, T::zero());
            tmp.resize(t * hd, T::zero());
            for h in 0..self.heads {
                let s = &mut probs[h * tt..(h + 1) * tt];
                T::gemm_raw(t, hd, t, &buf[h * hd..], 3 * c as isize, 1, &buf[c + h * hd..], 1, 3 * c as isize, T::zero(), s);
                for (row, brow) in s.chunks_exact_mut(t).zip(pb[h * tt..(h + 1) * tt].chunks_exact(t)) {
                    let mut mx = T::neg_infinity();
                    for (v, &b) in row.iter_mut().zip(brow) {
                        *v = *v * scale + b;
                        mx = mx.max(*v);
                    }
                    row.iter_mut().for_each(|v| *v = *v - mx);
                    T::exp_in_place(row);
                    let sum: T = row.iter().copied().sum();
                    let inv = T::one() / sum;
                    row.iter_mut().for_each(|v| *v = *v * inv);
                }
                T::gemm_raw(t, t, hd, s, t as isize, 1, &buf[2 * c + h * hd..], 3 * c as isize, 1, T::zero(), &mut tmp);
                for (i, &tok) in w.tokens.iter().enumerate() {
                    let dst = tok as usize * c + h * hd;
                    out[dst..dst + hd].copy_from_slice(&tmp[i * hd..(i + 1) * hd]);
                }
            }
            if keep {
                all_probs.push(std::mem::take(&mut probs));
            }
        }
        (out, all_probs)
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &BlockCache<T>, layout: &AttentionLayout, dy: &[T], grads: &mut Grads<T>) -> Vec<T> {
        assert!(!cache.h1.is_empty(), "block cache was not kept");
        let n = dy.len() / self.dim;
        // MLP branch.
        let dg = self.fc2.backward(ps, &cache.g, dy, n, grads, true);
        let du = gelu_backward(&cache.u, &dg);
        let dh2 = self.fc1.backward(ps, &cache.h2, &du, n, grads, true);
        let mut dmid = self.norm2.backward(ps, &cache.ln2, &dh2, grads);
        for (a, &b) in dmid.iter_mut().zip(dy) {
            *a += b;
        }
        // Attention branch.
        let dattn = self.proj.backward(ps, &cache.attn, &dmid, n, grads, true);
        let dqkv = self.attention_backward(cache, layout, &dattn, grads);
        let dh1 = self.qkv.backward(ps, &cache.h1, &dqkv, n, grads, true);
        let mut dx = self.norm1.backward(ps, &cache.ln1, &dh1, grads);
        for (a, &b) in dx.iter_mut().zip(&dmid) {
            *a += b;
        }
        dx
    }

    fn attention_backward<T: Real>(&self, cache: &BlockCache<T>, layout: &AttentionLayout, dout: &[T], grads: &mut Grads<T>) -> Vec<T> {
        let c = self.dim;
        let hd = c / self.heads;
        let scale = T::of((hd as f64).powf(-0.5));
        let n = dout.len() / c;
        let mut dqkv = vec![T::zero(); n * 3 * c];
        // Softmax-input gradients summed per pattern, scattered to the table at the end.
        let mut dbias: Vec<Vec<T>> = layout.patterns.iter().map(|p| vec![T::zero(); self.heads * p.len * p.len]).collect();
        let mut buf = Vec::new();
        let mut dbuf = Vec::new();
        let mut dwin = Vec::new();
        let mut ds = Vec::new();
        let mut tmp = Vec::new();
        for (w, probs) in layout.windows.iter().zip(&cache.probs) {
            let t = w.tokens.len();
            let tt = t * t;
            gather_rows(&cache.qkv, 3 * c, &w.tokens, &mut buf);
            gather_rows(dout, c, &w.tokens, &mut dbuf);
            dwin.clear();
            dwin.resize(t * 3 * c, T::zero());
            ds.resize(tt, T::zero());
            tmp.resize(t * hd, T::zero());
            let db = &mut dbias[w.pattern];
            for h in 0..self.heads {
                let a = &probs[h * tt..(h + 1) * tt];
                let d_o = &dbuf[h * hd..];
                // dA = dO V^T
                T::gemm_raw(t, hd, t, d_o, c as isize, 1, &buf[2 * c + h * hd..], 1, 3 * c as isize, T::zero(), &mut ds);
                // dV = A^T dO
                T::gemm_raw(t, t, hd, a, 1, t as isize, d_o, c as isize, 1, T::zero(), &mut tmp);
                scatter_cols(&tmp, &mut dwin, 3 * c, 2 * c + h * hd, hd);
                let dbh = &mut db[h * tt..(h + 1) * tt];
                for ((row, ar), dbr) in ds.chunks_exact_mut(t).zip(a.chunks_exact(t)).zip(dbh.chunks_exact_mut(t)) {
                    let dot: T = row.iter().zip(ar).map(|(&g, &p)| g * p).sum();
                    for ((g, &p), d) in row.iter_mut().zip(ar).zip(dbr.iter_mut()) {
                        *g = p * (*g - dot);
                        *d += *g;
                        *g = *g * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q (scale folded into dS).
                T::gemm_raw(t, t, hd, &ds, t as isize, 1, &buf[c + h * hd..], 3 * c as isize, 1, T::zero(), &mut tmp);
                scatter_cols(&tmp, &mut dwin, 3 * c, h * hd, hd);
                T::gemm_raw(t, t, hd, &ds, 1, t as isize, &buf[h * hd..], 3 * c as isize, 1, T::zero(), &mut tmp);
                scatter_cols(&tmp, &mut dwin, 3 * c, c + h * hd, hd);
            }
            for (i, &tok) in w.tokens.iter().enumerate() {
                let dst = tok as usize * 3 * c;
                dqkv[dst..dst + 3 * c].copy_from_slice(&dwin[i * 3 * c..(i + 1) * 3 * c]);
            }
        }
        let gtab = grads.slot(self.bias_table);
        for (p, db) in layout.patterns.iter().zip(&dbias) {
            let tt = p.len * p.len;
            for (k, r) in p.rel.iter().enumerate() {
                if let Some(r) = r {
                    for h in 0..self.heads {
                        gtab[*r as usize * self.heads + h] += db[h * tt + k];
                    }
                }
            }
        }
        dqkv
    }

    pub fn num_params(&self) -> usize {
        4 * self.dim + self.qkv.num_params() + self.proj.num_params() + relative_table_len(self.window) * self.heads + self.fc1.num_params() + self.fc2.num_params()
    }
}

fn gather_rows<T: Copy>(src: &[T], width: usize, rows: &[u32], out: &mut Vec<T>) {
    out.clear();
    for &r in rows {
        out.extend_from_slice(&src[r as usize * width..(r as usize + 1) * width]);
    }
}

/// Writes a `rows x width` block into columns `col..col+width` of `dst`.
fn scatter_cols<T: Copy>(src: &[T], dst: &mut [T], stride: usize, col: usize, width: usize) {
    for (i, r) in src.chunks_exact(width).enumerate() {
        dst[i * stride + col..i * stride + col + width].copy_from_slice(r);
    }
}
