//! Window partitioning, cyclic shifts and the attention layout used by
//! windowed self-attention.

use super::TokenGrid;
use crate::voldata::{flat_index, voxel_count, Shape3};
use crate::{Error, Result};

/// Windows cut from a zero-padded grid, in z-major window order. Each block
/// holds `window^3` tokens of `channels` values.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBlocks<T> {
    pub window: usize,
    pub channels: usize,
    pub resolution: Shape3,
    pub pad: Shape3,
    pub blocks: Vec<Vec<T>>,
}

fn padded(resolution: Shape3, window: usize) -> Shape3 {
    resolution.map(|d| d.div_ceil(window) * window)
}

pub fn window_partition<T: Copy + Default>(grid: &TokenGrid<T>, window: usize) -> Result<WindowBlocks<T>> {
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    let res = grid.dims;
    let c = grid.channels;
    let p = padded(res, window);
    let counts = p.map(|d| d / window);
    let mut blocks = Vec::with_capacity(voxel_count(counts));
    for wz in 0..counts[0] {
        for wy in 0..counts[1] {
            for wx in 0..counts[2] {
                let mut block = vec![T::default(); window.pow(3) * c];
                let mut t = 0;
                for z in wz * window..(wz + 1) * window {
                    for y in wy * window..(wy + 1) * window {
                        for x in wx * window..(wx + 1) * window {
                            if z < res[0] && y < res[1] && x < res[2] {
                                let src = flat_index(res, z, y, x) * c;
                                block[t * c..(t + 1) * c].copy_from_slice(&grid.data[src..src + c]);
                            }
                            t += 1;
                        }
                    }
                }
                blocks.push(block);
            }
        }
    }
    Ok(WindowBlocks {
        window,
        channels: c,
        resolution: res,
        pad: [0, 1, 2].map(|a| p[a] - res[a]),
        blocks,
    })
}

/// Inverse of [`window_partition`]; padding is dropped.
pub fn window_reverse<T: Copy + Default>(blocks: &[Vec<T>], window: usize, resolution: Shape3, pad: Shape3) -> Result<TokenGrid<T>> {
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    let p = [0, 1, 2].map(|a| resolution[a] + pad[a]);
    if p.iter().any(|d| d % window != 0) {
        return Err(Error::invalid(format!("padded resolution {p:?} is not a multiple of window {window}")));
    }
    let counts = p.map(|d| d / window);
    if blocks.len() != voxel_count(counts) {
        return Err(Error::invalid(format!("expected {} windows, got {}", voxel_count(counts), blocks.len())));
    }
    let vol = window.pow(3);
    let c = blocks.first().map_or(0, |b| b.len() / vol);
    if blocks.iter().any(|b| b.len() != vol * c) {
        return Err(Error::invalid("window blocks have inconsistent sizes"));
    }
    let mut data = vec![T::default(); voxel_count(resolution) * c];
    let mut bi = 0;
    for wz in 0..counts[0] {
        for wy in 0..counts[1] {
            for wx in 0..counts[2] {
                let block = &blocks[bi];
                bi += 1;
                let mut t = 0;
                for z in wz * window..(wz + 1) * window {
                    for y in wy * window..(wy + 1) * window {
                        for x in wx * window..(wx + 1) * window {
                            if z < resolution[0] && y < resolution[1] && x < resolution[2] {
                                let dst = flat_index(resolution, z, y, x) * c;
                                data[dst..dst + c].copy_from_slice(&block[t * c..(t + 1) * c]);
                            }
                            t += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(TokenGrid::new(resolution, c, data))
}

/// Cyclic roll: the token at `p` moves to `(p + shift) mod dims`.
pub fn roll<T: Copy + Default>(grid: &TokenGrid<T>, shift: [isize; 3]) -> TokenGrid<T> {
    let d = grid.dims;
    let c = grid.channels;
    let mut out = vec![T::default(); grid.data.len()];
    let wrap = |p: usize, s: isize, n: usize| (p as isize + s).rem_euclid(n as isize) as usize;
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let src = flat_index(d, z, y, x) * c;
                let dst = flat_index(d, wrap(z, shift[0], d[0]), wrap(y, shift[1], d[1]), wrap(x, shift[2], d[2])) * c;
                out[dst..dst + c].copy_from_slice(&grid.data[src..src + c]);
            }
        }
    }
    TokenGrid::new(d, c, out)
}

/// Number of distinct relative offsets for a window: `(2w - 1)^3`.
pub fn relative_table_len(window: usize) -> usize {
    (2 * window - 1).pow(3)
}

/// Index into the relative-bias table for the offset `a - b` (local window
/// coordinates).
#[inline]
pub fn relative_index(window: usize, a: [u8; 3], b: [u8; 3]) -> usize {
    let span = 2 * window - 1;
    let off = |i: usize| (a[i] as usize + window - 1) - b[i] as usize;
    (off(0) * span + off(1)) * span + off(2)
}

/// Full `(w^3) x (w^3)` relative index table for an unpadded window.
pub fn relative_index_table(window: usize) -> Vec<usize> {
    let coords: Vec<[u8; 3]> = (0..window.pow(3))
        .map(|t| [(t / (window * window)) as u8, ((t / window) % window) as u8, (t % window) as u8])
        .collect();
    let mut out = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            out.push(relative_index(window, *a, *b));
        }
    }
    out
}

/// Real tokens of one attention window after shifting and padding.
#[derive(Debug, Clone, Default)]
pub struct WindowTokens {
    /// Row in the unshifted, unpadded token grid.
    pub tokens: Vec<u32>,
    /// Position inside the window.
    pub coords: Vec<[u8; 3]>,
    /// Pre-shift region; tokens attend only within their region.
    pub region: Vec<u8>,
    /// True when every token shares one region.
    pub uniform: bool,
    /// Index into [`AttentionLayout::patterns`].
    pub pattern: usize,
}

/// Token arrangement shared by windows with identical coordinates and
/// regions: relative-bias indices, or `None` where attention is masked.
#[derive(Debug, Clone)]
pub struct WindowPattern {
    pub len: usize,
    pub rel: Vec<Option<u32>>,
}

/// How a grid is carved into attention windows for one block type.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub dims: Shape3,
    /// Effective window per axis (clamped to the grid extent).
    pub window: Shape3,
    pub shift: Shape3,
    pub windows: Vec<WindowTokens>,
    pub patterns: Vec<WindowPattern>,
}

impl AttentionLayout {
    /// Windows of size `min(window, dim)` per axis; when `shifted`, axes
    /// longer than their window are rolled back by half a window. Pad tokens
    /// never enter a window.
    pub fn new(dims: Shape3, window: usize, shifted: bool) -> Self {
        let table_window = window;
        let win = dims.map(|d| window.min(d).max(1));
        let shift = [0, 1, 2].map(|a| if shifted && dims[a] > win[a] { win[a] / 2 } else { 0 });
        let p = [0, 1, 2].map(|a| dims[a].div_ceil(win[a]) * win[a]);
        let counts = [0, 1, 2].map(|a| p[a] / win[a]);
        // Region of a shifted coordinate along one axis.
        let region = |a: usize, q: usize| -> u8 {
            if shift[a] == 0 || q < p[a] - win[a] {
                0
            } else if q < p[a] - shift[a] {
                1
            } else {
                2
            }
        };
        let mut windows = Vec::with_capacity(voxel_count(counts));
        let mut patterns = Vec::new();
        let mut seen = std::collections::HashMap::new();
        for wz in 0..counts[0] {
            for wy in 0..counts[1] {
                for wx in 0..counts[2] {
                    let mut w = WindowTokens::default();
                    for lz in 0..win[0] {
                        for ly in 0..win[1] {
                            for lx in 0..win[2] {
                                let q = [wz * win[0] + lz, wy * win[1] + ly, wx * win[2] + lx];
                                let src = [0, 1, 2].map(|a| (q[a] + shift[a]) % p[a]);
                                if (0..3).any(|a| src[a] >= dims[a]) {
                                    continue;
                                }
                                w.tokens.push(flat_index(dims, src[0], src[1], src[2]) as u32);
                                w.coords.push([lz as u8, ly as u8, lx as u8]);
                                w.region.push(region(0, q[0]) * 9 + region(1, q[1]) * 3 + region(2, q[2]));
                            }
                        }
                    }
                    if !w.tokens.is_empty() {
                        w.uniform = w.region.iter().all(|&r| r == w.region[0]);
                        let key = (w.coords.clone(), w.region.clone());
                        let next = patterns.len();
                        w.pattern = *seen.entry(key).or_insert(next);
                        if w.pattern == next {
                            let t = w.tokens.len();
                            let mut rel = Vec::with_capacity(t * t);
                            for i in 0..t {
                                for j in 0..t {
                                    rel.push((w.region[i] == w.region[j]).then(|| relative_index(table_window, w.coords[i], w.coords[j]) as u32));
                                }
                            }
                            patterns.push(WindowPattern { len: t, rel });
                        }
                        windows.push(w);
                    }
                }
            }
        }
        Self {
            dims,
            window: win,
            shift,
            windows,
            patterns,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.windows.iter().map(|w| w.tokens.len()).sum()
    }
}
