//! Minimal neural-network layers with explicit backward passes.
//!
//! Every layer is generic over [`Real`] so the same code trains in `f32` and
//! is gradient-checked in `f64`. Layers hold [`ParamId`]s into a shared
//! [`ParamStore`]; backward passes accumulate into a [`Grads`] of the same
//! layout.

mod layers;
mod optim;
mod params;

pub use layers::{gelu, gelu_backward, Conv3d, LayerNorm, LnCache, Linear, UpConv};
pub use optim::{AdamW, AdamWState};
pub use params::{Grads, Init, ParamEntry, ParamId, ParamStore};

#[cfg(test)]
pub(crate) use layers::tests as layers_test_support;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the network.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static {
    /// `c = a * b + beta * c` on strided row-major operands, `a: m x k`, `b: k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, beta: Self, c: &mut [Self]);

    /// In-place `exp`; `f32` uses a vectorizable polynomial accurate to a
    /// few ulp. Inputs below the underflow threshold map to exactly zero.
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|v| *v = v.exp());
    }

    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $f:ident) => {
        impl_real!($t, $f, |xs: &mut [$t]| xs.iter_mut().for_each(|v| *v = v.exp()));
    };
    ($t:ty, $f:ident, $exp:expr) => {
        impl Real for $t {
            fn exp_in_place(xs: &mut [Self]) {
                let f = $exp;
                f(xs)
            }

            fn gemm_raw(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, beta: Self, c: &mut [Self]) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0);
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every access stays within the extents asserted above.
                unsafe {
                    matrixmultiply::$f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_real!(f32, sgemm, |xs: &mut [f32]| xs.iter_mut().for_each(|v| *v = v.exp_poly()));
impl_real!(f64, dgemm);

trait FastExp {
    fn exp_poly(self) -> Self;
}

impl FastExp for f32 {
    #[inline(always)]
    fn exp_poly(self) -> f32 {
        const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
        let x = self.min(88.0);
        let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let mut p = 1.987_569_1e-4f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 0.166_666_65;
        p = p * r + 0.5;
        let y = p * r * r + r + 1.0;
        // Biased exponent n + 127 lands in the low mantissa bits of `e`.
        let e = n.max(-126.0) + (ROUND + 127.0);
        let scale = f32::from_bits(e.to_bits().wrapping_sub(ROUND.to_bits()) << 23);
        if x < -87.0 {
            0.0
        } else {
            y * scale
        }
    }
}

/// Row-major `c (m x n) = a (m x k) * b (k x n) + beta * c`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm_raw(m, k, n, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// `c (m x n) = a (m x k) * b^T + beta * c` where `b` is stored `n x k`.
pub fn matmul_bt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm_raw(m, k, n, a, k as isize, 1, b, 1, k as isize, beta, c);
}

/// `c (m x n) = a^T * b + beta * c` where `a` is stored `k x m`, `b` is `k x n`.
pub fn matmul_at<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm_raw(m, k, n, a, 1, m as isize, b, n as isize, 1, beta, c);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_is_accurate() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x < 88.0 {
            let mut v = [x];
            f32::exp_in_place(&mut v);
            let exact = (x as f64).exp();
            worst = worst.max((v[0] as f64 - exact).abs() / exact);
            x += 0.0137;
        }
        assert!(worst < 5e-7, "worst relative error {worst}");
        let mut v = [f32::NEG_INFINITY, -100.0, 0.0];
        f32::exp_in_place(&mut v);
        assert_eq!(v, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_variants_agree_with_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                expect[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let mut c = vec![0.0; m * n];
        matmul(m, k, n, &a, &b, 0.0, &mut c);
        assert!(c.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        matmul_bt(m, k, n, &a, &bt, 0.0, &mut c);
        assert!(c.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));

        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        matmul_at(m, k, n, &at, &b, 0.0, &mut c);
        assert!(c.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
