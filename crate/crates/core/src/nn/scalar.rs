use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of tensors: `f32` for training, `f64` for
/// gradient verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices where
    /// `op(a)` is `m × k` and `op(b)` is `k × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Row-major storage of the untransposed operand.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Limit on the short side below which a direct loop beats the packed
/// kernel; packing overhead dominates when most tiles are edge tiles.
const SMALL: usize = 8;

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Direct loops for thin products; returns false when the packed kernel
/// should be used instead.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Float>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) -> bool {
    let c = &mut c[..m * n];
    if !trans_b && m.min(k) <= SMALL {
        if beta == T::zero() {
            c.iter_mut().for_each(|v| *v = T::zero());
        } else if beta != T::one() {
            c.iter_mut().for_each(|v| *v = *v * beta);
        }
        for (i, row) in c.chunks_exact_mut(n).enumerate() {
            for p in 0..k {
                let av = if trans_a { a[p * m + i] } else { a[i * k + p] } * alpha;
                if av == T::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o = *o + av * bv;
                }
            }
        }
        return true;
    }
    if trans_b && !trans_a && m <= SMALL {
        for (i, row) in c.chunks_exact_mut(n).enumerate() {
            let ar = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let d = dot(ar, &b[j * k..(j + 1) * k]) * alpha;
                *o = if beta == T::zero() { d } else { *o * beta + d };
            }
        }
        return true;
    }
    false
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if small_gemm(trans_a, trans_b, m, k, n, alpha, a, b, beta, c) {
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                // SAFETY: the asserts above bound every index touched by the
                // kernel for the given dimensions and strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
