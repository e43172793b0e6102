//! Small dense kernels for the skinny products of convolution backward passes,
//! where general gemm packing overhead dominates.

use crate::scalar::Scalar;

const LANES: usize = 8;
const ROWS: usize = 4;

/// `c[i * ldc + j] += Σ_t a[i * lda + t] · b[j * ldb + t]` for `i < m`, `j < n`,
/// `t < len`: every row of `a` dotted with every row of `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dot_rows<T: Scalar>(
    m: usize,
    n: usize,
    len: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * lda + len <= a.len(), "dot_rows: a out of bounds");
    assert!((n - 1) * ldb + len <= b.len(), "dot_rows: b out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "dot_rows: c out of bounds");
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { dot_rows_avx2(m, n, len, a, lda, b, ldb, c, ldc) };
            return;
        }
    }
    dot_rows_body(m, n, len, a, lda, b, ldb, c, ldc);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn dot_rows_avx2<T: Scalar>(
    m: usize,
    n: usize,
    len: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    dot_rows_body(m, n, len, a, lda, b, ldb, c, ldc);
}

/// Same summation order on every code path, so results do not depend on the CPU.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn dot_rows_body<T: Scalar>(
    m: usize,
    n: usize,
    len: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    let full = len / LANES * LANES;
    let mut i = 0;
    while i < m {
        let rows = ROWS.min(m - i);
        let mut ar: [&[T]; ROWS] = [&[]; ROWS];
        for r in 0..ROWS {
            let ii = i + r.min(rows - 1);
            ar[r] = &a[ii * lda..ii * lda + len];
        }
        for j in 0..n {
            let br = &b[j * ldb..j * ldb + len];
            let mut acc = [[T::zero(); LANES]; ROWS];
            let mut t = 0;
            while t < full {
                let bl: &[T; LANES] = br[t..t + LANES].try_into().expect("lane chunk");
                for r in 0..ROWS {
                    let al: &[T; LANES] = ar[r][t..t + LANES].try_into().expect("lane chunk");
                    for l in 0..LANES {
                        acc[r][l] += al[l] * bl[l];
                    }
                }
                t += LANES;
            }
            for r in 0..rows {
                let mut s = T::zero();
                for l in 0..LANES {
                    s += acc[r][l];
                }
                for tt in full..len {
                    s += ar[r][tt] * br[tt];
                }
                c[(i + r) * ldc + j] += s;
            }
        }
        i += rows;
    }
}

const COLS: usize = 16;

/// `c[i * ldc + j] (+)= Σ_t a[i * a_rs + t * a_cs] · b[t * ldb + j]` for `i < m`,
/// `j < n`, `t < len`, adding to `c` when `accumulate` is set and overwriting it
/// otherwise. The left operand may be strided arbitrarily (it is packed
/// per block of rows); rows of `b` and `c` must be contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mul_acc<T: Scalar>(
    m: usize,
    n: usize,
    len: usize,
    a: &[T],
    (a_rs, a_cs): (usize, usize),
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if len == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(T::zero());
            }
        }
        return;
    }
    assert!((m - 1) * a_rs + (len - 1) * a_cs < a.len(), "mul_acc: a out of bounds");
    assert!((len - 1) * ldb + n <= b.len(), "mul_acc: b out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "mul_acc: c out of bounds");
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU supports AVX2 and FMA, checked just above.
            unsafe {
                if accumulate {
                    mul_acc_avx2::<T, true>(m, n, len, a, (a_rs, a_cs), b, ldb, c, ldc)
                } else {
                    mul_acc_avx2::<T, false>(m, n, len, a, (a_rs, a_cs), b, ldb, c, ldc)
                }
            };
            return;
        }
    }
    if accumulate {
        mul_acc_body::<T, true>(m, n, len, a, (a_rs, a_cs), b, ldb, c, ldc);
    } else {
        mul_acc_body::<T, false>(m, n, len, a, (a_rs, a_cs), b, ldb, c, ldc);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn mul_acc_avx2<T: Scalar, const ACC: bool>(
    m: usize,
    n: usize,
    len: usize,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    mul_acc_body::<T, ACC>(m, n, len, a, a_strides, b, ldb, c, ldc);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn mul_acc_body<T: Scalar, const ACC: bool>(
    m: usize,
    n: usize,
    len: usize,
    a: &[T],
    (a_rs, a_cs): (usize, usize),
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    let full = n / COLS * COLS;
    let mut packed = vec![[T::zero(); ROWS]; len];
    let mut i = 0;
    while i < m {
        let rows = ROWS.min(m - i);
        for (t, slot) in packed.iter_mut().enumerate() {
            for r in 0..rows {
                slot[r] = a[(i + r) * a_rs + t * a_cs];
            }
            for v in slot.iter_mut().skip(rows) {
                *v = T::zero();
            }
        }
        let mut j = 0;
        while j < full {
            let mut acc = [[T::zero(); COLS]; ROWS];
            for (t, ar) in packed.iter().enumerate() {
                let bl: &[T; COLS] = b[t * ldb + j..t * ldb + j + COLS].try_into().expect("column chunk");
                for r in 0..ROWS {
                    for l in 0..COLS {
                        acc[r][l] = ar[r].mul_add(bl[l], acc[r][l]);
                    }
                }
            }
            for r in 0..rows {
                let cr = &mut c[(i + r) * ldc + j..(i + r) * ldc + j + COLS];
                if ACC {
                    for l in 0..COLS {
                        cr[l] += acc[r][l];
                    }
                } else {
                    for l in 0..COLS {
                        cr[l] = acc[r][l];
                    }
                }
            }
            j += COLS;
        }
        for jj in full..n {
            let mut acc = [T::zero(); ROWS];
            for (t, ar) in packed.iter().enumerate() {
                let bv = b[t * ldb + jj];
                for r in 0..ROWS {
                    acc[r] = ar[r].mul_add(bv, acc[r]);
                }
            }
            for r in 0..rows {
                let cv = &mut c[(i + r) * ldc + jj];
                *cv = if ACC { *cv + acc[r] } else { acc[r] };
            }
        }
        i += rows;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_naive_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(m, n, len) in &[(1, 1, 1), (3, 5, 7), (8, 75, 1024), (5, 2, 19), (9, 3, 16)] {
            let (lda, ldb) = (len + 3, len + 1);
            let a: Vec<f64> = (0..m * lda).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n * ldb).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c: Vec<f64> = (0..m * n).map(|v| v as f64).collect();
            let c0 = c.clone();
            dot_rows(m, n, len, &a, lda, &b, ldb, &mut c, n);
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = c0[i * n + j] + (0..len).map(|t| a[i * lda + t] * b[j * ldb + t]).sum::<f64>();
                    assert!((c[i * n + j] - want).abs() < 1e-10, "{m}x{n}x{len} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn mul_acc_matches_naive_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(m, n, len) in &[(1, 1, 1), (3, 17, 7), (8, 100, 75), (5, 33, 2), (9, 16, 3)] {
            let (a_rs, a_cs) = if m % 2 == 0 { (len, 1) } else { (1, m) };
            let ldb = n + 2;
            let a: Vec<f64> = (0..m * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..len * ldb).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ldc = n + 1;
            let mut c: Vec<f64> = (0..m * ldc).map(|v| v as f64).collect();
            let c0 = c.clone();
            mul_acc(m, n, len, &a, (a_rs, a_cs), &b, ldb, &mut c, ldc, true);
            let mut fresh = c.clone();
            mul_acc(m, n, len, &a, (a_rs, a_cs), &b, ldb, &mut fresh, ldc, false);
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = c0[i * ldc + j] + (0..len).map(|t| a[i * a_rs + t * a_cs] * b[t * ldb + j]).sum::<f64>();
                    assert!((c[i * ldc + j] - want).abs() < 1e-10, "{m}x{n}x{len} at ({i},{j})");
                }
                for j in 0..n {
                    assert!((fresh[i * ldc + j] - (c[i * ldc + j] - c0[i * ldc + j])).abs() < 1e-10);
                }
                assert_eq!(c[i * ldc + n], c0[i * ldc + n], "padding column touched");
            }
        }
    }
}
