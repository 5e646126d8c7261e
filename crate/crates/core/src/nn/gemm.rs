//! Dense matrix kernels used by every layer.
//!
//! `gemm_acc` accumulates each output element sequentially over the inner
//! dimension in increasing index order. `matmul_nt_acc` reduces over
//! contiguous rows in eight interleaved lanes combined in a fixed order.
//! Neither order depends on the instruction set, and there is no fused
//! multiply-add, so the AVX2 paths are bit-identical to the portable ones.

/// `c[m×n] += A · b[k×n]` where `A[i][p] = a[i * a_rs + p * a_cs]`.
///
/// With `a_rs = k, a_cs = 1` this is `A·B`; with `a_rs = 1, a_cs = m` (and
/// `a` stored `k×m`) it is `Aᵀ·B`.
pub fn gemm_acc(m: usize, n: usize, k: usize, a: &[f32], a_rs: usize, a_cs: usize, b: &[f32], c: &mut [f32]) {
    debug_assert!(b.len() >= k * n);
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: guarded by the runtime feature check above.
            unsafe { gemm_avx2(m, n, k, a, a_rs, a_cs, b, c) };
            return;
        }
    }
    gemm_kernel(m, n, k, a, a_rs, a_cs, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2(m: usize, n: usize, k: usize, a: &[f32], a_rs: usize, a_cs: usize, b: &[f32], c: &mut [f32]) {
    use std::arch::x86_64::*;
    assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
    assert!(b.len() >= k * n && c.len() >= m * n);
    let ap = a.as_ptr();
    let bp = b.as_ptr();
    let cp = c.as_mut_ptr();
    let n16 = n / 16 * 16;

    // 4×16 register tiles; every element still sums over p in order.
    let mut j = 0;
    while j < n16 {
        let mut i = 0;
        while i + 4 <= m {
            let mut acc = [[_mm256_setzero_ps(); 2]; 4];
            for (r, row) in acc.iter_mut().enumerate() {
                row[0] = _mm256_loadu_ps(cp.add((i + r) * n + j));
                row[1] = _mm256_loadu_ps(cp.add((i + r) * n + j + 8));
            }
            for p in 0..k {
                let b0 = _mm256_loadu_ps(bp.add(p * n + j));
                let b1 = _mm256_loadu_ps(bp.add(p * n + j + 8));
                for (r, row) in acc.iter_mut().enumerate() {
                    let ar = _mm256_set1_ps(*ap.add((i + r) * a_rs + p * a_cs));
                    row[0] = _mm256_add_ps(row[0], _mm256_mul_ps(ar, b0));
                    row[1] = _mm256_add_ps(row[1], _mm256_mul_ps(ar, b1));
                }
            }
            for (r, row) in acc.iter().enumerate() {
                _mm256_storeu_ps(cp.add((i + r) * n + j), row[0]);
                _mm256_storeu_ps(cp.add((i + r) * n + j + 8), row[1]);
            }
            i += 4;
        }
        while i < m {
            let mut c0 = _mm256_loadu_ps(cp.add(i * n + j));
            let mut c1 = _mm256_loadu_ps(cp.add(i * n + j + 8));
            for p in 0..k {
                let ar = _mm256_set1_ps(*ap.add(i * a_rs + p * a_cs));
                c0 = _mm256_add_ps(c0, _mm256_mul_ps(ar, _mm256_loadu_ps(bp.add(p * n + j))));
                c1 = _mm256_add_ps(c1, _mm256_mul_ps(ar, _mm256_loadu_ps(bp.add(p * n + j + 8))));
            }
            _mm256_storeu_ps(cp.add(i * n + j), c0);
            _mm256_storeu_ps(cp.add(i * n + j + 8), c1);
            i += 1;
        }
        j += 16;
    }
    if n16 < n {
        for i in 0..m {
            for jj in n16..n {
                let mut acc = *cp.add(i * n + jj);
                for p in 0..k {
                    acc += *ap.add(i * a_rs + p * a_cs) * *bp.add(p * n + jj);
                }
                *cp.add(i * n + jj) = acc;
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_kernel(m: usize, n: usize, k: usize, a: &[f32], a_rs: usize, a_cs: usize, b: &[f32], c: &mut [f32]) {
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * a_rs + p * a_cs];
            let a1 = a[(i + 1) * a_rs + p * a_cs];
            let a2 = a[(i + 2) * a_rs + p * a_cs];
            let a3 = a[(i + 3) * a_rs + p * a_cs];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bj = brow[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let ai = a[i * a_rs + p * a_cs];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += ai * bj;
            }
        }
        i += 1;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    gemm_acc(m, n, k, a, k, 1, b, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn_acc(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    gemm_acc(m, n, k, a, 1, m, b, c);
}

/// Lanes used by [`matmul_nt_acc`].
pub const DOT_LANES: usize = 8;

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
///
/// Each element is a dot product of two contiguous rows: lane `l` sums the
/// products at `p ≡ l (mod 8)` for `p < 8⌊k/8⌋` in increasing order, the lanes
/// are combined as `((l0+l1)+(l2+l3))+((l4+l5)+(l6+l7))`, the remaining
/// products are added in order, and the result is added to `c`.
pub fn matmul_nt_acc(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: guarded by the runtime feature check above; sizes asserted.
            unsafe { nt_avx2(m, n, k, a, b, c) };
            return;
        }
    }
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] += dot_portable(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline(always)]
fn combine_lanes(l: &[f32; DOT_LANES]) -> f32 {
    ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]))
}

fn dot_portable(x: &[f32], y: &[f32]) -> f32 {
    let k8 = x.len() / DOT_LANES * DOT_LANES;
    let mut lanes = [0f32; DOT_LANES];
    for p in (0..k8).step_by(DOT_LANES) {
        for (l, lane) in lanes.iter_mut().enumerate() {
            *lane += x[p + l] * y[p + l];
        }
    }
    let mut acc = combine_lanes(&lanes);
    for p in k8..x.len() {
        acc += x[p] * y[p];
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nt_avx2(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    use std::arch::x86_64::*;
    let ap = a.as_ptr();
    let bp = b.as_ptr();
    let k8 = k / DOT_LANES * DOT_LANES;

    let finish = |lanes: __m256, i: usize, j: usize| -> f32 {
        let mut l = [0f32; DOT_LANES];
        _mm256_storeu_ps(l.as_mut_ptr(), lanes);
        let mut acc = combine_lanes(&l);
        for p in k8..k {
            acc += *ap.add(i * k + p) * *bp.add(j * k + p);
        }
        acc
    };

    // 2×4 tiles of dot products share their row loads.
    let m2 = m / 2 * 2;
    let n4 = n / 4 * 4;
    for i in (0..m2).step_by(2) {
        for j in (0..n4).step_by(4) {
            let mut acc = [[_mm256_setzero_ps(); 4]; 2];
            for p in (0..k8).step_by(DOT_LANES) {
                let x0 = _mm256_loadu_ps(ap.add(i * k + p));
                let x1 = _mm256_loadu_ps(ap.add((i + 1) * k + p));
                for (t, y) in (0..4).map(|t| (t, _mm256_loadu_ps(bp.add((j + t) * k + p)))) {
                    acc[0][t] = _mm256_add_ps(acc[0][t], _mm256_mul_ps(x0, y));
                    acc[1][t] = _mm256_add_ps(acc[1][t], _mm256_mul_ps(x1, y));
                }
            }
            for r in 0..2 {
                for t in 0..4 {
                    c[(i + r) * n + j + t] += finish(acc[r][t], i + r, j + t);
                }
            }
        }
    }
    for i in 0..m {
        let j0 = if i < m2 { n4 } else { 0 };
        for j in j0..n {
            let mut acc = _mm256_setzero_ps();
            for p in (0..k8).step_by(DOT_LANES) {
                let x = _mm256_loadu_ps(ap.add(i * k + p));
                let y = _mm256_loadu_ps(bp.add(j * k + p));
                acc = _mm256_add_ps(acc, _mm256_mul_ps(x, y));
            }
            c[i * n + j] += finish(acc, i, j);
        }
    }
}

/// Transposes a row-major `rows×cols` matrix into `out` (`cols×rows`).
pub fn transpose(rows: usize, cols: usize, src: &[f32], out: &mut [f32]) {
    debug_assert!(src.len() >= rows * cols && out.len() >= rows * cols);
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (cix, &v) in row.iter().enumerate() {
            out[cix * rows + r] = v;
        }
    }
}
