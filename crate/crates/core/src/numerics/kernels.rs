//! Matrix-product kernels. Every output element is produced by one loop
//! with a fixed summation order, independent of the other rows.

use crate::Scalar;

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += A[m×k] · b[k×n]` with `A(i, p) = a[i * rs + p * cs]`.
/// Each output element sums over `p` in increasing order.
fn gemm<S: Scalar>(a: &[S], rs: usize, cs: usize, b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i0 in (0..m).step_by(MR) {
        let mr = MR.min(m - i0);
        for j0 in (0..n).step_by(NR) {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                let mut acc = [[S::zero(); NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for p in 0..k {
                    let bp: &[S; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR lanes");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i0 + r) * rs + p * cs];
                        for l in 0..NR {
                            row[l] += av * bp[l];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in i0..i0 + mr {
                    for j in j0..j0 + nr {
                        let mut acc = out[r * n + j];
                        for p in 0..k {
                            acc += a[r * rs + p * cs] * b[p * n + j];
                        }
                        out[r * n + j] = acc;
                    }
                }
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm(a, k, 1, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![S::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm(a, k, 1, &bt, out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    gemm(a, 1, k, b, out, k, m, n);
}
