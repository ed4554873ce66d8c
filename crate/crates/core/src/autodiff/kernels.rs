//! Row-major matrix kernels. All of them accumulate into `out`.
//!
//! Zero entries of the left operand are skipped, so masked attention weights
//! contribute nothing at all (not even a signed zero).

/// out[m×n] += a[m×k] · b[k×n]
///
/// Columns are processed in register-sized blocks; every output still
/// accumulates its terms in order of `p`, so the result is bit-identical to
/// the plain triple loop.
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const W: usize = 16;
    let full = n - n % W;
    for (a_row, out_row) in a[..m * k].chunks_exact(k).zip(out[..m * n].chunks_exact_mut(n)) {
        for j0 in (0..full).step_by(W) {
            let out_blk: &mut [f64; W] = (&mut out_row[j0..j0 + W]).try_into().unwrap();
            let mut acc = *out_blk;
            for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
                if av == 0.0 {
                    continue;
                }
                let b_blk: &[f64; W] = b_row[j0..j0 + W].try_into().unwrap();
                for t in 0..W {
                    acc[t] += av * b_blk[t];
                }
            }
            *out_blk = acc;
        }
        if full < n {
            for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in out_row[full..].iter_mut().zip(&b_row[full..]) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // Four independent dot products at a time; each is still summed in
    // order of `p` before being added to `out`.
    const J: usize = 4;
    let full = n - n % J;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j0 in (0..full).step_by(J) {
            let rows: [&[f64]; J] = core::array::from_fn(|t| &b[(j0 + t) * k..(j0 + t + 1) * k]);
            let mut acc = [0.0; J];
            for (p, &x) in a_row.iter().enumerate() {
                for t in 0..J {
                    acc[t] += x * rows[t][p];
                }
            }
            for t in 0..J {
                out[i * n + j0 + t] += acc[t];
            }
        }
        for j in full..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const W: usize = 16;
    let full = n - n % W;
    for (p, out_row) in out[..k * n].chunks_exact_mut(n).enumerate() {
        for j0 in (0..full).step_by(W) {
            let out_blk: &mut [f64; W] = (&mut out_row[j0..j0 + W]).try_into().unwrap();
            let mut acc = *out_blk;
            for (a_row, b_row) in a[..m * k].chunks_exact(k).zip(b.chunks_exact(n)) {
                let av = a_row[p];
                if av == 0.0 {
                    continue;
                }
                let b_blk: &[f64; W] = b_row[j0..j0 + W].try_into().unwrap();
                for t in 0..W {
                    acc[t] += av * b_blk[t];
                }
            }
            *out_blk = acc;
        }
        if full < n {
            for (a_row, b_row) in a[..m * k].chunks_exact(k).zip(b.chunks_exact(n)) {
                let av = a_row[p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in out_row[full..].iter_mut().zip(&b_row[full..]) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f64> {
        let mut out = alloc::vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> alloc::vec::Vec<f64> {
        let mut t = alloc::vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 2);
        let a: alloc::vec::Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut nn = alloc::vec![0.0; m * n];
        gemm_nn(&a, &b, &mut nn, m, k, n);
        let mut nt = alloc::vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut nt, m, k, n);
        let mut tn = alloc::vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut tn, k, m, n);
        for i in 0..m * n {
            assert!((nn[i] - want[i]).abs() < 1e-12);
            assert!((nt[i] - want[i]).abs() < 1e-12);
            assert!((tn[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_products_match_the_plain_loops_bitwise() {
        let (m, k, n) = (5, 7, 21);
        let a: alloc::vec::Vec<f64> =
            (0..m * k).map(|i| if i % 4 == 0 { 0.0 } else { (i as f64 * 1.37).sin() }).collect();
        let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.53).cos() * 1e3).collect();
        let c: alloc::vec::Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.29).sin() * 7.0).collect();
        let d: alloc::vec::Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.71).cos() - 0.2).collect();
        let init: alloc::vec::Vec<f64> = (0..m * n).map(|i| (i as f64).sqrt() - 2.0).collect();
        let mut want = init.clone();
        for i in 0..m {
            for p in 0..k {
                if a[i * k + p] != 0.0 {
                    for j in 0..n {
                        want[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
        }
        let mut got = init.clone();
        gemm_nn(&a, &b, &mut got, m, k, n);
        assert!(got.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()));

        // aᵀ·b with the terms of each output summed in order of the row.
        let init_tn: alloc::vec::Vec<f64> = (0..k * n).map(|i| 0.5 - (i as f64 * 0.13).sin()).collect();
        let mut want_tn = init_tn.clone();
        for i in 0..m {
            for p in 0..k {
                if a[i * k + p] != 0.0 {
                    for j in 0..n {
                        want_tn[p * n + j] += a[i * k + p] * c[i * n + j];
                    }
                }
            }
        }
        let mut got_tn = init_tn;
        gemm_tn(&a, &c, &mut got_tn, m, k, n);
        assert!(got_tn.iter().zip(&want_tn).all(|(x, y)| x.to_bits() == y.to_bits()));

        // a·dᵀ as one running sum per output, added to the initial value.
        let mut want_nt = init.clone();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * d[j * k + p];
                }
                want_nt[i * n + j] += acc;
            }
        }
        let mut got_nt = init;
        gemm_nt(&a, &d, &mut got_nt, m, k, n);
        assert!(got_nt.iter().zip(&want_nt).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
