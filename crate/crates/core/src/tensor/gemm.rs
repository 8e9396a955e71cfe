use super::Float;

/// Strided matrix multiply `C = A·B + beta·C` on slices.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; each is addressed as
/// `ptr[row * rs + col * cs]`. Strides must be non-negative.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows - 1) * rs + (cols.max(1) - 1) * cs + 1
    };
    if k > 0 {
        assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A out of bounds");
        assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B out of bounds");
    }
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C out of bounds");
    // SAFETY: all three operands were bounds-checked against their strided extents.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
