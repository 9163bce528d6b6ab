use std::fmt::Debug;

/// Row and column strides of a matrix view into a flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Contiguous row-major layout with `cols` columns.
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// Transposed view of a row-major buffer that has `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col + 1
        }
    }
}

/// Compute backend contract.
///
/// The tape routes every matrix product through a backend so that an
/// accelerated implementation can be swapped in without touching the
/// differentiation rules. Implementations must be deterministic: identical
/// inputs give bit-identical outputs.
pub trait Backend: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// `c = alpha * a·b + beta * c` for an `m×k` `a` and a `k×n` `b`.
    /// When `beta == 0` the previous contents of `c` are ignored.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        &self,
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_strides: Strides,
        b: &[f32],
        b_strides: Strides,
        beta: f32,
        c: &mut [f32],
        c_strides: Strides,
    );
}

#[allow(clippy::too_many_arguments)]
fn check_views(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    c: &[f32],
    sc: Strides,
) {
    assert!(sa.span(m, k) <= a.len(), "gemm: lhs view out of bounds");
    assert!(sb.span(k, n) <= b.len(), "gemm: rhs view out of bounds");
    assert!(sc.span(m, n) <= c.len(), "gemm: output view out of bounds");
}

/// The portable CPU backend. Pure Rust, single-threaded and deterministic
/// on a given machine; packs panels and uses the widest vector kernel the
/// host advertises.
#[derive(Clone, Copy, Debug, Default)]
pub struct CpuBackend;

impl Backend for CpuBackend {
    fn name(&self) -> &'static str {
        "cpu"
    }

    fn gemm(
        &self,
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        sa: Strides,
        b: &[f32],
        sb: Strides,
        beta: f32,
        c: &mut [f32],
        sc: Strides,
    ) {
        check_views(m, k, n, a, sa, b, sb, c, sc);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every view was bounds-checked against its slice above, and
        // `c` is uniquely borrowed so it cannot alias `a` or `b`.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.row as isize,
                sa.col as isize,
                b.as_ptr(),
                sb.row as isize,
                sb.col as isize,
                beta,
                c.as_mut_ptr(),
                sc.row as isize,
                sc.col as isize,
            );
        }
    }
}

/// Straightforward triple loop. Slow; used as a test oracle and as the
/// fallback when nothing else is available.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReferenceBackend;

impl Backend for ReferenceBackend {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn gemm(
        &self,
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        sa: Strides,
        b: &[f32],
        sb: Strides,
        beta: f32,
        c: &mut [f32],
        sc: Strides,
    ) {
        check_views(m, k, n, a, sa, b, sb, c, sc);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a[i * sa.row + p * sa.col] * b[p * sb.row + j * sb.col];
                }
                let out = &mut c[i * sc.row + j * sc.col];
                *out = if beta == 0.0 {
                    alpha * acc
                } else {
                    alpha * acc + beta * *out
                };
            }
        }
    }
}
