//! Real scalar types usable as tensor elements.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Precision class of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

/// Strided view of a row-major matrix operand: `(row stride, column stride)`.
pub type Strides = (isize, isize);

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    /// `c = alpha * a · b + beta * c` for an `m×k` by `k×n` product.
    ///
    /// Operands are addressed through explicit element strides so transposed
    /// views need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: Strides,
        b: &[Self],
        b_strides: Strides,
        beta: Self,
        c: &mut [Self],
        c_strides: Strides,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn max_offset(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

#[allow(clippy::too_many_arguments)]
fn check_operands<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: Strides,
    b: &[T],
    b_strides: Strides,
    c: &[T],
    c_strides: Strides,
) {
    if m > 0 && k > 0 {
        assert!(max_offset(m, k, a_strides) < a.len(), "gemm: a out of bounds");
    }
    if k > 0 && n > 0 {
        assert!(max_offset(k, n, b_strides) < b.len(), "gemm: b out of bounds");
    }
    if m > 0 && n > 0 {
        assert!(max_offset(m, n, c_strides) < c.len(), "gemm: c out of bounds");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $kernel:path) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: Strides,
                b: &[Self],
                b_strides: Strides,
                beta: Self,
                c: &mut [Self],
                c_strides: Strides,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_operands(m, k, n, a, a_strides, b, b_strides, c, c_strides);
                // SAFETY: every addressed element lies inside its slice (checked
                // above) and `c` is exclusively borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, Precision::F32, matrixmultiply::sgemm);
impl_scalar!(f64, Precision::F64, matrixmultiply::dgemm);
