//! Floating point element type shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real scalar used for matrix entries, parameters and gradients.
///
/// Besides the arithmetic bounds, an implementation supplies a GEMM kernel and a
/// lossless little-endian byte encoding (used by checkpoints).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short tag written into checkpoint headers.
    const DTYPE: &'static str;
    /// Encoded width in bytes.
    const BYTES: usize;

    /// `c <- alpha * a * b + beta * c` for an `m x k` by `k x n` product, with
    /// arbitrary row/column strides on every operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Bit pattern widened to 64 bits, for bitwise comparisons.
    fn bits(self) -> u64;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $bytes:literal, $kernel:path, $bits:ty) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = $bytes;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $kernel(
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
                        rsc,
                        csc,
                    )
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }

            fn bits(self) -> u64 {
                self.to_bits() as u64
            }
        }
    };
}

impl_scalar!(f64, "f64", 8, matrixmultiply::dgemm, u64);
impl_scalar!(f32, "f32", 4, matrixmultiply::sgemm, u32);
