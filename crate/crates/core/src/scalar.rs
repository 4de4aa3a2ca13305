use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of every tensor in the workbench.
///
/// Implemented for `f32` (the default working precision) and `f64`
/// (used for gradient checks and bitwise-determinism tests).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Checkpoint dtype code for a dense tensor of this type.
    const DENSE_CODE: u8;
    /// Checkpoint dtype code for a sparse tensor with values of this type.
    const SPARSE_CODE: u8;
    const BYTES: usize;
    const NAME: &'static str;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c += a · b` on strided views: `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
    /// Strides are `(row, col)` in elements; the caller guarantees the views
    /// stay inside the slices.
    fn gemm_strided(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self], n_c: usize);

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[allow(clippy::too_many_arguments)]
fn check_views(m: usize, k: usize, n: usize, la: usize, sa: (usize, usize), lb: usize, sb: (usize, usize), lc: usize, n_c: usize) {
    let last = |r: usize, c: usize, s: (usize, usize)| (r - 1) * s.0 + (c - 1) * s.1;
    if m == 0 || n == 0 {
        return;
    }
    assert!(n_c >= n && last(m, n, (n_c, 1)) < lc, "gemm output view out of range");
    if k > 0 {
        assert!(last(m, k, sa) < la, "gemm lhs view out of range");
        assert!(last(k, n, sb) < lb, "gemm rhs view out of range");
    }
}

impl Real for f32 {
    const DENSE_CODE: u8 = 0;
    const SPARSE_CODE: u8 = 2;
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn gemm_strided(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self], n_c: usize) {
        check_views(m, k, n, a.len(), sa, b.len(), sb, c.len(), n_c);
        // SAFETY: every view was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), sa.0 as isize, sa.1 as isize,
                b.as_ptr(), sb.0 as isize, sb.1 as isize,
                1.0,
                c.as_mut_ptr(), n_c as isize, 1,
            );
        }
    }

    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DENSE_CODE: u8 = 1;
    const SPARSE_CODE: u8 = 3;
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn gemm_strided(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self], n_c: usize) {
        check_views(m, k, n, a.len(), sa, b.len(), sb, c.len(), n_c);
        // SAFETY: every view was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), sa.0 as isize, sa.1 as isize,
                b.as_ptr(), sb.0 as isize, sb.1 as isize,
                1.0,
                c.as_mut_ptr(), n_c as isize, 1,
            );
        }
    }

    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Numeric precision selectable at run time (CLI `--precision`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "32" | "single" => Ok(Precision::F32),
            "f64" | "64" | "double" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-2.25f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..]), -2.25);
    }

    #[test]
    fn precision_parse() {
        assert_eq!("f64".parse::<Precision>().unwrap(), Precision::F64);
        assert!("f16".parse::<Precision>().is_err());
    }
}
