//! Scalar abstraction for the numeric core.
//!
//! All tensor and graph code is generic over [`Scalar`], implemented for
//! `f32` (the default compute type) and `f64` (used to re-run gradient
//! checks at tight tolerances).

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + Sum + Debug + Display + Send + Sync + Default + 'static
{
    /// Type tag written into checkpoint manifests.
    const DTYPE: &'static str;

    /// Serialized width in bytes.
    const SIZE: usize;

    fn from_f64(v: f64) -> Self;

    /// Lossless widening for accumulation and reporting.
    fn to_f64_lossy(self) -> f64;

    fn read_le(bytes: &[u8]) -> Self;

    fn put_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const SIZE: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_le_bytes() {
        let mut buf = Vec::new();
        1.5f32.put_le(&mut buf);
        (-2.25f64).put_le(&mut buf);
        assert_eq!(buf.len(), 12);
        assert_eq!(f32::read_le(&buf[..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..]), -2.25);
    }

    #[test]
    fn dtype_tags() {
        assert_eq!(<f32 as Scalar>::DTYPE, "f32");
        assert_eq!(<f64 as Scalar>::DTYPE, "f64");
    }
}
