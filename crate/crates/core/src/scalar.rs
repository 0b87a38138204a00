//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Scalar type the model, routing metrics and statistics are generic over.
///
/// Implemented for `f32` and `f64`. The pipeline and CLI run in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Little-endian byte image used for checksums.
    fn le_bytes(self) -> Vec<u8>;
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

/// Numerically stable softmax. `-inf` entries receive exactly zero mass.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    if max == T::neg_infinity() {
        return vec![T::zero(); logits.len()];
    }
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(softmax(logits))` computed via log-sum-exp.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + total.ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Indices of the `k` largest values, ties broken toward the lower index.
/// Returned in descending order of value.
pub fn top_k_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_and_masks() {
        let p = softmax(&[1.0f64, f64::NEG_INFINITY, 0.0]);
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn top_k_prefers_lower_index_on_ties() {
        assert_eq!(top_k_indices(&[1.0f64, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0f32; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn log_softmax_of_zeros_is_uniform() {
        let lp = log_softmax(&[0.0f64; 8]);
        for v in lp {
            assert!((v + 8f64.ln()).abs() < 1e-15);
        }
    }
}
