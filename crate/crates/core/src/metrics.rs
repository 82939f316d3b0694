//! Overlap metrics.

use crate::error::{Error, Result};
use crate::tensor::BinaryMask;

/// Dice coefficient `2|a∩b| / (|a|+|b|)`.
///
/// Two empty masks score 1.0: a correctly predicted empty mask is not penalized.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dims(a.dims(), b.dims()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean and population standard deviation; `(NaN, NaN)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_bits(h: usize, w: usize, bits: &[bool]) -> BinaryMask {
        BinaryMask::new(h, w, bits.iter().map(|&b| u8::from(b)).collect()).unwrap()
    }

    #[test]
    fn identical_disjoint_and_half_overlap() {
        let a = BinaryMask::from_fn(20, 20, |x, _| x < 5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = BinaryMask::from_fn(20, 20, |x, _| x >= 10);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);

        // |a| = |b| = 100 with 50 shared pixels.
        let a = BinaryMask::from_fn(10, 20, |x, _| x < 10);
        let b = BinaryMask::from_fn(10, 20, |x, _| (5..15).contains(&x));
        assert_eq!(a.count(), 100);
        assert_eq!(b.count(), 100);
        assert_eq!(dice(&a, &b).unwrap(), 2.0 * 50.0 / 200.0);
    }

    #[test]
    fn both_empty_is_one_and_mismatch_errors() {
        let e = BinaryMask::empty(4, 4);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        let nonempty = BinaryMask::from_fn(4, 4, |x, y| x == y);
        assert_eq!(dice(&e, &nonempty).unwrap(), 0.0);
        assert!(dice(&e, &BinaryMask::empty(4, 5)).is_err());
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_reflexive(bits in proptest::collection::vec(any::<(bool, bool)>(), 64)) {
            let a = mask_from_bits(8, 8, &bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let b = mask_from_bits(8, 8, &bits.iter().map(|b| b.1).collect::<Vec<_>>());
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
