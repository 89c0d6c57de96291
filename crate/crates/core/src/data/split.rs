use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Seeded shuffle into train / val / test. Counts are `round(r·n)` for the
/// first two parts; the test part takes the remainder.
/// Train, validation and test parts.
pub type Parts<T> = (Vec<T>, Vec<T>, Vec<T>);

pub fn split<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<Parts<T>, DataError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios));
    }
    let n = items.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&idx[..n_train]),
        pick(&idx[n_train..n_train + n_val]),
        pick(&idx[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_train() {
        let v: Vec<u32> = (0..10).collect();
        let (a, b, c) = split(&v, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(a.len(), 10);
        assert!(b.is_empty() && c.is_empty());
    }

    #[test]
    fn disjoint_cover() {
        let v: Vec<u32> = (0..100).collect();
        let (a, b, c) = split(&v, [0.7, 0.1, 0.2], 9).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 10, 20));
        let mut all: Vec<u32> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, v);
    }

    #[test]
    fn fixed_seed_is_stable() {
        let v: Vec<u32> = (0..10).collect();
        let first = split(&v, [0.5, 0.2, 0.3], 42).unwrap();
        assert_eq!(first, split(&v, [0.5, 0.2, 0.3], 42).unwrap());
        assert_ne!(first.0, split(&v, [0.5, 0.2, 0.3], 43).unwrap().0);
    }

    #[test]
    fn bad_ratios() {
        let v = [1, 2, 3];
        assert!(split(&v, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split(&v, [1.5, -0.5, 0.0], 0).is_err());
    }
}
