use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    /// 60% train, 20% validation, the rest test.
    fn default() -> Self {
        Self { train: 0.6, val: 0.2 }
    }
}

/// Stratified split: each class is shuffled under `seed` and cut into
/// `round(n·train)`, `round(n·val)` and the remainder. The three parts are
/// disjoint and cover the input.
pub fn split(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<[Dataset; 3], DataError> {
    if !(0.0..=1.0).contains(&fractions.train)
        || !(0.0..=1.0).contains(&fractions.val)
        || fractions.train + fractions.val > 1.0
    {
        return Err(DataError::Invalid(format!("bad split fractions {fractions:?}")));
    }
    let hist = ds.class_histogram();
    if let Some((class, &count)) = hist.iter().enumerate().find(|(_, &c)| c > 0 && c < 3) {
        return Err(DataError::TooFewSamples { class, count });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); hist.len()];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let tr = (n * fractions.train).round() as usize;
        let va = ((n * fractions.val).round() as usize).min(idx.len() - tr);
        parts[0].extend_from_slice(&idx[..tr]);
        parts[1].extend_from_slice(&idx[tr..tr + va]);
        parts[2].extend_from_slice(&idx[tr + va..]);
    }
    let make = |i: usize, split: Split| {
        let mut part = parts[i].clone();
        part.sort_unstable();
        let mut d = ds.subset(&part);
        d.split = Some(split);
        d
    };
    Ok([make(0, Split::Train), make(1, Split::Val), make(2, Split::Test)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, classes: usize) -> Dataset {
        let labels: Vec<u16> = (0..n).map(|i| (i % classes) as u16).collect();
        let pixels = (0..n).map(|i| i as u8).collect();
        Dataset::new(1, 1, 1, pixels, labels).unwrap()
    }

    #[test]
    fn hundred_two_classes() {
        let [tr, va, te] = split(&balanced(100, 2), SplitFractions::default(), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (60, 20, 20));
        assert_eq!(tr.class_histogram(), vec![30, 30]);
        assert_eq!(va.class_histogram(), vec![10, 10]);
        assert_eq!(te.class_histogram(), vec![10, 10]);
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let ds = balanced(97, 4);
        let parts = split(&ds, SplitFractions::default(), 5).unwrap();
        let mut all: Vec<u8> = parts.iter().flat_map(|p| p.pixels.clone()).collect();
        all.sort_unstable();
        let mut orig = ds.pixels.clone();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn seeds_change_membership_not_histograms() {
        let ds = balanced(90, 3);
        let a = split(&ds, SplitFractions::default(), 1).unwrap();
        let b = split(&ds, SplitFractions::default(), 2).unwrap();
        assert_ne!(a[0].pixels, b[0].pixels);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.class_histogram(), y.class_histogram());
        }
    }

    #[test]
    fn tiny_class_is_rejected() {
        let ds = Dataset::new(1, 1, 1, vec![0; 5], vec![0, 0, 0, 1, 1]).unwrap();
        assert!(matches!(split(&ds, SplitFractions::default(), 0), Err(DataError::TooFewSamples { class: 1, count: 2 })));
    }
}
