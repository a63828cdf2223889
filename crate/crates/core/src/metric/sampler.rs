use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::MetricError;
use crate::dataset::ClassLabel;

/// Draws `samples_per_class` indices from each of `classes_per_batch`
/// distinct classes. Classes with fewer records than requested are sampled
/// with replacement. Indices are grouped by class in `ClassLabel` order.
pub fn sample_batch<R: Rng + ?Sized>(
    labels: &[ClassLabel],
    classes_per_batch: usize,
    samples_per_class: usize,
    rng: &mut R,
) -> Result<Vec<usize>, MetricError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ClassLabel::COUNT];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let available: Vec<ClassLabel> = ClassLabel::ALL
        .iter()
        .copied()
        .filter(|c| !by_class[c.index()].is_empty())
        .collect();
    if available.len() < classes_per_batch {
        if let Some(empty) = ClassLabel::ALL.iter().find(|c| by_class[c.index()].is_empty()) {
            return Err(MetricError::EmptyClass(*empty));
        }
        return Err(MetricError::NotEnoughClasses {
            required: classes_per_batch,
            available: available.len(),
        });
    }
    let mut chosen: Vec<ClassLabel> = if available.len() == classes_per_batch {
        available
    } else {
        available.choose_multiple(rng, classes_per_batch).copied().collect()
    };
    chosen.sort();

    let mut batch = Vec::with_capacity(classes_per_batch * samples_per_class);
    for class in chosen {
        let pool = &by_class[class.index()];
        if pool.len() >= samples_per_class {
            batch.extend(index::sample(rng, pool.len(), samples_per_class).into_iter().map(|k| pool[k]));
        } else {
            batch.extend((0..samples_per_class).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(counts: [usize; 3]) -> Vec<ClassLabel> {
        ClassLabel::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&l, n)| std::iter::repeat(l).take(n))
            .collect()
    }

    fn per_class(labels: &[ClassLabel], batch: &[usize]) -> [usize; 3] {
        let mut c = [0; 3];
        for &i in batch {
            c[labels[i].index()] += 1;
        }
        c
    }

    #[test]
    fn full_batch_counts() {
        let l = labels([40, 30, 50]);
        let batch = sample_batch(&l, 3, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.len(), 48);
        assert_eq!(per_class(&l, &batch), [16, 16, 16]);
        let mut uniq = batch.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 48, "no repeats when every class is large enough");
    }

    #[test]
    fn deterministic_under_seed() {
        let l = labels([40, 30, 50]);
        let a = sample_batch(&l, 3, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&l, 3, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_class_with_replacement() {
        let l = labels([5, 30, 30]);
        let batch = sample_batch(&l, 3, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(per_class(&l, &batch), [16, 16, 16]);
        assert!(batch.iter().filter(|&&i| l[i] == ClassLabel::Control).all(|&i| i < 5));
    }

    #[test]
    fn empty_class_is_an_error() {
        let l = labels([10, 0, 10]);
        assert!(matches!(
            sample_batch(&l, 3, 4, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(MetricError::EmptyClass(ClassLabel::NonCovidPneumonia))
        ));
        // Two classes suffice when only two are requested.
        let batch = sample_batch(&l, 2, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(per_class(&l, &batch), [4, 0, 4]);
    }

    proptest! {
        #[test]
        fn exact_counts_per_chosen_class(
            counts in prop::array::uniform3(1usize..30),
            t in 2usize..=3,
            n in 2usize..20,
            seed in any::<u64>(),
        ) {
            let l = labels(counts);
            let batch = sample_batch(&l, t, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(batch.len(), t * n);
            let c = per_class(&l, &batch);
            prop_assert_eq!(c.iter().filter(|&&k| k == n).count(), t);
            prop_assert!(c.iter().all(|&k| k == 0 || k == n));
        }
    }
}
