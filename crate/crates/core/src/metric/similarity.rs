use crate::dataset::ClassLabel;

use super::MetricError;

/// `<a, b> / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Dense `m x m` cosine similarities of a labeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub size: usize,
    pub values: Vec<f64>,
    pub labels: Vec<ClassLabel>,
}

impl SimilarityMatrix {
    /// Builds a matrix from raw values; used by tests and oracles.
    pub fn from_values(values: Vec<f64>, labels: Vec<ClassLabel>) -> Self {
        let size = labels.len();
        assert_eq!(values.len(), size * size);
        Self { size, values, labels }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }
}

pub fn similarity_matrix<V: AsRef<[f64]>>(
    embeddings: &[V],
    labels: &[ClassLabel],
) -> Result<SimilarityMatrix, MetricError> {
    if embeddings.len() != labels.len() {
        return Err(MetricError::LengthMismatch(embeddings.len(), labels.len()));
    }
    let m = embeddings.len();
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let s = cosine_similarity(embeddings[i].as_ref(), embeddings[j].as_ref())?;
            values[i * m + j] = s;
            values[j * m + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        size: m,
        values,
        labels: labels.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        let a = [0.6, 0.8];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 0.0], &[0.6, 0.8]).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(MetricError::ZeroVector)
        ));
    }

    #[test]
    fn matrix_examples() {
        let e = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
        let s = similarity_matrix(&e, &[ClassLabel::Control; 2]).unwrap();
        assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-12));

        let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let s = similarity_matrix(&basis, &ClassLabel::ALL).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn matrix_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let labels: Vec<_> = (0..8).map(|i| ClassLabel::ALL[i % 3]).collect();
        let s = similarity_matrix(&e, &labels).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum();
                assert!((s.get(i, j) - dot).abs() < 1e-9);
            }
            assert!((s.get(i, i) - 1.0).abs() < 1e-6);
        }
    }
}
