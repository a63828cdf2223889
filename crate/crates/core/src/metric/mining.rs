use super::{MetricError, SimilarityMatrix};

/// Selected positive and negative partners per anchor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MinedPairs {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl MinedPairs {
    pub fn anchors(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.iter().all(Vec::is_empty) && self.negatives.iter().all(Vec::is_empty)
    }
}

/// Keeps negatives more similar than the hardest positive minus `epsilon`
/// and positives less similar than the hardest negative plus `epsilon`.
/// Self-pairs are never candidates.
pub fn mine_pairs(s: &SimilarityMatrix, epsilon: f64) -> Result<MinedPairs, MetricError> {
    let m = s.size;
    let mut mined = MinedPairs {
        positives: Vec::with_capacity(m),
        negatives: Vec::with_capacity(m),
    };
    for i in 0..m {
        let row = s.row(i);
        let mut hardest_pos = f64::INFINITY;
        let mut hardest_neg = f64::NEG_INFINITY;
        for j in (0..m).filter(|&j| j != i) {
            if s.labels[j] == s.labels[i] {
                hardest_pos = hardest_pos.min(row[j]);
            } else {
                hardest_neg = hardest_neg.max(row[j]);
            }
        }
        if hardest_pos == f64::INFINITY {
            return Err(MetricError::DegenerateBatch {
                anchor: i,
                missing: "positive",
            });
        }
        if hardest_neg == f64::NEG_INFINITY {
            return Err(MetricError::DegenerateBatch {
                anchor: i,
                missing: "negative",
            });
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in (0..m).filter(|&j| j != i) {
            if s.labels[j] == s.labels[i] {
                if row[j] < hardest_neg + epsilon {
                    pos.push(j);
                }
            } else if row[j] > hardest_pos - epsilon {
                neg.push(j);
            }
        }
        mined.positives.push(pos);
        mined.negatives.push(neg);
    }
    Ok(mined)
}
