use serde::{Deserialize, Serialize};

use super::TransferError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this value are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    /// From (0, 0) to (1, 1), one point per distinct score.
    pub points: Vec<RocPoint>,
}

/// Pairwise-ranking AUC with ties counted as half, plus the ROC polyline.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<RocCurve, TransferError> {
    if scores.len() != truths.len() {
        return Err(TransferError::ShapeMismatch(format!(
            "{} scores for {} truths",
            scores.len(),
            truths.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TransferError::NonFinite("score".into()));
    }
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TransferError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (pos as f64, neg as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // Correctly ordered pairs, counted in half-units so ties stay integral.
    let mut half_pairs: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (mut gtp, mut gfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == threshold {
            if truths[order[i]] {
                gtp += 1;
            } else {
                gfp += 1;
            }
            i += 1;
        }
        half_pairs += gfp * (2 * tp + gtp);
        tp += gtp;
        fp += gfp;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    Ok(RocCurve {
        auc: half_pairs as f64 / (2.0 * p * n),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(scores: &[f64], truths: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if truths[i] && !truths[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn hand_examples() {
        let t = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.2], &t).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.9, 0.4, 0.6, 0.2], &t).unwrap().auc, 0.75);
        let flat = roc_auc(&[0.5; 4], &t).unwrap();
        assert_eq!(flat.auc, 0.5);
        assert_eq!(flat.points.len(), 2);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(TransferError::SingleClass)));
    }

    #[test]
    fn curve_endpoints() {
        let c = roc_auc(&[0.9, 0.4, 0.6, 0.2, 0.6], &[true, true, false, false, true]).unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        // Trapezoids over the polyline reproduce the pairwise AUC.
        let trap: f64 = c
            .points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum();
        assert!((trap - c.auc).abs() < 1e-12);
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let n = rng.gen_range(2..=50);
            let mut truths: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            truths[0] = true;
            truths[1] = false;
            // Coarse scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) / 11.0).collect();
            let got = roc_auc(&scores, &truths).unwrap().auc;
            assert!((got - brute_force(&scores, &truths)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(
            raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40),
        ) {
            let mut truths: Vec<bool> = raw.iter().map(|r| r.1).collect();
            truths[0] = true;
            truths[1] = false;
            let scores: Vec<f64> = raw.iter().map(|r| (r.0 * 4.0).round() / 4.0).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            let a = roc_auc(&scores, &truths).unwrap().auc;
            let b = roc_auc(&transformed, &truths).unwrap().auc;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
