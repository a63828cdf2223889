use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{roc_auc, BinaryClassifier, FeatureSet, FusionModel, RocCurve, RocPoint, TransferError, TransferSample};

/// Fold index for every sample. Each class is shuffled and dealt round-robin,
/// continuing the rotation across classes so fold sizes differ by at most one.
pub fn stratified_folds(truths: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>, TransferError> {
    if folds < 2 {
        return Err(TransferError::InsufficientSamples(format!("{folds} folds requested, need at least 2")));
    }
    let pos: Vec<usize> = (0..truths.len()).filter(|&i| truths[i]).collect();
    let neg: Vec<usize> = (0..truths.len()).filter(|&i| !truths[i]).collect();
    if pos.len() < folds || neg.len() < folds {
        return Err(TransferError::InsufficientSamples(format!(
            "{} positive and {} negative samples for {folds} folds",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; truths.len()];
    let mut next = 0;
    for mut class in [pos, neg] {
        class.shuffle(&mut rng);
        for i in class {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub auc: f64,
    pub image_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub truths: Vec<bool>,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub feature_set: FeatureSet,
    pub folds: Vec<FoldResult>,
    pub mean_auc: f64,
    /// Sample standard deviation of the per-fold AUCs.
    pub sd_auc: f64,
    /// ROC over the concatenated held-out scores.
    pub pooled: RocCurve,
}

/// Stratified k-fold CV. Fusion statistics and the classifier are refitted
/// on each training fold; the held-out fold is only transformed and scored.
pub fn kfold_cv<C: BinaryClassifier>(
    samples: &[TransferSample],
    set: FeatureSet,
    folds: usize,
    seed: u64,
    mut factory: impl FnMut() -> C,
) -> Result<CvReport, TransferError> {
    let truths: Vec<bool> = samples.iter().map(|s| s.target).collect();
    let assignment = stratified_folds(&truths, folds, seed)?;
    let mut results = Vec::with_capacity(folds);
    for fold in 0..folds {
        let train: Vec<&TransferSample> =
            samples.iter().zip(&assignment).filter(|(_, &f)| f != fold).map(|(s, _)| s).collect();
        let test: Vec<&TransferSample> =
            samples.iter().zip(&assignment).filter(|(_, &f)| f == fold).map(|(s, _)| s).collect();
        let fusion = FusionModel::fit(&train, set)?;
        let x = train.iter().map(|s| fusion.transform(s)).collect::<Result<Vec<_>, _>>()?;
        let y: Vec<bool> = train.iter().map(|s| s.target).collect();
        let mut clf = factory();
        clf.fit(&x, &y)?;
        let mut scores = Vec::with_capacity(test.len());
        for s in &test {
            scores.push(clf.score(&fusion.transform(s)?));
        }
        let fold_truths: Vec<bool> = test.iter().map(|s| s.target).collect();
        let curve = roc_auc(&scores, &fold_truths)?;
        log::info!("{} fold {fold}: auc {:.4}", set.as_str(), curve.auc);
        results.push(FoldResult {
            fold,
            auc: curve.auc,
            image_ids: test.iter().map(|s| s.image_id.clone()).collect(),
            scores,
            truths: fold_truths,
            roc: curve.points,
        });
    }
    let aucs: Vec<f64> = results.iter().map(|r| r.auc).collect();
    let mean_auc = aucs.iter().sum::<f64>() / folds as f64;
    let sd_auc = (aucs.iter().map(|a| (a - mean_auc).powi(2)).sum::<f64>() / (folds - 1) as f64).sqrt();
    let all_scores: Vec<f64> = results.iter().flat_map(|r| r.scores.iter().copied()).collect();
    let all_truths: Vec<bool> = results.iter().flat_map(|r| r.truths.iter().copied()).collect();
    let pooled = roc_auc(&all_scores, &all_truths)?;
    Ok(CvReport {
        feature_set: set,
        folds: results,
        mean_auc,
        sd_auc,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::LogisticRegression;
    use proptest::prelude::*;
    use rand::Rng;

    fn samples(n: usize, seed: u64) -> Vec<TransferSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let target = i % 2 == 0;
                let shift = if target { 0.8 } else { -0.8 };
                TransferSample {
                    image_id: format!("s{i}"),
                    image_features: (0..3).map(|_| rng.gen_range(-1.0..1.0) + shift).collect(),
                    ehr: vec![Some(rng.gen_range(0.0..10.0)), if i % 7 == 0 { None } else { Some(1.0 + i as f64) }],
                    target,
                }
            })
            .collect()
    }

    #[test]
    fn fifty_fifty_into_five_folds() {
        let truths: Vec<bool> = (0..100).map(|i| i < 50).collect();
        let a = stratified_folds(&truths, 5, 3).unwrap();
        for f in 0..5 {
            let members: Vec<usize> = (0..100).filter(|&i| a[i] == f).collect();
            assert_eq!(members.len(), 20);
            assert_eq!(members.iter().filter(|&&i| truths[i]).count(), 10);
        }
        assert_eq!(stratified_folds(&truths, 5, 3).unwrap(), a);
        assert_ne!(stratified_folds(&truths, 5, 4).unwrap(), a);
    }

    #[test]
    fn too_few_of_a_class() {
        let truths = [true, true, true, false, false, false, false, false, false];
        assert!(matches!(stratified_folds(&truths, 5, 0), Err(TransferError::InsufficientSamples(_))));
    }

    proptest! {
        #[test]
        fn folds_partition_and_stay_balanced(
            truths in prop::collection::vec(any::<bool>(), 10..120),
            folds in 2usize..8,
            seed in any::<u64>(),
        ) {
            let pos = truths.iter().filter(|&&t| t).count();
            let neg = truths.len() - pos;
            prop_assume!(pos >= folds && neg >= folds);
            let a = stratified_folds(&truths, folds, seed).unwrap();
            prop_assert_eq!(a.len(), truths.len());
            prop_assert!(a.iter().all(|&f| f < folds));
            for f in 0..folds {
                let size = a.iter().filter(|&&x| x == f).count() as f64;
                let p = (0..truths.len()).filter(|&i| a[i] == f && truths[i]).count() as f64;
                let expected = size * pos as f64 / truths.len() as f64;
                prop_assert!((p - expected).abs() <= 1.0, "fold {} has {} positives, expected {}", f, p, expected);
            }
        }
    }

    #[test]
    fn cv_report_shape() {
        let s = samples(60, 1);
        let r = kfold_cv(&s, FeatureSet::Fused, 5, 9, || LogisticRegression::new(1.0)).unwrap();
        assert_eq!(r.folds.len(), 5);
        assert_eq!(r.folds.iter().map(|f| f.scores.len()).sum::<usize>(), 60);
        assert!(r.mean_auc > 0.8, "mean auc {}", r.mean_auc);
        assert!(r.sd_auc >= 0.0);
        let again = kfold_cv(&s, FeatureSet::Fused, 5, 9, || LogisticRegression::new(1.0)).unwrap();
        assert_eq!(again.mean_auc, r.mean_auc);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["folds"][0]["roc"].is_array());
    }

    #[test]
    fn held_out_rows_never_influence_the_fit() {
        let s = samples(50, 2);
        let base = kfold_cv(&s, FeatureSet::Fused, 5, 4, || LogisticRegression::new(1.0)).unwrap();
        // Corrupt one held-out row of fold 0; fold assignment depends only on
        // the targets and the seed, so it is unchanged.
        let victim = base.folds[0].image_ids[0].clone();
        let mut corrupted = s.clone();
        let row = corrupted.iter_mut().find(|x| x.image_id == victim).unwrap();
        row.image_features = vec![1e6, -1e6, 1e6];
        row.ehr = vec![Some(-1e6), None];
        let after = kfold_cv(&corrupted, FeatureSet::Fused, 5, 4, || LogisticRegression::new(1.0)).unwrap();
        assert_eq!(after.folds[0].image_ids, base.folds[0].image_ids);
        assert_eq!(after.folds[0].scores[1..], base.folds[0].scores[1..]);
        assert_ne!(after.folds[0].scores[0], base.folds[0].scores[0]);
        // The corrupted row is in every other fold's training set, so those change.
        assert_ne!(after.folds[1].scores, base.folds[1].scores);
    }
}
