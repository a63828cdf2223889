use cxrmetric_core::dataset::{load_manifest, Split};
use cxrmetric_core::embedder::{EmbedderConfig, ModelCheckpoint};
use cxrmetric_core::metric::{train, LossConfig, LossKind, TrainingSet};
use cxrmetric_core::preprocess::Preprocessor;
use cxrmetric_core::retrieval::{index_from_manifest, knn_classify, load_index, save_index};
use cxrmetric_core::synthdata::{export, generate_dataset, SynthConfig};

const SIDE: usize = 64;

fn small_model() -> EmbedderConfig {
    EmbedderConfig {
        input_side: SIDE,
        stage2_grid: SIDE / 16,
        stage1_channels: 8,
        stage2_channels: 8,
        feature_dim: 16,
        head_hidden: 16,
        embed_dim: 32,
        se_reduction: 2,
        ..EmbedderConfig::default()
    }
}

#[test]
fn synth_train_index_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, records) = generate_dataset(&SynthConfig {
        per_class_counts: [10; 3],
        side: SIDE,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let manifest = load_manifest(&export(&records, &dir.path().join("data")).unwrap()).unwrap();
    let pre = Preprocessor::new(SIDE).with_crop_pad(4);

    let set = TrainingSet::from_manifest(&manifest, &pre).unwrap();
    assert_eq!(set.len(), manifest.split(Split::Train).count());
    let init = ModelCheckpoint::init(small_model()).unwrap();
    let cfg = LossConfig {
        iterations: 40,
        samples_per_class: 4,
        lr: 1e-3,
        seed: 1,
        ..LossConfig::default()
    };
    let out = train(&init, &set, &cfg, LossKind::Ms).unwrap();
    assert_eq!(out.trace.len(), 40);
    assert!(out.trace.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    assert_eq!(out.checkpoint.iteration, init.iteration + 40);
    assert_ne!(out.checkpoint.content_hash(), init.content_hash());

    // Same seed, same result.
    let again = train(&init, &set, &cfg, LossKind::Ms).unwrap();
    assert_eq!(again.checkpoint.content_hash(), out.checkpoint.content_hash());

    let ckpt_dir = dir.path().join("ckpt");
    out.checkpoint.save(&ckpt_dir).unwrap();
    let loaded = ModelCheckpoint::load(&ckpt_dir).unwrap();
    assert_eq!(loaded.content_hash(), out.checkpoint.content_hash());

    let hash = loaded.content_hash();
    let index = index_from_manifest(&loaded.model, &manifest, Split::Train, &pre, hash.clone()).unwrap();
    let index_dir = dir.path().join("index");
    save_index(&index, &index_dir).unwrap();
    let index = load_index(&index_dir, Some(&hash)).unwrap();
    assert_eq!(index.len(), set.len());

    for rec in manifest.split(Split::Train) {
        let q = loaded.model.embed(&pre.load_eval(&manifest.resolve(rec)).unwrap()).unwrap();
        let hits = index.query_topk(&q, 3).unwrap();
        assert_eq!(hits.entries[0].id, rec.id);
        // The self-match sits at distance ~0 and outweighs the other votes.
        let (label, _) = knn_classify(&hits).unwrap();
        assert_eq!(label, rec.label);
    }
}
