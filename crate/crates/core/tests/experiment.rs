//! The augmentation experiment on a tiny toy task.

use lddm::classifier::{augmentation_experiment, ClassifierConfig, Condition};
use lddm::data::{generate_toy_dataset, prepare_clips, LabeledItem, LabeledVideoDataset, Provenance, ToyGenParams};
use lddm::nn::TrainConfig;

fn toy(videos_per_class: usize, seed: u64) -> LabeledVideoDataset {
    let p = ToyGenParams {
        videos_per_class,
        frames: 24,
        height: 8,
        width: 8,
        channels: 2,
        class0_motion: Default::default(),
        class1_motion: Default::default(),
        blob_size: 1.0,
        speed: 0.1,
        amplitude: 1.5,
        period: 12.0,
        noise_std: 0.02,
        seed,
    };
    prepare_clips(&generate_toy_dataset(&p).unwrap(), 24, 8, None).unwrap()
}

fn as_synthetic(ds: &LabeledVideoDataset) -> LabeledVideoDataset {
    let items = ds
        .items()
        .iter()
        .map(|i| LabeledItem {
            source_id: format!("syn-{}", i.source_id),
            ..i.clone()
        })
        .collect();
    LabeledVideoDataset::new(items, Provenance::Synthetic).unwrap()
}

fn run() -> lddm::classifier::ExperimentReport {
    let real = toy(8, 1);
    let synthetic = as_synthetic(&toy(6, 2));
    let arch = ClassifierConfig {
        clip_shape: real.geometry().unwrap(),
        features: 2,
        hidden: 4,
    };
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        steps: 0,
        epochs: Some(2),
        optimizer: Default::default(),
        seed: 5,
    };
    augmentation_experiment(&real, &synthetic, &[0.5, 0.25], &[0, 1, 2], arch, &cfg).unwrap()
}

#[test]
fn every_cell_is_reported_with_a_shared_test_set() {
    let rep = run();
    assert_eq!(rep.cells.len(), 2 * 3 * 3);
    for cell in &rep.cells {
        assert!(cell.error.is_none(), "{cell:?}");
        for v in [cell.accuracy.unwrap(), cell.f1.unwrap()] {
            assert!((0.0..=1.0).contains(&v));
        }
        let siblings: Vec<_> = rep
            .cells
            .iter()
            .filter(|c| c.fraction == cell.fraction && c.seed == cell.seed)
            .collect();
        assert_eq!(siblings.len(), 3);
        assert!(siblings.iter().all(|c| c.test_digest == cell.test_digest && c.n_test == cell.n_test));
    }
    let n_train = |c: Condition, f: f64| rep.cells.iter().find(|x| x.condition == c && x.fraction == f).unwrap().n_train;
    assert_eq!(n_train(Condition::SyntheticOnly, 0.5), 12);
    assert_eq!(n_train(Condition::RealPlusSynthetic, 0.5), n_train(Condition::RealOnly, 0.5) + 12);
    assert!(n_train(Condition::RealOnly, 0.25) < n_train(Condition::RealOnly, 0.5));
    assert_eq!(rep.summary.len(), 2 * 3);
}

#[test]
fn experiment_is_reproducible_bit_for_bit() {
    let a = serde_json::to_vec(&run()).unwrap();
    let b = serde_json::to_vec(&run()).unwrap();
    assert_eq!(a, b);
}
