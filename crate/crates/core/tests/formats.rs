//! Container and checkpoint files: exact round trips and structured errors on
//! corrupted input.

mod common;

use common::{is_format_error, mutate, sample_checkpoint, sample_clip};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lddm::checkpoint::Checkpoint;
use lddm::video::{decode_video, encode_video, read_video, write_video};
use lddm::LddmError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn video_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let clip = sample_clip(&mut ChaCha8Rng::seed_from_u64(1));
    let path = dir.path().join("clip.lddv");
    write_video(&path, &clip).unwrap();
    let back = read_video(&path).unwrap();
    assert_eq!(back, clip);
    assert!(back.data().iter().zip(clip.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(std::fs::read(&path).unwrap(), encode_video(&back));
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ck = sample_checkpoint(&mut ChaCha8Rng::seed_from_u64(2));
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    ck.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.kind, ck.kind);
    assert_eq!(loaded.extra, ck.extra);
    for ((n1, t1), (n2, t2)) in loaded.params.iter().zip(ck.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert!(t1.data().iter().zip(t2.data()).all(|(x, y)| *x == (*y as f32) as f64));
    }
}

#[test]
fn mutated_headers_yield_categorized_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let video = encode_video(&sample_clip(&mut rng));
    let ckpt = sample_checkpoint(&mut rng).to_bytes();
    let mut rejected = 0;
    for i in 0..1000 {
        let (name, original) = if i % 2 == 0 { ("video", &video) } else { ("checkpoint", &ckpt) };
        let bad = mutate(original, &mut rng);
        let result = catch_unwind(AssertUnwindSafe(|| {
            if i % 2 == 0 {
                decode_video(&bad).err()
            } else {
                Checkpoint::from_bytes(&bad).err()
            }
        }));
        let err = result.unwrap_or_else(|_| panic!("{name} decoder panicked on mutation {i}"));
        if let Some(e) = err {
            assert!(is_format_error(&e), "{name} mutation {i} gave uncategorized error {e:?}");
            rejected += 1;
        }
    }
    assert!(rejected > 500, "only {rejected} of 1000 mutations were rejected");
}

#[test]
fn wrong_container_kind_is_bad_magic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let video = encode_video(&sample_clip(&mut rng));
    let ckpt = sample_checkpoint(&mut rng).to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&video), Err(LddmError::BadMagic { .. })));
    assert!(matches!(decode_video(&ckpt), Err(LddmError::BadMagic { .. })));
    assert!(matches!(decode_video(&[]), Err(LddmError::BadMagic { .. })));
}
