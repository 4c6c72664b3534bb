use lddm_wasm_demo::{alpha_bar_curve, log_snr_curve, noised_frame_rgba, toy_video_rgba, FRAMES, SIDE};

const FRAME_BYTES: usize = SIDE * SIDE * 4;

#[test]
fn schedule_curves_decrease() {
    let ab = alpha_bar_curve(1e-3, 0.2, 50).unwrap();
    let snr = log_snr_curve(1e-3, 0.2, 50).unwrap();
    assert_eq!((ab.len(), snr.len()), (50, 50));
    assert!(ab.windows(2).all(|w| w[1] < w[0]));
    assert!(snr.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn toy_video_has_every_frame_and_is_seeded() {
    let v = toy_video_rgba(1, 3, 0.02).unwrap();
    assert_eq!(v.len(), FRAMES * FRAME_BYTES);
    assert!(v.chunks(4).all(|p| p[3] == 255 && p[0] == p[1] && p[1] == p[2]));
    assert_eq!(v, toy_video_rgba(1, 3, 0.02).unwrap());
    assert_ne!(v, toy_video_rgba(0, 3, 0.02).unwrap());
}

#[test]
fn noising_departs_from_the_clean_frame() {
    let clean = noised_frame_rgba(0, 4, 1e-3, 0.2, 50, 0).unwrap();
    let early = noised_frame_rgba(0, 4, 1e-3, 0.2, 50, 1).unwrap();
    let late = noised_frame_rgba(0, 4, 1e-3, 0.2, 50, 50).unwrap();
    assert_eq!(clean.len(), FRAME_BYTES);
    let dist = |a: &[u8], b: &[u8]| a.iter().zip(b).map(|(x, y)| (*x as i64 - *y as i64).abs()).sum::<i64>();
    assert!(dist(&clean, &early) < dist(&clean, &late));
}
