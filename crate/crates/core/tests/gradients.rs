//! Analytic gradients of the three trainable networks against central
//! finite differences, in double precision.

mod common;

const TOL: f64 = 1e-4;

#[test]
fn encoder_gradients_match_finite_differences() {
    let (worst, k, i) = common::encoder_gradcheck();
    assert!(worst <= TOL, "encoder worst relative error {worst:e} at tensor {k} element {i}");
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let (worst, k, i) = common::decoder_gradcheck();
    assert!(worst <= TOL, "decoder worst relative error {worst:e} at tensor {k} element {i}");
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let (worst, k, i) = common::denoiser_gradcheck();
    assert!(worst <= TOL, "denoiser worst relative error {worst:e} at tensor {k} element {i}");
}
