//! im2col convolution against a direct nested-loop evaluation.

mod common;

use common::oracles::{conv_sweep, naive_conv};
use polyp_ses::tensor::ConvGeometry;
use polyp_ses::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dilated_strided_padded_sweep() {
    let (cases, worst) = conv_sweep();
    assert!(cases >= 200, "{cases} cases");
    assert!(worst < 1e-6, "max abs err {worst:e}");
    println!("{cases} cases, max abs err {worst:e}");
}
#[test]
fn single_precision_tracks_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[1, 4, 12, 12], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut rng);
    let b = [0.1, -0.2, 0.3];
    let g = ConvGeometry::new(1, 2, 2);
    let want = naive_conv(&x, &w, &b, g);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.cast());
    let wv = tape.constant(w.cast());
    let bv = tape.constant(Tensor::new(&[3], b.iter().map(|&v| v as f32).collect()).unwrap());
    let y = tape.conv2d(xv, wv, Some(bv), g).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(want.data()) {
        assert!((f64::from(*a) - e).abs() < 1e-4 * (1.0 + e.abs()));
    }
}

#[test]
fn kernel_wider_than_padded_input_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(tape.conv2d(x, w, None, ConvGeometry::new(1, 0, 4)).is_err());
}
