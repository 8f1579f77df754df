//! Reverse-mode gradients from the tape, checked against central differences.
//!
//!     cargo run --example gradient_check

use elisabot::autodiff::Tape;
use elisabot::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// loss = Σ tanh(W·x)
fn loss(w: &Tensor, x: &Tensor) -> elisabot::Result<f64> {
    let mut tape = Tape::new();
    let (w, x) = (tape.param(w), tape.param(x));
    let y = tape.matvec(w, x)?;
    let y = tape.tanh(y);
    let l = tape.sum(y);
    Ok(tape.value(l).item())
}

fn main() -> elisabot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let x = Tensor::uniform(&[4], 1.0, &mut rng);

    let mut tape = Tape::new();
    let (wv, xv) = (tape.param(&w), tape.param(&x));
    let y = tape.matvec(wv, xv)?;
    let y = tape.tanh(y);
    let l = tape.sum(y);
    let grads = tape.backward(l)?;

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[i] += eps;
        minus.data_mut()[i] -= eps;
        let numeric = (loss(&plus, &x)? - loss(&minus, &x)?) / (2.0 * eps);
        let analytic = grads.get(0).data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        println!("dL/dW[{}][{}]  tape {analytic:+.8}  numeric {numeric:+.8}", i / 4, i % 4);
    }
    println!("dL/dx = {:?}", grads.get(1).data());
    println!("worst relative error {worst:.2e}");
    assert!(worst < 1e-4);
    Ok(())
}
