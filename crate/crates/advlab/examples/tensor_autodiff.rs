//! Reverse-mode autodiff on the tape: build a small expression, pull
//! gradients back, and cross-check one of them against a central
//! finite difference.
//!
//! ```bash
//! cargo run --example tensor_autodiff
//! ```

use advlab::tensor::{Tape, Tensor};

fn main() -> advlab::Result<()> {
    // f(w, x) = mean(relu(w·x)) with w: [2,3], x: [3,2].
    let w_data = Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.25, 1.5, 0.75, -0.5])?;
    let x_data = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0])?;

    let mut tape = Tape::new();
    let w = tape.input(&w_data, true);
    let x = tape.input(&x_data, false);
    let y = tape.matmul(w, x)?;
    let y = tape.relu(y);
    let loss = tape.mean(y);
    tape.backward(loss)?;

    println!("loss = {:.6}", tape.scalar_value(loss));
    let grad = tape.grad(w).expect("w requires a gradient").to_vec();
    println!("dloss/dw = {grad:?}");

    // Central finite difference on w[0].
    let h = 1e-5;
    let eval = |w0: f64| -> advlab::Result<f64> {
        let mut values = w_data.data().to_vec();
        values[0] = w0;
        let mut tape = Tape::new();
        let w = tape.input(&Tensor::new(vec![2, 3], values)?, false);
        let x = tape.input(&x_data, false);
        let y = tape.matmul(w, x)?;
        let y = tape.relu(y);
        let loss = tape.mean(y);
        Ok(tape.scalar_value(loss))
    };
    let fd = (eval(w_data.data()[0] + h)? - eval(w_data.data()[0] - h)?) / (2.0 * h);
    println!("analytic dloss/dw[0] = {:.8}", grad[0]);
    println!("finite-diff estimate = {fd:.8}");
    println!("abs difference       = {:.2e}", (grad[0] - fd).abs());
    Ok(())
}
