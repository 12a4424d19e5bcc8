//! Tour of the reverse-mode autodiff core: build a computation from
//! differentiable tensors, backpropagate a scalar loss, and cross-check the
//! analytic gradients against central finite differences.
//!
//!     cargo run --release --example autodiff

use unmt::tensor::{backward, grad_check, Tensor};

fn main() -> Result<(), unmt::tensor::TensorError> {
    // A 2x3 parameter matrix, a 3x2 parameter matrix, and a frozen input.
    let w1 = Tensor::<f64>::param(vec![0.4, -0.2, 0.1, 0.7, 0.3, -0.5], &[2, 3]);
    let w2 = Tensor::<f64>::param(vec![0.2, 0.8, -0.3, 0.1, 0.5, -0.6], &[3, 2]);
    let x = Tensor::<f64>::constant(vec![1.0, 2.0], &[1, 2]);

    // loss = sum(c ⊙ softmax(tanh(x·W1)·W2))  — a miniature network. The
    // weighting keeps the loss sensitive to the logits (a bare sum of
    // softmax outputs is identically 1, with zero gradient everywhere).
    let cost = Tensor::<f64>::constant(vec![1.0, -2.0], &[1, 2]);
    let h = x.matmul(&w1)?.tanh();
    let logits = h.matmul(&w2)?;
    let loss = logits.softmax_rows()?.mul(&cost)?.sum_all();
    println!("loss = {:.6}", loss.item());

    // Reverse pass: every parameter that contributed now holds d(loss)/d(p).
    backward(&loss)?;
    println!("dL/dW1 = {:?}", w1.grad());
    println!("dL/dW2 = {:?}", w2.grad());

    // The same computation as a closure, checked against finite differences.
    // `grad_check` reports the worst relative error across all parameters.
    w1.zero_grad();
    w2.zero_grad();
    let params = [w1.clone(), w2.clone()];
    let err = grad_check(
        &mut || {
            let probs = x.matmul(&w1)?.tanh().matmul(&w2)?.softmax_rows()?;
            Ok(probs.mul(&cost)?.sum_all())
        },
        &params,
        1e-5,
    )?;
    println!("max relative error vs finite differences: {err:.3e}");
    assert!(err < 1e-6, "analytic and numeric gradients disagree");

    // Gradients accumulate across backward calls until explicitly cleared;
    // detach() cuts the graph so no gradient flows past the boundary.
    let a = Tensor::<f64>::param(vec![2.0], &[1]);
    let b = a.scale_const(3.0);
    backward(&b.sum_all())?;
    let c = a.scale_const(3.0);
    backward(&c.sum_all())?;
    println!("accumulated grad after two backward passes: {:?}", a.grad());
    a.zero_grad();
    let frozen = a.detach().scale_const(3.0);
    backward(&frozen.sum_all())?;
    println!("grad through a detach boundary: {:?}", a.grad());
    Ok(())
}
