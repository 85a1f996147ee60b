//! A small regression fitted with the tape, then a finite-difference check
//! of the same loss.
//!
//! cargo run --example autodiff_tour

use rgf::autodiff::Tape;
use rgf::gradcheck::check_gradients;
use rgf::seed::rng;
use rgf::Tensor;

fn main() -> rgf::Result<()> {
    let mut r = rng(7);
    let x = Tensor::randn([32, 3], 1.0, &mut r);
    let true_w = Tensor::new([3, 1], vec![0.5, -1.5, 2.0])?;
    let y = {
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(true_w));
        let out = t.matmul(xv, wv)?;
        t.value(out).clone()
    };

    let mut w = Tensor::zeros([3, 1]);
    for step in 0..200 {
        let mut t = Tape::new();
        let wv = t.leaf(w.clone());
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let pred = t.matmul(xv, wv)?;
        let loss = t.mse_loss(pred, yv)?;
        t.backward(loss)?;
        let g = t.grad(wv).expect("leaf has a gradient");
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= 0.1 * gi;
        }
        if step % 50 == 0 {
            println!("step {step:>3}  loss {:.6}", t.value(loss).item());
        }
    }
    println!("fitted w = {:?}", w.data());

    let err = check_gradients(&[x, w], &[true, true], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.tanh(h);
        Ok(t.mean(h))
    })?;
    println!("finite-difference relative error of tanh(xw) mean: {err:.2e}");
    Ok(())
}
