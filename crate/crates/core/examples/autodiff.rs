//! Builds a small graph on the tape, runs the backward pass and checks one
//! gradient entry against a central difference.

use mmbseg::engine::{ConvSpec, Tape, Var};
use mmbseg::Tensor;

fn loss(x: &Tensor<f64>, w: &Tensor<f64>, dw: &Tensor<f64>) -> mmbseg::Result<(f64, Tape<f64>, Var, [Var; 3])> {
    let mut tape = Tape::new();
    let (xv, wv, dv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(dw.clone()));
    let h = tape.conv2d(xv, wv, None, &ConvSpec::dense(2, 4, 1, 1))?;
    let h = tape.relu6(h);
    let h = tape.depthwise_conv2d(h, dv, &ConvSpec::depthwise(4, 2))?;
    let h = tape.mul(h, h)?;
    let l = tape.mean(h);
    let v = tape.value(l).data()[0];
    Ok((v, tape, l, [xv, wv, dv]))
}

fn main() -> mmbseg::Result<()> {
    let x = Tensor::from_fn(vec![1, 2, 6, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 4.0);
    let w = Tensor::from_fn(vec![4, 2, 1, 1], |i| 0.3 * (i as f64 - 3.5));
    let dw = Tensor::from_fn(vec![4, 1, 3, 3], |i| ((i * 7 % 5) as f64 - 2.0) / 6.0);

    let (l0, mut tape, l, [_, wv, dv]) = loss(&x, &w, &dw)?;
    tape.backward(l)?;
    println!("loss {l0:.6}, {} tape nodes", tape.len());

    let h = 1e-6;
    for (name, var, base, j) in [("pointwise", wv, &w, 5), ("depthwise", dv, &dw, 13)] {
        let analytic = tape.grad(var).expect("leaf gradient").data()[j];
        let mut plus = base.clone();
        plus.data_mut()[j] += h;
        let mut minus = base.clone();
        minus.data_mut()[j] -= h;
        let (lp, lm) = if name == "pointwise" {
            (loss(&x, &plus, &dw)?.0, loss(&x, &minus, &dw)?.0)
        } else {
            (loss(&x, &w, &plus)?.0, loss(&x, &w, &minus)?.0)
        };
        let numeric = (lp - lm) / (2.0 * h);
        println!("{name} weight {j}: analytic {analytic:+.8} numeric {numeric:+.8}");
    }
    Ok(())
}
