//! Reverse-mode gradients on a small expression, checked against finite differences.

use mtdnn::tensor::grad_check;
use mtdnn::{Graph, Tensor};

fn main() -> mtdnn::Result<()> {
    let x = Tensor::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.0, -0.5]])?;

    // f(x) = mean(softmax(x) * tanh(x))
    let f = |g: &mut Graph<'static>, x| {
        let p = g.softmax(x, 1)?;
        let t = g.tanh(x)?;
        let y = g.mul(p, t)?;
        g.mean(y)
    };

    let mut g = Graph::new();
    let v = g.input(x.clone())?;
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    println!("f(x) = {}", g.value(out).item()?);
    println!("df/dx = {:?}", grads.wrt(v).map(Tensor::data));

    let report = grad_check(f, &x, 1e-5, 1e-6)?;
    println!("finite-difference check: max relative error {:.2e}, passed {}", report.max_rel_error, report.passed());
    Ok(())
}
