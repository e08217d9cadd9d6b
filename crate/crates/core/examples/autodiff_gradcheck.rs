//! Builds a small graph by hand, runs the backward pass, and compares the
//! gradient against central finite differences.
//!
//! ```text
//! cargo run --release --example autodiff_gradcheck
//! ```

use advood::{Graph, Tensor, Var};

fn loss(x: &Tensor, w: &Tensor, b: &Tensor, labels: &[usize]) -> advood::Result<(Graph, Var, f64)> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
    let h = g.conv2d(xv, wv, bv, 1, 1)?;
    let h = g.relu(h);
    let h = g.global_avg_pool(h)?;
    let ce = g.cross_entropy(h, labels)?;
    let v = g.value(ce).item()?;
    g.backward(ce)?;
    Ok((g, wv, v))
}

fn main() -> advood::Result<()> {
    let ramp = |shape: &[usize], scale: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0 - 0.5) * scale).collect())
    };
    let x = ramp(&[2, 3, 6, 6], 2.0)?;
    let w = ramp(&[4, 3, 3, 3], 0.8)?;
    let b = ramp(&[4], 0.2)?;
    let labels = [1, 3];

    let (g, wv, base) = loss(&x, &w, &b, &labels)?;
    let analytic = g.grad(wv).expect("weight gradient").clone();
    println!("loss {base:.6}");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..w.numel()).step_by(9) {
        let mut up = w.clone();
        up.data_mut()[i] += h;
        let mut down = w.clone();
        down.data_mut()[i] -= h;
        let numeric = (loss(&x, &up, &b, &labels)?.2 - loss(&x, &down, &b, &labels)?.2) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
        println!("dL/dw[{i:3}]  analytic {a:+.8}  numeric {numeric:+.8}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
