//! The reverse-mode tape on its own: a tiny attention-like expression, its
//! gradient, and a central-difference check.

use enki::numerics::{Graph, Tensor};

fn loss_of(x: &Tensor, w: &Tensor) -> enki::Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.constant(w.clone());
    let h = g.matmul(xv, wv)?;
    let s = g.softmax(h)?;
    let a = g.gelu(s);
    let loss = g.mean(a)?;
    g.backward(loss)?;
    Ok((g.value(loss).item().unwrap_or(f64::NAN), g.grad(xv).expect("x is a parameter")))
}

fn main() -> enki::Result<()> {
    let x = Tensor::from_fn(&[3, 4], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3);
    let w = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.37).sin());
    let (loss, grad) = loss_of(&x, &w)?;
    println!("loss {loss:.6}");

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let fd = (loss_of(&up, &w)?.0 - loss_of(&down, &w)?.0) / (2.0 * h);
        let an = grad.data()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-12));
        println!("x[{i:>2}] tape {an:>12.6e}  finite diff {fd:>12.6e}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
