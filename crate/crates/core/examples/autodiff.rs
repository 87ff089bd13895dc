//! Reverse-mode differentiation on the tape, checked against central
//! differences.

use scenehoi::numeric::{finite_difference_grad, relative_error, Tape, Tensor};

fn loss_of(tape: &mut Tape, x: scenehoi::numeric::Var, w: &Tensor) -> scenehoi::Result<scenehoi::numeric::Var> {
    let w = tape.constant(w.clone());
    let h = tape.matmul(x, w)?;
    let h = tape.gelu(h)?;
    let p = tape.log_softmax(h)?;
    let s = tape.mean(p)?;
    tape.neg(s)
}

fn main() -> scenehoi::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4])?;
    let w = Tensor::new(vec![3, 4], (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect())?;

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = loss_of(&mut tape, xv, &w)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(xv).expect("x is a leaf").clone();

    let numeric = finite_difference_grad(
        |p| {
            let mut t = Tape::new();
            let v = t.leaf(p.clone());
            let l = loss_of(&mut t, v, &w).expect("shapes are fixed");
            t.value(l).item()
        },
        &x,
        1e-6,
    );
    println!("loss {:.6}", tape.value(loss).item());
    println!("analytic {:?}", analytic.data());
    println!("numeric  {:?}", numeric.data());
    println!("relative error {:.2e}", relative_error(&analytic, &numeric, 1e-6));
    Ok(())
}
