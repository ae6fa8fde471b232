//! Compares reverse-mode gradients of a small attention block with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph::{Graph, Result, Tensor, Var};

fn loss(g: &mut Graph, f: Var, beta: Var) -> Result<Var> {
    let offsets = [0, 3, 7];
    let a = g.voxel_attention(f, beta, &offsets)?;
    let pooled = g.segment_max(a, &offsets)?;
    let s = g.sigmoid(pooled)?;
    g.sum(s)
}

fn value(f: &Tensor, beta: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (fv, bv) = (g.constant(f.clone()), g.constant(beta.clone()));
    let out = loss(&mut g, fv, bv).unwrap();
    g.value(out).data()[0]
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = Tensor::new(vec![7, 3], (0..21).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let beta = Tensor::new(vec![2], vec![0.3, 0.8])?;

    let mut g = Graph::new();
    let fv = g.input(f.clone(), true);
    let bv = g.input(beta.clone(), true);
    let out = loss(&mut g, fv, bv)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(fv).expect("features receive a gradient");

    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..f.numel() {
        let (mut plus, mut minus) = (f.clone(), f.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (value(&plus, &beta) - value(&minus, &beta)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    println!("loss {:.6}, worst relative gradient error {worst:.2e}", g.value(out).data()[0]);
    Ok(())
}
