//! Audits the hand-written backward rules against central finite differences.
//!
//! cargo run --example gradient_check

use mmemo::gradcheck::check_inputs;
use mmemo::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn weighted_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product::<usize>();
    let w = g.constant(Tensor::new(shape, (0..n).map(|i| (i as f64 * 0.37).cos()).collect())?);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // one transformer-ish block: x W, layer norm, gelu, masked attention
    let inputs = vec![
        random(&mut rng, 6, 4),
        random(&mut rng, 4, 4),
        Tensor::vector(vec![1.0, 0.8, 1.2, 0.9]),
        Tensor::vector(vec![0.1, -0.2, 0.0, 0.3]),
    ];
    let mask = [true, true, true, true, true, false];
    let err = check_inputs(&inputs, 1e-6, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
        let h = g.gelu(h);
        let a = g.attention(h, h, h, &mask, 6, 2)?;
        weighted_sum(g, a)
    })?;
    println!("block (matmul, layer_norm, gelu, attention): worst relative error {err:.2e}");

    let logits = vec![random(&mut rng, 5, 7)];
    let err = check_inputs(&logits, 1e-6, |g, v| g.cross_entropy(v[0], &[0, 6, 3, 3, 1]))?;
    println!("cross entropy: worst relative error {err:.2e}");

    let teacher = Tensor::new(vec![2, 7], [[0.7, 0.1, 0.05, 0.05, 0.04, 0.03, 0.03]; 2].concat())?;
    let err = check_inputs(&[random(&mut rng, 2, 7)], 1e-6, |g, v| g.kl_div(v[0], &teacher))?;
    println!("kl divergence: worst relative error {err:.2e}");
    Ok(())
}
