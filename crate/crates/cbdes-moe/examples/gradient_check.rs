//! Verify reverse-mode gradients against central finite differences for a
//! couple of representative ops.
//!
//! ```sh
//! cargo run --release --example gradient_check
//! ```

use cbdes_moe::gradcheck::{check_gradients, GradCheckConfig};
use cbdes_moe::nn::MultiHeadAttention;
use cbdes_moe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = GradCheckConfig::default();

    // conv2d: loss = <conv(x, w, b), r>
    let input = Tensor::rand_uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut rng);
    let weight = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let bias = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
    let coeffs: Vec<f64> = (0..2 * 3 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let res = check_gradients(&[input, weight, bias], cfg, |g, vars| {
        let y = g.conv2d(vars[0], vars[1], vars[2], 1, 1).unwrap();
        g.project(y, &coeffs)
    });
    println!(
        "conv2d      : {} partials, max relative error {:.2e}",
        res.checked, res.max_rel_error
    );

    // full attention block
    let mha = MultiHeadAttention::new("demo", 16, 4, &mut rng).unwrap();
    let tokens = Tensor::rand_uniform(&[2, 5, 16], -1.0, 1.0, &mut rng);
    let coeffs: Vec<f64> = (0..2 * 5 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let res = check_gradients(&[tokens], cfg, |g, vars| {
        let y = mha.forward(g, vars[0]).unwrap();
        g.project(y, &coeffs)
    });
    println!(
        "attention   : {} partials, max relative error {:.2e}",
        res.checked, res.max_rel_error
    );

    // load balance through softmax
    let logits = Tensor::rand_uniform(&[6, 4], -1.0, 1.0, &mut rng);
    let res = check_gradients(&[logits], cfg, |g, vars| {
        let p = g.softmax(vars[0]).unwrap();
        g.load_balance(p).unwrap()
    });
    println!(
        "load balance: {} partials, max relative error {:.2e}",
        res.checked, res.max_rel_error
    );
}
