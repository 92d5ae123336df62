//! Top-1 sparse activation versus dense soft fusion: identical plumbing,
//! one quarter of the expert work.
//!
//! ```sh
//! cargo run --release --example sparse_inference
//! ```

use cbdes_moe::moe::{forward_soft, infer_sparse};
use cbdes_moe::train::{ModelConfig, MoeModel};
use cbdes_moe::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() -> cbdes_moe::Result<()> {
    let mut model = MoeModel::new(&ModelConfig {
        seed: 11,
        ..Default::default()
    })?;
    // give the router non-uniform opinions
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    *model.router.score3.weight.value_mut() = Tensor::rand_uniform(&[4, 64], -1.0, 1.0, &mut rng);

    let batch = 8;
    let images = Tensor::rand_uniform(&[batch, 3, 32, 32], -1.0, 1.0, &mut rng);

    let t0 = Instant::now();
    let (_, _, _, dense_passes) = forward_soft(&mut model.bundle, &mut model.router, &images, 1)?;
    let dense_time = t0.elapsed();

    let t0 = Instant::now();
    let sparse = infer_sparse(&mut model.bundle, &mut model.router, &images, 1, 1)?;
    let sparse_time = t0.elapsed();

    println!("batch size {batch}, {} experts", model.num_experts());
    println!(
        "dense soft fusion : {:>6.1} ms, {} expert passes",
        dense_time.as_secs_f64() * 1e3,
        dense_passes
    );
    println!(
        "top-1 sparse      : {:>6.1} ms, {} expert passes",
        sparse_time.as_secs_f64() * 1e3,
        sparse.expert_image_passes
    );
    println!(
        "speedup {:.2}x",
        dense_time.as_secs_f64() / sparse_time.as_secs_f64()
    );
    for (i, sel) in sparse.selected.iter().enumerate() {
        println!(
            "image {i}: expert {} (p = {:.3})",
            sel[0],
            sparse.routing.row(i)[sel[0]]
        );
    }
    Ok(())
}
