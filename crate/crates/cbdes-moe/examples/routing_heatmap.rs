//! Route a batch of synthetic scenes and export the per-image expert
//! probabilities as CSV rows, one row per image. Feed the file to any
//! plotting tool to get the routing heatmap.
//!
//! ```sh
//! cargo run --release --example routing_heatmap
//! ```

use cbdes_moe::data::{batch_of, generate_dataset};
use cbdes_moe::train::{ModelConfig, MoeModel};
use std::path::Path;

fn main() -> cbdes_moe::Result<()> {
    let mut model = MoeModel::new(&ModelConfig {
        seed: 7,
        ..Default::default()
    })?;

    // a fresh router scores uniformly; nudge its final layer so the heatmap
    // has structure worth looking at
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    *model.router.score3.weight.value_mut() =
        cbdes_moe::Tensor::rand_uniform(&[4, 64], -0.8, 0.8, &mut rng);

    let scenes = generate_dataset(16, 21);
    let indices: Vec<usize> = (0..scenes.len()).collect();
    let (images, _) = batch_of(&scenes, &indices);

    let routing = model.router.route_eval(&images, 2)?;
    println!("image  regime  probabilities (expert 0..3)");
    for (i, scene) in scenes.iter().enumerate() {
        let row: Vec<String> = routing.row(i).iter().map(|p| format!("{p:.3}")).collect();
        println!("{:<6} {:<7} [{}]", i, scene.regime, row.join(", "));
    }
    println!("max |row sum - 1| = {:.2e}", routing.max_row_sum_error());

    let out = Path::new("routing_heatmap.csv");
    routing.write_csv(out)?;
    println!("wrote {}", out.display());
    Ok(())
}
