//! Short end-to-end run: train with soft gating, checkpoint, reload, and
//! compare dense against sparse evaluation.
//!
//! ```sh
//! cargo run --release --example train_and_eval
//! ```

use cbdes_moe::checkpoint;
use cbdes_moe::moe::FusionMode;
use cbdes_moe::train::{evaluate, eval_scenes, train, ModelConfig, TrainConfig};

fn main() -> cbdes_moe::Result<()> {
    let model_cfg = ModelConfig {
        seed: 3,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        n_train: 32,
        n_eval: 32,
        batch_size: 4,
        lr: 1e-3,
        seed: 3,
        threads: 2,
        ..Default::default()
    };

    println!(
        "training {} steps (lr {}, lambda {})...",
        train_cfg.total_steps(),
        train_cfg.lr,
        train_cfg.lambda
    );
    let mut outcome = train(&model_cfg, &train_cfg)?;
    let first = &outcome.reports[0];
    let last = outcome.reports.last().unwrap();
    println!(
        "task loss {:.4} -> {:.4}; balance loss {:.4} -> {:.4}",
        first.task_loss, last.task_loss, first.balance_loss, last.balance_loss
    );

    let dir = std::env::temp_dir().join("cbdes_train_and_eval");
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("checkpoint.bin");
    checkpoint::save(&outcome.model, &ckpt)?;
    println!("checkpoint at {}", ckpt.display());

    let mut reloaded = checkpoint::load(&ckpt)?;
    let eval_set = eval_scenes(&train_cfg);
    let soft = evaluate(&mut reloaded, &eval_set, FusionMode::SoftAll, 2)?;
    let top1 = evaluate(&mut reloaded, &eval_set, FusionMode::TopK(1), 2)?;
    println!(
        "soft fusion : accuracy {:.3}, {} expert passes",
        soft.accuracy, soft.expert_image_passes
    );
    println!(
        "top-1 sparse: accuracy {:.3}, {} expert passes, selections {:?}",
        top1.accuracy, top1.expert_image_passes, top1.selection_counts
    );

    // the original and reloaded models agree exactly
    let direct = evaluate(&mut outcome.model, &eval_set, FusionMode::TopK(1), 2)?;
    assert_eq!(direct.accuracy, top1.accuracy);
    println!("reloaded model reproduces the original evaluation");
    Ok(())
}
