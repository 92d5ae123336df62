//! Wall-time comparison of dense soft fusion against sparse top-1 expert
//! activation.
//!
//! Routing probabilities are computed once per batch size outside the timed
//! region, so the numbers isolate the expert stage. The instrumented pass
//! counts make the B*K versus B workload difference explicit.

use crate::error::Result;
use crate::moe::{dense_expert_stage, sparse_expert_stage};
use crate::tensor::Tensor;
use crate::train::MoeModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub reps: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_sizes: vec![1, 2, 4, 8, 16],
            reps: 20,
            threads: 1,
            seed: 0,
        }
    }
}

/// One timing row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub batch: usize,
    pub mode: &'static str,
    pub reps: usize,
    pub median_seconds: f64,
    pub expert_image_passes: usize,
    /// Dense median over sparse median; present on the `top1` rows.
    pub speedup: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times the expert stage under both fusion modes for every batch size.
pub fn run_benchmark(model: &mut MoeModel, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &b in &cfg.batch_sizes {
        let images = Tensor::rand_uniform(&[b, 3, 32, 32], -1.0, 1.0, &mut rng);
        let routing = model.router.route_eval(&images, cfg.threads)?;

        let mut dense_times = Vec::with_capacity(cfg.reps);
        let mut dense_passes = 0usize;
        for _ in 0..cfg.reps {
            let t0 = Instant::now();
            let (_, _, passes) =
                dense_expert_stage(&mut model.bundle, &images, &routing, cfg.threads)?;
            dense_times.push(t0.elapsed().as_secs_f64());
            dense_passes = passes;
        }

        let mut sparse_times = Vec::with_capacity(cfg.reps);
        let mut sparse_passes = 0usize;
        for _ in 0..cfg.reps {
            let t0 = Instant::now();
            let out = sparse_expert_stage(
                &mut model.bundle,
                &images,
                routing.clone(),
                1,
                cfg.threads,
            )?;
            sparse_times.push(t0.elapsed().as_secs_f64());
            sparse_passes = out.expert_image_passes;
        }

        let dense_med = median(dense_times);
        let sparse_med = median(sparse_times);
        rows.push(BenchRow {
            batch: b,
            mode: "soft_all",
            reps: cfg.reps,
            median_seconds: dense_med,
            expert_image_passes: dense_passes,
            speedup: None,
        });
        rows.push(BenchRow {
            batch: b,
            mode: "top1",
            reps: cfg.reps,
            median_seconds: sparse_med,
            expert_image_passes: sparse_passes,
            speedup: Some(dense_med / sparse_med),
        });
    }
    Ok(rows)
}

/// Writes the benchmark table with a header row.
pub fn write_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        file,
        "batch,mode,reps,median_seconds,expert_image_passes,speedup"
    )?;
    for r in rows {
        let speedup = r
            .speedup
            .map(|s| format!("{s:.4}"))
            .unwrap_or_default();
        writeln!(
            file,
            "{},{},{},{:.6},{},{}",
            r.batch, r.mode, r.reps, r.median_seconds, r.expert_image_passes, speedup
        )?;
    }
    Ok(())
}
