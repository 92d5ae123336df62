//! The load-balance objective on hand-built routing matrices: its extremes,
//! the algebraic identity it satisfies, and its gradient at uniformity.
//!
//! ```sh
//! cargo run --release --example load_balancing
//! ```

use cbdes_moe::moe::{expert_mean_activation, load_balance_loss, total_loss};
use cbdes_moe::router::RoutingMatrix;
use cbdes_moe::{Graph, Mode, Tensor};

fn matrix(rows: Vec<Vec<f64>>) -> RoutingMatrix {
    let (n, k) = (rows.len(), rows[0].len());
    RoutingMatrix::new(Tensor::new(vec![n, k], rows.into_iter().flatten().collect()).unwrap())
        .unwrap()
}

fn main() -> cbdes_moe::Result<()> {
    let uniform = matrix(vec![vec![0.25; 4]; 4]);
    let collapsed = matrix(vec![vec![1.0, 0.0, 0.0, 0.0]; 4]);
    let split = matrix(vec![
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ]);

    println!("N = 4 images, K = 4 experts");
    println!("uniform rows      -> L = {:.4} (minimum N/K)", load_balance_loss(&uniform)?);
    println!("all on expert 0   -> L = {:.4} (maximum N)", load_balance_loss(&collapsed)?);
    println!("one each          -> L = {:.4}", load_balance_loss(&split)?);

    // identity: L == N * sum_j mean_j^2
    let skew = matrix(vec![
        vec![0.7, 0.1, 0.1, 0.1],
        vec![0.4, 0.3, 0.2, 0.1],
        vec![0.25, 0.25, 0.25, 0.25],
    ]);
    let l = load_balance_loss(&skew)?;
    let mean = expert_mean_activation(&skew);
    let identity = 3.0 * mean.iter().map(|m| m * m).sum::<f64>();
    println!("skewed rows       -> L = {l:.6}, N*sum(p̄²) = {identity:.6}");

    // combined objective
    let report = total_loss(2.0, &skew, 0.01)?;
    println!(
        "task 2.0 + 0.01 * balance {:.4} -> total {:.4}",
        report.balance_loss, report.total
    );

    // at exactly uniform routing the gradient through the softmax vanishes:
    // the balance term pushes equally on every logit
    let mut g = Graph::new(Mode::Train);
    let logits = g.var(Tensor::zeros(&[4, 4]));
    let probs = g.softmax(logits)?;
    let loss = g.load_balance(probs)?;
    g.backward(loss)?;
    let grad = g.grad_of(logits).unwrap();
    let max_abs = grad.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    println!("|d balance / d logits| at uniform routing = {max_abs:.2e}");
    Ok(())
}
