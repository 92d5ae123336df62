//! Fusion of expert outputs under routing weights, sparse top-k inference,
//! and the load-balance objective.

use crate::autodiff::{Graph, Mode};
use crate::error::{Error, Result};
use crate::experts::ExpertBundle;
use crate::router::{RoutingMatrix, SelfAttentionRouter};
use crate::tensor::Tensor;

/// How expert outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Convex combination of every expert output (training-style).
    SoftAll,
    /// Only the k most probable experts run per image.
    TopK(usize),
}

impl FusionMode {
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if let FusionMode::TopK(k) = self {
            if *k < 1 || *k > num_experts {
                return Err(Error::InvalidConfig(format!(
                    "top-k must satisfy 1 <= k <= {num_experts}, got {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss components and routing statistics for one step.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub step: usize,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub total: f64,
    pub lambda: f64,
    /// Mean routing probability per expert over the batch.
    pub expert_mean_activation: Vec<f64>,
    /// Summed routing probability per expert over the batch.
    pub expert_load: Vec<f64>,
    /// Per-expert count of top-1 selections in the batch.
    pub selection_counts: Vec<usize>,
}

impl LossReport {
    pub fn csv_header(num_experts: usize) -> String {
        let mut cols = vec![
            "step".to_string(),
            "task_loss".to_string(),
            "balance_loss".to_string(),
            "total".to_string(),
        ];
        cols.extend((0..num_experts).map(|k| format!("p_mean_{k}")));
        cols.extend((0..num_experts).map(|k| format!("count_{k}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.step.to_string(),
            format!("{}", self.task_loss),
            format!("{}", self.balance_loss),
            format!("{}", self.total),
        ];
        cols.extend(self.expert_mean_activation.iter().map(|p| format!("{p}")));
        cols.extend(self.selection_counts.iter().map(|c| c.to_string()));
        cols.join(",")
    }
}

/// Is this row exactly a one-hot selector?
fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut hit = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hit.is_some() {
                return None;
            }
            hit = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hit
}

/// Soft weighted fusion: for every image `b`,
/// `fused[b] = sum_k P[b,k] * outputs[k][b]`.
///
/// Rows that are exactly one-hot copy the selected expert's output through
/// bit-for-bit, matching what sparse top-1 inference produces.
pub fn fuse_soft(outputs: &[Tensor], routing: &RoutingMatrix) -> Result<Tensor> {
    if outputs.is_empty() {
        return Err(Error::InvalidConfig("fuse_soft: no expert outputs".into()));
    }
    let shape = outputs[0].shape().to_vec();
    for o in outputs {
        if o.shape() != shape {
            return Err(Error::shape(
                "fuse_soft",
                format!("{:?}", shape),
                format!("{:?}", o.shape()),
            ));
        }
    }
    let b = shape[0];
    let k = outputs.len();
    if routing.batch() != b || routing.num_experts() != k {
        return Err(Error::shape(
            "fuse_soft",
            format!("routing [{b}, {k}]"),
            format!("{:?}", routing.tensor().shape()),
        ));
    }
    let per = outputs[0].numel() / b;
    let mut fused = vec![0.0; b * per];
    for bi in 0..b {
        let row = routing.row(bi);
        let dst = &mut fused[bi * per..][..per];
        if let Some(j) = one_hot_index(row) {
            dst.copy_from_slice(&outputs[j].data()[bi * per..][..per]);
            continue;
        }
        for (ki, out) in outputs.iter().enumerate() {
            let w = row[ki];
            let src = &out.data()[bi * per..][..per];
            if ki == 0 {
                for i in 0..per {
                    dst[i] = w * src[i];
                }
            } else {
                for i in 0..per {
                    dst[i] += w * src[i];
                }
            }
        }
    }
    Tensor::new(shape, fused)
}

/// Expert mean activation (Eq-11 style): column means of the routing matrix.
pub fn expert_mean_activation(routing: &RoutingMatrix) -> Vec<f64> {
    routing.mean_per_expert()
}

/// Total routing load per expert: column sums of the routing matrix.
pub fn expert_load(routing: &RoutingMatrix) -> Vec<f64> {
    let (n, k) = (routing.batch(), routing.num_experts());
    let mut load = vec![0.0; k];
    for i in 0..n {
        for (j, l) in load.iter_mut().enumerate() {
            *l += routing.row(i)[j];
        }
    }
    load
}

/// Load-balance loss, computed literally: `L = sum_j p̄_j * l_j` with
/// `p̄ = (1/N) sum_i P_i` and `l = sum_i P_i`.
pub fn load_balance_loss(routing: &RoutingMatrix) -> Result<f64> {
    if routing.batch() == 0 {
        return Err(Error::InvalidDimension("load_balance_loss: empty batch".into()));
    }
    let load = expert_load(routing);
    let n = routing.batch() as f64;
    let mean: Vec<f64> = load.iter().map(|&l| l / n).collect();
    Ok(mean.iter().zip(load.iter()).map(|(&p, &l)| p * l).sum())
}

/// Per-image top-1 selection histogram (ties to the lowest index).
pub fn selection_counts(routing: &RoutingMatrix) -> Vec<usize> {
    let mut counts = vec![0usize; routing.num_experts()];
    for i in 0..routing.batch() {
        counts[routing.argmax_row(i)] += 1;
    }
    counts
}

/// Base-2 Shannon entropy of a normalized count histogram: 0 when all mass
/// sits on one bin, `log2(len)` at perfect balance.
pub fn entropy_base2(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

/// Combines a task loss with the load-balance term:
/// `total = task + lambda * balance`.
pub fn total_loss(task_loss: f64, routing: &RoutingMatrix, lambda: f64) -> Result<LossReport> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let balance_loss = load_balance_loss(routing)?;
    Ok(LossReport {
        step: 0,
        task_loss,
        balance_loss,
        total: task_loss + lambda * balance_loss,
        lambda,
        expert_mean_activation: expert_mean_activation(routing),
        expert_load: expert_load(routing),
        selection_counts: selection_counts(routing),
    })
}

/// Top-k expert indices for one routing row: descending probability, ties to
/// the lowest index.
pub fn select_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("routing probabilities must be comparable")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Copies the given batch rows of a `[B, ...]` tensor into a new tensor.
pub fn select_batch(t: &Tensor, indices: &[usize]) -> Tensor {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * per..][..per]);
    }
    Tensor::new(shape, data).expect("select_batch shape")
}

/// Result of a sparse forward pass.
pub struct SparseInference {
    /// Fused output `[B, C, H', W']`. For k = 1 this is the selected
    /// expert's raw output per image (no probability scaling).
    pub output: Tensor,
    /// Selected expert indices per image, most probable first.
    pub selected: Vec<Vec<usize>>,
    pub routing: RoutingMatrix,
    /// Actual per-image expert evaluations performed (`B * k` total).
    pub expert_image_passes: usize,
    pub per_expert_passes: Vec<usize>,
}

/// Runs only the top-k experts per image. Images choosing the same expert
/// are evaluated together in one sub-batch; the pass counters still count
/// one pass per (image, expert) pair.
pub fn infer_sparse(
    bundle: &mut ExpertBundle,
    router: &mut SelfAttentionRouter,
    image: &Tensor,
    k: usize,
    threads: usize,
) -> Result<SparseInference> {
    let routing = router.route_eval(image, threads)?;
    sparse_expert_stage(bundle, image, routing, k, threads)
}

/// The expert stage of sparse inference, given precomputed routing. Split
/// out so benchmarks can time expert work separately from the router.
pub fn sparse_expert_stage(
    bundle: &mut ExpertBundle,
    image: &Tensor,
    routing: RoutingMatrix,
    k: usize,
    threads: usize,
) -> Result<SparseInference> {
    let num_experts = bundle.num_experts();
    FusionMode::TopK(k).validate(num_experts)?;
    let b = image.shape()[0];

    let selected: Vec<Vec<usize>> = (0..b).map(|i| select_top_k(routing.row(i), k)).collect();

    // group images per expert, preserving batch order
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
    for (img, sel) in selected.iter().enumerate() {
        for &e in sel {
            assignments[e].push(img);
        }
    }

    let (h, w) = (image.shape()[2], image.shape()[3]);
    let (ho, wo) = bundle.out_resolution(h, w);
    let c = bundle.out_channels();
    let per = c * ho * wo;
    let mut fused = vec![0.0; b * per];
    let mut per_expert_passes = vec![0usize; num_experts];

    // expert outputs for the images that need them
    let mut outputs: Vec<Option<(Vec<usize>, Tensor)>> = Vec::with_capacity(num_experts);
    for (e, images) in assignments.iter().enumerate() {
        if images.is_empty() {
            outputs.push(None);
            continue;
        }
        let sub = select_batch(image, images);
        let mut g = Graph::with_threads(Mode::Eval, threads);
        let x = g.constant(sub);
        let y = bundle.expert_forward(&mut g, e, x)?;
        per_expert_passes[e] += images.len();
        outputs.push(Some((images.clone(), g.detach(y))));
    }

    for (img, sel) in selected.iter().enumerate() {
        let dst = &mut fused[img * per..][..per];
        if k == 1 {
            // raw expert output, no reweighting
            let e = sel[0];
            let (images, out) = outputs[e].as_ref().expect("selected expert was evaluated");
            let pos = images.iter().position(|&i| i == img).unwrap();
            dst.copy_from_slice(&out.data()[pos * per..][..per]);
        } else {
            let row = routing.row(img);
            let norm: f64 = sel.iter().map(|&e| row[e]).sum();
            // accumulate in ascending expert order, matching fuse_soft
            let mut order = sel.clone();
            order.sort_unstable();
            for (j, &e) in order.iter().enumerate() {
                let weight = row[e] / norm;
                let (images, out) = outputs[e].as_ref().expect("selected expert was evaluated");
                let pos = images.iter().position(|&i| i == img).unwrap();
                let src = &out.data()[pos * per..][..per];
                if j == 0 {
                    for i in 0..per {
                        dst[i] = weight * src[i];
                    }
                } else {
                    for i in 0..per {
                        dst[i] += weight * src[i];
                    }
                }
            }
        }
    }

    Ok(SparseInference {
        output: Tensor::new(vec![b, c, ho, wo], fused)?,
        selected,
        routing,
        expert_image_passes: per_expert_passes.iter().sum(),
        per_expert_passes,
    })
}

/// Dense eval-mode forward: every expert runs on every image, outputs are
/// soft-fused. Returns the fused map, routing, raw expert outputs, and the
/// number of per-image expert passes (`B * K`).
pub fn forward_soft(
    bundle: &mut ExpertBundle,
    router: &mut SelfAttentionRouter,
    image: &Tensor,
    threads: usize,
) -> Result<(Tensor, RoutingMatrix, Vec<Tensor>, usize)> {
    let routing = router.route_eval(image, threads)?;
    let (fused, outputs, passes) = dense_expert_stage(bundle, image, &routing, threads)?;
    Ok((fused, routing, outputs, passes))
}

/// The expert stage of dense fusion, given precomputed routing.
pub fn dense_expert_stage(
    bundle: &mut ExpertBundle,
    image: &Tensor,
    routing: &RoutingMatrix,
    threads: usize,
) -> Result<(Tensor, Vec<Tensor>, usize)> {
    let b = image.shape()[0];
    let mut passes = 0usize;
    let mut outputs = Vec::with_capacity(bundle.num_experts());
    for e in 0..bundle.num_experts() {
        let mut g = Graph::with_threads(Mode::Eval, threads);
        let x = g.constant(image.clone());
        let y = bundle.expert_forward(&mut g, e, x)?;
        passes += b;
        outputs.push(g.detach(y));
    }
    let fused = fuse_soft(&outputs, routing)?;
    Ok((fused, outputs, passes))
}
