//! End-to-end model and training loop.
//!
//! Training uses soft gating: every expert runs, outputs are fused by the
//! routing probabilities, and the load-balance term joins the objective so
//! gradients reach all experts and the router jointly. Evaluation can switch
//! to sparse top-k activation.

use crate::autodiff::{Graph, Mode, Value};
use crate::data::{self, SyntheticScene, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::experts::{build_expert_with_dims, ExpertBundle, ExpertDims, ExpertKind, ExpertNet};
use crate::moe::{self, FusionMode, LossReport};
use crate::nn::{Conv2d, Linear, Module};
use crate::optim::{cosine_warmup_lr, AdamW};
use crate::param::Parameter;
use crate::router::{RoutingMatrix, SarConfig, SelfAttentionRouter};
use crate::tensor::Tensor;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Model architecture settings (persisted in checkpoints).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub num_experts: usize,
    pub d_emb: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
    /// Test-sized experts; production models leave this off.
    pub tiny: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            out_channels: 64,
            num_experts: 4,
            d_emb: 128,
            heads: 4,
            mlp_hidden: 64,
            seed: 0,
            tiny: false,
        }
    }
}

/// Training hyper-parameters. The source-scale settings (learning rate 5e-5,
/// 500 warmup iterations, 6 epochs) assume pretrained backbones; the desk
/// defaults scale the rate by 10x and derive warmup from the run length.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Explicit warmup; when absent, 5% of total steps for short runs and
    /// 500 iterations otherwise.
    pub warmup_iters: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 0.01,
            warmup_iters: None,
            epochs: 20,
            batch_size: 4,
            lambda: 0.01,
            seed: 0,
            n_train: 256,
            n_eval: 128,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("lr must be positive, weight_decay non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, n_train and n_eval must be positive".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        let total = self.total_steps();
        let warmup = self.resolve_warmup();
        if total <= warmup {
            return Err(Error::InvalidConfig(format!(
                "total steps ({total}) must exceed warmup ({warmup})"
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn resolve_warmup(&self) -> usize {
        match self.warmup_iters {
            Some(w) => w,
            None => {
                let total = self.total_steps();
                if total < 10_000 {
                    total / 20
                } else {
                    500
                }
            }
        }
    }
}

/// Experts + router + classification head.
pub struct MoeModel {
    pub bundle: ExpertBundle,
    pub router: SelfAttentionRouter,
    pub head: Linear,
    config: ModelConfig,
}

impl MoeModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let bundle_seed: u64 = master.gen();
        let bundle = ExpertBundle::with_count(
            config.num_experts,
            config.in_channels,
            config.out_channels,
            bundle_seed,
            config.tiny,
        )?;
        let sar = SarConfig {
            d_emb: config.d_emb,
            heads: config.heads,
            num_experts: config.num_experts,
            mlp_hidden: config.mlp_hidden,
            ..SarConfig::default()
        };
        let mut router_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let router = SelfAttentionRouter::new(sar, config.in_channels, &mut router_rng)?;
        let mut head_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let head = Linear::new("head", config.out_channels, NUM_CLASSES, &mut head_rng);
        Ok(MoeModel {
            bundle,
            router,
            head,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_experts(&self) -> usize {
        self.bundle.num_experts()
    }
}

impl Module for MoeModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.bundle.visit_params(f);
        self.router.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.bundle.visit_params_mut(f);
        self.router.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

/// Graph nodes of one soft-gated training loss.
pub struct LossNodes {
    pub probs: Value,
    pub task: Value,
    pub balance: Value,
    pub total: Value,
}

/// Builds route -> forward_all -> fuse -> head -> cross-entropy plus the
/// weighted balance term on one graph.
pub fn build_moe_loss(
    model: &mut MoeModel,
    g: &mut Graph,
    images: &Tensor,
    labels: &[usize],
    lambda: f64,
) -> Result<LossNodes> {
    let x = g.constant(images.clone());
    let probs = model.router.route(g, x)?;
    let outputs = model.bundle.forward_all(g, x)?;
    let fused = g.fuse_weighted(&outputs, probs)?;
    let pooled = g.global_avg_pool(fused)?;
    let logits = model.head.forward(g, pooled)?;
    let task = g.cross_entropy(logits, labels)?;
    let balance = g.load_balance(probs)?;
    let weighted = g.scale(balance, lambda);
    let total = g.add(task, weighted)?;
    Ok(LossNodes {
        probs,
        task,
        balance,
        total,
    })
}

/// Drives optimization of one [`MoeModel`].
pub struct Trainer {
    pub model: MoeModel,
    optimizer: AdamW,
    config: TrainConfig,
    total_steps: usize,
    warmup: usize,
    step: usize,
}

impl Trainer {
    pub fn new(model: MoeModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let total_steps = config.total_steps();
        let warmup = config.resolve_warmup();
        Ok(Trainer {
            model,
            optimizer: AdamW::new(config.weight_decay),
            config,
            total_steps,
            warmup,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One soft-gated training step: forward, backward, AdamW update under
    /// the warmup/cosine schedule. Returns the step's loss report.
    pub fn train_step(&mut self, images: &Tensor, labels: &[usize]) -> Result<LossReport> {
        if labels.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let mut g = Graph::with_threads(Mode::Train, self.config.threads);
        let nodes = build_moe_loss(&mut self.model, &mut g, images, labels, self.config.lambda)?;
        let task_v = g.data_of(nodes.task)[0];
        let total_v = g.data_of(nodes.total)[0];
        let routing = RoutingMatrix::new(g.detach(nodes.probs))?;
        let store = g.backward(nodes.total)?;
        self.model.accumulate_grads(&store);

        let lr_t = cosine_warmup_lr(self.step, self.total_steps, self.warmup, self.config.lr)?;
        self.optimizer.begin_step();
        let opt = &mut self.optimizer;
        self.model.visit_params_mut(&mut |p| opt.update(p, lr_t));

        let mut report = moe::total_loss(task_v, &routing, self.config.lambda)?;
        report.step = self.step;
        debug_assert!((report.total - total_v).abs() < 1e-12);
        self.step += 1;
        Ok(report)
    }
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub model: MoeModel,
    pub reports: Vec<LossReport>,
    pub manifest: data::DatasetManifest,
}

/// Seeds for the independent random streams of one run.
struct SeedPlan {
    data: u64,
    shuffle: u64,
}

fn seed_plan(seed: u64) -> SeedPlan {
    let mut master = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    SeedPlan {
        data: master.gen(),
        shuffle: master.gen(),
    }
}

/// Trains a fresh model end to end; fully reproducible from the configs.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = MoeModel::new(model_cfg)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let seeds = seed_plan(cfg.seed);
    let scenes = data::generate_dataset(cfg.n_train, seeds.data);
    let manifest = data::manifest(&scenes, seeds.data);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut reports = Vec::with_capacity(cfg.total_steps());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = data::batch_of(&scenes, chunk);
            reports.push(trainer.train_step(&images, &labels)?);
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        reports,
        manifest,
    })
}

/// Evaluation-time statistics.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_probabilities: Vec<f64>,
    pub selection_counts: Vec<usize>,
    pub selection_entropy: f64,
    /// Actual per-image expert evaluations performed.
    pub expert_image_passes: usize,
    pub samples: usize,
}

/// The evaluation set a config implies (same generator stream family as the
/// training set, disjoint seed).
pub fn eval_scenes(cfg: &TrainConfig) -> Vec<SyntheticScene> {
    let seeds = seed_plan(cfg.seed);
    data::generate_dataset(cfg.n_eval, seeds.data.wrapping_add(1))
}

const EVAL_BATCH: usize = 8;

/// Eval-mode pass over a dataset under the chosen fusion mode.
pub fn evaluate(
    model: &mut MoeModel,
    scenes: &[SyntheticScene],
    mode: FusionMode,
    threads: usize,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("evaluate: empty dataset".into()));
    }
    let k_experts = model.num_experts();
    mode.validate(k_experts)?;
    let mut correct = 0usize;
    let mut counts = vec![0usize; k_experts];
    let mut mean_p = vec![0.0; k_experts];
    let mut passes = 0usize;

    let indices: Vec<usize> = (0..scenes.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = data::batch_of(scenes, chunk);
        let (fused, routing) = match mode {
            FusionMode::SoftAll => {
                let (fused, routing, _outputs, p) =
                    moe::forward_soft(&mut model.bundle, &mut model.router, &images, threads)?;
                passes += p;
                for i in 0..routing.batch() {
                    counts[routing.argmax_row(i)] += 1;
                }
                (fused, routing)
            }
            FusionMode::TopK(k) => {
                let sparse =
                    moe::infer_sparse(&mut model.bundle, &mut model.router, &images, k, threads)?;
                passes += sparse.expert_image_passes;
                for sel in &sparse.selected {
                    for &e in sel {
                        counts[e] += 1;
                    }
                }
                (sparse.output, sparse.routing)
            }
        };
        for i in 0..routing.batch() {
            for (j, m) in mean_p.iter_mut().enumerate() {
                *m += routing.row(i)[j];
            }
        }
        let mut g = Graph::with_threads(Mode::Eval, threads);
        let f = g.constant(fused);
        let pooled = g.global_avg_pool(f)?;
        let logits = model.head.forward(&mut g, pooled)?;
        let out = g.data_of(logits);
        for (i, &label) in labels.iter().enumerate() {
            let row = &out[i * NUM_CLASSES..][..NUM_CLASSES];
            if crate::router::argmax_tie_low(row) == label {
                correct += 1;
            }
        }
    }
    for m in mean_p.iter_mut() {
        *m /= scenes.len() as f64;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / scenes.len() as f64,
        mean_probabilities: mean_p,
        selection_counts: counts.clone(),
        selection_entropy: moe::entropy_base2(&counts),
        expert_image_passes: passes,
        samples: scenes.len(),
    })
}

// ── Load-balance ablation ───────────────────────────────────────────────────

/// One trained configuration in the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub seed: u64,
    pub lambda: f64,
    pub accuracy: f64,
    pub selection_entropy: f64,
    /// Share of eval images routed to the most used expert.
    pub max_expert_share: f64,
}

/// Paired with/without-load-balance training over several seeds.
pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
    pub median_entropy_off: f64,
    pub median_entropy_on: f64,
    pub median_accuracy_off: f64,
    pub median_accuracy_on: f64,
    pub median_share_off: f64,
    pub median_share_on: f64,
    /// Eval-set routing matrices of the last seed's two runs, for heatmaps.
    pub routing_off: RoutingMatrix,
    pub routing_on: RoutingMatrix,
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Routes the whole dataset in eval batches and stacks the rows.
pub fn route_dataset(
    model: &mut MoeModel,
    scenes: &[SyntheticScene],
    threads: usize,
) -> Result<RoutingMatrix> {
    let k = model.num_experts();
    let mut rows = Vec::with_capacity(scenes.len() * k);
    let indices: Vec<usize> = (0..scenes.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, _) = data::batch_of(scenes, chunk);
        let routing = model.router.route_eval(&images, threads)?;
        for i in 0..routing.batch() {
            rows.extend_from_slice(routing.row(i));
        }
    }
    RoutingMatrix::new(Tensor::new(vec![scenes.len(), k], rows)?)
}

/// Trains `(lambda = 0, lambda = lambda_on)` pairs for every seed and
/// summarizes top-1 selection behavior on the eval set.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
    lambda_on: f64,
) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    let mut routing_off = None;
    let mut routing_on = None;
    for &seed in seeds {
        for &lambda in &[0.0, lambda_on] {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.lambda = lambda;
            let mut mc = model_cfg.clone();
            mc.seed = seed;
            let mut outcome = train(&mc, &cfg)?;
            let eval_set = eval_scenes(&cfg);
            let report = evaluate(&mut outcome.model, &eval_set, FusionMode::TopK(1), cfg.threads)?;
            let total: usize = report.selection_counts.iter().sum();
            let max_share =
                *report.selection_counts.iter().max().unwrap() as f64 / total as f64;
            cells.push(AblationCell {
                seed,
                lambda,
                accuracy: report.accuracy,
                selection_entropy: report.selection_entropy,
                max_expert_share: max_share,
            });
            let routing = route_dataset(&mut outcome.model, &eval_set, cfg.threads)?;
            if lambda == 0.0 {
                routing_off = Some(routing);
            } else {
                routing_on = Some(routing);
            }
        }
    }
    let pick = |lambda_zero: bool, f: &dyn Fn(&AblationCell) -> f64| -> Vec<f64> {
        cells
            .iter()
            .filter(|c| (c.lambda == 0.0) == lambda_zero)
            .map(f)
            .collect()
    };
    Ok(AblationOutcome {
        median_entropy_off: median_of(pick(true, &|c| c.selection_entropy)),
        median_entropy_on: median_of(pick(false, &|c| c.selection_entropy)),
        median_accuracy_off: median_of(pick(true, &|c| c.accuracy)),
        median_accuracy_on: median_of(pick(false, &|c| c.accuracy)),
        median_share_off: median_of(pick(true, &|c| c.max_expert_share)),
        median_share_on: median_of(pick(false, &|c| c.max_expert_share)),
        cells,
        routing_off: routing_off.expect("at least one seed ran"),
        routing_on: routing_on.expect("at least one seed ran"),
    })
}

// ── Single-expert baseline ──────────────────────────────────────────────────

/// One expert + adapter + head, trained without routing. Used as the
/// fixed-backbone comparison line.
pub struct SingleExpertModel {
    pub expert: Box<dyn ExpertNet>,
    pub adapter: Conv2d,
    pub head: Linear,
}

impl SingleExpertModel {
    pub fn new(kind: ExpertKind, model_cfg: &ModelConfig) -> Result<Self> {
        let dims = if model_cfg.tiny {
            ExpertDims::tiny_for(kind)
        } else {
            ExpertDims::default_for(kind)
        };
        let mut master = ChaCha8Rng::seed_from_u64(model_cfg.seed ^ 0x5113_d5e1);
        let expert = build_expert_with_dims(
            kind,
            model_cfg.in_channels,
            dims,
            master.gen(),
            &format!("single.{}", kind.label()),
        )?;
        let mut arng = ChaCha8Rng::seed_from_u64(master.gen());
        let adapter = Conv2d::new(
            "single.adapter",
            expert.out_channels(),
            model_cfg.out_channels,
            1,
            1,
            0,
            &mut arng,
        );
        let mut hrng = ChaCha8Rng::seed_from_u64(master.gen());
        let head = Linear::new("single.head", model_cfg.out_channels, NUM_CLASSES, &mut hrng);
        Ok(SingleExpertModel {
            expert,
            adapter,
            head,
        })
    }

    fn logits(&mut self, g: &mut Graph, images: &Tensor) -> Result<Value> {
        let x = g.constant(images.clone());
        let feat = self.expert.forward(g, x)?;
        let adapted = self.adapter.forward(g, feat)?;
        let pooled = g.global_avg_pool(adapted)?;
        self.head.forward(g, pooled)
    }
}

impl Module for SingleExpertModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.expert.visit_params(f);
        self.adapter.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.expert.visit_params_mut(f);
        self.adapter.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

/// Trains a single-expert baseline on the same data stream a [`TrainConfig`]
/// implies and returns (final eval accuracy, per-step task losses).
pub fn train_single_baseline(
    kind: ExpertKind,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let mut model = SingleExpertModel::new(kind, model_cfg)?;
    let mut optimizer = AdamW::new(cfg.weight_decay);
    let seeds = seed_plan(cfg.seed);
    let scenes = data::generate_dataset(cfg.n_train, seeds.data);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let total = cfg.total_steps();
    let warmup = cfg.resolve_warmup();
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = data::batch_of(&scenes, chunk);
            let mut g = Graph::with_threads(Mode::Train, cfg.threads);
            let logits = model.logits(&mut g, &images)?;
            let loss = g.cross_entropy(logits, &labels)?;
            losses.push(g.data_of(loss)[0]);
            let store = g.backward(loss)?;
            model.accumulate_grads(&store);
            let lr_t = cosine_warmup_lr(step, total, warmup, cfg.lr)?;
            optimizer.begin_step();
            model.visit_params_mut(&mut |p| optimizer.update(p, lr_t));
            step += 1;
        }
    }
    // eval accuracy on the shared eval stream
    let eval = eval_scenes(cfg);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..eval.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, labels) = data::batch_of(&eval, chunk);
        let mut g = Graph::with_threads(Mode::Eval, cfg.threads);
        let logits = model.logits(&mut g, &images)?;
        let out = g.data_of(logits);
        for (i, &label) in labels.iter().enumerate() {
            let row = &out[i * NUM_CLASSES..][..NUM_CLASSES];
            if crate::router::argmax_tie_low(row) == label {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / eval.len() as f64, losses))
}
