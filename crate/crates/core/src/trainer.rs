//! Staged training: multi-head warm-up, node budget selection, alternating
//! graph and segmentation stages, and a final stage in which the unified
//! embedding is trained directly and inactive nodes are pruned.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{
    compute_cross_head_iou, feasible_tuples, init_adjacency_from_selection, select_budget, BudgetSelection,
    DEFAULT_C_INIT, DEFAULT_IOU_FLOOR, DEFAULT_LAMBDA,
};
use crate::error::{Error, Result};
use crate::graph::{gnn_forward, unified_embedding, GraphActivation, GraphInputs, LabelGraphParams};
use crate::groups::{ParamGroup, Trainable};
use crate::kernels::{argmax, matmul_bt, Matrix, Tape, Var};
use crate::par::Exec;
use crate::seg::{
    combine_on_tape, encode_observations, encode_on_tape, orthogonality_on_tape, EncoderParams, EncoderVars,
    MultiHeadParams, PixelBatch,
};
use crate::solver::{initial_betas, solve_mappings, solve_one, SolverConfig};
use crate::synth::BatchSource;
use crate::taxonomy::{dataset_sizes, mapping_from_assignment, DatasetTaxonomy, MappingMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MultiHead,
    GnnTrain,
    SegTrain,
    Final,
    Done,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::MultiHead => "MH",
            Stage::GnnTrain => "GNN",
            Stage::SegTrain => "SEG",
            Stage::Final => "FINAL",
            Stage::Done => "DONE",
        }
    }

    /// Parameter groups updated during the stage.
    pub fn trainable(self) -> Trainable {
        match self {
            Stage::MultiHead => Trainable::only(&[ParamGroup::Encoder, ParamGroup::Heads]),
            Stage::GnnTrain => Trainable::only(&ParamGroup::GRAPH),
            Stage::SegTrain => Trainable::only(&[ParamGroup::Encoder]),
            Stage::Final => Trainable::only(&[ParamGroup::Encoder, ParamGroup::UnifiedEmbedding]),
            Stage::Done => Trainable::none(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub multihead_iters: usize,
    pub gnn_iters: usize,
    pub seg_iters: usize,
    pub cycles: usize,
    pub final_iters: usize,
    pub lr_multihead: f64,
    pub lr_gnn: f64,
    pub lr_seg: f64,
    pub momentum: f64,
    /// Fraction of each stage spent on linear learning-rate warmup.
    pub warmup_fraction: f64,
    pub lambda_ce: f64,
    pub lambda_orth: f64,
    pub pixels_per_dataset: usize,
    /// Pixels per dataset in the evaluation set used for budget selection
    /// and pruning.
    pub eval_pixels: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            multihead_iters: 2000,
            gnn_iters: 500,
            seg_iters: 500,
            cycles: 3,
            final_iters: 2000,
            lr_multihead: 0.01,
            lr_gnn: 0.005,
            lr_seg: 0.01,
            momentum: 0.9,
            warmup_fraction: 0.05,
            lambda_ce: 1.0,
            lambda_orth: 0.1,
            pixels_per_dataset: 64,
            eval_pixels: 512,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_multihead", self.lr_multihead),
            ("lr_gnn", self.lr_gnn),
            ("lr_seg", self.lr_seg),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if !(self.lambda_ce >= 0.0) || !(self.lambda_orth >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.pixels_per_dataset == 0 || self.eval_pixels == 0 {
            return Err(Error::Config("pixel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn iters(&self, stage: Stage) -> usize {
        match stage {
            Stage::MultiHead => self.multihead_iters,
            Stage::GnnTrain => self.gnn_iters,
            Stage::SegTrain => self.seg_iters,
            Stage::Final => self.final_iters,
            Stage::Done => 0,
        }
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::MultiHead => self.lr_multihead,
            Stage::GnnTrain => self.lr_gnn,
            _ => self.lr_seg,
        }
    }

    /// Warmed-up learning rate for step `step` of a stage of `iters` steps.
    pub fn lr_at(&self, stage: Stage, step: usize, iters: usize) -> f64 {
        let warm = (self.warmup_fraction * iters as f64).ceil() as usize;
        let base = self.lr(stage);
        if warm == 0 || step >= warm {
            base
        } else {
            base * (step + 1) as f64 / warm as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    /// Per-node penalty.
    pub lambda: f64,
    pub iou_floor: f64,
    /// Edge logit on selected links.
    pub c_init: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            lambda: DEFAULT_LAMBDA,
            iou_floor: DEFAULT_IOU_FLOOR,
            c_init: DEFAULT_C_INIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Embedding width `D` shared by pixels and unified nodes.
    pub width: usize,
    /// Encoder hidden width `H`.
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { width: 16, hidden: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub solver: SolverConfig,
    pub budget: BudgetConfig,
    pub dims: Dims,
    pub seed: u64,
    #[serde(default)]
    pub exec: Exec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let s = &self.solver;
        if !(s.uot.epsilon > 0.0) || !(s.uot.tau > 0.0) || !(s.uot.tol > 0.0) || s.uot.max_iters == 0 {
            return Err(Error::Config(
                "solver epsilon, tau, tol and max_iters must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&s.momentum) {
            return Err(Error::Config(format!("solver momentum {} outside [0, 1]", s.momentum)));
        }
        let b = &self.budget;
        if !(b.lambda >= 0.0) || !(0.0..=1.0).contains(&b.iou_floor) || !b.c_init.is_finite() {
            return Err(Error::Config("budget lambda, IoU floor or c_init out of range".into()));
        }
        if self.dims.width == 0 || self.dims.hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

/// Stream kinds for [`stream_key`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const TEST: u64 = 4;
    pub const UNSEEN: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from `(seed, kind, a, b)` by chained
/// SplitMix64 mixing. Every draw in training is a ChaCha8 generator seeded
/// with one of these keys.
pub fn stream_key(seed: u64, kind: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(seed) ^ kind) ^ a) ^ b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub stage: Stage,
    pub ce: f64,
    pub orth: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Original indices of the kept nodes.
    pub kept: Vec<usize>,
    pub removed_links: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub stage: Stage,
    /// Completed GNN/Seg cycles.
    pub cycle: usize,
    pub step_in_stage: usize,
    pub global_step: u64,
    pub encoder: EncoderParams,
    pub heads: Option<MultiHeadParams>,
    pub graph: Option<LabelGraphParams>,
    /// Free unified embedding, present once the final stage begins.
    pub unified: Option<Matrix>,
    pub mappings: Vec<MappingMatrix>,
    pub betas: Vec<Vec<f64>>,
    pub budget: Option<BudgetSelection>,
    pub prune: Option<PruneReport>,
    /// Momentum buffers keyed by parameter name.
    pub velocity: BTreeMap<String, Matrix>,
    pub log: Vec<StepLog>,
}

impl TrainState {
    pub fn new(taxonomies: &[DatasetTaxonomy], obs_dim: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let sizes = dataset_sizes(taxonomies);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(config.seed, streams::INIT, 0, 0));
        let encoder = EncoderParams::init(&mut rng, obs_dim, config.dims.hidden, config.dims.width);
        Ok(TrainState {
            seed: config.seed,
            stage: Stage::MultiHead,
            cycle: 0,
            step_in_stage: 0,
            global_step: 0,
            encoder,
            heads: Some(MultiHeadParams::zeros(&sizes, config.dims.width)),
            graph: None,
            unified: None,
            mappings: Vec::new(),
            betas: initial_betas(&sizes),
            budget: None,
            prune: None,
            velocity: BTreeMap::new(),
            log: Vec::new(),
        })
    }

    pub fn graph(&self) -> Result<&LabelGraphParams> {
        self.graph
            .as_ref()
            .ok_or_else(|| Error::State("label graph not initialized yet".into()))
    }

    /// `X_u`: the free embedding once it exists, else the graph output.
    pub fn unified_embedding(&self, inputs: &GraphInputs) -> Result<Matrix> {
        match &self.unified {
            Some(u) => Ok(u.clone()),
            None => unified_embedding(inputs, self.graph()?),
        }
    }

    pub fn nodes(&self) -> usize {
        match (&self.unified, &self.graph) {
            (Some(u), _) => u.rows(),
            (None, Some(g)) => g.nodes(),
            _ => 0,
        }
    }

    /// FNV-1a over the bit patterns of every model parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |m: &Matrix| {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        };
        eat(&self.encoder.a1);
        eat(&self.encoder.a2);
        if let Some(heads) = &self.heads {
            heads.heads.iter().for_each(&mut eat);
        }
        if let Some(g) = &self.graph {
            eat(&g.raw_weights);
            g.layers.iter().for_each(&mut eat);
            eat(&g.unified_inputs);
            eat(&g.dataset_embeddings);
        }
        if let Some(u) = &self.unified {
            eat(u);
        }
        h
    }

    /// Per-step stage trace.
    pub fn trace(&self) -> Vec<Stage> {
        self.log.iter().map(|l| l.stage).collect()
    }
}

/// Shared read-only inputs for a run.
pub struct TrainContext<'a> {
    pub config: &'a TrainConfig,
    pub inputs: GraphInputs,
    pub source: &'a dyn BatchSource,
    /// One evaluation batch per dataset.
    pub eval: Vec<PixelBatch>,
}

impl<'a> TrainContext<'a> {
    pub fn new(config: &'a TrainConfig, taxonomies: &[DatasetTaxonomy], source: &'a dyn BatchSource) -> Result<Self> {
        config.validate()?;
        let inputs = GraphInputs::from_taxonomies(taxonomies)?;
        if source.datasets() != taxonomies.len() {
            return Err(Error::Data(format!(
                "{} datasets in the pixel source, {} taxonomies",
                source.datasets(),
                taxonomies.len()
            )));
        }
        let pixels = config.schedule.eval_pixels;
        let eval = (0..taxonomies.len())
            .map(|d| {
                let b = source.batch(d, pixels, stream_key(config.seed, streams::EVAL, 0, d as u64))?;
                b.check_labels(taxonomies[d].len())?;
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainContext {
            config,
            inputs,
            source,
            eval,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.inputs.sizes
    }

    fn train_batches(&self, step: u64) -> Result<Vec<PixelBatch>> {
        let pixels = self.config.schedule.pixels_per_dataset;
        (0..self.sizes().len())
            .map(|d| {
                self.source
                    .batch(d, pixels, stream_key(self.config.seed, streams::TRAIN, step, d as u64))
            })
            .collect()
    }
}

/// Loss handles from one recorded step.
pub struct RecordedLoss {
    pub loss: Var,
    pub ce: Var,
    pub orth: Option<Var>,
    pub encoder: EncoderVars,
    pub graph: Option<GraphActivation>,
    pub unified: Option<Var>,
}

fn mean_over(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Multi-head warm-up loss: mean over datasets of each head's mean
/// cross-entropy.
pub fn record_multihead_loss(
    tape: &mut Tape,
    encoder: &EncoderParams,
    heads: &MultiHeadParams,
    batches: &[PixelBatch],
    trainable: &Trainable,
) -> Result<(RecordedLoss, Vec<Var>)> {
    let enc = EncoderVars::record(tape, encoder, trainable);
    let head_vars: Vec<Var> = heads
        .heads
        .iter()
        .map(|w| {
            if trainable.contains(ParamGroup::Heads) {
                tape.param(w.clone())
            } else {
                tape.constant(w.clone())
            }
        })
        .collect();
    let mut terms = Vec::with_capacity(batches.len());
    for b in batches {
        let p = encode_on_tape(tape, &b.observations, enc)?;
        let w = *head_vars
            .get(b.dataset_id)
            .ok_or_else(|| Error::Config(format!("no head for dataset {}", b.dataset_id)))?;
        let logits = tape.matmul_bt(p, w)?;
        terms.push(tape.mean_cross_entropy(logits, &b.labels)?);
    }
    let ce = mean_over(tape, &terms)?;
    Ok((
        RecordedLoss {
            loss: ce,
            ce,
            orth: None,
            encoder: enc,
            graph: None,
            unified: None,
        },
        head_vars,
    ))
}

/// `λ₁·CE + λ₂·orth` with continuous mappings read from the adjacency.
pub fn record_graph_loss(
    tape: &mut Tape,
    inputs: &GraphInputs,
    graph: &LabelGraphParams,
    encoder: &EncoderParams,
    batches: &[PixelBatch],
    trainable: &Trainable,
    lambda_ce: f64,
    lambda_orth: f64,
) -> Result<RecordedLoss> {
    let enc = EncoderVars::record(tape, encoder, trainable);
    let act = gnn_forward(tape, inputs, graph, trainable)?;
    let labels = inputs.label_count();
    let nodes = graph.nodes();
    let offsets = inputs.offsets();
    let mut terms = Vec::with_capacity(batches.len());
    for b in batches {
        let d = b.dataset_id;
        let p = encode_on_tape(tape, &b.observations, enc)?;
        let u = tape.matmul_bt(p, act.unified)?;
        let block = tape.block(act.adjacency, labels, offsets[d], nodes, inputs.sizes[d])?;
        let s = tape.matmul(u, block)?;
        terms.push(tape.mean_cross_entropy(s, &b.labels)?);
    }
    let ce = mean_over(tape, &terms)?;
    let orth = orthogonality_on_tape(tape, act.unified)?;
    let loss = combine_on_tape(tape, ce, lambda_ce, orth, lambda_orth)?;
    Ok(RecordedLoss {
        loss,
        ce,
        orth: Some(orth),
        encoder: enc,
        unified: Some(act.unified),
        graph: Some(act),
    })
}

/// Cross-entropy through the discrete mappings. When `X_u` is trainable
/// the orthogonality term joins the loss.
pub fn record_seg_loss(
    tape: &mut Tape,
    encoder: &EncoderParams,
    unified: &Matrix,
    mappings: &[MappingMatrix],
    batches: &[PixelBatch],
    trainable: &Trainable,
    lambda_ce: f64,
    lambda_orth: f64,
) -> Result<RecordedLoss> {
    let enc = EncoderVars::record(tape, encoder, trainable);
    let free = trainable.contains(ParamGroup::UnifiedEmbedding);
    let xu = if free {
        tape.param(unified.clone())
    } else {
        tape.constant(unified.clone())
    };
    let mut terms = Vec::with_capacity(batches.len());
    for b in batches {
        let m = mappings
            .get(b.dataset_id)
            .ok_or_else(|| Error::State(format!("no mapping for dataset {}", b.dataset_id)))?;
        let p = encode_on_tape(tape, &b.observations, enc)?;
        let u = tape.matmul_bt(p, xu)?;
        let mm = tape.constant(m.to_matrix());
        let s = tape.matmul(u, mm)?;
        terms.push(tape.mean_cross_entropy(s, &b.labels)?);
    }
    let ce = mean_over(tape, &terms)?;
    let (loss, orth) = if free {
        let orth = orthogonality_on_tape(tape, xu)?;
        (combine_on_tape(tape, ce, lambda_ce, orth, lambda_orth)?, Some(orth))
    } else {
        (tape.scale(ce, lambda_ce)?, None)
    };
    Ok(RecordedLoss {
        loss,
        ce,
        orth,
        encoder: enc,
        graph: None,
        unified: Some(xu),
    })
}

/// `v ← μ v + g; p ← p − lr·v`, with one velocity buffer per name.
fn sgd_update(
    velocity: &mut BTreeMap<String, Matrix>,
    name: &str,
    param: &mut Matrix,
    grad: &Matrix,
    lr: f64,
    mu: f64,
) {
    let v = velocity
        .entry(name.to_string())
        .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
    for ((vi, pi), gi) in v.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
        *vi = mu * *vi + gi;
        *pi -= lr * *vi;
    }
}

fn apply_encoder(state: &mut TrainState, tape_grads: &crate::kernels::Gradients, vars: EncoderVars, lr: f64, mu: f64) {
    if let Some(g) = tape_grads.get(vars.a1) {
        sgd_update(&mut state.velocity, "encoder.a1", &mut state.encoder.a1, g, lr, mu);
    }
    if let Some(g) = tape_grads.get(vars.a2) {
        sgd_update(&mut state.velocity, "encoder.a2", &mut state.encoder.a2, g, lr, mu);
    }
}

fn log_step(state: &mut TrainState, tape: &Tape, rec: &RecordedLoss) -> Result<()> {
    let loss = tape.scalar(rec.loss);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {} in {}",
            state.global_step,
            state.stage.tag()
        )));
    }
    state.log.push(StepLog {
        step: state.global_step,
        stage: state.stage,
        ce: tape.scalar(rec.ce),
        orth: rec.orth.map(|o| tape.scalar(o)).unwrap_or(0.0),
        loss,
    });
    Ok(())
}

fn expect_stage(state: &TrainState, stage: Stage) -> Result<()> {
    if state.stage != stage {
        return Err(Error::State(format!(
            "expected stage {}, state is in {}",
            stage.tag(),
            state.stage.tag()
        )));
    }
    Ok(())
}

fn begin_stage(state: &mut TrainState) {
    if state.step_in_stage == 0 {
        state.velocity.clear();
    }
}

/// Runs multi-head steps until the stage has taken `iters` steps.
pub fn run_stage_multihead(state: &mut TrainState, ctx: &TrainContext, iters: usize) -> Result<()> {
    expect_stage(state, Stage::MultiHead)?;
    begin_stage(state);
    let sched = &ctx.config.schedule;
    let trainable = Stage::MultiHead.trainable();
    while state.step_in_stage < iters {
        let batches = ctx.train_batches(state.global_step)?;
        let heads = state
            .heads
            .as_ref()
            .ok_or_else(|| Error::State("multi-head stage without heads".into()))?;
        let mut tape = Tape::new();
        let (rec, head_vars) = record_multihead_loss(&mut tape, &state.encoder, heads, &batches, &trainable)?;
        let grads = tape.backward(rec.loss)?;
        log_step(state, &tape, &rec)?;
        let lr = sched.lr_at(Stage::MultiHead, state.step_in_stage, iters);
        apply_encoder(state, &grads, rec.encoder, lr, sched.momentum);
        let heads = state.heads.as_mut().expect("checked above");
        for (i, v) in head_vars.iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                sgd_update(
                    &mut state.velocity,
                    &format!("head.{i}"),
                    &mut heads.heads[i],
                    g,
                    lr,
                    sched.momentum,
                );
            }
        }
        state.step_in_stage += 1;
        state.global_step += 1;
    }
    Ok(())
}

/// Selects the node budget from cross-head agreement, builds the label
/// graph, and drops the per-dataset heads.
pub fn initialize_unified_head(state: &mut TrainState, ctx: &TrainContext) -> Result<()> {
    let heads = state
        .heads
        .as_ref()
        .ok_or_else(|| Error::State("heads already discarded".into()))?;
    let cfg = ctx.config;
    let table = compute_cross_head_iou(&state.encoder, heads, &ctx.eval, cfg.exec)?;
    let tuples = feasible_tuples(&table, cfg.budget.iou_floor);
    let selection = select_budget(&tuples, ctx.sizes(), cfg.budget.lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(cfg.seed, streams::INIT, 1, 0));
    let mut graph = LabelGraphParams::init(
        &mut rng,
        ctx.sizes(),
        selection.nodes(),
        ctx.inputs.text.cols(),
        cfg.dims.width,
    );
    graph.raw_weights = init_adjacency_from_selection(&selection, cfg.budget.c_init);
    state.mappings = selection.initial_mappings()?;
    state.graph = Some(graph);
    state.budget = Some(selection);
    state.heads = None;
    Ok(())
}

pub fn run_stage_gnn(state: &mut TrainState, ctx: &TrainContext, iters: usize) -> Result<()> {
    expect_stage(state, Stage::GnnTrain)?;
    begin_stage(state);
    let sched = &ctx.config.schedule;
    let trainable = Stage::GnnTrain.trainable();
    while state.step_in_stage < iters {
        let batches = ctx.train_batches(state.global_step)?;
        let graph = state.graph()?;
        let mut tape = Tape::new();
        let rec = record_graph_loss(
            &mut tape,
            &ctx.inputs,
            graph,
            &state.encoder,
            &batches,
            &trainable,
            sched.lambda_ce,
            sched.lambda_orth,
        )?;
        let grads = tape.backward(rec.loss)?;
        log_step(state, &tape, &rec)?;
        let lr = sched.lr_at(Stage::GnnTrain, state.step_in_stage, iters);
        let g = rec
            .graph
            .as_ref()
            .expect("graph loss records the graph")
            .collect(&grads);
        let mu = sched.momentum;
        let graph = state.graph.as_mut().expect("checked above");
        if let Some(d) = &g.raw_weights {
            sgd_update(
                &mut state.velocity,
                "graph.raw_weights",
                &mut graph.raw_weights,
                d,
                lr,
                mu,
            );
        }
        if let Some(ls) = &g.layers {
            for (k, d) in ls.iter().enumerate() {
                sgd_update(
                    &mut state.velocity,
                    &format!("graph.layer.{k}"),
                    &mut graph.layers[k],
                    d,
                    lr,
                    mu,
                );
            }
        }
        if let Some(d) = &g.unified_inputs {
            sgd_update(
                &mut state.velocity,
                "graph.unified_inputs",
                &mut graph.unified_inputs,
                d,
                lr,
                mu,
            );
        }
        if let Some(d) = &g.dataset_embeddings {
            sgd_update(
                &mut state.velocity,
                "graph.dataset_embeddings",
                &mut graph.dataset_embeddings,
                d,
                lr,
                mu,
            );
        }
        graph.touch();
        state.step_in_stage += 1;
        state.global_step += 1;
    }
    Ok(())
}

/// Solves discrete mappings from the current adjacency and carries the
/// class marginals forward.
pub fn solve_current_mappings(state: &mut TrainState, ctx: &TrainContext) -> Result<Vec<bool>> {
    let graph = state.graph()?;
    let adjacency = crate::graph::normalize_adjacency(&graph.raw_weights, ctx.sizes())?;
    let blocks = (0..ctx.sizes().len())
        .map(|d| crate::graph::continuous_block(&adjacency, ctx.sizes(), d))
        .collect::<Result<Vec<_>>>()?;
    let out = solve_mappings(&blocks, &state.betas, &ctx.config.solver, ctx.config.exec)?;
    state.mappings = out.mappings;
    state.betas = out.betas;
    Ok(out.converged)
}

fn run_seg_steps(state: &mut TrainState, ctx: &TrainContext, stage: Stage, until: usize, iters: usize) -> Result<()> {
    let sched = &ctx.config.schedule;
    let trainable = stage.trainable();
    let fixed = match stage {
        Stage::SegTrain => Some(state.unified_embedding(&ctx.inputs)?),
        _ => None,
    };
    while state.step_in_stage < until {
        let batches = ctx.train_batches(state.global_step)?;
        let unified = match &fixed {
            Some(u) => u,
            None => state
                .unified
                .as_ref()
                .ok_or_else(|| Error::State("final stage without a unified embedding".into()))?,
        };
        let mut tape = Tape::new();
        let rec = record_seg_loss(
            &mut tape,
            &state.encoder,
            unified,
            &state.mappings,
            &batches,
            &trainable,
            sched.lambda_ce,
            sched.lambda_orth,
        )?;
        let grads = tape.backward(rec.loss)?;
        log_step(state, &tape, &rec)?;
        let lr = sched.lr_at(stage, state.step_in_stage, iters);
        apply_encoder(state, &grads, rec.encoder, lr, sched.momentum);
        if let (Some(v), Some(u)) = (rec.unified, state.unified.as_mut()) {
            if let Some(g) = grads.get(v) {
                sgd_update(&mut state.velocity, "unified", u, g, lr, sched.momentum);
            }
        }
        state.step_in_stage += 1;
        state.global_step += 1;
    }
    Ok(())
}

pub fn run_stage_seg(state: &mut TrainState, ctx: &TrainContext, iters: usize) -> Result<()> {
    expect_stage(state, Stage::SegTrain)?;
    begin_stage(state);
    run_seg_steps(state, ctx, Stage::SegTrain, iters, iters)
}

/// Final stage: the unified embedding is trained alongside the encoder for
/// half the steps, inactive nodes are pruned, then training continues.
pub fn run_stage_final(state: &mut TrainState, ctx: &TrainContext, iters: usize) -> Result<()> {
    run_final_until_prune(state, ctx, iters)?;
    if state.prune.is_none() {
        let report = prune_inactive_nodes_with(state, ctx, &ctx.eval, PruneMode::KeepCoverage)?;
        state.prune = Some(report);
        // Node rows changed shape; restart the momentum buffer for X_u.
        state.velocity.remove("unified");
    }
    run_seg_steps(state, ctx, Stage::Final, iters, iters)
}

/// First half of the final stage: materializes `X_u` and trains it up to
/// the pruning point.
pub fn run_final_until_prune(state: &mut TrainState, ctx: &TrainContext, iters: usize) -> Result<()> {
    expect_stage(state, Stage::Final)?;
    if state.unified.is_none() {
        state.unified = Some(unified_embedding(&ctx.inputs, state.graph()?)?);
    }
    begin_stage(state);
    run_seg_steps(state, ctx, Stage::Final, iters / 2, iters)
}

/// Winning unified node per pixel.
pub fn unified_winners(encoder: &EncoderParams, unified: &Matrix, observations: &Matrix) -> Result<Vec<usize>> {
    let p = encode_observations(observations, encoder)?;
    let u = matmul_bt(&p, unified)?;
    Ok((0..u.rows()).map(|r| argmax(u.row(r))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// A class left without links is an integrity error.
    Strict,
    /// A class with no active link keeps all of its links.
    KeepCoverage,
}

/// Removes links never used by a correct evaluation prediction, then nodes
/// left without links.
pub fn prune_inactive_nodes(state: &mut TrainState, ctx: &TrainContext, eval: &[PixelBatch]) -> Result<PruneReport> {
    prune_inactive_nodes_with(state, ctx, eval, PruneMode::Strict)
}

pub fn prune_inactive_nodes_with(
    state: &mut TrainState,
    ctx: &TrainContext,
    eval: &[PixelBatch],
    mode: PruneMode,
) -> Result<PruneReport> {
    let unified = state.unified_embedding(&ctx.inputs)?;
    let nodes = unified.rows();
    if state.mappings.len() != eval.len() {
        return Err(Error::State(format!(
            "{} mappings for {} evaluation batches",
            state.mappings.len(),
            eval.len()
        )));
    }
    let winners = ctx
        .config
        .exec
        .map(eval, |b| unified_winners(&state.encoder, &unified, &b.observations));
    let mut mappings = state.mappings.clone();
    let mut removed = 0;
    for (d, (batch, w)) in eval.iter().zip(winners).enumerate() {
        let w = w?;
        let m = &mut mappings[d];
        let mut active = vec![vec![false; m.classes()]; nodes];
        for (&n, &y) in w.iter().zip(&batch.labels) {
            if m.get(n, y) {
                active[n][y] = true;
            }
        }
        for c in 0..m.classes() {
            let any = (0..nodes).any(|n| active[n][c]);
            if !any && mode == PruneMode::KeepCoverage {
                continue;
            }
            for n in 0..nodes {
                if m.get(n, c) && !active[n][c] {
                    m.set(n, c, false);
                    removed += 1;
                }
            }
        }
        if let Some(c) = (0..m.classes()).find(|&c| m.column_sum(c) == 0) {
            return Err(Error::Integrity(format!(
                "pruning left class {c} of dataset {d} without a node"
            )));
        }
    }
    let kept: Vec<usize> = (0..nodes)
        .filter(|&n| mappings.iter().any(|m| m.row_sum(n) > 0))
        .collect();
    state.mappings = mappings.iter().map(|m| m.select_nodes(&kept)).collect();
    if let Some(g) = &state.graph {
        state.graph = Some(g.select_nodes(&kept));
    }
    if let Some(u) = &state.unified {
        state.unified = Some(u.select_rows(&kept));
    }
    Ok(PruneReport {
        kept,
        removed_links: removed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptResult {
    pub mapping: MappingMatrix,
    /// Per-class counts normalized to class frequencies, `|L| × N`.
    pub scores: Matrix,
    /// Classes with no labeled pixel; they are mapped by repair only.
    pub unseen_classes: Vec<usize>,
}

/// Maps a new dataset onto the frozen unified space from co-occurrence of
/// winning nodes and labels. No parameter is modified.
pub fn adapt_unseen_dataset(
    encoder: &EncoderParams,
    unified: &Matrix,
    taxonomy: &DatasetTaxonomy,
    batches: &[PixelBatch],
    solver: &SolverConfig,
    exec: Exec,
) -> Result<AdaptResult> {
    if batches.is_empty() || batches.iter().all(PixelBatch::is_empty) {
        return Err(Error::Data("adaptation needs at least one labeled pixel".into()));
    }
    let classes = taxonomy.len();
    let nodes = unified.rows();
    for b in batches {
        b.check_labels(classes)?;
    }
    let winners = exec.map(batches, |b| unified_winners(encoder, unified, &b.observations));
    let mut counts = vec![vec![0u64; nodes]; classes];
    for (b, w) in batches.iter().zip(winners) {
        for (&n, &y) in w?.iter().zip(&b.labels) {
            counts[y][n] += 1;
        }
    }
    let unseen_classes: Vec<usize> = (0..classes).filter(|&c| counts[c].iter().all(|&x| x == 0)).collect();
    let scores = Matrix::from_fn(classes, nodes, |c, n| {
        let total: u64 = counts[c].iter().sum();
        if total == 0 {
            0.0
        } else {
            counts[c][n] as f64 / total as f64
        }
    });
    let beta = vec![1.0 / classes as f64; classes];
    let (mapping, _, _) = solve_one(taxonomy.id, &scores, &beta, solver.uot)?;
    // Links no pixel supports are dropped unless they are a class's only node.
    let mut assign = mapping.assignment();
    for n in 0..nodes {
        if let Some(c) = assign[n] {
            let others = assign.iter().filter(|&&a| a == Some(c)).count() > 1;
            if counts[c][n] == 0 && others {
                assign[n] = None;
            }
        }
    }
    Ok(AdaptResult {
        mapping: mapping_from_assignment(taxonomy.id, &assign, classes)?,
        scores,
        unseen_classes,
    })
}

/// Advances the state machine until the pipeline is done.
pub fn run_to_completion(state: &mut TrainState, ctx: &TrainContext) -> Result<()> {
    run_until(state, ctx, Stage::Done)
}

/// Advances the state machine until it enters `stop` (or finishes).
pub fn run_until(state: &mut TrainState, ctx: &TrainContext, stop: Stage) -> Result<()> {
    let sched = &ctx.config.schedule;
    while state.stage != stop {
        match state.stage {
            Stage::MultiHead => {
                run_stage_multihead(state, ctx, sched.multihead_iters)?;
                initialize_unified_head(state, ctx)?;
                advance(state, Stage::GnnTrain);
            }
            Stage::GnnTrain => {
                run_stage_gnn(state, ctx, sched.gnn_iters)?;
                solve_current_mappings(state, ctx)?;
                advance(state, Stage::SegTrain);
            }
            Stage::SegTrain => {
                run_stage_seg(state, ctx, sched.seg_iters)?;
                state.cycle += 1;
                let next = if state.cycle < sched.cycles {
                    Stage::GnnTrain
                } else {
                    Stage::Final
                };
                advance(state, next);
            }
            Stage::Final => {
                run_stage_final(state, ctx, sched.final_iters)?;
                advance(state, Stage::Done);
            }
            Stage::Done => break,
        }
    }
    Ok(())
}

fn advance(state: &mut TrainState, next: Stage) {
    state.stage = next;
    state.step_in_stage = 0;
    state.velocity.clear();
}

/// Fresh state trained through the full schedule.
pub fn run_pipeline(
    taxonomies: &[DatasetTaxonomy],
    source: &dyn BatchSource,
    obs_dim: usize,
    config: &TrainConfig,
) -> Result<TrainState> {
    let ctx = TrainContext::new(config, taxonomies, source)?;
    let mut state = TrainState::new(taxonomies, obs_dim, config)?;
    run_to_completion(&mut state, &ctx)?;
    Ok(state)
}
