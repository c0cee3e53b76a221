//! Label graph: dataset-label and unified nodes joined by a learnable
//! block-softmax adjacency, propagated through three GraphSAGE layers.
//!
//! Node order everywhere: all dataset-label nodes first, grouped by dataset
//! and in label order, then the `N` unified nodes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{ParamGroup, Trainable};
use crate::kernels::tape::block_adjacency;
use crate::kernels::{Gradients, Matrix, Tape, Var};
use crate::taxonomy::{check_taxonomies, dataset_sizes, DatasetTaxonomy};

pub const LAYERS: usize = 3;

/// Fixed, non-learnable graph inputs derived from the taxonomies.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInputs {
    /// `|L| × D_t` text embeddings, datasets concatenated.
    pub text: Matrix,
    /// `|L| × K` one-hot dataset membership.
    pub membership: Matrix,
    pub sizes: Vec<usize>,
}

impl GraphInputs {
    pub fn from_taxonomies(taxonomies: &[DatasetTaxonomy]) -> Result<Self> {
        let dim = check_taxonomies(taxonomies)?;
        let sizes = dataset_sizes(taxonomies);
        let total: usize = sizes.iter().sum();
        let mut text = Matrix::zeros(total, dim);
        let mut membership = Matrix::zeros(total, taxonomies.len());
        let mut row = 0;
        for (i, t) in taxonomies.iter().enumerate() {
            for l in &t.labels {
                text.row_mut(row).copy_from_slice(&l.embedding);
                membership.set(row, i, 1.0);
                row += 1;
            }
        }
        Ok(GraphInputs {
            text,
            membership,
            sizes,
        })
    }

    pub fn label_count(&self) -> usize {
        self.text.rows()
    }

    /// Column offset of each dataset's labels.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sizes
            .iter()
            .map(|s| {
                let o = acc;
                acc += s;
                o
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelGraphParams {
    /// `N × |L|` edge logits.
    pub raw_weights: Matrix,
    /// `W^k`, shape `D_{k+1} × 2·D_k`.
    pub layers: Vec<Matrix>,
    /// `N × D_0`.
    pub unified_inputs: Matrix,
    /// `K × D_0`.
    pub dataset_embeddings: Matrix,
    /// Bumped on every mutation; activations record it to detect staleness.
    #[serde(skip)]
    pub version: u64,
}

/// Equality over parameter values; the mutation counter is ignored.
impl PartialEq for LabelGraphParams {
    fn eq(&self, other: &Self) -> bool {
        self.raw_weights == other.raw_weights
            && self.layers == other.layers
            && self.unified_inputs == other.unified_inputs
            && self.dataset_embeddings == other.dataset_embeddings
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

impl LabelGraphParams {
    /// Random layers and unified inputs; zero edge logits and dataset
    /// embeddings.
    pub fn init<R: Rng>(rng: &mut R, sizes: &[usize], nodes: usize, text_dim: usize, width: usize) -> Self {
        let labels: usize = sizes.iter().sum();
        let mut layers = Vec::with_capacity(LAYERS);
        let mut d_in = text_dim;
        for _ in 0..LAYERS {
            layers.push(normal_matrix(rng, width, 2 * d_in, (1.0 / (2 * d_in) as f64).sqrt()));
            d_in = width;
        }
        let unified_inputs = normal_matrix(rng, nodes, text_dim, 1.0 / (text_dim as f64).sqrt());
        LabelGraphParams {
            raw_weights: Matrix::zeros(nodes, labels),
            layers,
            unified_inputs,
            dataset_embeddings: Matrix::zeros(sizes.len(), text_dim),
            version: 0,
        }
    }

    pub fn nodes(&self) -> usize {
        self.raw_weights.rows()
    }

    pub fn width(&self) -> usize {
        self.layers.last().map_or(0, Matrix::rows)
    }

    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn check(&self, inputs: &GraphInputs) -> Result<()> {
        let d0 = inputs.text.cols();
        if self.raw_weights.cols() != inputs.label_count() {
            return Err(Error::shape(
                "raw_weights",
                self.raw_weights.shape(),
                (self.nodes(), inputs.label_count()),
            ));
        }
        if self.unified_inputs.shape() != (self.nodes(), d0) {
            return Err(Error::shape(
                "unified_inputs",
                self.unified_inputs.shape(),
                (self.nodes(), d0),
            ));
        }
        if self.dataset_embeddings.shape() != (inputs.sizes.len(), d0) {
            return Err(Error::shape(
                "dataset_embeddings",
                self.dataset_embeddings.shape(),
                (inputs.sizes.len(), d0),
            ));
        }
        if self.layers.len() != LAYERS {
            return Err(Error::Config(format!(
                "expected {LAYERS} layers, got {}",
                self.layers.len()
            )));
        }
        let mut d_in = d0;
        for w in &self.layers {
            if w.cols() != 2 * d_in {
                return Err(Error::shape("gnn layer", w.shape(), (w.rows(), 2 * d_in)));
            }
            d_in = w.rows();
        }
        Ok(())
    }

    /// Drops unified nodes not in `keep` (edge logits and inputs).
    pub fn select_nodes(&self, keep: &[usize]) -> LabelGraphParams {
        LabelGraphParams {
            raw_weights: self.raw_weights.select_rows(keep),
            layers: self.layers.clone(),
            unified_inputs: self.unified_inputs.select_rows(keep),
            dataset_embeddings: self.dataset_embeddings.clone(),
            version: self.version + 1,
        }
    }
}

/// Input features `X^0`: text embedding plus dataset embedding for label
/// rows, followed by the unified inputs.
pub fn assemble_node_features(inputs: &GraphInputs, params: &LabelGraphParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = GraphVars::record(&mut tape, params, &Trainable::none());
    let x0 = assemble_on_tape(&mut tape, inputs, &vars)?;
    Ok(tape.value(x0).clone())
}

/// Block-softmax adjacency `M_a`, `(|L|+N)` square.
pub fn normalize_adjacency(raw: &Matrix, sizes: &[usize]) -> Result<Matrix> {
    block_adjacency(raw, sizes)
}

/// The `N × |L_i|` continuous mapping for one dataset, read from `M_a`.
pub fn continuous_block(adjacency: &Matrix, sizes: &[usize], dataset: usize) -> Result<Matrix> {
    let labels: usize = sizes.iter().sum();
    let nodes = adjacency.rows() - labels;
    let offset: usize = sizes[..dataset].iter().sum();
    adjacency.block(labels, offset, nodes, sizes[dataset])
}

/// Graph parameters as tape leaves.
#[derive(Clone, Debug)]
pub struct GraphVars {
    pub raw_weights: Var,
    pub layers: Vec<Var>,
    pub unified_inputs: Var,
    pub dataset_embeddings: Var,
}

fn leaf(tape: &mut Tape, m: &Matrix, group: ParamGroup, trainable: &Trainable) -> Var {
    if trainable.contains(group) {
        tape.param(m.clone())
    } else {
        tape.constant(m.clone())
    }
}

impl GraphVars {
    pub fn record(tape: &mut Tape, params: &LabelGraphParams, trainable: &Trainable) -> Self {
        GraphVars {
            raw_weights: leaf(tape, &params.raw_weights, ParamGroup::Adjacency, trainable),
            layers: params
                .layers
                .iter()
                .map(|w| leaf(tape, w, ParamGroup::GnnLayers, trainable))
                .collect(),
            unified_inputs: leaf(tape, &params.unified_inputs, ParamGroup::UnifiedInputs, trainable),
            dataset_embeddings: leaf(
                tape,
                &params.dataset_embeddings,
                ParamGroup::DatasetEmbeddings,
                trainable,
            ),
        }
    }
}

fn assemble_on_tape(tape: &mut Tape, inputs: &GraphInputs, vars: &GraphVars) -> Result<Var> {
    let text = tape.constant(inputs.text.clone());
    let membership = tape.constant(inputs.membership.clone());
    let per_label = tape.matmul(membership, vars.dataset_embeddings)?;
    let label_rows = tape.add(text, per_label)?;
    tape.concat_rows(label_rows, vars.unified_inputs)
}

/// Handles into one recorded forward pass.
#[derive(Clone, Debug)]
pub struct GraphActivation {
    tape_id: u64,
    version: u64,
    pub vars: GraphVars,
    /// `X^0 … X^3`.
    pub features: Vec<Var>,
    pub adjacency: Var,
    /// Final-layer unified rows.
    pub unified: Var,
    label_count: usize,
}

/// Gradients per graph parameter group; frozen groups are `None`.
#[derive(Clone, Debug, Default)]
pub struct GraphGrads {
    pub raw_weights: Option<Matrix>,
    pub layers: Option<Vec<Matrix>>,
    pub unified_inputs: Option<Matrix>,
    pub dataset_embeddings: Option<Matrix>,
}

/// Records `X^{k+1} = tanh([X^k ‖ M_a X^k] W^kᵀ)` for three layers.
pub fn gnn_forward(
    tape: &mut Tape,
    inputs: &GraphInputs,
    params: &LabelGraphParams,
    trainable: &Trainable,
) -> Result<GraphActivation> {
    params.check(inputs)?;
    let vars = GraphVars::record(tape, params, trainable);
    let x0 = assemble_on_tape(tape, inputs, &vars)?;
    let adjacency = tape.block_adjacency(vars.raw_weights, &inputs.sizes)?;
    let mut features = vec![x0];
    let mut x = x0;
    for &w in &vars.layers {
        let agg = tape.matmul(adjacency, x)?;
        let cat = tape.concat_cols(x, agg)?;
        let lin = tape.matmul_bt(cat, w)?;
        x = tape.tanh(lin)?;
        features.push(x);
    }
    let labels = inputs.label_count();
    let nodes = params.nodes();
    let width = tape.value(x).cols();
    let unified = tape.block(x, labels, 0, nodes, width)?;
    Ok(GraphActivation {
        tape_id: tape.id(),
        version: params.version,
        vars,
        features,
        adjacency,
        unified,
        label_count: labels,
    })
}

impl GraphActivation {
    pub fn tape_id(&self) -> u64 {
        self.tape_id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    /// Pulls this activation's parameter gradients out of a backward pass.
    pub fn collect(&self, grads: &Gradients) -> GraphGrads {
        let layers: Option<Vec<Matrix>> = self.vars.layers.iter().map(|v| grads.get(*v).cloned()).collect();
        GraphGrads {
            raw_weights: grads.get(self.vars.raw_weights).cloned(),
            layers,
            unified_inputs: grads.get(self.vars.unified_inputs).cloned(),
            dataset_embeddings: grads.get(self.vars.dataset_embeddings).cloned(),
        }
    }
}

/// Backward pass from an upstream gradient on `X_u`.
pub fn gnn_backward(
    tape: &Tape,
    activation: &GraphActivation,
    params: &LabelGraphParams,
    upstream: &Matrix,
) -> Result<GraphGrads> {
    if activation.tape_id != tape.id() {
        return Err(Error::State(format!(
            "activation recorded on tape {} replayed on tape {}",
            activation.tape_id,
            tape.id()
        )));
    }
    if activation.version != params.version {
        return Err(Error::State(format!(
            "stale activation: parameters at version {}, activation from {}",
            params.version, activation.version
        )));
    }
    let grads = tape.backward_with(activation.unified, upstream.clone())?;
    Ok(activation.collect(&grads))
}

/// Straight evaluation of `X_u` without keeping a tape around.
pub fn unified_embedding(inputs: &GraphInputs, params: &LabelGraphParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let act = gnn_forward(&mut tape, inputs, params, &Trainable::none())?;
    Ok(tape.value(act.unified).clone())
}
