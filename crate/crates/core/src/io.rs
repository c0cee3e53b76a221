//! Run configuration, file formats, checkpoints and result export.
//!
//! Formats:
//! - taxonomy JSON: `{datasets: [{id, name, labels: [{name, description, embedding}]}]}`
//! - matrix sidecar: 8-byte magic, `u32` rows, `u32` cols, row-major little-endian
//!   values; `UNISEGF1` stores `f32`, `UNISEGD1` stores `f64`
//! - checkpoint: `UNISEGCK`, `u32` version, named `f64` matrices, JSON trailer
//! - pixel JSON: `{dataset_id, labels, observations: [[..], ..]}`

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::budget::{compute_cross_head_iou, feasible_tuples, select_budget, BudgetSelection, CrossIoUTable};
use crate::error::{Error, Result};
use crate::graph::{continuous_block, normalize_adjacency, GraphInputs, LabelGraphParams};
use crate::kernels::Matrix;
use crate::par::Exec;
use crate::seg::{
    encode_observations, map_logits, predict, unified_logits, EncoderParams, Mapping, MultiHeadParams, PixelBatch,
};
use crate::solver::{initial_betas, solve_mappings, SolveOutput, SolverConfig};
use crate::synth::{
    generate_world, match_nodes, miou, recovery_score, unified_miou, FixedBatches, PlantedWorld, WorldConfig,
};
use crate::taxonomy::{
    check_taxonomies, dataset_sizes, mapping_from_assignment, validate_mapping, DatasetTaxonomy, MappingMatrix,
};
use crate::trainer::{
    run_pipeline, run_stage_multihead, run_to_completion, stream_key, streams, unified_winners, BudgetConfig, Dims,
    PruneReport, Schedule, Stage, StepLog, TrainConfig, TrainContext, TrainState,
};

pub const F32_MAGIC: &[u8; 8] = b"UNISEGF1";
pub const F64_MAGIC: &[u8; 8] = b"UNISEGD1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNISEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn parse_err(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.into(),
    }
}

/// Reads JSON, reporting failures with the offending field path.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        parse_err(path, field, e.into_inner().to_string())
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn encode_matrix(m: &Matrix, precision: Precision, out: &mut Vec<u8>) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Data("matrix too large".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Data("matrix too large".into()))?;
    out.extend_from_slice(match precision {
        Precision::F32 => F32_MAGIC,
        Precision::F64 => F64_MAGIC,
    });
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in m.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(())
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(parse_err(self.path, field, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, field: &str) -> Result<Matrix> {
        let magic = self.take(8, field)?;
        let precision = if magic == F32_MAGIC {
            Precision::F32
        } else if magic == F64_MAGIC {
            Precision::F64
        } else {
            return Err(parse_err(self.path, field, "bad matrix magic"));
        };
        let rows = self.u32(field)? as usize;
        let cols = self.u32(field)? as usize;
        let width = if precision == Precision::F32 { 4 } else { 8 };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| parse_err(self.path, field, "matrix size overflows"))?;
        let raw = self.take(n, field)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        Matrix::new(rows, cols, data)
    }
}

pub fn save_matrix(path: &Path, m: &Matrix, precision: Precision) -> Result<()> {
    let mut out = Vec::with_capacity(16 + m.data().len() * 8);
    encode_matrix(m, precision, &mut out)?;
    fs::write(path, out)?;
    Ok(())
}

/// Loads either sidecar precision.
pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let m = cur.matrix("matrix")?;
    if cur.pos != bytes.len() {
        return Err(parse_err(path, "matrix", "trailing bytes"));
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyFile {
    pub datasets: Vec<DatasetTaxonomy>,
}

/// Loads every dataset from each file in order. Ids must run 0..K across
/// the combined list.
pub fn load_taxonomies(paths: &[PathBuf]) -> Result<Vec<DatasetTaxonomy>> {
    let mut out = Vec::new();
    for p in paths {
        let file: TaxonomyFile = read_json(p)?;
        for (i, t) in file.datasets.iter().enumerate() {
            t.validate().map_err(|e| match e {
                Error::Shape { .. } => e,
                other => parse_err(p, format!("datasets[{i}].labels"), other.to_string()),
            })?;
        }
        out.extend(file.datasets);
    }
    check_taxonomies(&out)?;
    Ok(out)
}

pub fn save_taxonomies(path: &Path, taxonomies: &[DatasetTaxonomy]) -> Result<()> {
    write_json(
        path,
        &TaxonomyFile {
            datasets: taxonomies.to_vec(),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelFile {
    pub dataset_id: usize,
    pub labels: Vec<usize>,
    pub observations: Vec<Vec<f64>>,
}

impl PixelFile {
    pub fn from_batch(b: &PixelBatch) -> Self {
        PixelFile {
            dataset_id: b.dataset_id,
            labels: b.labels.clone(),
            observations: (0..b.observations.rows())
                .map(|r| b.observations.row(r).to_vec())
                .collect(),
        }
    }

    pub fn into_batch(self, path: &Path) -> Result<PixelBatch> {
        let dim = self.observations.first().map_or(0, Vec::len);
        if let Some(i) = self.observations.iter().position(|r| r.len() != dim) {
            return Err(parse_err(path, format!("observations[{i}]"), "row length differs"));
        }
        let rows = self.observations.len();
        let obs = Matrix::new(rows, dim, self.observations.into_iter().flatten().collect())?;
        PixelBatch::new(self.dataset_id, obs, self.labels)
    }
}

pub fn load_pixels(path: &Path) -> Result<PixelBatch> {
    read_json::<PixelFile>(path)?.into_batch(path)
}

pub fn save_pixels(path: &Path, batch: &PixelBatch) -> Result<()> {
    write_json(path, &PixelFile::from_batch(batch))
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A planted world generated from its configuration.
    Synthetic { world: WorldConfig, world_seed: u64 },
    /// A planted world saved by `synth-gen`.
    World { path: PathBuf },
    /// Taxonomy files plus one labeled pixel file per dataset.
    Files {
        taxonomies: Vec<PathBuf>,
        pixels: Vec<PathBuf>,
    },
}

/// Loaded data for a run.
pub enum RunData {
    Planted(PlantedWorld),
    Fixed {
        taxonomies: Vec<DatasetTaxonomy>,
        batches: FixedBatches,
    },
}

impl RunData {
    pub fn taxonomies(&self) -> &[DatasetTaxonomy] {
        match self {
            RunData::Planted(w) => &w.taxonomies,
            RunData::Fixed { taxonomies, .. } => taxonomies,
        }
    }

    pub fn source(&self) -> &dyn crate::synth::BatchSource {
        match self {
            RunData::Planted(w) => w,
            RunData::Fixed { batches, .. } => batches,
        }
    }

    pub fn world(&self) -> Option<&PlantedWorld> {
        match self {
            RunData::Planted(w) => Some(w),
            RunData::Fixed { .. } => None,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            RunData::Planted(w) => w.config.obs_dim,
            RunData::Fixed { batches, .. } => batches.batches[0].observations.cols(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub exec: Exec,
    /// Held-out pixels per dataset for the report.
    #[serde(default = "default_report_pixels")]
    pub report_pixels: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_report_pixels() -> usize {
    2000
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synthetic {
                world: WorldConfig::canonical(),
                world_seed: 0,
            },
            schedule: Schedule::default(),
            solver: SolverConfig::default(),
            budget: BudgetConfig::default(),
            dims: Dims::default(),
            seed: 0,
            exec: Exec::default(),
            report_pixels: default_report_pixels(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: RunConfig = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule.clone(),
            solver: self.solver,
            budget: self.budget.clone(),
            dims: self.dims.clone(),
            seed: self.seed,
            exec: self.exec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.report_pixels == 0 {
            return Err(Error::Config("report_pixels must be positive".into()));
        }
        match &self.data {
            DataSource::Synthetic { world, .. } => world.validate()?,
            DataSource::World { path } => require_file(path)?,
            DataSource::Files { taxonomies, pixels } => {
                if taxonomies.is_empty() {
                    return Err(Error::Config("no taxonomy files".into()));
                }
                for p in taxonomies.iter().chain(pixels) {
                    require_file(p)?;
                }
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<RunData> {
        match &self.data {
            DataSource::Synthetic { world, world_seed } => Ok(RunData::Planted(generate_world(world, *world_seed)?)),
            DataSource::World { path } => {
                let w: PlantedWorld = read_json(path)?;
                w.config.validate()?;
                w.check()?;
                Ok(RunData::Planted(w))
            }
            DataSource::Files { taxonomies, pixels } => {
                let taxonomies = load_taxonomies(taxonomies)?;
                let mut batches = pixels.iter().map(|p| load_pixels(p)).collect::<Result<Vec<_>>>()?;
                batches.sort_by_key(|b| b.dataset_id);
                if batches.len() != taxonomies.len() || batches.iter().enumerate().any(|(i, b)| b.dataset_id != i) {
                    return Err(Error::Data("need exactly one pixel file per dataset".into()));
                }
                for (b, t) in batches.iter().zip(&taxonomies) {
                    b.check_labels(t.len())?;
                }
                let dim = batches[0].observations.cols();
                if batches.iter().any(|b| b.observations.cols() != dim) {
                    return Err(Error::Data("pixel files disagree on observation width".into()));
                }
                Ok(RunData::Fixed {
                    taxonomies,
                    batches: FixedBatches { batches },
                })
            }
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("missing file {}", path.display())));
    }
    Ok(())
}

/// Scalars and small structures stored after the checkpoint matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointTrailer {
    config: Option<RunConfig>,
    seed: u64,
    stage: Stage,
    cycle: usize,
    step_in_stage: usize,
    global_step: u64,
    head_count: Option<usize>,
    graph_layers: Option<usize>,
    velocity: Vec<String>,
    mappings: Vec<MappingMatrix>,
    betas: Vec<Vec<f64>>,
    budget: Option<BudgetSelection>,
    prune: Option<PruneReport>,
    log: Vec<StepLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Option<RunConfig>,
    pub state: TrainState,
}

fn named_matrices(state: &TrainState) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> = vec![
        ("encoder.a1".into(), &state.encoder.a1),
        ("encoder.a2".into(), &state.encoder.a2),
    ];
    if let Some(h) = &state.heads {
        out.extend(h.heads.iter().enumerate().map(|(i, m)| (format!("head.{i}"), m)));
    }
    if let Some(g) = &state.graph {
        out.push(("graph.raw_weights".into(), &g.raw_weights));
        out.extend(
            g.layers
                .iter()
                .enumerate()
                .map(|(k, m)| (format!("graph.layer.{k}"), m)),
        );
        out.push(("graph.unified_inputs".into(), &g.unified_inputs));
        out.push(("graph.dataset_embeddings".into(), &g.dataset_embeddings));
    }
    if let Some(u) = &state.unified {
        out.push(("unified".into(), u));
    }
    out.extend(state.velocity.iter().map(|(k, m)| (format!("velocity.{k}"), m)));
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let st = &self.state;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mats = named_matrices(st);
        out.extend_from_slice(&(mats.len() as u32).to_le_bytes());
        for (name, m) in &mats {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_matrix(m, Precision::F64, &mut out)?;
        }
        let trailer = CheckpointTrailer {
            config: self.config.clone(),
            seed: st.seed,
            stage: st.stage,
            cycle: st.cycle,
            step_in_stage: st.step_in_stage,
            global_step: st.global_step,
            head_count: st.heads.as_ref().map(|h| h.heads.len()),
            graph_layers: st.graph.as_ref().map(|g| g.layers.len()),
            velocity: st.velocity.keys().cloned().collect(),
            mappings: st.mappings.clone(),
            betas: st.betas.clone(),
            budget: st.budget.clone(),
            prune: st.prune.clone(),
            log: st.log.clone(),
        };
        let json = serde_json::to_vec(&trailer)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { path, bytes, pos: 0 };
        if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(parse_err(path, "magic", "not a checkpoint"));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(parse_err(path, "version", format!("unsupported version {version}")));
        }
        let count = cur.u32("matrix count")?;
        let mut mats: BTreeMap<String, Matrix> = BTreeMap::new();
        for _ in 0..count {
            let len = cur.u32("matrix name")? as usize;
            let name = std::str::from_utf8(cur.take(len, "matrix name")?)
                .map_err(|_| parse_err(path, "matrix name", "not UTF-8"))?
                .to_string();
            let m = cur.matrix(&name)?;
            mats.insert(name, m);
        }
        let len = cur.u64("trailer length")? as usize;
        let json = cur.take(len, "trailer")?;
        if cur.pos != bytes.len() {
            return Err(parse_err(path, "trailer", "trailing bytes"));
        }
        let de = &mut serde_json::Deserializer::from_slice(json);
        let t: CheckpointTrailer = serde_path_to_error::deserialize(de)
            .map_err(|e| parse_err(path, format!("trailer.{}", e.path()), e.into_inner().to_string()))?;
        let take = |mats: &mut BTreeMap<String, Matrix>, name: &str| {
            mats.remove(name).ok_or_else(|| parse_err(path, name, "missing matrix"))
        };
        let encoder = EncoderParams {
            a1: take(&mut mats, "encoder.a1")?,
            a2: take(&mut mats, "encoder.a2")?,
        };
        let heads = match t.head_count {
            Some(n) => Some(MultiHeadParams {
                heads: (0..n)
                    .map(|i| take(&mut mats, &format!("head.{i}")))
                    .collect::<Result<_>>()?,
            }),
            None => None,
        };
        let graph = match t.graph_layers {
            Some(n) => Some(LabelGraphParams {
                raw_weights: take(&mut mats, "graph.raw_weights")?,
                layers: (0..n)
                    .map(|k| take(&mut mats, &format!("graph.layer.{k}")))
                    .collect::<Result<_>>()?,
                unified_inputs: take(&mut mats, "graph.unified_inputs")?,
                dataset_embeddings: take(&mut mats, "graph.dataset_embeddings")?,
                version: 0,
            }),
            None => None,
        };
        let unified = mats.remove("unified");
        let velocity = t
            .velocity
            .iter()
            .map(|k| Ok((k.clone(), take(&mut mats, &format!("velocity.{k}"))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        if let Some(extra) = mats.keys().next() {
            return Err(parse_err(path, extra.as_str(), "unexpected matrix"));
        }
        Ok(Checkpoint {
            config: t.config,
            state: TrainState {
                seed: t.seed,
                stage: t.stage,
                cycle: t.cycle,
                step_in_stage: t.step_in_stage,
                global_step: t.global_step,
                encoder,
                heads,
                graph,
                unified,
                mappings: t.mappings,
                betas: t.betas,
                budget: t.budget,
                prune: t.prune,
                velocity,
                log: t.log,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(path, &bytes)
    }
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "run directory {} is locked by another writer",
                dir.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Appends one JSON object per step to a log file.
pub fn write_step_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    for entry in log {
        let mut v = serde_json::to_value(entry)?;
        v["timestamp"] = serde_json::json!(now);
        serde_json::to_writer(&mut f, &v)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingFile {
    pub dataset_id: usize,
    pub dataset: String,
    pub nodes: usize,
    /// Class name per unified node, `null` when unlinked.
    pub assignment: Vec<Option<String>>,
}

impl MappingFile {
    pub fn new(m: &MappingMatrix, taxonomy: &DatasetTaxonomy) -> Self {
        MappingFile {
            dataset_id: m.dataset_id,
            dataset: taxonomy.name.clone(),
            nodes: m.nodes(),
            assignment: m
                .assignment()
                .into_iter()
                .map(|a| a.map(|c| taxonomy.labels[c].name.clone()))
                .collect(),
        }
    }

    pub fn to_mapping(&self, path: &Path, taxonomy: &DatasetTaxonomy) -> Result<MappingMatrix> {
        if self.assignment.len() != self.nodes {
            return Err(parse_err(path, "assignment", "length differs from nodes"));
        }
        let assign = self
            .assignment
            .iter()
            .enumerate()
            .map(|(n, a)| match a {
                None => Ok(None),
                Some(name) => taxonomy
                    .labels
                    .iter()
                    .position(|l| &l.name == name)
                    .map(Some)
                    .ok_or_else(|| parse_err(path, format!("assignment[{n}]"), format!("unknown label {name:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        mapping_from_assignment(self.dataset_id, &assign, taxonomy.len())
    }
}

pub fn load_mapping(path: &Path, taxonomies: &[DatasetTaxonomy]) -> Result<MappingMatrix> {
    let f: MappingFile = read_json(path)?;
    let tax = taxonomies
        .get(f.dataset_id)
        .ok_or_else(|| parse_err(path, "dataset_id", "no such dataset"))?;
    f.to_mapping(path, tax)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedNode {
    pub id: usize,
    /// Linked labels joined as `dataset:label`.
    pub name: String,
    pub links: Vec<String>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedTaxonomyFile {
    pub nodes: Vec<UnifiedNode>,
}

pub fn unified_taxonomy(state: &TrainState, unified: &Matrix, taxonomies: &[DatasetTaxonomy]) -> UnifiedTaxonomyFile {
    let nodes = (0..unified.rows())
        .map(|n| {
            let links: Vec<String> = state
                .mappings
                .iter()
                .zip(taxonomies)
                .filter_map(|(m, t)| {
                    m.assignment()
                        .get(n)
                        .copied()
                        .flatten()
                        .map(|c| format!("{}:{}", t.name, t.labels[c].name))
                })
                .collect();
            UnifiedNode {
                id: n,
                name: if links.is_empty() {
                    format!("node{n}")
                } else {
                    links.join("|")
                },
                links,
                embedding: unified.row(n).to_vec(),
            }
        })
        .collect();
    UnifiedTaxonomyFile { nodes }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset_id: usize,
    pub name: String,
    pub miou: f64,
    pub pixels: usize,
    pub valid_mapping: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedMetrics {
    pub nodes: usize,
    pub recovery_f1: Option<f64>,
    pub recovery_precision: Option<f64>,
    pub recovery_recall: Option<f64>,
    pub unified_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    pub ce: f64,
    pub orth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: Option<RunConfig>,
    pub datasets: Vec<DatasetMetrics>,
    pub unified: UnifiedMetrics,
    pub budget_nodes: Option<usize>,
    pub pruned: Option<PruneReport>,
    /// Losses averaged over windows of `loss_window` steps.
    pub loss_window: usize,
    pub loss_curve: Vec<LossPoint>,
}

/// Window means of the step log, split at stage boundaries.
pub fn loss_curve(log: &[StepLog], window: usize) -> Vec<LossPoint> {
    let window = window.max(1);
    let mut out = Vec::new();
    let mut i = 0;
    while i < log.len() {
        let stage = log[i].stage;
        let mut j = i;
        while j < log.len() && j - i < window && log[j].stage == stage {
            j += 1;
        }
        let n = (j - i) as f64;
        let chunk = &log[i..j];
        out.push(LossPoint {
            step: log[i].step,
            stage,
            loss: chunk.iter().map(|l| l.loss).sum::<f64>() / n,
            ce: chunk.iter().map(|l| l.ce).sum::<f64>() / n,
            orth: chunk.iter().map(|l| l.orth).sum::<f64>() / n,
        });
        i = j;
    }
    out
}

/// Writes the unified taxonomy, one mapping file per dataset, the report
/// and the checkpoint. Output depends only on the inputs.
pub fn export_results(
    checkpoint: &Checkpoint,
    unified: &Matrix,
    taxonomies: &[DatasetTaxonomy],
    report: &RunReport,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let state = &checkpoint.state;
    write_json(
        &dir.join("unified_taxonomy.json"),
        &unified_taxonomy(state, unified, taxonomies),
    )?;
    let mdir = dir.join("mappings");
    fs::create_dir_all(&mdir)?;
    for (m, t) in state.mappings.iter().zip(taxonomies) {
        if !validate_mapping(m).is_ok() {
            return Err(Error::Integrity(format!("mapping for {} is invalid", t.name)));
        }
        write_json(&mdir.join(format!("{}.json", file_stem(t))), &MappingFile::new(m, t))?;
    }
    write_json(&dir.join("report.json"), report)?;
    checkpoint.save(&dir.join("checkpoint.ck"))?;
    Ok(())
}

pub fn file_stem(t: &DatasetTaxonomy) -> String {
    let clean: String = t
        .name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{:02}_{clean}", t.id)
}

/// Window width for [`RunReport::loss_curve`].
pub const LOSS_WINDOW: usize = 50;

/// Held-out evaluation pixels per dataset, with true classes when the data
/// is a planted world.
pub fn held_out(data: &RunData, pixels: usize, seed: u64) -> Result<Vec<(PixelBatch, Option<Vec<usize>>)>> {
    match data {
        RunData::Planted(w) => (0..w.datasets())
            .map(|d| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, streams::TEST, 0, d as u64));
                let pb = w.sample_planted(d, pixels, &mut rng)?;
                Ok((pb.batch, Some(pb.true_classes)))
            })
            .collect(),
        RunData::Fixed { batches, .. } => Ok(batches.batches.iter().map(|b| (b.clone(), None)).collect()),
    }
}

/// Dataset-space class per pixel: argmax of `U · M`.
pub fn dataset_predictions(state: &TrainState, unified: &Matrix, batch: &PixelBatch) -> Result<Vec<usize>> {
    let m = state
        .mappings
        .get(batch.dataset_id)
        .ok_or_else(|| Error::State(format!("no mapping for dataset {}", batch.dataset_id)))?;
    let p = encode_observations(&batch.observations, &state.encoder)?;
    let s = map_logits(&unified_logits(&p, unified)?, Mapping::Discrete(m))?;
    Ok(predict(&s))
}

pub fn build_report(
    config: Option<&RunConfig>,
    state: &TrainState,
    unified: &Matrix,
    data: &RunData,
    pixels: usize,
    seed: u64,
) -> Result<RunReport> {
    let taxonomies = data.taxonomies();
    let sets = held_out(data, pixels, seed)?;
    let mut datasets = Vec::with_capacity(sets.len());
    let mut winners = Vec::new();
    let mut truth = Vec::new();
    for (batch, true_classes) in &sets {
        let t = &taxonomies[batch.dataset_id];
        let pred = dataset_predictions(state, unified, batch)?;
        datasets.push(DatasetMetrics {
            dataset_id: batch.dataset_id,
            name: t.name.clone(),
            miou: miou(&pred, &batch.labels, t.len())?.mean,
            pixels: batch.len(),
            valid_mapping: validate_mapping(&state.mappings[batch.dataset_id]).is_ok(),
        });
        if let Some(tc) = true_classes {
            winners.extend(unified_winners(&state.encoder, unified, &batch.observations)?);
            truth.extend(tc.iter().copied());
        }
    }
    let mut metrics = UnifiedMetrics {
        nodes: unified.rows(),
        recovery_f1: None,
        recovery_precision: None,
        recovery_recall: None,
        unified_miou: None,
    };
    if let Some(world) = data.world() {
        let score = recovery_score(&state.mappings, world)?;
        let matching = match_nodes(&state.mappings, world)?;
        metrics.recovery_f1 = Some(score.f1);
        metrics.recovery_precision = Some(score.precision);
        metrics.recovery_recall = Some(score.recall);
        metrics.unified_miou = Some(unified_miou(&winners, &truth, &matching, world.true_classes())?.mean);
    }
    Ok(RunReport {
        config: config.cloned(),
        datasets,
        unified: metrics,
        budget_nodes: state.budget.as_ref().map(|b| b.nodes()),
        pruned: state.prune.clone(),
        loss_window: LOSS_WINDOW,
        loss_curve: loss_curve(&state.log, LOSS_WINDOW),
    })
}

pub struct RunOutcome {
    pub data: RunData,
    pub checkpoint: Checkpoint,
    pub unified: Matrix,
    pub report: RunReport,
}

/// Full pipeline from a run configuration, with its report.
pub fn train_run(config: &RunConfig) -> Result<RunOutcome> {
    train_from(config, None)
}

/// Like [`train_run`], continuing from `state` when given.
pub fn train_from(config: &RunConfig, state: Option<TrainState>) -> Result<RunOutcome> {
    config.validate()?;
    let data = config.load_data()?;
    let train = config.train_config();
    let state = match state {
        None => run_pipeline(data.taxonomies(), data.source(), data.obs_dim(), &train)?,
        Some(mut state) => {
            if state.seed != config.seed {
                return Err(Error::Config(format!(
                    "checkpoint seed {} differs from configured seed {}",
                    state.seed, config.seed
                )));
            }
            let ctx = TrainContext::new(&train, data.taxonomies(), data.source())?;
            run_to_completion(&mut state, &ctx)?;
            state
        }
    };
    let inputs = GraphInputs::from_taxonomies(data.taxonomies())?;
    let unified = state.unified_embedding(&inputs)?;
    let report = build_report(Some(config), &state, &unified, &data, config.report_pixels, config.seed)?;
    Ok(RunOutcome {
        data,
        checkpoint: Checkpoint {
            config: Some(config.clone()),
            state,
        },
        unified,
        report,
    })
}

/// Report for a saved checkpoint. `config` replaces the one stored in the
/// checkpoint when given.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, config: Option<&RunConfig>) -> Result<(RunData, RunReport)> {
    let config = config
        .or(checkpoint.config.as_ref())
        .ok_or_else(|| Error::Config("checkpoint has no run configuration; pass one".into()))?;
    let data = config.load_data()?;
    let inputs = GraphInputs::from_taxonomies(data.taxonomies())?;
    let unified = checkpoint.state.unified_embedding(&inputs)?;
    let report = build_report(
        Some(config),
        &checkpoint.state,
        &unified,
        &data,
        config.report_pixels,
        config.seed,
    )?;
    Ok((data, report))
}

/// Solves every dataset's mapping from an `N × |L|` raw adjacency.
pub fn solve_from_raw(
    raw: &Matrix,
    taxonomies: &[DatasetTaxonomy],
    solver: &SolverConfig,
    exec: Exec,
) -> Result<SolveOutput> {
    let sizes = dataset_sizes(taxonomies);
    let labels: usize = sizes.iter().sum();
    if raw.cols() != labels {
        return Err(Error::shape("adjacency", raw.shape(), (raw.rows(), labels)));
    }
    let adjacency = normalize_adjacency(raw, &sizes)?;
    let blocks = (0..sizes.len())
        .map(|d| continuous_block(&adjacency, &sizes, d))
        .collect::<Result<Vec<_>>>()?;
    solve_mappings(&blocks, &initial_betas(&sizes), solver, exec)
}

/// Runs the multi-head warm-up of a configured run and selects the node
/// budget from the resulting cross-head IoU table.
pub fn warmup_budget(config: &RunConfig) -> Result<(CrossIoUTable, BudgetSelection)> {
    config.validate()?;
    let data = config.load_data()?;
    let train = config.train_config();
    let ctx = TrainContext::new(&train, data.taxonomies(), data.source())?;
    let mut state = TrainState::new(data.taxonomies(), data.obs_dim(), &train)?;
    run_stage_multihead(&mut state, &ctx, train.schedule.multihead_iters)?;
    let heads = state
        .heads
        .as_ref()
        .ok_or_else(|| Error::State("heads missing after warm-up".into()))?;
    let table = compute_cross_head_iou(&state.encoder, heads, &ctx.eval, train.exec)?;
    let selection = budget_from_table(&table, &train.budget)?;
    Ok((table, selection))
}

pub fn budget_from_table(table: &CrossIoUTable, budget: &BudgetConfig) -> Result<BudgetSelection> {
    let tuples = feasible_tuples(table, budget.iou_floor);
    select_budget(&tuples, table.sizes(), budget.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn minimal_taxonomy_loads_and_round_trips() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(
            &p,
            r#"{"datasets":[{"id":0,"name":"a","labels":[{"name":"road","embedding":[0.5,1.0]}]}]}"#,
        )
        .unwrap();
        let t = load_taxonomies(std::slice::from_ref(&p)).unwrap();
        assert_eq!(t[0].labels[0].embedding, vec![0.5, 1.0]);
        let q = dir.path().join("u.json");
        save_taxonomies(&q, &t).unwrap();
        assert_eq!(load_taxonomies(&[q]).unwrap(), t);
    }

    #[test]
    fn taxonomy_errors_name_path_and_field() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(
            &p,
            r#"{"datasets":[{"id":0,"name":"a","labels":[{"name":"x","embedding":["no"]}]}]}"#,
        )
        .unwrap();
        match load_taxonomies(std::slice::from_ref(&p)) {
            Err(Error::Parse { path, field, .. }) => {
                assert_eq!(path, p);
                assert!(field.contains("labels[0].embedding"), "{field}");
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, r#"{"datasets":[{"id":0,"name":"a","labels":[{"name":"x","embedding":[1]},{"name":"x","embedding":[2]}]}]}"#).unwrap();
        assert!(matches!(
            load_taxonomies(std::slice::from_ref(&p)),
            Err(Error::Parse { .. })
        ));
        fs::write(&p, r#"{"datasets":[{"id":0,"name":"a","labels":[{"name":"x","embedding":[1]},{"name":"y","embedding":[2,3]}]}]}"#).unwrap();
        assert!(matches!(load_taxonomies(&[p]), Err(Error::Shape { .. })));
    }

    #[test]
    fn sidecars_round_trip() {
        let dir = tempdir().unwrap();
        let m = Matrix::from_fn(3, 2, |r, c| r as f64 * 0.1 - c as f64 / 3.0);
        let p = dir.path().join("m.f64mat");
        save_matrix(&p, &m, Precision::F64).unwrap();
        assert_eq!(load_matrix(&p).unwrap(), m);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], F64_MAGIC);
        assert_eq!(bytes.len(), 16 + 6 * 8);

        let p = dir.path().join("m.f32mat");
        save_matrix(&p, &m, Precision::F32).unwrap();
        let back = load_matrix(&p).unwrap();
        for (a, b) in back.data().iter().zip(m.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        save_matrix(&dir.path().join("again"), &back, Precision::F32).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join("again")).unwrap());

        fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(load_matrix(&p), Err(Error::Parse { .. })));
    }

    fn small_config() -> RunConfig {
        let mut world = WorldConfig::canonical();
        world.datasets.truncate(2);
        world.confounders.clear();
        RunConfig {
            data: DataSource::Synthetic { world, world_seed: 3 },
            schedule: Schedule {
                multihead_iters: 6,
                gnn_iters: 3,
                seg_iters: 3,
                cycles: 1,
                final_iters: 4,
                pixels_per_dataset: 16,
                eval_pixels: 64,
                ..Schedule::default()
            },
            report_pixels: 50,
            ..RunConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let cfg = small_config();
        let data = cfg.load_data().unwrap();
        let st = run_pipeline(data.taxonomies(), data.source(), data.obs_dim(), &cfg.train_config()).unwrap();
        let ck = Checkpoint {
            config: Some(cfg),
            state: st,
        };
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ck");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), fs::read(&p).unwrap());
        let bytes = fs::read(&p).unwrap();
        assert!(Checkpoint::from_bytes(&p, &bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn mid_stage_checkpoint_keeps_heads_and_velocity() {
        let cfg = small_config();
        let data = cfg.load_data().unwrap();
        let tc = cfg.train_config();
        let ctx = crate::trainer::TrainContext::new(&tc, data.taxonomies(), data.source()).unwrap();
        let mut st = TrainState::new(data.taxonomies(), data.obs_dim(), &tc).unwrap();
        crate::trainer::run_stage_multihead(&mut st, &ctx, 3).unwrap();
        assert!(!st.velocity.is_empty());
        let ck = Checkpoint {
            config: None,
            state: st,
        };
        let p = Path::new("unused");
        assert_eq!(Checkpoint::from_bytes(p, &ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn mapping_files_reload_valid() {
        let cfg = small_config();
        let data = cfg.load_data().unwrap();
        let world = data.world().unwrap();
        let dir = tempdir().unwrap();
        for (m, t) in world.planted_mappings().unwrap().iter().zip(&world.taxonomies) {
            let p = dir.path().join(format!("{}.json", file_stem(t)));
            write_json(&p, &MappingFile::new(m, t)).unwrap();
            let back = load_mapping(&p, &world.taxonomies).unwrap();
            assert_eq!(&back, m);
            assert!(validate_mapping(&back).is_ok());
        }
    }

    #[test]
    fn config_defaults_match_module_defaults() {
        let c = RunConfig::default();
        let parsed: RunConfig = serde_json::from_value(serde_json::json!({
            "data": serde_json::to_value(&c.data).unwrap()
        }))
        .unwrap();
        assert_eq!(parsed, c);
        let tc = parsed.train_config();
        assert_eq!(tc, TrainConfig::default());
        assert_eq!(tc.solver.uot, crate::solver::UotParams::default());
        assert_eq!(tc.budget.lambda, crate::budget::DEFAULT_LAMBDA);
        assert_eq!((tc.schedule.lambda_ce, tc.schedule.lambda_orth), (1.0, 0.1));
        assert_eq!(tc.solver.momentum, 0.5);
    }

    #[test]
    fn config_rejects_bad_values_and_unknown_fields() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"data":{"kind":"world","path":"/nonexistent/w.json"}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        fs::write(&p, r#"{"data":{"kind":"world","path":"x"},"bogus":1}"#).unwrap();
        match RunConfig::load(&p) {
            Err(Error::Parse { field, .. }) => assert!(field.contains("bogus") || field == ".", "{field}"),
            other => panic!("{other:?}"),
        }
        let mut c = small_config();
        c.schedule.momentum = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn export_is_deterministic_and_complete() {
        let cfg = small_config();
        let out = train_run(&cfg).unwrap();
        assert_eq!(out.report.datasets.len(), 2);
        assert!(out.report.unified.recovery_f1.is_some());
        assert!(out.report.datasets.iter().all(|d| d.valid_mapping));
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        for dir in [a.path(), b.path()] {
            export_results(&out.checkpoint, &out.unified, out.data.taxonomies(), &out.report, dir).unwrap();
        }
        let names = [
            "unified_taxonomy.json",
            "report.json",
            "checkpoint.ck",
            "mappings/00_A.json",
            "mappings/01_B.json",
        ];
        for n in names {
            assert_eq!(
                fs::read(a.path().join(n)).unwrap(),
                fs::read(b.path().join(n)).unwrap(),
                "{n}"
            );
        }
        let report: RunReport = read_json(&a.path().join("report.json")).unwrap();
        assert_eq!(report, out.report);
        let m = load_mapping(&a.path().join("mappings/01_B.json"), out.data.taxonomies()).unwrap();
        assert_eq!(m, out.checkpoint.state.mappings[1]);
        let u: UnifiedTaxonomyFile = read_json(&a.path().join("unified_taxonomy.json")).unwrap();
        assert_eq!(u.nodes.len(), out.unified.rows());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn loss_curve_windows_respect_stages() {
        let log: Vec<StepLog> = (0..7)
            .map(|i| StepLog {
                step: i,
                stage: if i < 5 { Stage::MultiHead } else { Stage::GnnTrain },
                ce: i as f64,
                orth: 0.0,
                loss: i as f64,
            })
            .collect();
        let c = loss_curve(&log, 2);
        let steps: Vec<u64> = c.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 2, 4, 5]);
        assert_eq!(c[2].loss, 4.0);
        assert_eq!(c[3].loss, 5.5);
    }
}
