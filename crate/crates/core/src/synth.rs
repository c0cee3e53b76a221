//! Planted taxonomy worlds, pixel sampling, and the scores used to check
//! what training recovers.

use pathfinding::kuhn_munkres::kuhn_munkres;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::seg::PixelBatch;
use crate::taxonomy::{mapping_from_assignment, DatasetTaxonomy, LabelDef, MappingMatrix};

/// A dataset in a planted world: each class lists the true classes it
/// covers. True classes listed nowhere are omitted from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub classes: Vec<Vec<usize>>,
}

/// Gives label `(dataset, class)` the text embedding of `(like_dataset,
/// like_class)` plus fresh noise, and copies its name.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confounder {
    pub dataset: usize,
    pub class: usize,
    pub like_dataset: usize,
    pub like_class: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassSampling {
    #[default]
    Uniform,
    /// Visible class of rank `r` drawn with weight `(r + 1)^-exponent`.
    PowerLaw { exponent: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub true_classes: usize,
    pub obs_dim: usize,
    pub text_dim: usize,
    /// Pixel noise around each prototype.
    pub sigma: f64,
    /// Noise added to each label's text embedding.
    pub text_noise: f64,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub confounders: Vec<Confounder>,
    #[serde(default)]
    pub sampling: ClassSampling,
}

impl WorldConfig {
    /// Ten true classes over three datasets with merges, one omission per
    /// dataset, and one confounded label.
    pub fn canonical() -> Self {
        let singles = |ts: &[usize]| ts.iter().map(|&t| vec![t]).collect::<Vec<_>>();
        let mut a = vec![vec![0, 1]];
        a.extend(singles(&[2, 3, 4, 5, 6, 7, 8]));
        let mut b = singles(&[0, 1]);
        b.extend([vec![2, 3], vec![4, 5]]);
        b.extend(singles(&[6, 7, 9]));
        let mut c = vec![vec![1, 2]];
        c.extend(singles(&[3, 4, 5]));
        c.extend([vec![6, 7, 8], vec![9]]);
        WorldConfig {
            true_classes: 10,
            obs_dim: 16,
            text_dim: 32,
            sigma: 0.3,
            text_noise: 0.1,
            datasets: vec![
                DatasetSpec {
                    name: "A".into(),
                    classes: a,
                },
                DatasetSpec {
                    name: "B".into(),
                    classes: b,
                },
                DatasetSpec {
                    name: "C".into(),
                    classes: c,
                },
            ],
            confounders: vec![Confounder {
                dataset: 2,
                class: 0,
                like_dataset: 1,
                like_class: 1,
            }],
            sampling: ClassSampling::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.true_classes < 2 || self.datasets.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 true classes and 2 datasets, got {} and {}",
                self.true_classes,
                self.datasets.len()
            )));
        }
        if self.obs_dim == 0 || self.text_dim == 0 {
            return Err(Error::Config("observation and text dimensions must be positive".into()));
        }
        if !(self.sigma >= 0.0) || !(self.text_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if let ClassSampling::PowerLaw { exponent } = self.sampling {
            if !(exponent >= 0.0) || !exponent.is_finite() {
                return Err(Error::Config(format!("power-law exponent {exponent} invalid")));
            }
        }
        let mut seen_anywhere = vec![false; self.true_classes];
        for (d, spec) in self.datasets.iter().enumerate() {
            if spec.classes.is_empty() {
                return Err(Error::Config(format!("dataset {d} has no classes")));
            }
            let mut seen = vec![false; self.true_classes];
            for (c, members) in spec.classes.iter().enumerate() {
                if members.is_empty() {
                    return Err(Error::Config(format!("class {c} of dataset {d} has no true class")));
                }
                for &t in members {
                    if t >= self.true_classes || seen[t] {
                        return Err(Error::Config(format!(
                            "true class {t} invalid or repeated in dataset {d}"
                        )));
                    }
                    seen[t] = true;
                    seen_anywhere[t] = true;
                }
            }
        }
        if let Some(t) = seen_anywhere.iter().position(|s| !s) {
            return Err(Error::Config(format!("true class {t} appears in no dataset")));
        }
        for cf in &self.confounders {
            let ok = |d: usize, c: usize| self.datasets.get(d).is_some_and(|s| c < s.classes.len());
            if !ok(cf.dataset, cf.class) || !ok(cf.like_dataset, cf.like_class) {
                return Err(Error::Config("confounder refers to a missing label".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedWorld {
    pub config: WorldConfig,
    /// `N* × D_obs`.
    pub prototypes: Matrix,
    /// `N* × D_t` text seeds.
    pub text_seeds: Matrix,
    pub taxonomies: Vec<DatasetTaxonomy>,
    /// `truth[d][t]` is the class of dataset `d` covering true class `t`.
    pub truth: Vec<Vec<Option<usize>>>,
}

fn class_name(members: &[usize]) -> String {
    members.iter().map(|t| format!("t{t}")).collect::<Vec<_>>().join("+")
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<PlantedWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.true_classes;
    let prototypes = Matrix::from_fn(n, config.obs_dim, |_, _| rng.sample(StandardNormal));
    let text_seeds = Matrix::from_fn(n, config.text_dim, |_, _| rng.sample(StandardNormal));
    let noise = Normal::new(0.0, config.text_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut labels: Vec<Vec<LabelDef>> = config
        .datasets
        .iter()
        .map(|spec| {
            spec.classes
                .iter()
                .map(|members| {
                    let embedding = (0..config.text_dim)
                        .map(|j| {
                            let mean =
                                members.iter().map(|&t| text_seeds.get(t, j)).sum::<f64>() / members.len() as f64;
                            mean + noise.sample(&mut rng)
                        })
                        .collect();
                    LabelDef {
                        name: class_name(members),
                        description: format!("planted class covering {}", class_name(members)),
                        embedding,
                    }
                })
                .collect()
        })
        .collect();
    for cf in &config.confounders {
        let like = labels[cf.like_dataset][cf.like_class].clone();
        let target = &mut labels[cf.dataset][cf.class];
        target.name = like.name.clone();
        target.embedding = like.embedding.iter().map(|v| v + noise.sample(&mut rng)).collect();
    }
    let taxonomies = labels
        .into_iter()
        .enumerate()
        .map(|(d, ls)| DatasetTaxonomy::new(d, config.datasets[d].name.clone(), ls))
        .collect::<Result<Vec<_>>>()?;
    let truth = config
        .datasets
        .iter()
        .map(|spec| {
            let mut t_map = vec![None; n];
            for (c, members) in spec.classes.iter().enumerate() {
                for &t in members {
                    t_map[t] = Some(c);
                }
            }
            t_map
        })
        .collect();
    let world = PlantedWorld {
        config: config.clone(),
        prototypes,
        text_seeds,
        taxonomies,
        truth,
    };
    world.check()?;
    Ok(world)
}

/// Pixels with both their dataset labels and the hidden true classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedBatch {
    pub batch: PixelBatch,
    pub true_classes: Vec<usize>,
}

impl PlantedWorld {
    pub fn datasets(&self) -> usize {
        self.taxonomies.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.taxonomies.iter().map(|t| t.len()).collect()
    }

    pub fn true_classes(&self) -> usize {
        self.config.true_classes
    }

    pub fn visible(&self, dataset: usize) -> Vec<usize> {
        (0..self.true_classes())
            .filter(|&t| self.truth[dataset][t].is_some())
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        for (d, tax) in self.taxonomies.iter().enumerate() {
            for c in 0..tax.len() {
                if !self.truth[d].contains(&Some(c)) {
                    return Err(Error::Integrity(format!("class {c} of dataset {d} has no true member")));
                }
            }
        }
        for t in 0..self.true_classes() {
            if self.truth.iter().all(|m| m[t].is_none()) {
                return Err(Error::Integrity(format!("true class {t} appears in no dataset")));
            }
        }
        Ok(())
    }

    /// Copy of the world with one more dataset. Prototypes, text seeds and
    /// existing labels are unchanged; the new labels draw their text noise
    /// from `seed`.
    pub fn with_dataset(&self, spec: DatasetSpec, seed: u64) -> Result<PlantedWorld> {
        let mut config = self.config.clone();
        config.datasets.push(spec.clone());
        config.validate()?;
        let noise = Normal::new(0.0, config.text_noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = spec
            .classes
            .iter()
            .map(|members| LabelDef {
                name: class_name(members),
                description: format!("planted class covering {}", class_name(members)),
                embedding: (0..config.text_dim)
                    .map(|j| {
                        members.iter().map(|&t| self.text_seeds.get(t, j)).sum::<f64>() / members.len() as f64
                            + noise.sample(&mut rng)
                    })
                    .collect(),
            })
            .collect();
        let d = self.taxonomies.len();
        let mut world = self.clone();
        world.config = config;
        world
            .taxonomies
            .push(DatasetTaxonomy::new(d, spec.name.clone(), labels)?);
        let mut t_map = vec![None; self.true_classes()];
        for (c, members) in spec.classes.iter().enumerate() {
            for &t in members {
                t_map[t] = Some(c);
            }
        }
        world.truth.push(t_map);
        world.check()?;
        Ok(world)
    }

    /// The planted mapping of dataset `d` with true class `t` as node `t`.
    pub fn planted_mappings(&self) -> Result<Vec<MappingMatrix>> {
        self.truth
            .iter()
            .enumerate()
            .map(|(d, m)| mapping_from_assignment(d, m, self.taxonomies[d].len()))
            .collect()
    }

    pub fn sample_planted<R: Rng>(&self, dataset: usize, pixels: usize, rng: &mut R) -> Result<PlantedBatch> {
        if dataset >= self.datasets() {
            return Err(Error::Index {
                index: dataset,
                len: self.datasets(),
                context: "dataset",
            });
        }
        let visible = self.visible(dataset);
        let weights: Vec<f64> = match self.config.sampling {
            ClassSampling::Uniform => vec![1.0; visible.len()],
            ClassSampling::PowerLaw { exponent } => {
                (0..visible.len()).map(|r| ((r + 1) as f64).powf(-exponent)).collect()
            }
        };
        let total: f64 = weights.iter().sum();
        let d_obs = self.config.obs_dim;
        let mut obs = Vec::with_capacity(pixels * d_obs);
        let mut labels = Vec::with_capacity(pixels);
        let mut true_classes = Vec::with_capacity(pixels);
        for _ in 0..pixels {
            let t = if matches!(self.config.sampling, ClassSampling::Uniform) {
                visible[rng.gen_range(0..visible.len())]
            } else {
                let mut x = rng.gen_range(0.0..total);
                let mut pick = visible[visible.len() - 1];
                for (i, w) in weights.iter().enumerate() {
                    if x < *w {
                        pick = visible[i];
                        break;
                    }
                    x -= w;
                }
                pick
            };
            for j in 0..d_obs {
                let z: f64 = rng.sample(StandardNormal);
                obs.push(self.prototypes.get(t, j) + self.config.sigma * z);
            }
            labels.push(self.truth[dataset][t].expect("visible class has a label"));
            true_classes.push(t);
        }
        Ok(PlantedBatch {
            batch: PixelBatch::new(dataset, Matrix::new(pixels, d_obs, obs)?, labels)?,
            true_classes,
        })
    }
}

/// Source of training and evaluation pixels, addressed by a stream key so
/// that every draw is reproducible on its own.
pub trait BatchSource: Sync {
    fn datasets(&self) -> usize;
    fn batch(&self, dataset: usize, pixels: usize, stream: u64) -> Result<PixelBatch>;
}

impl BatchSource for PlantedWorld {
    fn datasets(&self) -> usize {
        self.taxonomies.len()
    }

    fn batch(&self, dataset: usize, pixels: usize, stream: u64) -> Result<PixelBatch> {
        sample_batch(self, dataset, pixels, stream)
    }
}

pub fn sample_batch(world: &PlantedWorld, dataset: usize, pixels: usize, seed: u64) -> Result<PixelBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(world.sample_planted(dataset, pixels, &mut rng)?.batch)
}

/// Fixed pixel sets replayed in order, wrapping around.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedBatches {
    pub batches: Vec<PixelBatch>,
}

impl BatchSource for FixedBatches {
    fn datasets(&self) -> usize {
        self.batches.len()
    }

    fn batch(&self, dataset: usize, pixels: usize, stream: u64) -> Result<PixelBatch> {
        let src = self.batches.get(dataset).ok_or(Error::Index {
            index: dataset,
            len: self.batches.len(),
            context: "dataset",
        })?;
        let n = src.len();
        let start = (stream % n as u64) as usize;
        let rows: Vec<usize> = (0..pixels).map(|i| (start + i) % n).collect();
        PixelBatch::new(
            dataset,
            src.observations.select_rows(&rows),
            rows.iter().map(|&r| src.labels[r]).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RecoveryScore {
    fn from_counts(correct: usize, learned: usize, planted: usize) -> Self {
        let precision = if learned == 0 {
            0.0
        } else {
            correct as f64 / learned as f64
        };
        let recall = if planted == 0 {
            0.0
        } else {
            correct as f64 / planted as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RecoveryScore { precision, recall, f1 }
    }
}

/// Maximum-agreement one-to-one matching of learned nodes to true classes.
/// Agreement counts the datasets in which node and true class map to the
/// same class. Returns `matching[node] = Some(true class)`.
pub fn match_nodes(learned: &[MappingMatrix], world: &PlantedWorld) -> Result<Vec<Option<usize>>> {
    if learned.len() != world.datasets() {
        return Err(Error::Data(format!(
            "{} learned mappings for {} datasets",
            learned.len(),
            world.datasets()
        )));
    }
    let nodes = learned.first().map_or(0, |m| m.nodes());
    for (d, m) in learned.iter().enumerate() {
        if m.nodes() != nodes || m.classes() != world.taxonomies[d].len() {
            return Err(Error::shape(
                "match_nodes",
                (m.nodes(), m.classes()),
                (nodes, world.taxonomies[d].len()),
            ));
        }
    }
    let assigns: Vec<Vec<Option<usize>>> = learned.iter().map(|m| m.assignment()).collect();
    let n_true = world.true_classes();
    let side = nodes.max(n_true);
    let weights = pathfinding::matrix::Matrix::from_fn(side, side, |(n, t)| {
        if n >= nodes || t >= n_true {
            return 0i64;
        }
        (0..world.datasets())
            .filter(|&d| assigns[d][n].is_some() && assigns[d][n] == world.truth[d][t])
            .count() as i64
    });
    let (_, cols) = kuhn_munkres(&weights);
    Ok((0..nodes).map(|n| Some(cols[n]).filter(|&t| t < n_true)).collect())
}

/// Edge-set precision/recall/F1 after node matching, over every label.
pub fn recovery_score(learned: &[MappingMatrix], world: &PlantedWorld) -> Result<RecoveryScore> {
    let all: Vec<(usize, usize)> = world
        .taxonomies
        .iter()
        .enumerate()
        .flat_map(|(d, t)| (0..t.len()).map(move |c| (d, c)))
        .collect();
    recovery_score_on(learned, world, &all)
}

/// Edge-set scores restricted to edges that touch the listed
/// `(dataset, class)` labels. The matching still uses every edge.
pub fn recovery_score_on(
    learned: &[MappingMatrix],
    world: &PlantedWorld,
    labels: &[(usize, usize)],
) -> Result<RecoveryScore> {
    let matching = match_nodes(learned, world)?;
    let keep = |d: usize, c: usize| labels.contains(&(d, c));
    let mut learned_edges = 0;
    let mut correct = 0;
    for (d, m) in learned.iter().enumerate() {
        for (n, c) in m.edges() {
            if !keep(d, c) {
                continue;
            }
            learned_edges += 1;
            if matching[n].is_some_and(|t| world.truth[d][t] == Some(c)) {
                correct += 1;
            }
        }
    }
    let planted = (0..world.datasets())
        .map(|d| world.truth[d].iter().filter(|c| c.is_some_and(|c| keep(d, c))).count())
        .sum();
    Ok(RecoveryScore::from_counts(correct, learned_edges, planted))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub mean: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(pred: &[usize], truth: &[usize], classes: usize) -> Result<MiouReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape("miou", (pred.len(), 1), (truth.len(), 1)));
    }
    if pred.is_empty() {
        return Err(Error::Data("miou on empty input".into()));
    }
    let mut inter = vec![0u64; classes];
    let mut p_count = vec![0u64; classes];
    let mut t_count = vec![0u64; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Index {
                index: p.max(t),
                len: classes,
                context: "miou class",
            });
        }
        p_count[p] += 1;
        t_count[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let union = p_count[c] + t_count[c] - inter[c];
            (union > 0).then(|| inter[c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(MiouReport {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Unified-space mIoU over the true classes: each pixel's winning node is
/// translated through the node matching; pixels won by an unmatched node
/// count as misses for their true class.
pub fn unified_miou(
    winners: &[usize],
    truth: &[usize],
    matching: &[Option<usize>],
    true_classes: usize,
) -> Result<MiouReport> {
    let pred: Vec<usize> = winners
        .iter()
        .map(|&n| matching.get(n).copied().flatten().unwrap_or(true_classes))
        .collect();
    let full = miou(&pred, truth, true_classes + 1)?;
    let per_class = full.per_class[..true_classes].to_vec();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("no true class present".into()));
    }
    Ok(MiouReport {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Text-only unification: average-link agglomerative clustering of label
/// embeddings by cosine similarity, merging only clusters drawn from
/// disjoint datasets while the best link is at least `threshold`. Each
/// cluster becomes one unified node.
pub fn cluster_embeddings(taxonomies: &[DatasetTaxonomy], threshold: f64) -> Result<Vec<MappingMatrix>> {
    let labels: Vec<(usize, usize, &[f64])> = taxonomies
        .iter()
        .enumerate()
        .flat_map(|(d, t)| {
            t.labels
                .iter()
                .enumerate()
                .map(move |(c, l)| (d, c, l.embedding.as_slice()))
        })
        .collect();
    let sim: Vec<Vec<f64>> = labels
        .iter()
        .map(|a| labels.iter().map(|b| cosine(a.2, b.2)).collect())
        .collect();
    let mut clusters: Vec<Vec<usize>> = (0..labels.len()).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let disjoint = clusters[i]
                    .iter()
                    .all(|&a| clusters[j].iter().all(|&b| labels[a].0 != labels[b].0));
                if !disjoint {
                    continue;
                }
                let mut s = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        s += sim[a][b];
                    }
                }
                let s = s / (clusters[i].len() * clusters[j].len()) as f64;
                if s >= threshold && best.is_none_or(|(b, _, _)| s > b) {
                    best = Some((s, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                let moved = clusters.remove(j);
                clusters[i].extend(moved);
            }
            None => break,
        }
    }
    taxonomies
        .iter()
        .enumerate()
        .map(|(d, t)| {
            let assign: Vec<Option<usize>> = clusters
                .iter()
                .map(|cl| cl.iter().find(|&&i| labels[i].0 == d).map(|&i| labels[i].1))
                .collect();
            mapping_from_assignment(d, &assign, t.len())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub threshold: f64,
    pub mappings: Vec<MappingMatrix>,
    pub score: RecoveryScore,
}

/// Sweeps the clustering threshold over `grid` and keeps the threshold with
/// the best overall recovery F1 (first on ties).
pub fn clustering_baseline(world: &PlantedWorld, grid: &[f64]) -> Result<BaselineResult> {
    let mut best: Option<BaselineResult> = None;
    for &threshold in grid {
        let mappings = cluster_embeddings(&world.taxonomies, threshold)?;
        let score = recovery_score(&mappings, world)?;
        if best.as_ref().is_none_or(|b| score.f1 > b.score.f1) {
            best = Some(BaselineResult {
                threshold,
                mappings,
                score,
            });
        }
    }
    best.ok_or_else(|| Error::Config("empty threshold grid".into()))
}

/// Thresholds from -1 to 1 in steps of 0.05.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=40).map(|i| -1.0 + 0.05 * i as f64).collect()
}
