//! Unified node budget and adjacency initialization.
//!
//! Every class of every dataset is grouped into merge tuples (at most one
//! class per dataset). A tuple's cost measures how much the classes' own
//! heads outperform each other's heads on them; each tuple becomes one
//! unified node, and a per-node penalty trades merges against node count.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::par::Exec;
use crate::seg::{encode_pixels, multihead_logits, predict, EncoderParams, MultiHeadParams, PixelBatch};
use crate::taxonomy::{mapping_from_assignment, MappingMatrix};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_IOU_FLOOR: f64 = 0.2;
pub const DEFAULT_C_INIT: f64 = 10.0;
/// Largest total label count solved exactly.
pub const EXACT_LABEL_LIMIT: usize = 24;

/// IoU between every pair of (truth class, predicted class) over one pixel
/// set. Entry `(c, c')` is `|truth = c ∧ pred = c'| / |truth = c ∨ pred = c'|`;
/// pairs absent from both sides get 0.
pub fn pairwise_iou(truth: &[usize], truth_classes: usize, pred: &[usize], pred_classes: usize) -> Result<Matrix> {
    if truth.len() != pred.len() {
        return Err(Error::shape("pairwise_iou", (truth.len(), 1), (pred.len(), 1)));
    }
    let mut inter = vec![0u64; truth_classes * pred_classes];
    let mut t_count = vec![0u64; truth_classes];
    let mut p_count = vec![0u64; pred_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= truth_classes || p >= pred_classes {
            return Err(Error::Index {
                index: t.max(p),
                len: truth_classes.min(pred_classes),
                context: "pairwise_iou class",
            });
        }
        inter[t * pred_classes + p] += 1;
        t_count[t] += 1;
        p_count[p] += 1;
    }
    Ok(Matrix::from_fn(truth_classes, pred_classes, |t, p| {
        let i = inter[t * pred_classes + p];
        let u = t_count[t] + p_count[p] - i;
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    }))
}

/// Head-vs-dataset IoU table. `iou(h, k)` is `|L_k| × |L_h|`: rows are the
/// ground-truth classes of dataset `k`, columns the classes predicted by
/// head `h` on dataset `k`'s pixels. The native IoU of class `c` of `k` is
/// the diagonal of `iou(k, k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossIoUTable {
    sizes: Vec<usize>,
    /// Indexed `h * K + k`.
    tables: Vec<Matrix>,
}

impl CrossIoUTable {
    pub fn new(sizes: Vec<usize>, tables: Vec<Matrix>) -> Result<Self> {
        let k = sizes.len();
        if tables.len() != k * k {
            return Err(Error::Config(format!(
                "expected {} IoU tables, got {}",
                k * k,
                tables.len()
            )));
        }
        for h in 0..k {
            for d in 0..k {
                let t = &tables[h * k + d];
                if t.shape() != (sizes[d], sizes[h]) {
                    return Err(Error::shape("CrossIoUTable", t.shape(), (sizes[d], sizes[h])));
                }
                if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Numeric("IoU outside [0, 1]".into()));
                }
            }
        }
        Ok(CrossIoUTable { sizes, tables })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn datasets(&self) -> usize {
        self.sizes.len()
    }

    pub fn iou(&self, head: usize, dataset: usize) -> &Matrix {
        &self.tables[head * self.sizes.len() + dataset]
    }

    pub fn native(&self, dataset: usize, class: usize) -> f64 {
        self.iou(dataset, dataset).get(class, class)
    }

    /// IoU of head `head`'s class `partner` against class `class` of `dataset`.
    pub fn cross(&self, head: usize, dataset: usize, class: usize, partner: usize) -> f64 {
        self.iou(head, dataset).get(class, partner)
    }

    /// Head `head`'s best-matching output on class `class` of `dataset`.
    pub fn best_cross(&self, head: usize, dataset: usize, class: usize) -> f64 {
        self.iou(head, dataset).row(class).iter().fold(0.0, |a, &b| a.max(b))
    }
}

/// Evaluates every head on every dataset's evaluation pixels.
pub fn compute_cross_head_iou(
    encoder: &EncoderParams,
    heads: &MultiHeadParams,
    batches: &[PixelBatch],
    exec: Exec,
) -> Result<CrossIoUTable> {
    let k = heads.heads.len();
    if batches.len() != k {
        return Err(Error::Data(format!(
            "{} evaluation batches for {k} heads",
            batches.len()
        )));
    }
    let sizes: Vec<usize> = heads.heads.iter().map(|h| h.rows()).collect();
    for (d, b) in batches.iter().enumerate() {
        if b.is_empty() {
            return Err(Error::Data(format!("empty evaluation batch for dataset {d}")));
        }
        if b.dataset_id != d {
            return Err(Error::Data(format!("batch {d} belongs to dataset {}", b.dataset_id)));
        }
        b.check_labels(sizes[d])?;
    }
    let pixels = exec.map(batches, |b| encode_pixels(b, encoder));
    let pixels = pixels.into_iter().collect::<Result<Vec<_>>>()?;
    let tables = exec.map_range(k * k, |i| {
        let (h, d) = (i / k, i % k);
        let pred = predict(&multihead_logits(&pixels[d], heads, h)?);
        pairwise_iou(&batches[d].labels, sizes[d], &pred, sizes[h])
    });
    CrossIoUTable::new(sizes, tables.into_iter().collect::<Result<Vec<_>>>()?)
}

/// One class (or none) per dataset.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MergeTuple {
    pub slots: Vec<Option<usize>>,
}

impl MergeTuple {
    pub fn new(slots: Vec<Option<usize>>) -> Result<Self> {
        if slots.iter().all(Option::is_none) {
            return Err(Error::Config("merge tuple has no member".into()));
        }
        Ok(MergeTuple { slots })
    }

    pub fn singleton(datasets: usize, dataset: usize, class: usize) -> Self {
        let mut slots = vec![None; datasets];
        slots[dataset] = Some(class);
        MergeTuple { slots }
    }

    /// `(dataset, class)` pairs in dataset order.
    pub fn members(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.slots.iter().enumerate().filter_map(|(d, c)| c.map(|c| (d, c)))
    }

    pub fn len(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sum over members `(k, c)` and other members `(h, c')` of
/// `native(k, c) − cross(h → k, c, c')`.
pub fn merge_cost(tuple: &MergeTuple, table: &CrossIoUTable) -> f64 {
    let mut cost = 0.0;
    for (k, c) in tuple.members() {
        for (h, partner) in tuple.members() {
            if h != k {
                cost += table.native(k, c) - table.cross(h, k, c, partner);
            }
        }
    }
    cost
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostedTuple {
    pub tuple: MergeTuple,
    pub cost: f64,
}

/// All singletons plus every multi-dataset tuple whose members pairwise
/// clear `floor` in both cross directions, with their merge costs.
pub fn feasible_tuples(table: &CrossIoUTable, floor: f64) -> Vec<CostedTuple> {
    let k = table.datasets();
    let mut out = Vec::new();
    let mut slots = vec![None; k];
    fn compatible(table: &CrossIoUTable, slots: &[Option<usize>], d: usize, c: usize, floor: f64) -> bool {
        slots.iter().enumerate().all(|(h, s)| match s {
            Some(p) => table.cross(h, d, c, *p) >= floor && table.cross(d, h, *p, c) >= floor,
            None => true,
        })
    }
    fn visit(table: &CrossIoUTable, d: usize, slots: &mut Vec<Option<usize>>, floor: f64, out: &mut Vec<CostedTuple>) {
        if d == slots.len() {
            if slots.iter().any(Option::is_some) {
                let tuple = MergeTuple { slots: slots.clone() };
                let cost = merge_cost(&tuple, table);
                out.push(CostedTuple { tuple, cost });
            }
            return;
        }
        visit(table, d + 1, slots, floor, out);
        for c in 0..table.sizes()[d] {
            if compatible(table, slots, d, c, floor) {
                slots[d] = Some(c);
                visit(table, d + 1, slots, floor, out);
                slots[d] = None;
            }
        }
    }
    visit(table, 0, &mut slots, floor, &mut out);
    out.sort_by(|a, b| a.tuple.cmp(&b.tuple));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSelection {
    pub sizes: Vec<usize>,
    /// One tuple per unified node, in node order.
    pub tuples: Vec<CostedTuple>,
    /// `Σ cost + λ·N`.
    pub objective: f64,
    pub lambda: f64,
    /// False when the greedy fallback produced the selection.
    pub optimal: bool,
}

impl BudgetSelection {
    pub fn nodes(&self) -> usize {
        self.tuples.len()
    }

    /// Node `n` maps to tuple `n`'s member in each dataset.
    pub fn initial_mappings(&self) -> Result<Vec<MappingMatrix>> {
        (0..self.sizes.len())
            .map(|d| {
                let assign: Vec<Option<usize>> = self.tuples.iter().map(|t| t.tuple.slots[d]).collect();
                mapping_from_assignment(d, &assign, self.sizes[d])
            })
            .collect()
    }
}

fn label_offsets(sizes: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .iter()
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect()
}

fn tuple_mask(t: &MergeTuple, offsets: &[usize]) -> u64 {
    t.members().fold(0u64, |m, (d, c)| m | 1u64 << (offsets[d] + c))
}

fn check_tuples(tuples: &[CostedTuple], sizes: &[usize]) -> Result<()> {
    let mut covered: Vec<Vec<bool>> = sizes.iter().map(|&s| vec![false; s]).collect();
    for t in tuples {
        if t.tuple.slots.len() != sizes.len() {
            return Err(Error::shape(
                "select_budget tuple",
                (t.tuple.slots.len(), 1),
                (sizes.len(), 1),
            ));
        }
        if t.tuple.is_empty() {
            return Err(Error::Config("merge tuple has no member".into()));
        }
        if !t.cost.is_finite() {
            return Err(Error::Numeric("non-finite merge cost".into()));
        }
        for (d, c) in t.tuple.members() {
            if c >= sizes[d] {
                return Err(Error::Index {
                    index: c,
                    len: sizes[d],
                    context: "merge tuple class",
                });
            }
            covered[d][c] = true;
        }
    }
    for (d, cs) in covered.iter().enumerate() {
        if let Some(c) = cs.iter().position(|x| !x) {
            return Err(Error::Data(format!("class {c} of dataset {d} appears in no tuple")));
        }
    }
    Ok(())
}

/// Minimizes `Σ cost(t) + λ·N` over selections covering every class exactly
/// once. Exact up to [`EXACT_LABEL_LIMIT`] labels; larger instances use a
/// greedy merge and report `optimal = false`.
pub fn select_budget(tuples: &[CostedTuple], sizes: &[usize], lambda: f64) -> Result<BudgetSelection> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "node penalty {lambda} must be finite and non-negative"
        )));
    }
    check_tuples(tuples, sizes)?;
    let total: usize = sizes.iter().sum();
    let chosen = if total <= EXACT_LABEL_LIMIT {
        exact_partition(tuples, sizes, lambda)?
    } else {
        greedy_partition(tuples, sizes, lambda)?
    };
    let picked: Vec<CostedTuple> = chosen.iter().map(|&i| tuples[i].clone()).collect();
    let objective = picked.iter().map(|t| t.cost + lambda).sum();
    Ok(BudgetSelection {
        sizes: sizes.to_vec(),
        tuples: picked,
        objective,
        lambda,
        optimal: total <= EXACT_LABEL_LIMIT,
    })
}

/// Memoized search over covered-label bitmasks. The lowest uncovered label
/// is always the one branched on, so each partition is reached once; among
/// equal objectives the earliest tuple in input order wins.
fn exact_partition(tuples: &[CostedTuple], sizes: &[usize], lambda: f64) -> Result<Vec<usize>> {
    let offsets = label_offsets(sizes);
    let total: usize = sizes.iter().sum();
    let full = if total == 64 { u64::MAX } else { (1u64 << total) - 1 };
    let masks: Vec<u64> = tuples.iter().map(|t| tuple_mask(&t.tuple, &offsets)).collect();
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); total];
    for (i, &m) in masks.iter().enumerate() {
        by_label[m.trailing_zeros() as usize].push(i);
    }
    struct Solver<'a> {
        tuples: &'a [CostedTuple],
        masks: Vec<u64>,
        by_label: Vec<Vec<usize>>,
        lambda: f64,
        full: u64,
        memo: HashMap<u64, Option<(f64, usize)>>,
    }
    impl Solver<'_> {
        fn best(&mut self, covered: u64) -> Option<f64> {
            if covered == self.full {
                return Some(0.0);
            }
            if let Some(hit) = self.memo.get(&covered) {
                return hit.map(|(v, _)| v);
            }
            let label = (!covered).trailing_zeros() as usize;
            let mut best: Option<(f64, usize)> = None;
            for idx in 0..self.by_label[label].len() {
                let i = self.by_label[label][idx];
                if self.masks[i] & covered != 0 {
                    continue;
                }
                if let Some(rest) = self.best(covered | self.masks[i]) {
                    let v = self.tuples[i].cost + self.lambda + rest;
                    if best.is_none_or(|(b, _)| v < b) {
                        best = Some((v, i));
                    }
                }
            }
            self.memo.insert(covered, best);
            best.map(|(v, _)| v)
        }
    }
    let mut solver = Solver {
        tuples,
        masks,
        by_label,
        lambda,
        full,
        memo: HashMap::new(),
    };
    solver
        .best(0)
        .ok_or_else(|| Error::Data("no exact cover of the labels exists".into()))?;
    let mut chosen = Vec::new();
    let mut covered = 0u64;
    while covered != full {
        let (_, i) = solver.memo[&covered].expect("memoized optimum on the solution path");
        chosen.push(i);
        covered |= solver.masks[i];
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Picks multi-member tuples by descending saving `λ(|t|−1) − cost` while
/// they stay disjoint, then fills the rest with singletons.
fn greedy_partition(tuples: &[CostedTuple], sizes: &[usize], lambda: f64) -> Result<Vec<usize>> {
    let offsets = label_offsets(sizes);
    let total: usize = sizes.iter().sum();
    let mut used = vec![false; total];
    let mut order: Vec<usize> = (0..tuples.len()).filter(|&i| tuples[i].tuple.len() > 1).collect();
    let saving = |i: usize| lambda * (tuples[i].tuple.len() - 1) as f64 - tuples[i].cost;
    order.sort_by(|&a, &b| saving(b).total_cmp(&saving(a)).then(a.cmp(&b)));
    let mut chosen = Vec::new();
    for i in order {
        if saving(i) <= 0.0 {
            break;
        }
        let labels: Vec<usize> = tuples[i].tuple.members().map(|(d, c)| offsets[d] + c).collect();
        if labels.iter().all(|&g| !used[g]) {
            labels.iter().for_each(|&g| used[g] = true);
            chosen.push(i);
        }
    }
    for (i, t) in tuples.iter().enumerate() {
        if t.tuple.len() == 1 {
            let (d, c) = t.tuple.members().next().expect("singleton member");
            let g = offsets[d] + c;
            if !used[g] {
                used[g] = true;
                chosen.push(i);
            }
        }
    }
    if let Some(g) = used.iter().position(|u| !u) {
        return Err(Error::Data(format!(
            "label {g} has no singleton tuple for the greedy fallback"
        )));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Raw adjacency weights (`N × |L|`) with `c_init` on every selected edge.
pub fn init_adjacency_from_selection(selection: &BudgetSelection, c_init: f64) -> Matrix {
    let offsets = label_offsets(&selection.sizes);
    let total: usize = selection.sizes.iter().sum();
    let mut raw = Matrix::zeros(selection.nodes(), total);
    for (n, t) in selection.tuples.iter().enumerate() {
        for (d, c) in t.tuple.members() {
            raw.set(n, offsets[d] + c, c_init);
        }
    }
    raw
}
