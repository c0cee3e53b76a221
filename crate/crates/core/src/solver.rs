//! Discrete label mappings from the continuous adjacency.
//!
//! Each dataset's block is relaxed into an entropic unbalanced transport
//! plan, every unified node takes its best class in that plan, and a greedy
//! pass moves nodes off multiply-covered classes until every class is
//! covered.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{log_sum_exp, Matrix};
use crate::par::Exec;
use crate::taxonomy::{mapping_from_assignment, MappingMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UotParams {
    /// Entropic regularization.
    pub epsilon: f64,
    /// Marginal relaxation strength.
    pub tau: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for UotParams {
    fn default() -> Self {
        UotParams {
            epsilon: 0.05,
            tau: 0.3,
            max_iters: 500,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    /// Unified-node marginal, length `N`.
    pub alpha: Vec<f64>,
    /// Class marginal, length `|L_i|`.
    pub beta: Vec<f64>,
    /// `|L_i| × N` scores; larger means stronger affinity.
    pub scores: Matrix,
    pub params: UotParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `|L_i| × N`, non-negative.
    pub plan: Matrix,
    pub converged: bool,
    pub iterations: usize,
}

impl TransportProblem {
    pub fn uniform(scores: Matrix, params: UotParams) -> Self {
        let (classes, nodes) = scores.shape();
        TransportProblem {
            alpha: vec![1.0 / nodes as f64; nodes],
            beta: vec![1.0 / classes as f64; classes],
            scores,
            params,
        }
    }
}

/// Generalized Sinkhorn scaling for `exp(S/ε)` with KL-relaxed marginals,
/// carried out on log scalings.
pub fn uot_transport(problem: &TransportProblem) -> Result<TransportPlan> {
    let TransportProblem {
        alpha,
        beta,
        scores,
        params,
    } = problem;
    let (classes, nodes) = scores.shape();
    if alpha.len() != nodes || beta.len() != classes {
        return Err(Error::shape("uot_transport", (beta.len(), alpha.len()), scores.shape()));
    }
    if !(params.epsilon > 0.0) || !(params.tau > 0.0) {
        return Err(Error::Config(format!(
            "epsilon and tau must be positive, got {} and {}",
            params.epsilon, params.tau
        )));
    }
    if alpha.iter().chain(beta).any(|m| !(*m >= 0.0)) || !scores.is_finite() {
        return Err(Error::Numeric(
            "marginals must be non-negative and scores finite".into(),
        ));
    }
    let eps = params.epsilon;
    let phi = params.tau / (params.tau + eps);
    let log_k = scores.scale(1.0 / eps);
    let log_alpha: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    let log_beta: Vec<f64> = beta.iter().map(|b| b.ln()).collect();
    let mut log_u = vec![0.0; nodes];
    let mut log_v = vec![0.0; classes];
    let mut converged = false;
    let mut iterations = 0;
    let mut buf = vec![0.0; classes.max(nodes)];
    while iterations < params.max_iters {
        iterations += 1;
        let mut change: f64 = 0.0;
        for n in 0..nodes {
            for j in 0..classes {
                buf[j] = log_k.get(j, n) + log_v[j];
            }
            let next = phi * (log_alpha[n] - log_sum_exp(&buf[..classes]));
            change = change.max(delta(log_u[n], next));
            log_u[n] = next;
        }
        for j in 0..classes {
            let row = log_k.row(j);
            for n in 0..nodes {
                buf[n] = row[n] + log_u[n];
            }
            let next = phi * (log_beta[j] - log_sum_exp(&buf[..nodes]));
            change = change.max(delta(log_v[j], next));
            log_v[j] = next;
        }
        if change < params.tol {
            converged = true;
            break;
        }
    }
    let plan = Matrix::from_fn(classes, nodes, |j, n| (log_v[j] + log_k.get(j, n) + log_u[n]).exp());
    if !plan.is_finite() {
        return Err(Error::Numeric("transport plan overflowed".into()));
    }
    Ok(TransportPlan {
        plan,
        converged,
        iterations,
    })
}

fn delta(old: f64, new: f64) -> f64 {
    if old.is_finite() && new.is_finite() {
        (old - new).abs()
    } else if old == new {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Each unified node takes the class with the largest plan entry in its
/// column; ties go to the lowest class index.
pub fn assign_argmax(plan: &Matrix) -> Vec<Option<usize>> {
    (0..plan.cols())
        .map(|n| {
            let mut best = None;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..plan.rows() {
                let v = plan.get(j, n);
                if v > best_v {
                    best_v = v;
                    best = Some(j);
                }
            }
            best
        })
        .collect()
}

/// Covers every class by moving nodes off classes that keep another node.
///
/// Uncovered classes are handled in ascending order. For each, nodes are
/// ranked by their plan entry for that class (descending, lowest index on
/// ties) and the first node that is unassigned or whose class stays covered
/// without it is moved over.
pub fn greedy_repair(assign: &[Option<usize>], plan: &Matrix) -> Result<Vec<Option<usize>>> {
    let (classes, nodes) = plan.shape();
    if assign.len() != nodes {
        return Err(Error::shape("greedy_repair", (assign.len(), 1), plan.shape()));
    }
    if classes > nodes {
        return Err(Error::Infeasible { classes, nodes });
    }
    let mut out = assign.to_vec();
    let mut counts = vec![0usize; classes];
    for c in out.iter().flatten() {
        if *c >= classes {
            return Err(Error::Index {
                index: *c,
                len: classes,
                context: "assigned class",
            });
        }
        counts[*c] += 1;
    }
    for j in 0..classes {
        if counts[j] > 0 {
            continue;
        }
        let mut ranked: Vec<usize> = (0..nodes).collect();
        ranked.sort_by(|&a, &b| plan.get(j, b).total_cmp(&plan.get(j, a)));
        let donor = ranked
            .into_iter()
            .find(|&n| out[n].is_none_or(|c| counts[c] >= 2))
            .ok_or_else(|| Error::Integrity(format!("no donor node for class {j}")))?;
        if let Some(c) = out[donor] {
            counts[c] -= 1;
        }
        out[donor] = Some(j);
        counts[j] += 1;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub uot: UotParams,
    /// Momentum on the carried class marginal.
    pub momentum: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            uot: UotParams::default(),
            momentum: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutput {
    pub mappings: Vec<MappingMatrix>,
    /// Class marginals to carry into the next round.
    pub betas: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
}

/// Uniform initial class marginals.
pub fn initial_betas(sizes: &[usize]) -> Vec<Vec<f64>> {
    sizes.iter().map(|&s| vec![1.0 / s as f64; s]).collect()
}

/// Solves one dataset: returns the mapping, the plan's class marginal, and
/// whether the scaling converged.
pub fn solve_one(
    dataset_id: usize,
    scores: &Matrix,
    beta: &[f64],
    params: UotParams,
) -> Result<(MappingMatrix, Vec<f64>, bool)> {
    let (classes, nodes) = scores.shape();
    if beta.len() != classes {
        return Err(Error::shape("solve_mappings beta", (beta.len(), 1), scores.shape()));
    }
    if classes > nodes {
        return Err(Error::Infeasible { classes, nodes });
    }
    let problem = TransportProblem {
        alpha: vec![1.0 / nodes as f64; nodes],
        beta: beta.to_vec(),
        scores: scores.clone(),
        params,
    };
    let plan = uot_transport(&problem)?;
    let assign = greedy_repair(&assign_argmax(&plan.plan), &plan.plan)?;
    let mapping = mapping_from_assignment(dataset_id, &assign, classes)?;
    let marginal = (0..classes).map(|j| plan.plan.row(j).iter().sum()).collect();
    Ok((mapping, marginal, plan.converged))
}

/// Full per-dataset solve. `blocks[i]` is dataset `i`'s `N × |L_i|` block of
/// the normalized adjacency; datasets are solved independently and the
/// marginal carries are merged in dataset order.
pub fn solve_mappings(blocks: &[Matrix], betas: &[Vec<f64>], config: &SolverConfig, exec: Exec) -> Result<SolveOutput> {
    if blocks.len() != betas.len() {
        return Err(Error::Config(format!(
            "{} blocks but {} class marginals",
            blocks.len(),
            betas.len()
        )));
    }
    if !(0.0..=1.0).contains(&config.momentum) {
        return Err(Error::Config(format!("momentum {} outside [0, 1]", config.momentum)));
    }
    let solved = exec.map_range(blocks.len(), |i| {
        solve_one(i, &blocks[i].transpose(), &betas[i], config.uot)
    });
    let mut out = SolveOutput {
        mappings: Vec::with_capacity(blocks.len()),
        betas: Vec::with_capacity(blocks.len()),
        converged: Vec::with_capacity(blocks.len()),
    };
    for (i, r) in solved.into_iter().enumerate() {
        let (mapping, marginal, converged) = r?;
        let mu = config.momentum;
        let beta = betas[i]
            .iter()
            .zip(&marginal)
            .map(|(b, m)| mu * b + (1.0 - mu) * m)
            .collect();
        out.mappings.push(mapping);
        out.betas.push(beta);
        out.converged.push(converged);
    }
    Ok(out)
}

pub const BRUTE_FORCE_MAX_NODES: usize = 8;
pub const BRUTE_FORCE_MAX_CLASSES: usize = 5;

/// Exhaustive optimum together with the best score among all other
/// feasible mappings.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedOptimum {
    pub mapping: MappingMatrix,
    pub best: f64,
    /// `None` when only one feasible mapping exists.
    pub runner_up: Option<f64>,
    /// Lowest total over all feasible mappings.
    pub worst: f64,
}

/// Enumerates every feasible mapping of an `|L_i| × N` score matrix and
/// keeps the one with the largest total selected score. Assignments are
/// visited in lexicographic order (class indices first, "unmapped" last), so
/// the first optimum found wins ties.
pub fn brute_force_mapping(dataset_id: usize, scores: &Matrix) -> Result<MappingMatrix> {
    brute_force_ranked(dataset_id, scores).map(|r| r.mapping)
}

pub fn brute_force_ranked(dataset_id: usize, scores: &Matrix) -> Result<RankedOptimum> {
    let (classes, nodes) = scores.shape();
    if nodes > BRUTE_FORCE_MAX_NODES || classes > BRUTE_FORCE_MAX_CLASSES {
        return Err(Error::Capacity(format!(
            "{classes} classes × {nodes} nodes exceeds {BRUTE_FORCE_MAX_CLASSES} × {BRUTE_FORCE_MAX_NODES}"
        )));
    }
    if classes > nodes {
        return Err(Error::Infeasible { classes, nodes });
    }
    struct Search<'a> {
        scores: &'a Matrix,
        classes: usize,
        nodes: usize,
        current: Vec<Option<usize>>,
        counts: Vec<usize>,
        best: Option<(f64, Vec<Option<usize>>)>,
        runner_up: Option<f64>,
        worst: f64,
    }
    impl Search<'_> {
        fn record(&mut self, total: f64) {
            self.worst = self.worst.min(total);
            match &self.best {
                Some((b, _)) if total <= *b => {
                    if self.runner_up.is_none_or(|r| total > r) {
                        self.runner_up = Some(total);
                    }
                }
                Some((b, _)) => {
                    let b = *b;
                    self.runner_up = Some(self.runner_up.map_or(b, |r| r.max(b)));
                    self.best = Some((total, self.current.clone()));
                }
                None => self.best = Some((total, self.current.clone())),
            }
        }

        fn visit(&mut self, node: usize, total: f64) {
            let uncovered = self.counts.iter().filter(|&&c| c == 0).count();
            if uncovered > self.nodes - node {
                return;
            }
            if node == self.nodes {
                self.record(total);
                return;
            }
            for c in 0..=self.classes {
                if c < self.classes {
                    self.current[node] = Some(c);
                    self.counts[c] += 1;
                    let s = self.scores.get(c, node);
                    self.visit(node + 1, total + s);
                    self.counts[c] -= 1;
                } else {
                    self.current[node] = None;
                    self.visit(node + 1, total);
                }
            }
            self.current[node] = None;
        }
    }
    let mut search = Search {
        scores,
        classes,
        nodes,
        current: vec![None; nodes],
        counts: vec![0; classes],
        best: None,
        runner_up: None,
        worst: f64::INFINITY,
    };
    search.visit(0, 0.0);
    let (best, assign) = search
        .best
        .ok_or_else(|| Error::Integrity("no feasible mapping".into()))?;
    Ok(RankedOptimum {
        mapping: mapping_from_assignment(dataset_id, &assign, classes)?,
        best,
        runner_up: search.runner_up,
        worst: search.worst,
    })
}

/// Total score of the links selected by a mapping.
pub fn mapping_score(mapping: &MappingMatrix, scores: &Matrix) -> f64 {
    mapping.edges().into_iter().map(|(n, c)| scores.get(c, n)).sum()
}
