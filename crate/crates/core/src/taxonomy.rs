//! Dataset label spaces, the unified label space, and boolean mappings
//! between them.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDef {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub embedding: Vec<f64>,
}

/// One source label space. Label order is the canonical column order for
/// every matrix and file that refers to this dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetTaxonomy {
    pub id: usize,
    pub name: String,
    pub labels: Vec<LabelDef>,
}

impl DatasetTaxonomy {
    pub fn new(id: usize, name: impl Into<String>, labels: Vec<LabelDef>) -> Result<Self> {
        let t = DatasetTaxonomy {
            id,
            name: name.into(),
            labels,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Data(format!("dataset {} has no labels", self.name)));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate label {:?} in dataset {}",
                    l.name, self.name
                )));
            }
        }
        let dim = self.labels[0].embedding.len();
        if let Some(bad) = self.labels.iter().find(|l| l.embedding.len() != dim) {
            return Err(Error::shape("label embedding", (1, dim), (1, bad.embedding.len())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.labels.first().map_or(0, |l| l.embedding.len())
    }

    /// Text embeddings as a `labels × D_t` matrix.
    pub fn embedding_matrix(&self) -> Matrix {
        let d = self.embedding_dim();
        Matrix::from_fn(self.labels.len(), d, |r, c| self.labels[r].embedding[c])
    }
}

/// Checks that a set of taxonomies is usable together: consecutive ids and a
/// common embedding width.
pub fn check_taxonomies(taxonomies: &[DatasetTaxonomy]) -> Result<usize> {
    let first = taxonomies.first().ok_or_else(|| Error::Data("no taxonomies".into()))?;
    let dim = first.embedding_dim();
    for (i, t) in taxonomies.iter().enumerate() {
        t.validate()?;
        if t.id != i {
            return Err(Error::Data(format!(
                "dataset {} has id {} but appears at position {i}",
                t.name, t.id
            )));
        }
        if t.embedding_dim() != dim {
            return Err(Error::shape("label embedding", (1, dim), (1, t.embedding_dim())));
        }
    }
    Ok(dim)
}

/// Sizes `|L_i|` in dataset order.
pub fn dataset_sizes(taxonomies: &[DatasetTaxonomy]) -> Vec<usize> {
    taxonomies.iter().map(DatasetTaxonomy::len).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedTaxonomy {
    pub node_count: usize,
    pub node_names: Vec<Option<String>>,
}

impl UnifiedTaxonomy {
    /// Rejects node counts too small to cover the largest dataset.
    pub fn new(node_count: usize, sizes: &[usize]) -> Result<Self> {
        let largest = sizes.iter().copied().max().unwrap_or(0);
        if node_count < largest {
            return Err(Error::Infeasible {
                classes: largest,
                nodes: node_count,
            });
        }
        Ok(UnifiedTaxonomy {
            node_count,
            node_names: vec![None; node_count],
        })
    }
}

/// Boolean `N × |L_i|` mapping from unified nodes to one dataset's classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingMatrix {
    pub dataset_id: usize,
    nodes: usize,
    classes: usize,
    bits: Vec<bool>,
}

/// Every row that maps to more than one class and every class no node maps to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub row_violations: Vec<usize>,
    pub column_violations: Vec<usize>,
}

impl ValidityReport {
    pub fn is_ok(&self) -> bool {
        self.row_violations.is_empty() && self.column_violations.is_empty()
    }
}

impl MappingMatrix {
    pub fn zeros(dataset_id: usize, nodes: usize, classes: usize) -> Self {
        MappingMatrix {
            dataset_id,
            nodes,
            classes,
            bits: vec![false; nodes * classes],
        }
    }

    pub fn from_bits(dataset_id: usize, rows: &[Vec<bool>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        let mut m = MappingMatrix::zeros(dataset_id, rows.len(), classes);
        for (n, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::shape(
                    "MappingMatrix::from_bits",
                    (rows.len(), classes),
                    (1, row.len()),
                ));
            }
            for (c, &b) in row.iter().enumerate() {
                m.set(n, c, b);
            }
        }
        Ok(m)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, node: usize, class: usize) -> bool {
        self.bits[node * self.classes + class]
    }

    #[inline]
    pub fn set(&mut self, node: usize, class: usize, value: bool) {
        self.bits[node * self.classes + class] = value;
    }

    pub fn row_sum(&self, node: usize) -> usize {
        (0..self.classes).filter(|&c| self.get(node, c)).count()
    }

    pub fn column_sum(&self, class: usize) -> usize {
        (0..self.nodes).filter(|&n| self.get(n, class)).count()
    }

    /// First mapped class of each node.
    pub fn assignment(&self) -> Vec<Option<usize>> {
        (0..self.nodes)
            .map(|n| (0..self.classes).find(|&c| self.get(n, c)))
            .collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.nodes, self.classes, |n, c| if self.get(n, c) { 1.0 } else { 0.0 })
    }

    /// Keeps the listed node rows, in order.
    pub fn select_nodes(&self, keep: &[usize]) -> MappingMatrix {
        let mut m = MappingMatrix::zeros(self.dataset_id, keep.len(), self.classes);
        for (new, &old) in keep.iter().enumerate() {
            for c in 0..self.classes {
                m.set(new, c, self.get(old, c));
            }
        }
        m
    }

    /// All `(node, class)` links.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for n in 0..self.nodes {
            for c in 0..self.classes {
                if self.get(n, c) {
                    out.push((n, c));
                }
            }
        }
        out
    }
}

/// Lists every row with more than one link and every class with none.
pub fn validate_mapping(m: &MappingMatrix) -> ValidityReport {
    ValidityReport {
        row_violations: (0..m.nodes).filter(|&n| m.row_sum(n) > 1).collect(),
        column_violations: (0..m.classes).filter(|&c| m.column_sum(c) == 0).collect(),
    }
}

/// Like [`validate_mapping`], but first checks the shape against the declared
/// taxonomy and node count.
pub fn validate_mapping_for(m: &MappingMatrix, taxonomy: &DatasetTaxonomy, nodes: usize) -> Result<ValidityReport> {
    if m.nodes != nodes || m.classes != taxonomy.len() {
        return Err(Error::shape(
            "validate_mapping",
            (m.nodes, m.classes),
            (nodes, taxonomy.len()),
        ));
    }
    Ok(validate_mapping(m))
}

/// One-hot rows from a per-node optional class; unassigned nodes get zero rows.
pub fn mapping_from_assignment(dataset_id: usize, assign: &[Option<usize>], classes: usize) -> Result<MappingMatrix> {
    let mut m = MappingMatrix::zeros(dataset_id, assign.len(), classes);
    for (n, a) in assign.iter().enumerate() {
        if let Some(c) = *a {
            if c >= classes {
                return Err(Error::Index {
                    index: c,
                    len: classes,
                    context: "assigned class",
                });
            }
            m.set(n, c, true);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(name: &str) -> LabelDef {
        LabelDef {
            name: name.into(),
            description: String::new(),
            embedding: vec![0.0; 2],
        }
    }

    #[test]
    fn identity_is_valid() {
        let m = mapping_from_assignment(0, &[Some(0), Some(1), Some(2)], 3).unwrap();
        assert!(validate_mapping(&m).is_ok());
    }

    #[test]
    fn double_row_is_listed() {
        let m = MappingMatrix::from_bits(
            0,
            &[
                vec![true, true, false],
                vec![false, false, true],
                vec![false, false, false],
            ],
        )
        .unwrap();
        let r = validate_mapping(&m);
        assert_eq!(r.row_violations, vec![0]);
        assert!(r.column_violations.is_empty());
    }

    #[test]
    fn empty_column_is_listed() {
        let m = mapping_from_assignment(0, &[Some(0), Some(1), Some(1)], 3).unwrap();
        let r = validate_mapping(&m);
        assert_eq!(r.column_violations, vec![2]);
        assert!(r.row_violations.is_empty());
    }

    #[test]
    fn assignment_with_gap() {
        let m = mapping_from_assignment(1, &[Some(0), Some(1), None], 2).unwrap();
        assert_eq!(m.to_matrix().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let all = mapping_from_assignment(0, &[Some(0); 4], 3).unwrap();
        assert_eq!(all.column_sum(0), 4);
        assert_eq!(all.column_sum(1), 0);
        assert_eq!(all.column_sum(2), 0);
        assert!(mapping_from_assignment(0, &[Some(3)], 3).is_err());
    }

    #[test]
    fn shape_checked_against_taxonomy() {
        let t = DatasetTaxonomy::new(0, "a", vec![label("x"), label("y")]).unwrap();
        let m = MappingMatrix::zeros(0, 3, 3);
        assert!(matches!(validate_mapping_for(&m, &t, 3), Err(Error::Shape { .. })));
    }

    #[test]
    fn taxonomy_invariants() {
        assert!(DatasetTaxonomy::new(0, "a", vec![]).is_err());
        assert!(DatasetTaxonomy::new(0, "a", vec![label("x"), label("x")]).is_err());
        assert!(UnifiedTaxonomy::new(2, &[3, 1]).is_err());
        assert!(UnifiedTaxonomy::new(3, &[3, 1]).is_ok());
    }

    proptest! {
        #[test]
        fn assignments_never_violate_rows(assign in proptest::collection::vec(proptest::option::of(0usize..5), 1..12)) {
            let m = mapping_from_assignment(0, &assign, 5).unwrap();
            prop_assert!(validate_mapping(&m).row_violations.is_empty());
            prop_assert_eq!(m.assignment(), assign);
        }

        #[test]
        fn validity_matches_constraints(bits in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 3), 1..7)) {
            let m = MappingMatrix::from_bits(0, &bits).unwrap();
            let rows_ok = bits.iter().all(|r| r.iter().filter(|b| **b).count() <= 1);
            let cols_ok = (0..3).all(|c| bits.iter().any(|r| r[c]));
            prop_assert_eq!(validate_mapping(&m).is_ok(), rows_ok && cols_ok);
        }
    }
}
