use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Independently freezable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Heads,
    Adjacency,
    GnnLayers,
    UnifiedInputs,
    DatasetEmbeddings,
    /// The unified label embedding used directly, after the graph is dropped.
    UnifiedEmbedding,
}

impl ParamGroup {
    pub const GRAPH: [ParamGroup; 4] = [
        ParamGroup::Adjacency,
        ParamGroup::GnnLayers,
        ParamGroup::UnifiedInputs,
        ParamGroup::DatasetEmbeddings,
    ];
}

/// Set of groups that receive gradients.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trainable(BTreeSet<ParamGroup>);

impl Trainable {
    pub fn none() -> Self {
        Trainable(BTreeSet::new())
    }

    pub fn all() -> Self {
        Trainable(
            [
                ParamGroup::Encoder,
                ParamGroup::Heads,
                ParamGroup::Adjacency,
                ParamGroup::GnnLayers,
                ParamGroup::UnifiedInputs,
                ParamGroup::DatasetEmbeddings,
                ParamGroup::UnifiedEmbedding,
            ]
            .into_iter()
            .collect(),
        )
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        Trainable(groups.iter().copied().collect())
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.0.contains(&g)
    }

    pub fn without(mut self, g: ParamGroup) -> Self {
        self.0.remove(&g);
        self
    }
}
