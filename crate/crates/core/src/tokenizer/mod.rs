//! Semantic item identifiers via balanced residual K-means.

mod index;
mod kmeans;
mod stack;

use std::fmt;

pub use index::ItemIndex;
pub use kmeans::{balanced_kmeans, squared_distance, BalancedKMeans};
pub use stack::{fit_residual_stack, Codebook, CodebookStack, FitOptions, LevelStats, SemanticId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub id: ItemId,
    pub vector: Vec<f64>,
}
