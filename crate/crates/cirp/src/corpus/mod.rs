//! Data model and ingestion: interaction logs, per-item modality feature
//! matrices, bundle sets, the dense item index shared by all numeric
//! modules, and a deterministic synthetic-data generator.

use std::collections::{HashMap, HashSet};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{CirpError, Result};

mod io;
mod synthetic;

pub use io::{
    load_bundles, load_features, load_ids, load_interactions, write_bundles, write_features,
    write_interactions, FMAT_MAGIC,
};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

/// One row of a purchase log: a user interacted with an item at a point in time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// Seconds since the unix epoch, non-negative.
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        timestamp: i64,
    ) -> Result<Self> {
        let user_id = user_id.into();
        let item_id = item_id.into();
        if user_id.is_empty() || item_id.is_empty() {
            return Err(CirpError::Validation("empty user or item id".into()));
        }
        if timestamp < 0 {
            return Err(CirpError::Validation(format!(
                "negative timestamp {timestamp} for user {user_id}"
            )));
        }
        Ok(Interaction {
            user_id,
            item_id,
            timestamp,
        })
    }
}

/// A per-modality feature table: one fixed-width row of 32-bit reals per item.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    /// Row-major, one row per id, all entries finite.
    pub data: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, data: Array2<f32>) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(CirpError::Validation(format!(
                "feature matrix has {} rows but {} ids",
                data.nrows(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(CirpError::Validation(format!("duplicate item id {id}")));
            }
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            let row = bad / data.ncols().max(1);
            return Err(CirpError::Validation(format!(
                "non-finite feature value in row {row} ({})",
                ids.get(row).map(String::as_str).unwrap_or("?")
            )));
        }
        Ok(FeatureMatrix { ids, data })
    }

    pub fn num_items(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Row as 64-bit floats, the working precision of the numeric modules.
    pub fn row_f64(&self, row: usize) -> Array1<f64> {
        self.data.row(row).mapv(f64::from)
    }

    /// Reorder rows to match an item index. Every indexed item must be present.
    pub fn reindex(&self, index: &ItemIndex) -> Result<FeatureMatrix> {
        let lookup: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(row, id)| (id.as_str(), row))
            .collect();
        let mut data = Array2::<f32>::zeros((index.len(), self.dim()));
        for (dst, id) in index.ids().iter().enumerate() {
            let src = *lookup.get(id.as_str()).ok_or_else(|| {
                CirpError::Validation(format!("item {id} has no feature row"))
            })?;
            data.row_mut(dst).assign(&self.data.row(src));
        }
        FeatureMatrix::new(index.ids().to_vec(), data)
    }
}

/// Dense per-item vectors produced by a training stage.
///
/// Rows follow the item index of the stage that produced them. Stored in
/// f64 for exact downstream arithmetic; file dumps go through
/// [`FeatureMatrix`] and its f32 format.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    data: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CirpError::Numerical(
                "embedding table contains a non-finite value".into(),
            ));
        }
        Ok(EmbeddingTable { data })
    }

    pub fn num_items(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, item: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.row(item)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Cast to the f32 file representation, attaching ids.
    pub fn to_feature_matrix(&self, index: &ItemIndex) -> Result<FeatureMatrix> {
        FeatureMatrix::new(index.ids().to_vec(), self.data.mapv(|v| v as f32))
    }

    pub fn from_feature_matrix(features: &FeatureMatrix) -> Self {
        EmbeddingTable {
            data: features.data.mapv(f64::from),
        }
    }
}

/// A named bundle of at least two distinct items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub bundle_id: String,
    pub items: Vec<String>,
}

/// The downstream bundle dataset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BundleSet {
    pub bundles: Vec<Bundle>,
}

impl BundleSet {
    pub fn new(bundles: Vec<Bundle>) -> Result<Self> {
        for bundle in &bundles {
            validate_bundle(bundle)?;
        }
        Ok(BundleSet { bundles })
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Distinct item ids across all bundles, in first-appearance order.
    pub fn distinct_items(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for bundle in &self.bundles {
            for item in &bundle.items {
                if seen.insert(item.as_str().to_owned()) {
                    out.push(item.clone());
                }
            }
        }
        out
    }
}

fn validate_bundle(bundle: &Bundle) -> Result<()> {
    if bundle.items.len() < 2 {
        return Err(CirpError::Validation(format!(
            "bundle {} has fewer than 2 items",
            bundle.bundle_id
        )));
    }
    let mut seen = HashSet::with_capacity(bundle.items.len());
    for item in &bundle.items {
        if !seen.insert(item.as_str()) {
            return Err(CirpError::Validation(format!(
                "bundle {} repeats item {item}",
                bundle.bundle_id
            )));
        }
    }
    Ok(())
}

/// Bijection between opaque item id strings and the dense indices 0..N-1
/// used by every numeric module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemIndex {
    ids: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl ItemIndex {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(ids.len());
        for (idx, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), idx).is_some() {
                return Err(CirpError::Validation(format!("duplicate item id {id}")));
            }
        }
        Ok(ItemIndex { ids, by_id })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.get(id)
            .ok_or_else(|| CirpError::Validation(format!("unknown item id {id}")))
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Drop every interaction whose item belongs to the downstream set, keeping
/// the relative order of the remainder.
pub fn filter_cold_start(
    interactions: Vec<Interaction>,
    downstream_items: &HashSet<String>,
) -> Vec<Interaction> {
    let mut log = interactions;
    log.retain(|i| !downstream_items.contains(&i.item_id));
    log
}
