//! Deterministic synthetic benchmark generator.
//!
//! Items live in latent clusters; each modality observes the latent item
//! vector through its own fixed random rotation plus Gaussian noise, so the
//! two modalities are correlated but not identical. The latent vector is a
//! cluster prototype plus a bundle-identity block: a small dedicated
//! subspace where all members of a bundle share one latent draw. Bundles
//! sample items from one *complementary* cluster pair, at least one item
//! per side, and user sessions co-purchase cross-cluster item pairs drawn
//! from those bundles, so the co-purchase log points at exactly the feature
//! structure that completes bundles. Cosine on raw rows is dominated by the
//! cluster prototypes and barely sees the identity block; relationally
//! supervised training can find and amplify it. The remainder of the
//! sessions are uniform noise pairs. All randomness flows through a single
//! seeded ChaCha8 stream, the crate-wide portable generator.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CirpError, Result};
use crate::linalg::random_rotation;

use super::{Bundle, BundleSet, FeatureMatrix, Interaction};

/// Spacing between the two items of a co-purchase session: 12 hours,
/// safely inside the one-day graph window.
const SESSION_SPAN_SECONDS: i64 = 43_200;
/// Spacing between session starts: 3 days, safely outside the window.
const SESSION_STRIDE_SECONDS: i64 = 259_200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub num_clusters: usize,
    /// Cluster index pairs whose items are complementary (co-purchased).
    pub complement_pairs: Vec<(usize, usize)>,
    /// Raw feature dimensionality per modality.
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub interactions_per_user: usize,
    pub bundle_count: usize,
    /// Inclusive (min, max) bundle size; min must be at least 2.
    pub bundle_size_range: (usize, usize),
    /// Fraction of sessions that co-purchase a cross-cluster item pair from
    /// one bundle; the remainder are uniform noise pairs.
    #[serde(default = "default_complement_rate")]
    pub complement_rate: f64,
    /// Width of the bundle-identity block inside the latent item vector.
    /// None: feature_dim / 4. Zero disables the block.
    #[serde(default)]
    pub bundle_latent_dim: Option<usize>,
    pub seed: u64,
}

fn default_complement_rate() -> f64 {
    0.9
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_items: 1000,
            num_users: 2000,
            num_clusters: 10,
            complement_pairs: vec![(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)],
            feature_dim: 32,
            noise_sigma: 1.0,
            interactions_per_user: 10,
            bundle_count: 200,
            bundle_size_range: (3, 5),
            complement_rate: 0.9,
            bundle_latent_dim: None,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.num_clusters == 0 {
            return Err(CirpError::Config(
                "num_items and num_clusters must be positive".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(CirpError::Config("feature_dim must be positive".into()));
        }
        for &(a, b) in &self.complement_pairs {
            if a >= self.num_clusters || b >= self.num_clusters {
                return Err(CirpError::Config(format!(
                    "complement pair ({a},{b}) references a cluster >= {}",
                    self.num_clusters
                )));
            }
            if a == b {
                return Err(CirpError::Config(format!(
                    "complement pair ({a},{b}) pairs a cluster with itself"
                )));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(CirpError::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.complement_rate) {
            return Err(CirpError::Config("complement_rate must be in [0,1]".into()));
        }
        if let Some(d) = self.bundle_latent_dim {
            if d >= self.feature_dim {
                return Err(CirpError::Config(format!(
                    "bundle_latent_dim {d} must leave prototype room in feature_dim {}",
                    self.feature_dim
                )));
            }
        }
        let (lo, hi) = self.bundle_size_range;
        if lo < 2 || lo > hi {
            return Err(CirpError::Config(format!(
                "bundle_size_range ({lo},{hi}) must satisfy 2 <= min <= max"
            )));
        }
        Ok(())
    }
}

/// Everything the generator produces, aligned to item index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    pub image_features: FeatureMatrix,
    pub text_features: FeatureMatrix,
    pub bundles: BundleSet,
    /// Cluster of item i, parallel to the feature matrices.
    pub cluster_assignment: Vec<usize>,
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let item_ids: Vec<String> = (0..config.num_items).map(|i| format!("i{i:06}")).collect();
    let cluster_assignment: Vec<usize> =
        (0..config.num_items).map(|i| i % config.num_clusters).collect();
    let mut items_by_cluster: Vec<Vec<usize>> = vec![Vec::new(); config.num_clusters];
    for (item, &cluster) in cluster_assignment.iter().enumerate() {
        items_by_cluster[cluster].push(item);
    }
    let needs_pairs = (config.complement_rate > 0.0
        && config.num_users > 0
        && config.interactions_per_user >= 2)
        || config.bundle_count > 0;
    if needs_pairs && config.complement_pairs.is_empty() {
        return Err(CirpError::Config(
            "complement_pairs must be non-empty to generate sessions or bundles".into(),
        ));
    }
    for &(a, b) in &config.complement_pairs {
        if items_by_cluster[a].is_empty() || items_by_cluster[b].is_empty() {
            return Err(CirpError::Config(format!(
                "complement pair ({a},{b}) references an empty cluster"
            )));
        }
    }

    let latent_dim = config
        .bundle_latent_dim
        .unwrap_or(config.feature_dim / 4);

    let prototypes = draw_prototypes(config, latent_dim, &mut rng);
    let (bundles, drawn) = draw_bundles(config, &item_ids, &items_by_cluster, &mut rng)?;
    let identity = draw_bundle_identity(config, latent_dim, &drawn, &mut rng);

    // Latent item vectors: the cluster prototype plus the item's identity.
    let mut latent_rows = identity;
    for (item, &cluster) in cluster_assignment.iter().enumerate() {
        let prototype = prototypes.row(cluster);
        let mut row = latent_rows.row_mut(item);
        row += &prototype;
    }

    let image_features = modality_features(config, &item_ids, &latent_rows, &mut rng)?;
    let text_features = modality_features(config, &item_ids, &latent_rows, &mut rng)?;
    let interactions = draw_interactions(config, &item_ids, &items_by_cluster, &drawn, &mut rng)?;

    Ok(SyntheticData {
        interactions,
        image_features,
        text_features,
        bundles,
        cluster_assignment,
    })
}

/// Cluster prototypes live in the coordinates above the identity block, so
/// bundle identity and cluster semantics occupy orthogonal subspaces.
fn draw_prototypes(
    config: &SyntheticConfig,
    latent_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let mut prototypes = Array2::<f64>::zeros((config.num_clusters, config.feature_dim));
    for mut row in prototypes.rows_mut() {
        for v in row.iter_mut().skip(latent_dim) {
            *v = StandardNormal.sample(rng);
        }
    }
    prototypes
}

/// One shared latent draw per bundle, placed in the first `latent_dim`
/// coordinates of every member; memberships accumulate.
fn draw_bundle_identity(
    config: &SyntheticConfig,
    latent_dim: usize,
    drawn: &[DrawnBundle],
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let mut identity = Array2::<f64>::zeros((config.num_items, config.feature_dim));
    for bundle in drawn {
        let latent: Vec<f64> = (0..latent_dim).map(|_| StandardNormal.sample(rng)).collect();
        for &item in bundle.side_a.iter().chain(bundle.side_b.iter()) {
            for (col, &v) in latent.iter().enumerate() {
                identity[[item, col]] += v;
            }
        }
    }
    identity
}

/// One modality: the latent item vectors through a modality-specific
/// rotation, plus isotropic Gaussian noise.
fn modality_features(
    config: &SyntheticConfig,
    item_ids: &[String],
    latent_rows: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMatrix> {
    let rotation = random_rotation(config.feature_dim, rng);
    let rotated: Array2<f64> = latent_rows.dot(&rotation.t());
    let mut data = Array2::<f32>::zeros((config.num_items, config.feature_dim));
    for item in 0..config.num_items {
        for col in 0..config.feature_dim {
            let noise: f64 = if config.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                z * config.noise_sigma
            } else {
                0.0
            };
            data[[item, col]] = (rotated[[item, col]] + noise) as f32;
        }
    }
    FeatureMatrix::new(item_ids.to_vec(), data)
}

fn draw_interactions(
    config: &SyntheticConfig,
    item_ids: &[String],
    items_by_cluster: &[Vec<usize>],
    drawn: &[DrawnBundle],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Interaction>> {
    let mut interactions = Vec::with_capacity(config.num_users * config.interactions_per_user);
    let sessions_per_user = config.interactions_per_user / 2;
    let leftover = config.interactions_per_user % 2;
    if config.interactions_per_user >= 2 && config.complement_rate < 1.0 && config.num_items < 2 {
        return Err(CirpError::Config(
            "noise pairs need at least 2 items".into(),
        ));
    }

    for user in 0..config.num_users {
        let user_id = format!("u{user:05}");
        for session in 0..sessions_per_user {
            let base = session as i64 * SESSION_STRIDE_SECONDS;
            let (first, second) = if rng.gen::<f64>() < config.complement_rate {
                if drawn.is_empty() {
                    // No bundles to echo; pair the clusters directly.
                    let &(a, b) =
                        &config.complement_pairs[rng.gen_range(0..config.complement_pairs.len())];
                    let first = items_by_cluster[a][rng.gen_range(0..items_by_cluster[a].len())];
                    let second = items_by_cluster[b][rng.gen_range(0..items_by_cluster[b].len())];
                    (first, second)
                } else {
                    let bundle = &drawn[rng.gen_range(0..drawn.len())];
                    let first = bundle.side_a[rng.gen_range(0..bundle.side_a.len())];
                    let second = bundle.side_b[rng.gen_range(0..bundle.side_b.len())];
                    (first, second)
                }
            } else {
                let first = rng.gen_range(0..config.num_items);
                let mut second = rng.gen_range(0..config.num_items);
                while second == first {
                    second = rng.gen_range(0..config.num_items);
                }
                (first, second)
            };
            interactions.push(Interaction::new(&user_id, &item_ids[first], base)?);
            interactions.push(Interaction::new(
                &user_id,
                &item_ids[second],
                base + SESSION_SPAN_SECONDS,
            )?);
        }
        if leftover == 1 {
            let base = sessions_per_user as i64 * SESSION_STRIDE_SECONDS;
            let lone = rng.gen_range(0..config.num_items);
            interactions.push(Interaction::new(&user_id, &item_ids[lone], base)?);
        }
    }
    Ok(interactions)
}

/// A bundle in index form, split by cluster side, for the session sampler.
struct DrawnBundle {
    side_a: Vec<usize>,
    side_b: Vec<usize>,
}

/// Each bundle samples its items without replacement from the union of one
/// complementary cluster pair, at least one item from each cluster.
fn draw_bundles(
    config: &SyntheticConfig,
    item_ids: &[String],
    items_by_cluster: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<(BundleSet, Vec<DrawnBundle>)> {
    let (lo, hi) = config.bundle_size_range;
    let mut bundles = Vec::with_capacity(config.bundle_count);
    let mut drawn = Vec::with_capacity(config.bundle_count);
    for b in 0..config.bundle_count {
        let &(ca, cb) = &config.complement_pairs[rng.gen_range(0..config.complement_pairs.len())];
        let (pool_a, pool_b) = (&items_by_cluster[ca], &items_by_cluster[cb]);
        let size = rng.gen_range(lo..=hi);
        if size > pool_a.len() + pool_b.len() {
            return Err(CirpError::Config(format!(
                "bundle size {size} exceeds the {} items of cluster pair ({ca},{cb})",
                pool_a.len() + pool_b.len()
            )));
        }
        let min_a = 1.max(size.saturating_sub(pool_b.len()));
        let max_a = (size - 1).min(pool_a.len());
        if min_a > max_a {
            return Err(CirpError::Config(format!(
                "bundle size {size} cannot cover both clusters of pair ({ca},{cb})"
            )));
        }
        let size_a = rng.gen_range(min_a..=max_a);
        let side_a = sample_without_replacement(pool_a, size_a, rng);
        let side_b = sample_without_replacement(pool_b, size - size_a, rng);
        let items: Vec<String> = side_a
            .iter()
            .chain(side_b.iter())
            .map(|&i| item_ids[i].clone())
            .collect();
        bundles.push(Bundle {
            bundle_id: format!("b{b:04}"),
            items,
        });
        drawn.push(DrawnBundle { side_a, side_b });
    }
    Ok((BundleSet::new(bundles)?, drawn))
}

/// Partial Fisher-Yates: the first `size` slots become the sample.
fn sample_without_replacement(pool: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    for slot in 0..size {
        let pick = rng.gen_range(slot..pool.len());
        pool.swap(slot, pick);
    }
    pool.truncate(size);
    pool
}
