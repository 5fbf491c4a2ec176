//! ItemKNN product bundling and its evaluation.
//!
//! An item is represented by the average of its two modality embeddings, a
//! partial bundle by the average of its item representations, and completion
//! ranks candidates by cosine similarity against that average. The module
//! also provides Recall@k / NDCG@k evaluation over a bundle dataset and two
//! diagnostics: intra-bundle vs random-pair similarity, and a 2-d principal
//! component projection for plotting.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BundleSet, EmbeddingTable, ItemIndex};
use crate::error::{CirpError, Result};
use crate::linalg;

/// How held-out items are chosen from each bundle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    /// Every item takes a turn as the single held-out target.
    #[default]
    LeaveOneOut,
    /// One seeded query per bundle holding out this fraction of its items
    /// (at least one held out, at least one seed kept).
    Fraction(f64),
}

/// Which items are eligible as completion candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScope {
    /// Distinct items appearing anywhere in the bundle dataset.
    #[default]
    BundleItems,
    /// Every item in the representation tables.
    AllItems,
}

/// Evaluation protocol for bundle completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub holdout: Holdout,
    pub k_list: Vec<usize>,
    pub candidate_scope: CandidateScope,
    pub exclude_seeds: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            holdout: Holdout::default(),
            k_list: vec![10, 20],
            candidate_scope: CandidateScope::default(),
            exclude_seeds: true,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if let Holdout::Fraction(f) = self.holdout {
            if !(f > 0.0 && f < 1.0) {
                return Err(CirpError::Config(format!(
                    "holdout fraction must be in (0, 1), got {f}"
                )));
            }
        }
        if self.k_list.is_empty() {
            return Err(CirpError::Config("k_list must not be empty".into()));
        }
        if self.k_list.contains(&0) {
            return Err(CirpError::Config("every k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean Recall@k / NDCG@k over all completion queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: EvalProtocol,
    pub query_count: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub wall_ms: u64,
}

/// Rank of one held-out item within the full candidate ordering (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub bundle_id: String,
    pub held_out: String,
    pub rank: usize,
}

/// Item representation: plain average of the two modality embeddings.
/// Deliberately not re-normalized; the downstream cosine absorbs scale.
pub fn item_repr(v: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.len() != t.len() {
        return Err(CirpError::Validation(format!(
            "modality dimensions differ: {} vs {}",
            v.len(),
            t.len()
        )));
    }
    Ok((&v + &t) * 0.5)
}

/// Fuse two aligned modality tables into one item-representation table.
pub fn fuse_tables(images: &EmbeddingTable, texts: &EmbeddingTable) -> Result<EmbeddingTable> {
    if images.num_items() != texts.num_items() {
        return Err(CirpError::Validation(format!(
            "modality tables disagree on item count: {} vs {}",
            images.num_items(),
            texts.num_items()
        )));
    }
    if images.dim() != texts.dim() {
        return Err(CirpError::Validation(format!(
            "modality tables disagree on dimension: {} vs {}",
            images.dim(),
            texts.dim()
        )));
    }
    EmbeddingTable::new((images.data() + texts.data()) * 0.5)
}

/// Partial-bundle representation: element-wise mean of its item reps.
pub fn bundle_repr(reps: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    let first = reps
        .first()
        .ok_or_else(|| CirpError::Validation("partial bundle is empty".into()))?;
    let mut sum = Array1::<f64>::zeros(first.len());
    for rep in reps {
        if rep.len() != first.len() {
            return Err(CirpError::Validation(format!(
                "item representation dimensions differ: {} vs {}",
                rep.len(),
                first.len()
            )));
        }
        sum += rep;
    }
    Ok(sum / reps.len() as f64)
}

/// Cosine score used for ranking; zero-norm vectors sink to the bottom.
fn ranking_score(p: ArrayView1<f64>, candidate: ArrayView1<f64>) -> f64 {
    let np = linalg::norm(p);
    let nc = linalg::norm(candidate);
    if np == 0.0 || nc == 0.0 {
        f64::NEG_INFINITY
    } else {
        linalg::dot(p, candidate) / (np * nc)
    }
}

/// Order every candidate by cosine against `p`, descending, ties broken by
/// ascending item index. Zero-norm vectors rank last.
pub fn rank_candidates(
    p: ArrayView1<f64>,
    candidates: &[(usize, ArrayView1<f64>)],
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(CirpError::Validation("candidate set is empty".into()));
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&(index, rep)| (ranking_score(p, rep), index))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("ranking scores are never NaN")
            .then_with(|| a.1.cmp(&b.1))
    });
    Ok(scored.into_iter().map(|(_, index)| index).collect())
}

/// Top-k completion of a partial bundle represented by `p`.
pub fn complete_bundle(
    p: ArrayView1<f64>,
    candidates: &[(usize, ArrayView1<f64>)],
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(CirpError::Validation("k must be at least 1".into()));
    }
    let mut ranked = rank_candidates(p, candidates)?;
    ranked.truncate(k);
    Ok(ranked)
}

/// Fraction of the ground truth recovered in the top k.
pub fn recall_at_k(ranked: &[usize], ground_truth: &BTreeSet<usize>, k: usize) -> Result<f64> {
    check_query(ground_truth, k)?;
    let hits = ranked
        .iter()
        .take(k)
        .filter(|item| ground_truth.contains(item))
        .count();
    Ok(hits as f64 / ground_truth.len() as f64)
}

/// Binary-relevance NDCG with 1-based ranks.
pub fn ndcg_at_k(ranked: &[usize], ground_truth: &BTreeSet<usize>, k: usize) -> Result<f64> {
    check_query(ground_truth, k)?;
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| ground_truth.contains(item))
        .map(|(position, _)| gain(position + 1))
        .sum();
    let idcg: f64 = (1..=k.min(ground_truth.len())).map(gain).sum();
    Ok(dcg / idcg)
}

fn check_query(ground_truth: &BTreeSet<usize>, k: usize) -> Result<()> {
    if ground_truth.is_empty() {
        return Err(CirpError::Validation("ground truth is empty".into()));
    }
    if k == 0 {
        return Err(CirpError::Validation("k must be at least 1".into()));
    }
    Ok(())
}

/// Evaluate bundle completion over the whole dataset.
pub fn evaluate(
    bundles: &BundleSet,
    images: &EmbeddingTable,
    texts: &EmbeddingTable,
    index: &ItemIndex,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<MetricsReport> {
    Ok(evaluate_detailed(bundles, images, texts, index, protocol, seed)?.0)
}

/// As [`evaluate`], additionally returning the rank of every held-out item.
pub fn evaluate_detailed(
    bundles: &BundleSet,
    images: &EmbeddingTable,
    texts: &EmbeddingTable,
    index: &ItemIndex,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<(MetricsReport, Vec<QueryRecord>)> {
    protocol.validate()?;
    let start = Instant::now();
    let reprs = fuse_tables(images, texts)?;
    if bundles.is_empty() {
        return Err(CirpError::Validation("bundle dataset is empty".into()));
    }

    let indexed = index_bundles(bundles, index, &reprs)?;
    let pool: Vec<usize> = match protocol.candidate_scope {
        CandidateScope::BundleItems => {
            let mut distinct: BTreeSet<usize> = BTreeSet::new();
            for (_, items) in &indexed {
                distinct.extend(items.iter().copied());
            }
            distinct.into_iter().collect()
        }
        CandidateScope::AllItems => (0..reprs.num_items()).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recall_sums: BTreeMap<usize, f64> =
        protocol.k_list.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg_sums = recall_sums.clone();
    let mut query_count = 0usize;
    let mut records = Vec::new();

    for (bundle_id, items) in &indexed {
        let queries: Vec<(Vec<usize>, Vec<usize>)> = match protocol.holdout {
            Holdout::LeaveOneOut => (0..items.len())
                .map(|h| {
                    let mut seeds = items.clone();
                    let held = seeds.remove(h);
                    (seeds, vec![held])
                })
                .collect(),
            Holdout::Fraction(f) => {
                let mut shuffled = items.clone();
                shuffled.shuffle(&mut rng);
                let held = ((f * items.len() as f64).floor() as usize)
                    .clamp(1, items.len() - 1);
                let seeds = shuffled.split_off(held);
                vec![(seeds, shuffled)]
            }
        };

        for (seeds, held_out) in queries {
            let seed_set: BTreeSet<usize> = seeds.iter().copied().collect();
            let candidates: Vec<(usize, ArrayView1<f64>)> = pool
                .iter()
                .copied()
                .filter(|item| !(protocol.exclude_seeds && seed_set.contains(item)))
                .map(|item| (item, reprs.row(item)))
                .collect();
            let seed_reprs: Vec<ArrayView1<f64>> =
                seeds.iter().map(|&item| reprs.row(item)).collect();
            let p = bundle_repr(&seed_reprs)?;
            let ranked = rank_candidates(p.view(), &candidates)?;
            let truth: BTreeSet<usize> = held_out.iter().copied().collect();

            for (&k, sum) in recall_sums.iter_mut() {
                *sum += recall_at_k(&ranked, &truth, k)?;
            }
            for (&k, sum) in ndcg_sums.iter_mut() {
                *sum += ndcg_at_k(&ranked, &truth, k)?;
            }
            query_count += 1;

            for &held in &held_out {
                let rank = ranked
                    .iter()
                    .position(|&item| item == held)
                    .expect("held-out items are always candidates")
                    + 1;
                records.push(QueryRecord {
                    bundle_id: bundle_id.clone(),
                    held_out: index.id(held).to_owned(),
                    rank,
                });
            }
        }
    }

    let mean = |sums: BTreeMap<usize, f64>| {
        sums.into_iter()
            .map(|(k, sum)| (k, sum / query_count as f64))
            .collect()
    };
    let report = MetricsReport {
        protocol: protocol.clone(),
        query_count,
        recall: mean(recall_sums),
        ndcg: mean(ndcg_sums),
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok((report, records))
}

/// Resolve bundle item ids to table rows, failing on any item without a
/// representation.
fn index_bundles(
    bundles: &BundleSet,
    index: &ItemIndex,
    reprs: &EmbeddingTable,
) -> Result<Vec<(String, Vec<usize>)>> {
    let mut indexed = Vec::with_capacity(bundles.len());
    for bundle in &bundles.bundles {
        let mut items = Vec::with_capacity(bundle.items.len());
        for id in &bundle.items {
            let row = index.get(id).filter(|&r| r < reprs.num_items()).ok_or_else(|| {
                CirpError::Validation(format!(
                    "bundle {} item {id} has no representation",
                    bundle.bundle_id
                ))
            })?;
            items.push(row);
        }
        indexed.push((bundle.bundle_id.clone(), items));
    }
    Ok(indexed)
}

/// Mean cosine over random item pairs vs intra-bundle pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepAnalysis {
    pub s_avg: f64,
    pub s_intra: f64,
    pub random_pairs: usize,
    pub intra_pairs: usize,
}

pub fn rep_analysis(
    images: &EmbeddingTable,
    texts: &EmbeddingTable,
    bundles: &BundleSet,
    index: &ItemIndex,
    num_random_pairs: usize,
    seed: u64,
) -> Result<RepAnalysis> {
    if num_random_pairs == 0 {
        return Err(CirpError::Validation(
            "num_random_pairs must be at least 1".into(),
        ));
    }
    let reprs = fuse_tables(images, texts)?;
    let n = reprs.num_items();
    if n < 2 {
        return Err(CirpError::Validation(
            "need at least 2 items for random pairs".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_sum = 0.0;
    for _ in 0..num_random_pairs {
        let a = rng.gen_range(0..n);
        let b = loop {
            let b = rng.gen_range(0..n);
            if b != a {
                break b;
            }
        };
        random_sum += linalg::cosine(reprs.row(a), reprs.row(b));
    }

    let mut intra_sum = 0.0;
    let mut intra_pairs = 0usize;
    for (_, items) in index_bundles(bundles, index, &reprs)? {
        for (pos, &a) in items.iter().enumerate() {
            for &b in &items[pos + 1..] {
                intra_sum += linalg::cosine(reprs.row(a), reprs.row(b));
                intra_pairs += 1;
            }
        }
    }

    Ok(RepAnalysis {
        s_avg: random_sum / num_random_pairs as f64,
        s_intra: if intra_pairs == 0 {
            0.0
        } else {
            intra_sum / intra_pairs as f64
        },
        random_pairs: num_random_pairs,
        intra_pairs,
    })
}

/// Top-2 principal-component projection of sampled item representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2d {
    /// (item index, first component, second component)
    pub coords: Vec<(usize, f64, f64)>,
    /// True when the sample had no variance; all coordinates are zero.
    pub degenerate: bool,
}

pub fn project_2d(reprs: &EmbeddingTable, sample: &[usize]) -> Result<Projection2d> {
    if sample.len() < 3 {
        return Err(CirpError::Validation(format!(
            "projection needs at least 3 items, got {}",
            sample.len()
        )));
    }
    for &item in sample {
        if item >= reprs.num_items() {
            return Err(CirpError::Validation(format!(
                "sample item {item} out of range (num_items {})",
                reprs.num_items()
            )));
        }
    }

    let m = sample.len();
    let d = reprs.dim();
    let mut centered = Array2::<f64>::zeros((m, d));
    for (row, &item) in sample.iter().enumerate() {
        centered.row_mut(row).assign(&reprs.row(item));
    }
    let mean = centered.mean_axis(ndarray::Axis(0)).expect("m >= 3");
    centered -= &mean;

    let covariance = centered.t().dot(&centered) / (m as f64 - 1.0);
    let (values, vectors) = linalg::symmetric_eigen(&covariance);
    if values.first().copied().unwrap_or(0.0) <= 1e-12 {
        return Ok(Projection2d {
            coords: sample.iter().map(|&item| (item, 0.0, 0.0)).collect(),
            degenerate: true,
        });
    }

    let mut directions = Vec::with_capacity(2);
    for column in 0..2.min(d) {
        let mut direction = vectors.column(column).to_owned();
        orient(&mut direction);
        directions.push(direction);
    }

    let coords = sample
        .iter()
        .enumerate()
        .map(|(row, &item)| {
            let x = centered.row(row).dot(&directions[0]);
            let y = directions
                .get(1)
                .map_or(0.0, |dir| centered.row(row).dot(dir));
            (item, x, y)
        })
        .collect();
    Ok(Projection2d {
        coords,
        degenerate: false,
    })
}

/// Flip a direction so its largest-magnitude coordinate is positive,
/// breaking magnitude ties at the lowest index.
fn orient(direction: &mut Array1<f64>) {
    let mut lead = 0usize;
    for (i, &value) in direction.iter().enumerate() {
        if value.abs() > direction[lead].abs() {
            lead = i;
        }
    }
    if direction[lead] < 0.0 {
        direction.mapv_inplace(|v| -v);
    }
}
