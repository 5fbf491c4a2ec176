//! In-memory experiment drivers: ablations, pruning sweeps, and cold-start
//! comparisons. The file-level stages in the parent module wrap these with
//! artifact loading and report writing; tests and the acceptance suite call
//! them directly on generated data.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundling::{evaluate, rep_analysis, MetricsReport, RepAnalysis};
use crate::corpus::{
    filter_cold_start, load_bundles, load_interactions, BundleSet, EmbeddingTable, FeatureMatrix,
    Interaction, ItemIndex, SyntheticData,
};
use crate::encoder::{embed_all, pretrain, EncoderParams, LossMode};
use crate::error::{CirpError, Result};
use crate::gae::train_gae;
use crate::graph::{build_graph, ItemGraph};
use crate::prune::{prune_graph, PruneConfig};

use super::PipelineConfig;

/// Everything an experiment needs, aligned to one item index.
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub index: ItemIndex,
    pub images: FeatureMatrix,
    pub texts: FeatureMatrix,
    pub interactions: Vec<Interaction>,
    pub bundles: BundleSet,
}

impl BenchmarkData {
    pub fn from_synthetic(data: SyntheticData) -> Result<Self> {
        let index = ItemIndex::from_ids(data.image_features.ids.clone())?;
        Ok(BenchmarkData {
            index,
            images: data.image_features,
            texts: data.text_features,
            interactions: data.interactions,
            bundles: data.bundles,
        })
    }

    /// Load the four input artifacts named by the config.
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let (images, texts, index) = super::load_modalities(config)?;
        let interactions = load_interactions(config.interactions_path())?;
        let bundles = load_bundles(config.bundles_path())?;
        Ok(BenchmarkData {
            index,
            images,
            texts,
            interactions,
            bundles,
        })
    }
}

/// One pipeline variant: which pruning ratio, which loss, trained or not.
/// `None` fields fall back to the config.
#[derive(Debug, Clone)]
pub struct VariantSpec {
    pub name: String,
    pub beta_percent: Option<f64>,
    pub loss_mode: Option<LossMode>,
    pub pretrained: bool,
}

impl VariantSpec {
    pub fn full(name: &str) -> Self {
        VariantSpec {
            name: name.to_owned(),
            beta_percent: None,
            loss_mode: None,
            pretrained: true,
        }
    }

    pub fn untrained(name: &str) -> Self {
        VariantSpec {
            pretrained: false,
            ..VariantSpec::full(name)
        }
    }
}

/// Metrics and provenance of one variant run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub pretrained: bool,
    pub loss_mode: LossMode,
    pub beta_percent: f64,
    pub edges_after_prune: usize,
    pub pretrain_wall_seconds: f64,
    pub metrics: MetricsReport,
    pub analysis: RepAnalysis,
}

/// Caches the co-purchase graph and the relation-scoring embeddings so a
/// batch of variants shares them.
pub struct ExperimentContext<'a> {
    data: &'a BenchmarkData,
    config: &'a PipelineConfig,
    graph: ItemGraph,
    gae_embeddings: Option<EmbeddingTable>,
}

impl<'a> ExperimentContext<'a> {
    pub fn new(data: &'a BenchmarkData, config: &'a PipelineConfig) -> Result<Self> {
        config.validate()?;
        let graph = build_graph(
            &data.interactions,
            config.window_seconds,
            &data.index,
            config.pair_rule,
        )?;
        Ok(ExperimentContext {
            data,
            config,
            graph,
            gae_embeddings: None,
        })
    }

    pub fn graph(&self) -> &ItemGraph {
        &self.graph
    }

    fn gae_embeddings(&mut self) -> Result<&EmbeddingTable> {
        if self.gae_embeddings.is_none() {
            let outcome = train_gae(&self.graph, &self.config.gae_config())?;
            self.gae_embeddings = Some(outcome.embeddings);
        }
        Ok(self.gae_embeddings.as_ref().expect("just trained"))
    }

    /// Run prune, pre-train, embed, and evaluate for one variant.
    pub fn run(&mut self, spec: &VariantSpec, eval_bundles: &BundleSet) -> Result<VariantResult> {
        let beta = spec
            .beta_percent
            .unwrap_or(self.config.prune.beta_percent);
        // Pruning at 0% is the identity, and untrained variants never look
        // at the graph, so neither needs the relation scores.
        let working = if beta == 0.0 || !spec.pretrained {
            self.graph.clone()
        } else {
            let prune_config = PruneConfig {
                beta_percent: beta,
                removal_rule: self.config.prune.removal_rule,
            };
            let scores = self.gae_embeddings()?.clone();
            prune_graph(&self.graph, &scores, &prune_config)?
        };

        let loss_mode = spec.loss_mode.unwrap_or(self.config.contrast.loss_mode);
        let (params, wall_seconds) = if spec.pretrained {
            let mut contrast = self.config.contrast_config();
            contrast.loss_mode = loss_mode;
            let started = Instant::now();
            let outcome = pretrain(&working, &self.data.images, &self.data.texts, &contrast)?;
            (outcome.params, started.elapsed().as_secs_f64())
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            let params = EncoderParams::init(
                self.data.images.dim(),
                self.data.texts.dim(),
                &self.config.contrast,
                &mut rng,
            )?;
            (params, 0.0)
        };

        let (images_out, texts_out) = embed_all(&params, &self.data.images, &self.data.texts)?;
        let protocol = self.config.protocol_with_k20();
        let metrics = evaluate(
            eval_bundles,
            &images_out,
            &texts_out,
            &self.data.index,
            &protocol,
            self.config.seed,
        )?;
        let analysis = rep_analysis(
            &images_out,
            &texts_out,
            eval_bundles,
            &self.data.index,
            self.config.num_random_pairs,
            self.config.seed,
        )?;

        Ok(VariantResult {
            name: spec.name.clone(),
            pretrained: spec.pretrained,
            loss_mode,
            beta_percent: if spec.pretrained { beta } else { 0.0 },
            edges_after_prune: working.edge_count(),
            pretrain_wall_seconds: wall_seconds,
            metrics,
            analysis,
        })
    }
}

/// The four ablation variants, sharing one seed, graph, and relation scores.
pub fn ablate(data: &BenchmarkData, config: &PipelineConfig) -> Result<Vec<VariantResult>> {
    let mut context = ExperimentContext::new(data, config)?;
    let specs = [
        VariantSpec::full("full"),
        VariantSpec {
            loss_mode: Some(LossMode::CicOnly),
            ..VariantSpec::full("cic_only")
        },
        VariantSpec::untrained("untrained"),
        VariantSpec {
            beta_percent: Some(0.0),
            ..VariantSpec::full("unpruned")
        },
    ];
    let mut rows = Vec::with_capacity(specs.len());
    for spec in &specs {
        rows.push(context.run(spec, &data.bundles)?);
    }
    Ok(rows)
}

/// One sweep row; metrics are NaN when the cycle for that ratio failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta_percent: f64,
    pub recall_at_20: f64,
    pub ndcg_at_20: f64,
    pub pretrain_wall_seconds: f64,
    pub error: Option<String>,
}

/// Full prune, pre-train, evaluate cycle per pruning ratio, same seed.
/// A failing ratio yields an error row; the sweep continues.
pub fn sweep(
    data: &BenchmarkData,
    config: &PipelineConfig,
    beta_list: &[f64],
) -> Result<Vec<SweepRow>> {
    if beta_list.is_empty() {
        return Err(CirpError::Config("beta list must not be empty".into()));
    }
    for &beta in beta_list {
        if !(0.0..=100.0).contains(&beta) {
            return Err(CirpError::Config(format!(
                "pruning ratio {beta} outside [0, 100]"
            )));
        }
    }
    let mut betas = beta_list.to_vec();
    betas.sort_by(|a, b| a.partial_cmp(b).expect("ratios are finite"));

    let mut context = ExperimentContext::new(data, config)?;
    let mut rows = Vec::with_capacity(betas.len());
    for beta in betas {
        let spec = VariantSpec {
            beta_percent: Some(beta),
            ..VariantSpec::full(&format!("beta_{beta}"))
        };
        let row = match context.run(&spec, &data.bundles) {
            Ok(result) => SweepRow {
                beta_percent: beta,
                recall_at_20: result.metrics.recall[&20],
                ndcg_at_20: result.metrics.ndcg[&20],
                pretrain_wall_seconds: result.pretrain_wall_seconds,
                error: None,
            },
            Err(error) => SweepRow {
                beta_percent: beta,
                recall_at_20: f64::NAN,
                ndcg_at_20: f64::NAN,
                pretrain_wall_seconds: f64::NAN,
                error: Some(error.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Cold-start study: exclude whole bundles' items from pre-training, then
/// compare warm, cold, and untrained encoders on exactly those bundles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColdstartReport {
    pub excluded_items: usize,
    pub cold_bundle_count: usize,
    pub warm_graph_edges: usize,
    pub cold_graph_edges: usize,
    pub warm: VariantResult,
    pub cold: VariantResult,
    pub untrained: VariantResult,
}

pub fn coldstart(data: &BenchmarkData, config: &PipelineConfig) -> Result<ColdstartReport> {
    config.validate()?;
    if data.bundles.is_empty() {
        return Err(CirpError::Validation(
            "cold-start study needs at least one bundle".into(),
        ));
    }

    // Take whole bundles in seeded order until their items cover the
    // requested fraction; whole bundles keep the evaluation set composed
    // purely of excluded items.
    let target = ((config.coldstart_fraction * data.index.len() as f64).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..data.bundles.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut excluded: HashSet<String> = HashSet::new();
    let mut cold_bundles = Vec::new();
    for position in order {
        if excluded.len() >= target {
            break;
        }
        let bundle = &data.bundles.bundles[position];
        excluded.extend(bundle.items.iter().cloned());
        cold_bundles.push(bundle.clone());
    }
    let cold_bundles = BundleSet::new(cold_bundles)?;

    let cold_data = BenchmarkData {
        interactions: filter_cold_start(data.interactions.clone(), &excluded),
        ..data.clone()
    };

    let mut warm_context = ExperimentContext::new(data, config)?;
    let warm = warm_context.run(&VariantSpec::full("warm"), &cold_bundles)?;
    let mut cold_context = ExperimentContext::new(&cold_data, config)?;
    for id in &excluded {
        if let Some(item) = data.index.get(id) {
            debug_assert_eq!(
                cold_context.graph().degree(item),
                0,
                "excluded item {id} kept an edge"
            );
        }
    }
    let cold = cold_context.run(&VariantSpec::full("cold"), &cold_bundles)?;
    let untrained = cold_context.run(&VariantSpec::untrained("untrained"), &cold_bundles)?;

    Ok(ColdstartReport {
        excluded_items: excluded.len(),
        cold_bundle_count: cold_bundles.len(),
        warm_graph_edges: warm_context.graph().edge_count(),
        cold_graph_edges: cold_context.graph().edge_count(),
        warm,
        cold,
        untrained,
    })
}

/// Mean of each variant's Recall@k across per-seed results, keyed by name.
pub fn mean_recall_by_name(
    runs: &[Vec<VariantResult>],
    k: usize,
) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for rows in runs {
        for row in rows {
            let entry = sums.entry(row.name.clone()).or_insert((0.0, 0));
            entry.0 += row.metrics.recall[&k];
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(name, (sum, count))| (name, sum / count as f64))
        .collect()
}
