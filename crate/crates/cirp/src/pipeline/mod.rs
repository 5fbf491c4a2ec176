//! File-level pipeline: stage functions that read artifacts from a work
//! directory, run one module, and write the results plus a metadata sidecar.
//!
//! Every stage is a pure function of its config, seed, and input bytes, so
//! a rerun reproduces data files (tables, graphs, checkpoints) byte for
//! byte. Report files additionally carry wall-clock fields; those are the
//! only bytes that may differ between reruns.
//!
//! Artifact names inside the work directory are fixed:
//!
//! | stage       | artifacts |
//! |-------------|-----------|
//! | synth       | `interactions.tsv`, `image_features.fmat/.ids`, `text_features.fmat/.ids`, `bundles.jsonl` |
//! | build-graph | `graph.tsv`, `graph_stats.json` |
//! | train-gae   | `gae_embeddings.fmat/.ids`, `gae_log.jsonl`, `gae_report.json` |
//! | prune       | `pruned_graph.tsv`, `prune_report.json` |
//! | pretrain    | `encoder.ckpt`, `pretrain_log.jsonl` |
//! | embed       | `image_embeddings.fmat/.ids`, `text_embeddings.fmat/.ids` |
//! | bundle-eval | `metrics.json`, `query_ranks.csv` |
//! | analyze     | `analysis.json`, `projection.csv` |
//! | sweep-prune | `sweep.csv` |
//! | ablate      | `ablation.json` |
//! | coldstart   | `coldstart.json` |

mod experiments;

pub use experiments::{
    ablate, coldstart, mean_recall_by_name, sweep, BenchmarkData, ColdstartReport,
    ExperimentContext, SweepRow, VariantResult, VariantSpec,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundling::{
    evaluate_detailed, fuse_tables, project_2d, rep_analysis, EvalProtocol, RepAnalysis,
};
use crate::corpus::{
    generate_synthetic, load_bundles, load_features, load_ids, load_interactions, write_bundles,
    write_features, write_interactions, EmbeddingTable, FeatureMatrix, ItemIndex,
    SyntheticConfig,
};
use crate::encoder::{
    load_checkpoint, pretrain, save_checkpoint, Checkpoint, ContrastConfig,
};
use crate::error::{CirpError, Result};
use crate::gae::{train_gae, GaeConfig};
use crate::graph::{build_graph, graph_stats, read_edges, write_edges, PairRule};
use crate::prune::{prune_graph, PruneConfig, PruneReport};

/// Paths, per-stage configs, and the global seed for one pipeline run.
///
/// Input paths default to the standard artifact names inside `workdir`, so
/// `synth` feeds the later stages with no configuration at all. The global
/// seed overrides the seed fields of the nested stage configs; those fields
/// matter only when the stage modules are driven directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    pub interactions: Option<PathBuf>,
    pub image_features: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
    pub bundles: Option<PathBuf>,
    /// Two purchases of one user within this window become a graph edge.
    pub window_seconds: i64,
    pub pair_rule: PairRule,
    pub gae: GaeConfig,
    pub prune: PruneConfig,
    pub contrast: ContrastConfig,
    pub protocol: EvalProtocol,
    pub synthetic: SyntheticConfig,
    /// Fraction of items the cold-start study hides from pre-training.
    pub coldstart_fraction: f64,
    /// Random pairs drawn by the similarity analysis.
    pub num_random_pairs: usize,
    /// Items sampled for the 2-d projection.
    pub projection_sample: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workdir: PathBuf::from("work"),
            interactions: None,
            image_features: None,
            text_features: None,
            bundles: None,
            window_seconds: 86_400,
            pair_rule: PairRule::default(),
            gae: GaeConfig::default(),
            prune: PruneConfig::default(),
            contrast: ContrastConfig::default(),
            protocol: EvalProtocol::default(),
            synthetic: SyntheticConfig::default(),
            coldstart_fraction: 0.2,
            num_random_pairs: 1000,
            projection_sample: 200,
            seed: 42,
        }
    }
}

impl PipelineConfig {
    /// Parse a JSON config file. Every failure here is a configuration
    /// error, including an unreadable file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CirpError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CirpError::Config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_seconds <= 0 {
            return Err(CirpError::Config("window_seconds must be positive".into()));
        }
        if !(self.coldstart_fraction > 0.0 && self.coldstart_fraction < 1.0) {
            return Err(CirpError::Config(format!(
                "coldstart_fraction must be in (0, 1), got {}",
                self.coldstart_fraction
            )));
        }
        if self.num_random_pairs == 0 {
            return Err(CirpError::Config("num_random_pairs must be >= 1".into()));
        }
        if self.projection_sample < 3 {
            return Err(CirpError::Config("projection_sample must be >= 3".into()));
        }
        self.gae.validate()?;
        self.prune.validate()?;
        self.contrast.validate()?;
        self.protocol.validate()?;
        Ok(())
    }

    pub fn interactions_path(&self) -> PathBuf {
        self.interactions
            .clone()
            .unwrap_or_else(|| self.workdir.join("interactions.tsv"))
    }

    pub fn image_features_path(&self) -> PathBuf {
        self.image_features
            .clone()
            .unwrap_or_else(|| self.workdir.join("image_features.fmat"))
    }

    pub fn text_features_path(&self) -> PathBuf {
        self.text_features
            .clone()
            .unwrap_or_else(|| self.workdir.join("text_features.fmat"))
    }

    pub fn bundles_path(&self) -> PathBuf {
        self.bundles
            .clone()
            .unwrap_or_else(|| self.workdir.join("bundles.jsonl"))
    }

    /// Stage config with the global seed imposed.
    pub fn gae_config(&self) -> GaeConfig {
        GaeConfig {
            seed: self.seed,
            ..self.gae.clone()
        }
    }

    /// Stage config with the global seed imposed.
    pub fn contrast_config(&self) -> ContrastConfig {
        ContrastConfig {
            seed: self.seed,
            ..self.contrast.clone()
        }
    }

    /// The evaluation protocol, guaranteed to report k = 20 so the studies
    /// can always read Recall@20.
    pub fn protocol_with_k20(&self) -> EvalProtocol {
        let mut protocol = self.protocol.clone();
        if !protocol.k_list.contains(&20) {
            protocol.k_list.push(20);
            protocol.k_list.sort_unstable();
        }
        protocol
    }
}

/// Companion ids file of an FMAT table: same name, `.ids` extension.
pub fn ids_path(matrix_path: &Path) -> PathBuf {
    matrix_path.with_extension("ids")
}

/// What a stage produced (sidecars not listed; each artifact has one).
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    stage: String,
    seed: u64,
    config_sha256: String,
    /// File name to content hash for every input the stage read.
    inputs: BTreeMap<String, String>,
}

fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fingerprint_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CirpError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

fn fingerprint_config<T: Serialize>(value: &T) -> String {
    sha256_bytes(serde_json::to_string(value).expect("configs serialize").as_bytes())
}

/// Hash each input file, keyed by its file name so relocated but identical
/// runs produce identical sidecars.
fn fingerprint_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    for path in paths {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        inputs.insert(name, fingerprint_file(path)?);
    }
    Ok(inputs)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CirpError::Validation(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CirpError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for record in records {
        text.push_str(
            &serde_json::to_string(record)
                .map_err(|e| CirpError::Validation(format!("serialization failed: {e}")))?,
        );
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CirpError::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let encode = |e: csv::Error| CirpError::Validation(format!("csv encoding failed: {e}"));
    writer.write_record(header).map_err(encode)?;
    for row in rows {
        writer.write_record(row).map_err(encode)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| CirpError::Validation(format!("csv encoding failed: {e}")))?;
    fs::write(path, bytes).map_err(|e| CirpError::io(path, e))
}

/// A stage's book-keeping: output directory, provenance, sidecar writing.
struct Stage<'a> {
    name: &'static str,
    dir: PathBuf,
    seed: u64,
    config_sha256: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    _config: &'a PipelineConfig,
}

impl<'a> Stage<'a> {
    fn new(
        name: &'static str,
        config: &'a PipelineConfig,
        out: Option<&Path>,
        input_paths: &[PathBuf],
    ) -> Result<Self> {
        config.validate()?;
        let dir = out.unwrap_or(&config.workdir).to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| CirpError::io(&dir, e))?;
        Ok(Stage {
            name,
            dir,
            seed: config.seed,
            config_sha256: fingerprint_config(config),
            inputs: fingerprint_inputs(input_paths)?,
            outputs: Vec::new(),
            _config: config,
        })
    }

    fn path(&self, artifact: &str) -> PathBuf {
        self.dir.join(artifact)
    }

    /// Record an artifact and drop its metadata sidecar next to it.
    fn seal(&mut self, artifact: PathBuf) -> Result<()> {
        let sidecar = Sidecar {
            stage: self.name.to_owned(),
            seed: self.seed,
            config_sha256: self.config_sha256.clone(),
            inputs: self.inputs.clone(),
        };
        let mut name = artifact
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push_str(".meta.json");
        write_json(&artifact.with_file_name(name), &sidecar)?;
        self.outputs.push(artifact);
        Ok(())
    }

    fn finish(self) -> StageOutcome {
        StageOutcome {
            stage: self.name,
            outputs: self.outputs,
        }
    }
}

/// Read the two modality tables, align the text rows to the image order,
/// and build the shared item index.
pub(crate) fn load_modalities(
    config: &PipelineConfig,
) -> Result<(FeatureMatrix, FeatureMatrix, ItemIndex)> {
    let image_path = config.image_features_path();
    let text_path = config.text_features_path();
    let images = load_features(&image_path, ids_path(&image_path))?;
    let texts = load_features(&text_path, ids_path(&text_path))?;
    if images.num_items() != texts.num_items() {
        return Err(CirpError::Validation(format!(
            "modality tables disagree on item count: {} vs {}",
            images.num_items(),
            texts.num_items()
        )));
    }
    let index = ItemIndex::from_ids(images.ids.clone())?;
    let texts = texts.reindex(&index)?;
    Ok((images, texts, index))
}

fn load_index(config: &PipelineConfig) -> Result<ItemIndex> {
    ItemIndex::from_ids(load_ids(ids_path(&config.image_features_path()))?)
}

/// Load an embedding table pair written by [`run_embed`].
fn load_embeddings(dir: &Path) -> Result<(EmbeddingTable, EmbeddingTable, ItemIndex)> {
    let image_path = dir.join("image_embeddings.fmat");
    let text_path = dir.join("text_embeddings.fmat");
    let images = load_features(&image_path, ids_path(&image_path))?;
    let texts = load_features(&text_path, ids_path(&text_path))?;
    if images.ids != texts.ids {
        return Err(CirpError::Validation(
            "embedding tables list different items".into(),
        ));
    }
    let index = ItemIndex::from_ids(images.ids.clone())?;
    Ok((
        EmbeddingTable::from_feature_matrix(&images),
        EmbeddingTable::from_feature_matrix(&texts),
        index,
    ))
}

/// Generate the synthetic corpus into the work directory.
pub fn run_synth(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let mut stage = Stage::new("synth", config, out, &[])?;
    let mut synthetic = config.synthetic.clone();
    synthetic.seed = config.seed;
    let data = generate_synthetic(&synthetic)?;

    let interactions = stage.path("interactions.tsv");
    write_interactions(&interactions, &data.interactions)?;
    stage.seal(interactions)?;

    for (name, features) in [
        ("image_features.fmat", &data.image_features),
        ("text_features.fmat", &data.text_features),
    ] {
        let matrix = stage.path(name);
        let ids = ids_path(&matrix);
        write_features(&matrix, &ids, features)?;
        stage.seal(matrix)?;
        stage.seal(ids)?;
    }

    let bundles = stage.path("bundles.jsonl");
    write_bundles(&bundles, &data.bundles)?;
    stage.seal(bundles)?;
    Ok(stage.finish())
}

/// Build the co-purchase graph from the interaction log.
pub fn run_build_graph(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let image_path = config.image_features_path();
    let text_path = config.text_features_path();
    let inputs = vec![
        config.interactions_path(),
        image_path.clone(),
        ids_path(&image_path),
        text_path.clone(),
        ids_path(&text_path),
    ];
    let mut stage = Stage::new("build-graph", config, out, &inputs)?;

    let interactions = load_interactions(config.interactions_path())?;
    let (_, _, index) = load_modalities(config)?;
    let graph = build_graph(
        &interactions,
        config.window_seconds,
        &index,
        config.pair_rule,
    )?;

    let edges = stage.path("graph.tsv");
    write_edges(&graph, &index, &edges)?;
    stage.seal(edges)?;

    let stats = stage.path("graph_stats.json");
    write_json(&stats, &graph_stats(&graph))?;
    stage.seal(stats)?;
    Ok(stage.finish())
}

#[derive(Debug, Serialize, Deserialize)]
struct GaeReport {
    best_epoch: usize,
    best_val_auc: Option<f64>,
    test_auc: Option<f64>,
    test_hit_rate_at_10: Option<f64>,
    config: GaeConfig,
}

/// Train the graph auto-encoder and dump the relation-scoring embeddings.
pub fn run_train_gae(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let graph_path = config.workdir.join("graph.tsv");
    let ids = ids_path(&config.image_features_path());
    let mut stage = Stage::new(
        "train-gae",
        config,
        out,
        &[graph_path.clone(), ids.clone()],
    )?;

    let index = load_index(config)?;
    let graph = read_edges(&graph_path, &index)?;
    let gae_config = config.gae_config();
    let outcome = train_gae(&graph, &gae_config)?;

    let matrix = stage.path("gae_embeddings.fmat");
    let matrix_ids = ids_path(&matrix);
    write_features(&matrix, &matrix_ids, &outcome.embeddings.to_feature_matrix(&index)?)?;
    stage.seal(matrix)?;
    stage.seal(matrix_ids)?;

    let log = stage.path("gae_log.jsonl");
    write_jsonl(&log, &outcome.log)?;
    stage.seal(log)?;

    let report = stage.path("gae_report.json");
    write_json(
        &report,
        &GaeReport {
            best_epoch: outcome.best_epoch,
            best_val_auc: outcome.best_val_auc,
            test_auc: outcome.test_auc,
            test_hit_rate_at_10: outcome.test_hit_rate_at_10,
            config: gae_config,
        },
    )?;
    stage.seal(report)?;
    Ok(stage.finish())
}

/// Drop the lowest-scored relations from the graph.
pub fn run_prune(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let graph_path = config.workdir.join("graph.tsv");
    let matrix = config.workdir.join("gae_embeddings.fmat");
    let inputs = vec![graph_path.clone(), matrix.clone(), ids_path(&matrix)];
    let mut stage = Stage::new("prune", config, out, &inputs)?;

    let index = load_index(config)?;
    let graph = read_edges(&graph_path, &index)?;
    let features = load_features(&matrix, ids_path(&matrix))?;
    if features.ids != index.ids() {
        return Err(CirpError::Validation(
            "relation scores list different items than the feature tables".into(),
        ));
    }
    let scores = EmbeddingTable::from_feature_matrix(&features);
    let pruned = prune_graph(&graph, &scores, &config.prune)?;

    let edges = stage.path("pruned_graph.tsv");
    write_edges(&pruned, &index, &edges)?;
    stage.seal(edges)?;

    let report = stage.path("prune_report.json");
    write_json(
        &report,
        &PruneReport {
            beta_percent: config.prune.beta_percent,
            removal_rule: config.prune.removal_rule,
            edges_before: graph.edge_count(),
            edges_after: pruned.edge_count(),
        },
    )?;
    stage.seal(report)?;
    Ok(stage.finish())
}

/// Pre-train the dual encoders on the pruned graph.
pub fn run_pretrain(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let graph_path = config.workdir.join("pruned_graph.tsv");
    let image_path = config.image_features_path();
    let text_path = config.text_features_path();
    let inputs = vec![
        graph_path.clone(),
        image_path.clone(),
        ids_path(&image_path),
        text_path.clone(),
        ids_path(&text_path),
    ];
    let mut stage = Stage::new("pretrain", config, out, &inputs)?;

    let (images, texts, index) = load_modalities(config)?;
    let graph = read_edges(&graph_path, &index)?;
    let contrast = config.contrast_config();
    let outcome = pretrain(&graph, &images, &texts, &contrast)?;

    let checkpoint = stage.path("encoder.ckpt");
    save_checkpoint(&checkpoint, &Checkpoint::from_outcome(&outcome, &contrast))?;
    stage.seal(checkpoint)?;

    let log = stage.path("pretrain_log.jsonl");
    write_jsonl(&log, &outcome.log)?;
    stage.seal(log)?;
    Ok(stage.finish())
}

/// Push every item through the trained encoders.
pub fn run_embed(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let checkpoint_path = config.workdir.join("encoder.ckpt");
    let image_path = config.image_features_path();
    let text_path = config.text_features_path();
    let inputs = vec![
        checkpoint_path.clone(),
        image_path.clone(),
        ids_path(&image_path),
        text_path.clone(),
        ids_path(&text_path),
    ];
    let mut stage = Stage::new("embed", config, out, &inputs)?;

    let (images, texts, index) = load_modalities(config)?;
    let checkpoint = load_checkpoint(&checkpoint_path)?;
    let (image_out, text_out) = crate::encoder::embed_all(&checkpoint.params, &images, &texts)?;

    for (name, table) in [
        ("image_embeddings.fmat", &image_out),
        ("text_embeddings.fmat", &text_out),
    ] {
        let matrix = stage.path(name);
        let ids = ids_path(&matrix);
        write_features(&matrix, &ids, &table.to_feature_matrix(&index)?)?;
        stage.seal(matrix)?;
        stage.seal(ids)?;
    }
    Ok(stage.finish())
}

/// Evaluate bundle completion on the embedded items.
pub fn run_bundle_eval(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let image_path = config.workdir.join("image_embeddings.fmat");
    let text_path = config.workdir.join("text_embeddings.fmat");
    let inputs = vec![
        config.bundles_path(),
        image_path.clone(),
        ids_path(&image_path),
        text_path.clone(),
        ids_path(&text_path),
    ];
    let mut stage = Stage::new("bundle-eval", config, out, &inputs)?;

    let bundles = load_bundles(config.bundles_path())?;
    let (images, texts, index) = load_embeddings(&config.workdir)?;
    let (report, records) = evaluate_detailed(
        &bundles,
        &images,
        &texts,
        &index,
        &config.protocol_with_k20(),
        config.seed,
    )?;

    let metrics = stage.path("metrics.json");
    write_json(&metrics, &report)?;
    stage.seal(metrics)?;

    let ranks = stage.path("query_ranks.csv");
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.bundle_id.clone(), r.held_out.clone(), r.rank.to_string()])
        .collect();
    write_csv(&ranks, &["bundle_id", "held_out", "rank"], &rows)?;
    stage.seal(ranks)?;
    Ok(stage.finish())
}

#[derive(Debug, Serialize, Deserialize)]
struct AnalyzeReport {
    analysis: RepAnalysis,
    projection_degenerate: bool,
    projected_items: usize,
}

/// Similarity statistics and a 2-d projection of the item space.
pub fn run_analyze(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let image_path = config.workdir.join("image_embeddings.fmat");
    let text_path = config.workdir.join("text_embeddings.fmat");
    let inputs = vec![
        config.bundles_path(),
        image_path.clone(),
        ids_path(&image_path),
        text_path.clone(),
        ids_path(&text_path),
    ];
    let mut stage = Stage::new("analyze", config, out, &inputs)?;

    let bundles = load_bundles(config.bundles_path())?;
    let (images, texts, index) = load_embeddings(&config.workdir)?;
    let analysis = rep_analysis(
        &images,
        &texts,
        &bundles,
        &index,
        config.num_random_pairs,
        config.seed,
    )?;

    // Sample bundle items when there are any (they carry bundle labels for
    // the plot); otherwise fall back to the whole table.
    let mut candidates: Vec<usize> = bundles
        .distinct_items()
        .iter()
        .filter_map(|id| index.get(id))
        .collect();
    if candidates.is_empty() {
        candidates = (0..index.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(config.projection_sample.max(3));
    candidates.sort_unstable();

    let reprs = fuse_tables(&images, &texts)?;
    let projection = project_2d(&reprs, &candidates)?;

    // First bundle containing each item, for coloring the plot.
    let mut bundle_of: BTreeMap<usize, &str> = BTreeMap::new();
    for bundle in &bundles.bundles {
        for id in &bundle.items {
            if let Some(item) = index.get(id) {
                bundle_of.entry(item).or_insert(&bundle.bundle_id);
            }
        }
    }
    let rows: Vec<Vec<String>> = projection
        .coords
        .iter()
        .map(|&(item, x, y)| {
            vec![
                index.id(item).to_owned(),
                x.to_string(),
                y.to_string(),
                bundle_of.get(&item).copied().unwrap_or("").to_owned(),
            ]
        })
        .collect();
    let projection_path = stage.path("projection.csv");
    write_csv(&projection_path, &["item_id", "x", "y", "bundle_id"], &rows)?;
    stage.seal(projection_path)?;

    let report = stage.path("analysis.json");
    write_json(
        &report,
        &AnalyzeReport {
            analysis,
            projection_degenerate: projection.degenerate,
            projected_items: projection.coords.len(),
        },
    )?;
    stage.seal(report)?;
    Ok(stage.finish())
}

fn experiment_inputs(config: &PipelineConfig) -> Vec<PathBuf> {
    let image_path = config.image_features_path();
    let text_path = config.text_features_path();
    vec![
        config.interactions_path(),
        image_path.clone(),
        ids_path(&image_path),
        text_path.clone(),
        ids_path(&text_path),
        config.bundles_path(),
    ]
}

/// Prune, pre-train, and evaluate once per pruning ratio; write the curve.
pub fn run_sweep_prune(
    config: &PipelineConfig,
    beta_list: &[f64],
    out: Option<&Path>,
) -> Result<StageOutcome> {
    let mut stage = Stage::new("sweep-prune", config, out, &experiment_inputs(config))?;
    let data = BenchmarkData::load(config)?;
    let rows = sweep(&data, config, beta_list)?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            vec![
                row.beta_percent.to_string(),
                row.recall_at_20.to_string(),
                row.ndcg_at_20.to_string(),
                row.pretrain_wall_seconds.to_string(),
                row.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let path = stage.path("sweep.csv");
    write_csv(
        &path,
        &[
            "beta_percent",
            "recall_at_20",
            "ndcg_at_20",
            "pretrain_wall_seconds",
            "error",
        ],
        &csv_rows,
    )?;
    stage.seal(path)?;
    Ok(stage.finish())
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationReport {
    seed: u64,
    inputs: BTreeMap<String, String>,
    rows: Vec<VariantResult>,
}

/// The four-variant ablation table.
pub fn run_ablate(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let mut stage = Stage::new("ablate", config, out, &experiment_inputs(config))?;
    let data = BenchmarkData::load(config)?;
    let rows = ablate(&data, config)?;

    let path = stage.path("ablation.json");
    write_json(
        &path,
        &AblationReport {
            seed: config.seed,
            inputs: stage.inputs.clone(),
            rows,
        },
    )?;
    stage.seal(path)?;
    Ok(stage.finish())
}

/// Warm vs cold vs untrained comparison on held-out-item bundles.
pub fn run_coldstart(config: &PipelineConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let mut stage = Stage::new("coldstart", config, out, &experiment_inputs(config))?;
    let data = BenchmarkData::load(config)?;
    let report = coldstart(&data, config)?;

    let path = stage.path("coldstart.json");
    write_json(&path, &report)?;
    stage.seal(path)?;
    Ok(stage.finish())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bundling::MetricsReport;

    /// Small corpus and fast training so stage tests stay quick.
    pub(crate) fn tiny_config(workdir: PathBuf) -> PipelineConfig {
        PipelineConfig {
            workdir,
            synthetic: SyntheticConfig {
                num_items: 60,
                num_users: 120,
                num_clusters: 6,
                complement_pairs: vec![(0, 1), (2, 3), (4, 5)],
                feature_dim: 8,
                noise_sigma: 0.5,
                interactions_per_user: 6,
                bundle_count: 30,
                bundle_size_range: (2, 4),
                complement_rate: 0.95,
                bundle_latent_dim: None,
                seed: 42,
            },
            gae: GaeConfig {
                epochs: 12,
                d: 8,
                ..GaeConfig::default()
            },
            contrast: ContrastConfig {
                epochs: 2,
                batch_size: 8,
                output_dim: 16,
                ..ContrastConfig::default()
            },
            num_random_pairs: 200,
            projection_sample: 20,
            seed: 5,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn stages_compose_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path().to_path_buf());

        run_synth(&config, None).unwrap();
        run_build_graph(&config, None).unwrap();
        run_train_gae(&config, None).unwrap();
        run_prune(&config, None).unwrap();
        run_pretrain(&config, None).unwrap();
        run_embed(&config, None).unwrap();
        run_bundle_eval(&config, None).unwrap();
        run_analyze(&config, None).unwrap();

        let metrics: MetricsReport = serde_json::from_str(
            &fs::read_to_string(dir.path().join("metrics.json")).unwrap(),
        )
        .unwrap();
        assert!(metrics.query_count > 0);
        for value in metrics.recall.values().chain(metrics.ndcg.values()) {
            assert!((0.0..=1.0).contains(value));
        }
        // k = 20 is always reported.
        assert!(metrics.recall.contains_key(&20));

        // Every artifact carries a sidecar.
        for name in ["graph.tsv", "encoder.ckpt", "metrics.json", "projection.csv"] {
            let sidecar = dir.path().join(format!("{name}.meta.json"));
            let parsed: Sidecar =
                serde_json::from_str(&fs::read_to_string(&sidecar).unwrap()).unwrap();
            assert_eq!(parsed.seed, config.seed);
            assert!(!parsed.config_sha256.is_empty());
        }

        // The pruned graph never has more edges than the raw one.
        let raw = fs::read_to_string(dir.path().join("graph.tsv")).unwrap();
        let pruned = fs::read_to_string(dir.path().join("pruned_graph.tsv")).unwrap();
        assert!(pruned.lines().count() <= raw.lines().count());
    }

    #[test]
    fn early_stage_reruns_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path().to_path_buf());

        run_synth(&config, None).unwrap();
        run_build_graph(&config, None).unwrap();
        let snapshot: Vec<(PathBuf, Vec<u8>)> = ["interactions.tsv", "image_features.fmat", "graph.tsv", "graph_stats.json", "graph.tsv.meta.json"]
            .iter()
            .map(|name| {
                let path = dir.path().join(name);
                let bytes = fs::read(&path).unwrap();
                (path, bytes)
            })
            .collect();

        run_synth(&config, None).unwrap();
        run_build_graph(&config, None).unwrap();
        for (path, before) in snapshot {
            assert_eq!(fs::read(&path).unwrap(), before, "{}", path.display());
        }
    }

    #[test]
    fn missing_input_is_a_data_error_naming_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path().to_path_buf());
        let err = run_build_graph(&config, None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("interactions.tsv"), "{err}");
    }

    #[test]
    fn config_file_errors_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");

        let missing = PipelineConfig::load(&path).unwrap_err();
        assert_eq!(missing.exit_code(), 2);

        fs::write(&path, "{ not json").unwrap();
        let bad = PipelineConfig::load(&path).unwrap_err();
        assert_eq!(bad.exit_code(), 2);

        fs::write(&path, r#"{"no_such_field": 1}"#).unwrap();
        let unknown = PipelineConfig::load(&path).unwrap_err();
        assert_eq!(unknown.exit_code(), 2);
        assert!(unknown.to_string().contains("no_such_field"), "{unknown}");

        fs::write(&path, r#"{"window_seconds": -4}"#).unwrap();
        let invalid = PipelineConfig::load(&path).unwrap_err();
        assert_eq!(invalid.exit_code(), 2);

        fs::write(&path, r#"{"seed": 7}"#).unwrap();
        let ok = PipelineConfig::load(&path).unwrap();
        assert_eq!(ok.seed, 7);
        assert_eq!(ok.workdir, PathBuf::from("work"));
    }

    #[test]
    fn out_flag_redirects_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path().to_path_buf());
        run_synth(&config, None).unwrap();
        let outcome = run_build_graph(&config, Some(out.path())).unwrap();
        assert!(outcome.outputs.iter().all(|p| p.starts_with(out.path())));
        assert!(out.path().join("graph.tsv").exists());
        assert!(!dir.path().join("graph.tsv").exists());
    }
}
