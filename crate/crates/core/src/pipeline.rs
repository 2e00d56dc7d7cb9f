//! Run configuration, the end-to-end pipeline and the versioned run report.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ExampleSet, Variant};
use crate::cluster::{kmeans_endpoints, merge_undersampled, ClusterModel, LabeledDataset, LabeledTrajectory, MergeEvent};
use crate::data::{
    clean, generate_synthetic, ingest_csv, resample, ColumnMap, DatasetConfig, Point2, ResampledTrajectory, Scenario,
    Trajectory,
};
use crate::datp::DatpSet;
use crate::error::{Error, Result, ResultExt};
use crate::harness::{
    derive_seed, run_cv, run_paired, significance_report, streams, CvResult, PairedRunResult, RotationModels,
    SignificanceReport, TrainConfig,
};
use crate::kernels::Checkpoint;
use crate::metrics::{ade, fde, ConfusionMatrix, MetricsReport};
use crate::stats::{build_contingency, chi_square_test, ChiSquareResult, ContingencyTable};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Where trajectories come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated from the `[scenario]` section.
    #[default]
    Synthetic,
    /// Canonical CSV files (`ped_id,t,x,y,weather,daypart`).
    Canonical { paths: Vec<String> },
    /// Headerless tracking logs; conditions come from the dataset calendar.
    Atc { paths: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Trajectories shorter than this (meters) are discarded.
    pub min_path_length: f64,
    pub min_samples: usize,
    /// Drop trajectories that start and end in the same cluster.
    pub drop_same_origin_dest: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_path_length: 1.0,
            min_samples: 2,
            drop_same_origin_dest: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Initial centroids. Empty means the scenario anchors (synthetic only).
    pub init: Vec<Point2>,
    pub max_iter: usize,
    /// Stop once no centroid moves by this many meters.
    pub tol: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            init: Vec::new(),
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    /// Compare classifiers with and without weather-time input. When off,
    /// only the full classifier is cross-validated.
    pub ablation: bool,
    pub out_dir: Option<String>,
    pub source: DataSource,
    pub dataset: DatasetConfig,
    pub scenario: Scenario,
    pub preprocess: PreprocessConfig,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            ablation: true,
            out_dir: None,
            source: DataSource::Synthetic,
            dataset: DatasetConfig::default(),
            scenario: Scenario::default(),
            preprocess: PreprocessConfig::default(),
            cluster: ClusterConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).context(|| format!("config {}", path.display()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.preprocess.min_samples < 2 {
            return Err(Error::Config("min_samples must be at least 2".into()));
        }
        if self.cluster.max_iter == 0 {
            return Err(Error::Config("cluster.max_iter must be positive".into()));
        }
        match &self.source {
            DataSource::Synthetic => {
                self.scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
                let (sw, sd) = (self.scenario.weather_count, self.scenario.daypart_count);
                if (sw, sd) != (self.dataset.weather_count, self.dataset.daypart_count) {
                    return Err(Error::Config(format!(
                        "scenario has {sw}x{sd} conditions but dataset declares {}x{}",
                        self.dataset.weather_count, self.dataset.daypart_count
                    )));
                }
            }
            DataSource::Canonical { paths } | DataSource::Atc { paths } => {
                if paths.is_empty() {
                    return Err(Error::Config("data source lists no paths".into()));
                }
                if self.cluster.init.len() < 2 {
                    return Err(Error::Config("file data sources need at least 2 cluster.init centroids".into()));
                }
            }
        }
        Ok(())
    }

    pub fn json_schema() -> String {
        serde_json::to_string_pretty(&schemars::schema_for!(RunConfig)).expect("schema serializes")
    }

    pub fn init_centroids(&self) -> Vec<Point2> {
        if self.cluster.init.is_empty() {
            self.scenario.anchors.clone()
        } else {
            self.cluster.init.clone()
        }
    }
}

pub fn load_trajectories(cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    let space = cfg.dataset.space();
    match &cfg.source {
        DataSource::Synthetic => generate_synthetic(&cfg.scenario),
        DataSource::Canonical { paths } => {
            let mut out = Vec::new();
            for p in paths {
                out.extend(ingest_csv(p, &ColumnMap::canonical(), cfg.dataset.unit_scale, space)?);
            }
            Ok(out)
        }
        DataSource::Atc { paths } => {
            let mut out = Vec::new();
            for p in paths {
                out.extend(ingest_csv(p, &ColumnMap::atc(&cfg.dataset), cfg.dataset.unit_scale, space)?);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DataSummary {
    pub loaded: usize,
    pub cleaned: usize,
    pub labeled: usize,
    /// Labeled trajectories per combined condition.
    pub per_condition: Vec<usize>,
    /// Labeled trajectories per destination label.
    pub per_label: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ClusteringSummary {
    pub initial_centroids: Vec<Point2>,
    /// Fitted centroids by original id (before merging).
    pub fitted_centroids: Vec<Point2>,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    pub empty_clusters: Vec<usize>,
    pub merges: Vec<MergeEvent>,
    pub merge_map: Vec<usize>,
    pub k: usize,
    pub surviving_centroids: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TableSummary {
    pub counts: Vec<Vec<u64>>,
    pub expected: Vec<Vec<f64>>,
    /// `(row, col, value)` of the smallest expected count.
    pub min_expected: (usize, usize, f64),
}

impl TableSummary {
    pub fn of(t: &ContingencyTable) -> Self {
        Self {
            counts: t.counts().to_vec(),
            expected: t.expected_counts(),
            min_expected: t.min_expected(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AblationReport {
    pub paired: PairedRunResult,
    pub significance: SignificanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Provenance {
    pub master_seed: u64,
    pub fold_seed: u64,
    /// Checkpoint files relative to the output directory.
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub provenance: Provenance,
    pub data: DataSummary,
    pub clustering: ClusteringSummary,
    pub contingency_pre_merge: TableSummary,
    pub contingency: TableSummary,
    pub wt_test: ChiSquareResult,
    pub cv: Option<CvResult>,
    pub ablation: Option<AblationReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::InvalidInput(format!("report json: {e}")))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "report schema version {} is not {REPORT_SCHEMA_VERSION}",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn json_schema() -> String {
        serde_json::to_string_pretty(&schemars::schema_for!(RunReport)).expect("schema serializes")
    }
}

/// Everything up to the weather-time test.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub resampled: Vec<ResampledTrajectory>,
    pub model: ClusterModel,
    pub dataset: LabeledDataset,
    pub data: DataSummary,
    pub clustering: ClusteringSummary,
    pub pre_merge: ContingencyTable,
    pub table: ContingencyTable,
    pub wt_test: ChiSquareResult,
}

/// Clean, resample, cluster endpoints, merge undersampled clusters and test
/// whether destination choice depends on the condition.
pub fn prepare(cfg: &RunConfig, trajs: Vec<Trajectory>) -> Result<Prepared> {
    let loaded = trajs.len();
    let cleaned = clean(trajs, cfg.preprocess.min_path_length, cfg.preprocess.min_samples);
    let n_clean = cleaned.len();
    let resampled: Vec<ResampledTrajectory> = cleaned
        .iter()
        .map(|t| resample(t, cfg.dataset.total_len()))
        .collect::<Result<_>>()
        .context(|| "resampling".to_string())?;
    let endpoints: Vec<Point2> = resampled.iter().map(ResampledTrajectory::last).collect();
    let init = cfg.init_centroids();
    let fit = kmeans_endpoints(&endpoints, &init, cfg.cluster.max_iter, cfg.cluster.tol).context(|| "clustering".to_string())?;
    let space = cfg.dataset.space();
    let conds: Vec<usize> = resampled.iter().map(|r| space.combined(r.condition)).collect();
    let pre_merge = build_contingency(&fit.labels, &conds, fit.model.k(), space.combined_count())?;
    let merged = merge_undersampled(&fit.model, &pre_merge).context(|| "merging undersampled clusters".to_string())?;
    let wt_test = chi_square_test(&merged.table).context(|| "weather-time test".to_string())?;
    let model = merged.model;
    let centroids = model.centroids();
    let items: Vec<LabeledTrajectory> = resampled
        .iter()
        .zip(&fit.labels)
        .filter(|(rt, &orig)| {
            !cfg.preprocess.drop_same_origin_dest
                || crate::cluster::assign_label(&model, rt.first()) != model.label_of_original(orig)
        })
        .map(|(rt, &orig)| LabeledTrajectory {
            traj: rt.clone(),
            label: model.label_of_original(orig),
        })
        .collect();
    let dataset = LabeledDataset {
        items,
        k: centroids.len(),
    };
    let mut per_condition = vec![0; space.combined_count()];
    for it in &dataset.items {
        per_condition[space.combined(it.traj.condition)] += 1;
    }
    let clustering = ClusteringSummary {
        initial_centroids: init,
        fitted_centroids: (0..fit.model.original_k()).map(|i| fit.model.centroids()[i]).collect(),
        iterations: fit.iterations,
        objective_trace: fit.objective_trace.clone(),
        empty_clusters: fit
            .model
            .empty_flags()
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(|(i, _)| i)
            .collect(),
        merges: merged.events,
        merge_map: model.merge_map().to_vec(),
        k: model.k(),
        surviving_centroids: centroids,
    };
    Ok(Prepared {
        data: DataSummary {
            loaded,
            cleaned: n_clean,
            labeled: dataset.len(),
            per_condition,
            per_label: dataset.histogram(),
        },
        resampled,
        model,
        dataset,
        clustering,
        pre_merge,
        table: merged.table,
        wt_test,
    })
}

/// Report plus trained artifacts.
pub struct PipelineOutput {
    pub report: RunReport,
    pub prepared: Prepared,
    /// Ablation models per rotation; empty when ablation is off.
    pub rotations: Vec<RotationModels>,
    /// Cross-validated classifiers per rotation; empty when ablation is on.
    pub cv_models: Vec<Classifier>,
}

pub fn checkpoint_names(folds: usize, ablation: bool) -> Vec<String> {
    let names: &[&str] = if ablation {
        &["classifier_a", "classifier_b", "datp"]
    } else {
        &["classifier"]
    };
    (0..folds)
        .flat_map(|r| names.iter().map(move |n| format!("rotation{r}/{n}.ckpt")))
        .collect()
}

/// Runs every stage from data loading to the significance analysis.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let trajs = load_trajectories(cfg).context(|| "loading data".to_string())?;
    let prepared = prepare(cfg, trajs)?;
    let examples = ExampleSet::from_labeled(&prepared.dataset, cfg.dataset.obs_len)?;
    let k = prepared.dataset.k;
    let space = cfg.dataset.space();
    let (cv, ablation, rotations, cv_models) = if cfg.ablation {
        let (paired, rotations) = run_paired(&examples, k, space, &cfg.train, Variant::Bypass, Variant::Full, cfg.seed)
            .context(|| "ablation".to_string())?;
        let significance = significance_report(&paired)?;
        (None, Some(AblationReport { paired, significance }), rotations, Vec::new())
    } else {
        let (cv, models) = run_cv(&examples, k, space, &cfg.train, Variant::Full, cfg.seed)
            .context(|| "cross-validation".to_string())?;
        (Some(cv), None, Vec::new(), models)
    };
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        provenance: Provenance {
            master_seed: cfg.seed,
            fold_seed: derive_seed(cfg.seed, streams::FOLDS),
            checkpoints: checkpoint_names(cfg.train.folds, cfg.ablation),
        },
        data: prepared.data.clone(),
        clustering: prepared.clustering.clone(),
        contingency_pre_merge: TableSummary::of(&prepared.pre_merge),
        contingency: TableSummary::of(&prepared.table),
        wt_test: prepared.wt_test.clone(),
        cv,
        ablation,
    };
    Ok(PipelineOutput {
        report,
        prepared,
        rotations,
        cv_models,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `cluster_model.json` and per-rotation checkpoints
/// with their metadata.
pub fn write_outputs(out: &PipelineOutput, dir: &Path) -> Result<()> {
    write_file(&dir.join("report.json"), out.report.to_json().as_bytes())?;
    write_file(&dir.join("cluster_model.json"), out.prepared.model.to_json().as_bytes())?;
    for (r, clf) in out.cv_models.iter().enumerate() {
        write_classifier(clf, &dir.join(format!("rotation{r}/classifier.ckpt")))?;
    }
    for (r, m) in out.rotations.iter().enumerate() {
        let rd = dir.join(format!("rotation{r}"));
        write_classifier(&m.a, &rd.join("classifier_a.ckpt"))?;
        write_classifier(&m.b, &rd.join("classifier_b.ckpt"))?;
        write_file(&rd.join("datp.ckpt"), &m.datp.to_checkpoint().to_bytes())?;
        let meta = serde_json::to_string_pretty(&m.datp.meta(&out.report.config.train.datp)).expect("meta serializes");
        write_file(&rd.join("datp.json"), meta.as_bytes())?;
    }
    Ok(())
}

/// Cleans, resamples and labels trajectories with an already fitted model.
pub fn label_with_model(cfg: &RunConfig, model: &ClusterModel, trajs: Vec<Trajectory>) -> Result<LabeledDataset> {
    let cleaned = clean(trajs, cfg.preprocess.min_path_length, cfg.preprocess.min_samples);
    let items = cleaned
        .iter()
        .map(|t| {
            let traj = resample(t, cfg.dataset.total_len())?;
            let label = crate::cluster::assign_label(model, traj.last());
            Ok(LabeledTrajectory { traj, label })
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::InvalidInput("no trajectories left after cleaning".into()));
    }
    Ok(LabeledDataset { items, k: model.k() })
}

/// Destination accuracy, agreement and displacement errors of a classifier
/// dispatching to trained predictors.
pub fn evaluate(clf: &Classifier, datp: &DatpSet, data: &ExampleSet) -> Result<MetricsReport> {
    if clf.k() != datp.models.len() {
        return Err(Error::Shape(format!("classifier has {} classes but {} predictors", clf.k(), datp.models.len())));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let observed = data.observed_refs(&idx);
    let pred = clf.predict(&observed, &data.codes)?;
    let paths = datp.predict_batch(&observed, &pred)?;
    let cm = ConfusionMatrix::from_labels(&data.labels, &pred, clf.k())?;
    MetricsReport::build(&cm, ade(&data.future, &paths)?, fde(&data.future, &paths)?)
}

/// Writes a classifier checkpoint and its `.json` metadata next to it.
pub fn write_classifier(clf: &Classifier, ckpt: &Path) -> Result<()> {
    write_file(ckpt, &clf.to_checkpoint().to_bytes())?;
    let meta = serde_json::to_string_pretty(&clf.meta()).expect("meta serializes");
    write_file(&ckpt.with_extension("json"), meta.as_bytes())
}

/// Loads a classifier written by [`write_outputs`].
pub fn load_classifier(ckpt: &Path) -> Result<Classifier> {
    let meta_path = ckpt.with_extension("json");
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    Classifier::from_checkpoint(&meta, &Checkpoint::load(ckpt)?)
}

/// Loads the predictors written by [`write_outputs`].
pub fn load_datp(ckpt: &Path) -> Result<DatpSet> {
    let meta_path = ckpt.with_extension("json");
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    DatpSet::from_checkpoint(&meta, &Checkpoint::load(ckpt)?)
}
