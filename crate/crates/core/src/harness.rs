//! Stratified cross-validation, model selection, the paired with/without
//! weather-time comparison and its significance analysis.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, train_epoch, Classifier, ClassifierConfig, ExampleSet, Variant};
use crate::data::{ConditionSpace, Point2};
use crate::datp::{train_cluster_models, DatpConfig, DatpSet};
use crate::error::{Error, Result, ResultExt};
use crate::kernels::{Adam, AdamConfig, LossConfig};
use crate::metrics::{accuracy_and_kappa, path_ade, path_fde, Agreement, ConfusionMatrix, MetricsReport, RelativeReport};
use crate::stats::{mann_whitney_u_one_sided, mcnemar_test, MannWhitneyResult, McNemarResult, ALPHA};

/// Independent stream `stream` of a master seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named seed streams.
pub mod streams {
    pub const FOLDS: u64 = 1;
    pub const CLASSIFIER: u64 = 2;
    pub const DATP: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Rotation `r`: fold `r` tests, fold `r + 1` validates, the rest train.
    pub fn rotation(&self, r: usize) -> Rotation {
        let k = self.k();
        let (test, val) = (r % k, (r + 1) % k);
        let mut train: Vec<usize> = (0..k)
            .filter(|&f| f != test && f != val)
            .flat_map(|f| self.folds[f].iter().copied())
            .collect();
        train.sort_unstable();
        Rotation {
            train,
            val: self.folds[val].clone(),
            test: self.folds[test].clone(),
        }
    }
}

/// Seeded stratified partition into `k` folds. Within each class the shuffled
/// members are dealt round-robin, continuing where the previous class ended.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 3 {
        return Err(Error::Config("cross-validation needs at least 3 folds".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if let Some((c, m)) = by_class.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::InvalidInput(format!("class {c} has {} samples, fewer than {k} folds", m.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan { folds })
}

/// `beta_k = (N / N_k) / sum_j (N / N_j)`.
pub fn class_weights(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::InvalidInput(format!("label {l} outside {k} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!("class {c} has no samples")));
    }
    let n = labels.len() as f64;
    let inv: Vec<f64> = counts.iter().map(|&c| n / c as f64).collect();
    let s: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / s).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Focal-loss focusing factor.
    pub gamma: f64,
    /// Weight of the preliminary classifier's loss.
    pub lambda_p: f64,
    pub folds: usize,
    pub classifier: ClassifierConfig,
    pub datp: DatpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            lr: 1e-3,
            gamma: 2.0,
            lambda_p: 0.5,
            folds: 5,
            classifier: ClassifierConfig::default(),
            datp: DatpConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs must be positive and batch size at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.folds < 3 {
            return Err(Error::Config("cross-validation needs at least 3 folds".into()));
        }
        LossConfig {
            gamma: self.gamma,
            beta: vec![],
            lambda_p: self.lambda_p,
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
        self.classifier.validate()?;
        self.datp.validate()
    }
}

/// Training history and selection outcome of one classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// Zero-based epoch whose checkpoint was kept.
    pub best_epoch: usize,
}

/// Trains on `train`, evaluating `val` after every epoch, and returns the
/// parameters of the first epoch attaining the maximum validation accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    data: &ExampleSet,
    train: &[usize],
    val: &[usize],
    k: usize,
    space: ConditionSpace,
    cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<(Classifier, TrainHistory)> {
    let norm = data.fit_normalizer(train);
    let mut model = Classifier::new(k, space, &cfg.classifier, norm, derive_seed(seed, streams::CLASSIFIER))?;
    model.variant = variant;
    let loss_cfg = LossConfig {
        gamma: cfg.gamma,
        beta: class_weights(&data.labels_of(train), k)?,
        lambda_p: cfg.lambda_p,
    };
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let val_obs = data.observed_refs(val);
    let val_codes = data.codes_of(val);
    let val_labels = data.labels_of(val);
    let shuffle = derive_seed(seed, streams::SHUFFLE);
    let mut hist = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_acc: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best: Option<Classifier> = None;
    for epoch in 0..cfg.epochs {
        let l = train_epoch(&mut model, &mut opt, data, train, cfg.batch_size, &loss_cfg, derive_seed(shuffle, epoch as u64))?;
        let acc = accuracy(&model.predict(&val_obs, &val_codes)?, &val_labels);
        hist.train_loss.push(l);
        if best.is_none() || acc > hist.val_acc[hist.best_epoch] {
            hist.best_epoch = epoch;
            best = Some(model.clone());
        }
        hist.val_acc.push(acc);
    }
    Ok((best.expect("at least one epoch"), hist))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CvFold {
    pub rotation: usize,
    pub history: TrainHistory,
    pub test: Agreement,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CvResult {
    pub folds: Vec<CvFold>,
    pub mean_test_acc: f64,
    pub mean_test_kappa: f64,
}

/// Cross-validated classifier training and testing, returning the selected
/// model of every rotation.
pub fn run_cv(
    data: &ExampleSet,
    k: usize,
    space: ConditionSpace,
    cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<(CvResult, Vec<Classifier>)> {
    cfg.validate()?;
    let plan = stratified_kfold(&data.labels, cfg.folds, derive_seed(seed, streams::FOLDS))?;
    let runs: Result<Vec<(CvFold, Classifier)>> = (0..plan.k())
        .into_par_iter()
        .map(|r| {
            let rot = plan.rotation(r);
            let s = derive_seed(seed, 100 + r as u64);
            let (model, history) = train_classifier(data, &rot.train, &rot.val, k, space, cfg, variant, s)
                .context(|| format!("fold rotation {r}"))?;
            let pred = model.predict(&data.observed_refs(&rot.test), &data.codes_of(&rot.test))?;
            let confusion = ConfusionMatrix::from_labels(&data.labels_of(&rot.test), &pred, k)?;
            let fold = CvFold {
                rotation: r,
                history,
                test: accuracy_and_kappa(&confusion)?,
                confusion,
            };
            Ok((fold, model))
        })
        .collect();
    let (folds, models): (Vec<CvFold>, Vec<Classifier>) = runs?.into_iter().unzip();
    let n = folds.len() as f64;
    let cv = CvResult {
        mean_test_acc: folds.iter().map(|f| f.test.acc).sum::<f64>() / n,
        mean_test_kappa: folds.iter().map(|f| f.test.kappa).sum::<f64>() / n,
        folds,
    };
    Ok((cv, models))
}

/// One test sample evaluated under both settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PairedSample {
    pub index: usize,
    pub rotation: usize,
    pub label: usize,
    pub pred_a: usize,
    pub pred_b: usize,
    pub ade_a: f64,
    pub ade_b: f64,
    pub fde_a: f64,
    pub fde_b: f64,
}

impl PairedSample {
    /// The predicted destination differs between the settings.
    pub fn influenced(&self) -> bool {
        self.pred_a != self.pred_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PairedFold {
    pub rotation: usize,
    pub history_a: TrainHistory,
    pub history_b: TrainHistory,
    pub metrics_a: MetricsReport,
    pub metrics_b: MetricsReport,
    /// Final training loss of each cluster predictor.
    pub datp_final_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PairedRunResult {
    pub setting_a: Variant,
    pub setting_b: Variant,
    pub folds: Vec<PairedFold>,
    /// Sorted by sample index; every sample is tested exactly once.
    pub samples: Vec<PairedSample>,
    pub pooled_a: MetricsReport,
    pub pooled_b: MetricsReport,
    /// Setting B relative to setting A.
    pub relative: RelativeReport,
}

/// Trained artifacts of one rotation, kept for checkpointing.
pub struct RotationModels {
    pub a: Classifier,
    pub b: Classifier,
    pub datp: DatpSet,
}

fn rollout_memo(datp: &DatpSet, data: &ExampleSet, pairs: &[(usize, usize)]) -> Result<BTreeMap<(usize, usize), Vec<Point2>>> {
    let obs: Vec<&[Point2]> = pairs.iter().map(|&(i, _)| data.observed[i].as_slice()).collect();
    let labels: Vec<usize> = pairs.iter().map(|&(_, l)| l).collect();
    let paths = datp.predict_batch(&obs, &labels)?;
    Ok(pairs.iter().copied().zip(paths).collect())
}

fn pooled(samples: &[PairedSample], k: usize, b: bool) -> Result<MetricsReport> {
    let actual: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let pred: Vec<usize> = samples.iter().map(|s| if b { s.pred_b } else { s.pred_a }).collect();
    let cm = ConfusionMatrix::from_labels(&actual, &pred, k)?;
    let n = samples.len().max(1) as f64;
    let ade = samples.iter().map(|s| if b { s.ade_b } else { s.ade_a }).sum::<f64>() / n;
    let fde = samples.iter().map(|s| if b { s.fde_b } else { s.fde_a }).sum::<f64>() / n;
    MetricsReport::build(&cm, ade, fde)
}

/// Trains both classifier settings on identical folds and seeds, shares one
/// set of per-cluster predictors (retrained per rotation) between them, and
/// records paired per-sample outcomes on every test fold.
pub fn run_paired(
    data: &ExampleSet,
    k: usize,
    space: ConditionSpace,
    cfg: &TrainConfig,
    setting_a: Variant,
    setting_b: Variant,
    seed: u64,
) -> Result<(PairedRunResult, Vec<RotationModels>)> {
    cfg.validate()?;
    let plan = stratified_kfold(&data.labels, cfg.folds, derive_seed(seed, streams::FOLDS))?;
    type FoldOut = (PairedFold, Vec<PairedSample>, RotationModels);
    let per_fold: Result<Vec<FoldOut>> = (0..plan.k())
        .into_par_iter()
        .map(|r| {
            let rot = plan.rotation(r);
            let s = derive_seed(seed, 100 + r as u64);
            let norm = data.fit_normalizer(&rot.train);
            let datp = train_cluster_models(
                &data.observed,
                &data.future,
                &data.labels,
                &rot.train,
                k,
                &cfg.datp,
                norm,
                derive_seed(s, streams::DATP),
            )
            .context(|| format!("fold rotation {r}"))?;
            let (a, history_a) = train_classifier(data, &rot.train, &rot.val, k, space, cfg, setting_a, s)
                .context(|| format!("fold rotation {r}, setting a"))?;
            let (b, history_b) = train_classifier(data, &rot.train, &rot.val, k, space, cfg, setting_b, s)
                .context(|| format!("fold rotation {r}, setting b"))?;
            let obs = data.observed_refs(&rot.test);
            let codes = data.codes_of(&rot.test);
            let pa = a.predict(&obs, &codes)?;
            let pb = b.predict(&obs, &codes)?;
            let mut pairs: Vec<(usize, usize)> = rot
                .test
                .iter()
                .zip(pa.iter().zip(&pb))
                .flat_map(|(&i, (&x, &y))| [(i, x), (i, y)])
                .collect();
            pairs.sort_unstable();
            pairs.dedup();
            let memo = rollout_memo(&datp, data, &pairs)?;
            let samples: Vec<PairedSample> = rot
                .test
                .iter()
                .zip(pa.iter().zip(&pb))
                .map(|(&i, (&x, &y))| {
                    let truth = &data.future[i];
                    let (ra, rb) = (&memo[&(i, x)], &memo[&(i, y)]);
                    PairedSample {
                        index: i,
                        rotation: r,
                        label: data.labels[i],
                        pred_a: x,
                        pred_b: y,
                        ade_a: path_ade(truth, ra),
                        ade_b: path_ade(truth, rb),
                        fde_a: path_fde(truth, ra),
                        fde_b: path_fde(truth, rb),
                    }
                })
                .collect();
            let fold = PairedFold {
                rotation: r,
                history_a,
                history_b,
                metrics_a: pooled(&samples, k, false)?,
                metrics_b: pooled(&samples, k, true)?,
                datp_final_loss: datp
                    .models
                    .values()
                    .map(|m| m.loss_trace.last().copied().unwrap_or(f64::NAN))
                    .collect(),
            };
            Ok((fold, samples, RotationModels { a, b, datp }))
        })
        .collect();
    let mut folds = Vec::new();
    let mut samples = Vec::new();
    let mut models = Vec::new();
    for (f, s, m) in per_fold? {
        folds.push(f);
        samples.extend(s);
        models.push(m);
    }
    samples.sort_by_key(|s| s.index);
    let pooled_a = pooled(&samples, k, false)?;
    let pooled_b = pooled(&samples, k, true)?;
    let relative = RelativeReport::compare(&pooled_b, &pooled_a, "setting_a");
    Ok((
        PairedRunResult {
            setting_a,
            setting_b,
            folds,
            samples,
            pooled_a,
            pooled_b,
            relative,
        },
        models,
    ))
}

/// Setting A is the classifier without weather-time input, B the full model.
pub fn run_ablation(data: &ExampleSet, k: usize, space: ConditionSpace, cfg: &TrainConfig, seed: u64) -> Result<(PairedRunResult, Vec<RotationModels>)> {
    run_paired(data, k, space, cfg, Variant::Bypass, Variant::Full, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SubsetSummary {
    pub count: usize,
    pub mean_ade_a: f64,
    pub mean_ade_b: f64,
    pub mean_fde_a: f64,
    pub mean_fde_b: f64,
    /// Largest absolute per-sample ADE difference between the settings.
    pub max_abs_ade_diff: f64,
    pub max_abs_fde_diff: f64,
}

impl SubsetSummary {
    fn of<'a>(it: impl Iterator<Item = &'a PairedSample>) -> Self {
        let v: Vec<&PairedSample> = it.collect();
        let n = v.len().max(1) as f64;
        let mean = |f: fn(&PairedSample) -> f64| v.iter().map(|s| f(s)).sum::<f64>() / n;
        let maxd = |f: fn(&PairedSample) -> f64| v.iter().map(|s| f(s)).fold(0.0, f64::max);
        Self {
            count: v.len(),
            mean_ade_a: mean(|s| s.ade_a),
            mean_ade_b: mean(|s| s.ade_b),
            mean_fde_a: mean(|s| s.fde_a),
            mean_fde_b: mean(|s| s.fde_b),
            max_abs_ade_diff: maxd(|s| (s.ade_a - s.ade_b).abs()),
            max_abs_fde_diff: maxd(|s| (s.fde_a - s.fde_b).abs()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SignificanceReport {
    pub alpha: f64,
    pub n: usize,
    pub correct_a: usize,
    pub correct_b: usize,
    pub acc_a: f64,
    pub acc_b: f64,
    pub mcnemar: McNemarResult,
    pub influenced: SubsetSummary,
    pub not_influenced: SubsetSummary,
    /// One-sided test that setting B has smaller ADE on influenced samples.
    pub ade_test: Option<MannWhitneyResult>,
    pub fde_test: Option<MannWhitneyResult>,
    pub note: Option<String>,
}

pub fn significance_report(paired: &PairedRunResult) -> Result<SignificanceReport> {
    let s = &paired.samples;
    let ca: Vec<bool> = s.iter().map(|x| x.pred_a == x.label).collect();
    let cb: Vec<bool> = s.iter().map(|x| x.pred_b == x.label).collect();
    let mcnemar = mcnemar_test(&ca, &cb)?;
    let infl: Vec<&PairedSample> = s.iter().filter(|x| x.influenced()).collect();
    let (ade_test, fde_test, note) = if infl.is_empty() {
        (None, None, Some("no influenced samples; displacement tests skipped".to_string()))
    } else {
        let col = |f: fn(&PairedSample) -> f64| infl.iter().map(|x| f(x)).collect::<Vec<f64>>();
        (
            Some(mann_whitney_u_one_sided(&col(|x| x.ade_b), &col(|x| x.ade_a))?),
            Some(mann_whitney_u_one_sided(&col(|x| x.fde_b), &col(|x| x.fde_a))?),
            None,
        )
    };
    let n = s.len();
    let (na, nb) = (ca.iter().filter(|&&c| c).count(), cb.iter().filter(|&&c| c).count());
    Ok(SignificanceReport {
        alpha: ALPHA,
        n,
        correct_a: na,
        correct_b: nb,
        acc_a: na as f64 / n.max(1) as f64,
        acc_b: nb as f64 / n.max(1) as f64,
        mcnemar,
        influenced: SubsetSummary::of(infl.iter().copied()),
        not_influenced: SubsetSummary::of(s.iter().filter(|x| !x.influenced())),
        ade_test,
        fde_test,
        note,
    })
}
