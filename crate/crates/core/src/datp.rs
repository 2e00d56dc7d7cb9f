//! Destination-adapted trajectory predictors: one encoder-decoder LSTM per
//! destination cluster, selected by the predicted destination.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::classifier::minibatches;
use crate::data::{Normalizer, Point2};
use crate::error::{Error, Result, ResultExt};
use crate::kernels::loss::mse;
use crate::kernels::lstm::SeqCache;
use crate::kernels::{Adam, AdamConfig, Checkpoint, Dense, Lstm, LstmState, ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DatpConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Feed and predict per-step displacements instead of positions.
    pub offsets: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DatpConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            dropout: 0.5,
            offsets: false,
            epochs: 150,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

impl DatpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.batch_size == 0 {
            return Err(Error::Config("predictor dimensions and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatpParams {
    pub encoder: Lstm,
    pub decoder: Lstm,
    pub head: Dense,
}

impl ParamSet for DatpParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        self.decoder.visit(&format!("{prefix}.decoder"), f);
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        self.decoder.visit_mut(&format!("{prefix}.decoder"), f);
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

/// Predictor for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct DatpModel {
    pub cluster: usize,
    pub params: DatpParams,
    pub norm: Normalizer,
    pub offsets: bool,
    pub dropout: f64,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Sequences in model space for a batch.
struct Encoded {
    enc_in: Vec<Tensor>,
    /// First decoder input; later inputs come from targets or predictions.
    dec_first: Tensor,
    /// Normalized last observed position, the origin of offset rollouts.
    anchor: Vec<Point2>,
}

fn to_tensor(v: &[Point2]) -> Tensor {
    Tensor::matrix(v.len(), 2, v.iter().flat_map(|p| [p.x, p.y]).collect()).expect("2 columns")
}

fn sub(a: Point2, b: Point2) -> Point2 {
    Point2::new(a.x - b.x, a.y - b.y)
}

impl DatpModel {
    pub fn new(cluster: usize, cfg: &DatpConfig, norm: Normalizer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            cluster,
            params: DatpParams {
                encoder: Lstm::new(2, cfg.hidden, cfg.layers, &mut rng),
                decoder: Lstm::new(2, cfg.hidden, cfg.layers, &mut rng),
                head: Dense::new(cfg.hidden, 2, true, &mut rng),
            },
            norm,
            offsets: cfg.offsets,
            dropout: cfg.dropout,
            loss_trace: Vec::new(),
        }
    }

    fn encode(&self, observed: &[&[Point2]]) -> Result<Encoded> {
        let steps = observed.first().map_or(0, |o| o.len());
        if steps == 0 || observed.iter().any(|o| o.len() != steps) {
            return Err(Error::Shape("observed sequences must be non-empty and equal length".into()));
        }
        let normed: Vec<Vec<Point2>> = observed
            .iter()
            .map(|o| o.iter().map(|&p| self.norm.apply(p)).collect())
            .collect();
        let enc_in = (0..steps)
            .map(|t| {
                let row: Vec<Point2> = normed
                    .iter()
                    .map(|o| match (self.offsets, t) {
                        (false, _) => o[t],
                        (true, 0) => Point2::default(),
                        (true, _) => sub(o[t], o[t - 1]),
                    })
                    .collect();
                to_tensor(&row)
            })
            .collect();
        let anchor: Vec<Point2> = normed.iter().map(|o| o[steps - 1]).collect();
        let first: Vec<Point2> = if self.offsets {
            enc_last_offsets(&normed)
        } else {
            anchor.clone()
        };
        Ok(Encoded {
            enc_in,
            dec_first: to_tensor(&first),
            anchor,
        })
    }

    /// Normalized targets per future step, as positions or displacements.
    fn targets(&self, anchor: &[Point2], future: &[&[Point2]]) -> Vec<Tensor> {
        let steps = future[0].len();
        (0..steps)
            .map(|t| {
                let row: Vec<Point2> = future
                    .iter()
                    .zip(anchor)
                    .map(|(f, &a)| {
                        let cur = self.norm.apply(f[t]);
                        if self.offsets {
                            let prev = if t == 0 { a } else { self.norm.apply(f[t - 1]) };
                            sub(cur, prev)
                        } else {
                            cur
                        }
                    })
                    .collect();
                to_tensor(&row)
            })
            .collect()
    }

    /// Teacher-forced loss and gradients on one batch.
    fn loss_and_grad(&self, observed: &[&[Point2]], future: &[&[Point2]], dropout_seed: Option<u64>) -> Result<(f64, DatpParams)> {
        let enc = self.encode(observed)?;
        let targets = self.targets(&enc.anchor, future);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let p = &self.params;
        let e = p.encoder.forward_seq(&enc.enc_in, None, self.dropout, rng.as_mut())?;
        let mut dec_in = Vec::with_capacity(targets.len());
        dec_in.push(enc.dec_first);
        dec_in.extend(targets[..targets.len() - 1].iter().cloned());
        let d = p.decoder.forward_seq(&dec_in, Some(&e.state), self.dropout, rng.as_mut())?;
        let mut g = p.zeroed();
        let steps = targets.len() as f64;
        let mut loss = 0.0;
        let mut d_out = Vec::with_capacity(targets.len());
        for (o, y) in d.outputs.iter().zip(&targets) {
            let pred = p.head.forward(o)?;
            let (l, mut dl) = mse(&pred, y)?;
            loss += l / steps;
            dl.scale(1.0 / steps);
            d_out.push(Some(p.head.backward(o, &dl, &mut g.head)?));
        }
        let (_, d_init) = p.decoder.backward_seq(&d.cache, &d_out, None, &mut g.decoder)?;
        backprop_encoder(p, &e.cache, enc_steps(observed), &d_init, &mut g)?;
        Ok((loss, g))
    }

    /// Autoregressive eval-mode rollout of `future_len` points.
    pub fn rollout(&self, observed: &[&[Point2]], future_len: usize) -> Result<Vec<Vec<Point2>>> {
        if future_len == 0 {
            return Err(Error::InvalidInput("future length must be positive".into()));
        }
        let enc = self.encode(observed)?;
        let p = &self.params;
        let e = p.encoder.forward_seq(&enc.enc_in, None, 0.0, None)?;
        let mut state: LstmState = e.state;
        let mut input = enc.dec_first;
        let mut pos = enc.anchor.clone();
        let mut out: Vec<Vec<Point2>> = vec![Vec::with_capacity(future_len); observed.len()];
        for _ in 0..future_len {
            let (h, next) = p.decoder.step(&input, &state)?;
            state = next;
            let y = p.head.forward(&h)?;
            for (i, o) in out.iter_mut().enumerate() {
                let v = Point2::new(y.at(i, 0), y.at(i, 1));
                pos[i] = if self.offsets {
                    Point2::new(pos[i].x + v.x, pos[i].y + v.y)
                } else {
                    v
                };
                o.push(self.norm.invert(pos[i]));
            }
            input = y;
        }
        Ok(out)
    }

    pub fn predict_one(&self, observed: &[Point2], future_len: usize) -> Result<Vec<Point2>> {
        Ok(self.rollout(&[observed], future_len)?.remove(0))
    }
}

fn enc_last_offsets(normed: &[Vec<Point2>]) -> Vec<Point2> {
    normed
        .iter()
        .map(|o| {
            let n = o.len();
            if n < 2 {
                Point2::default()
            } else {
                sub(o[n - 1], o[n - 2])
            }
        })
        .collect()
}

fn enc_steps(observed: &[&[Point2]]) -> usize {
    observed[0].len()
}

fn backprop_encoder(p: &DatpParams, cache: &SeqCache, steps: usize, d_final: &LstmState, g: &mut DatpParams) -> Result<()> {
    let none = vec![None; steps];
    p.encoder.backward_seq(cache, &none, Some(d_final), &mut g.encoder)?;
    Ok(())
}

/// Trains one predictor on the given observed/future pairs.
pub fn train_model(
    cluster: usize,
    observed: &[&[Point2]],
    future: &[&[Point2]],
    cfg: &DatpConfig,
    norm: Normalizer,
    seed: u64,
) -> Result<DatpModel> {
    cfg.validate()?;
    if observed.is_empty() {
        return Err(Error::InvalidInput(format!("cluster {cluster} has no training trajectories")));
    }
    if observed.len() != future.len() {
        return Err(Error::Shape("observed and future counts differ".into()));
    }
    let mut model = DatpModel::new(cluster, cfg, norm, seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let idx: Vec<usize> = (0..observed.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66);
    for epoch in 0..cfg.epochs {
        let batches = if idx.len() < 2 {
            vec![idx.clone()]
        } else {
            minibatches(&idx, cfg.batch_size, &mut shuffle)
        };
        let mut total = 0.0;
        for (b, bi) in batches.iter().enumerate() {
            let obs: Vec<&[Point2]> = bi.iter().map(|&i| observed[i]).collect();
            let fut: Vec<&[Point2]> = bi.iter().map(|&i| future[i]).collect();
            let dseed = seed
                .wrapping_add((epoch as u64) << 32)
                .wrapping_add(b as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let (l, g) = model.loss_and_grad(&obs, &fut, Some(dseed))?;
            opt.step(&mut model.params, &g);
            total += l * bi.len() as f64;
        }
        model.loss_trace.push(total / idx.len() as f64);
    }
    Ok(model)
}

/// One predictor per cluster, sharing a normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DatpSet {
    pub models: BTreeMap<usize, DatpModel>,
    pub norm: Normalizer,
    pub future_len: usize,
}

/// Trains one predictor per label in `0..k` from the samples in `idx`.
/// Clusters train independently and in parallel; each gets its own seed.
pub fn train_cluster_models(
    observed: &[Vec<Point2>],
    future: &[Vec<Point2>],
    labels: &[usize],
    idx: &[usize],
    k: usize,
    cfg: &DatpConfig,
    norm: Normalizer,
    seed: u64,
) -> Result<DatpSet> {
    let future_len = idx.first().map(|&i| future[i].len()).unwrap_or(0);
    let models: Result<Vec<DatpModel>> = (0..k)
        .into_par_iter()
        .map(|c| {
            let members: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == c).collect();
            let obs: Vec<&[Point2]> = members.iter().map(|&i| observed[i].as_slice()).collect();
            let fut: Vec<&[Point2]> = members.iter().map(|&i| future[i].as_slice()).collect();
            train_model(c, &obs, &fut, cfg, norm, crate::harness::derive_seed(seed, c as u64))
                .context(|| format!("training predictor for cluster {c}"))
        })
        .collect();
    Ok(DatpSet {
        models: models?.into_iter().map(|m| (m.cluster, m)).collect(),
        norm,
        future_len,
    })
}

impl DatpSet {
    pub fn model(&self, label: usize) -> Result<&DatpModel> {
        self.models
            .get(&label)
            .ok_or_else(|| Error::InvalidInput(format!("no predictor for label {label}")))
    }

    /// Rollout from the predictor selected by `label`.
    pub fn predict_trajectory(&self, observed: &[Point2], label: usize) -> Result<Vec<Point2>> {
        self.model(label)?.predict_one(observed, self.future_len)
    }

    /// Batched dispatch: samples are grouped by label, rolled out, and
    /// returned in input order.
    pub fn predict_batch(&self, observed: &[&[Point2]], labels: &[usize]) -> Result<Vec<Vec<Point2>>> {
        if observed.len() != labels.len() {
            return Err(Error::Shape("observed and label counts differ".into()));
        }
        let mut out = vec![Vec::new(); observed.len()];
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        for (label, members) in groups {
            let obs: Vec<&[Point2]> = members.iter().map(|&i| observed[i]).collect();
            let paths = self.model(label)?.rollout(&obs, self.future_len)?;
            for (i, p) in members.into_iter().zip(paths) {
                out[i] = p;
            }
        }
        Ok(out)
    }

    pub fn meta(&self, cfg: &DatpConfig) -> DatpMeta {
        DatpMeta {
            clusters: self.models.keys().copied().collect(),
            normalizer: self.norm,
            future_len: self.future_len,
            config: cfg.clone(),
        }
    }

    /// All predictors in one container, prefixed `cluster{k}`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, m) in &self.models {
            c.add_params(&format!("cluster{k}"), &m.params);
        }
        c
    }

    pub fn from_checkpoint(meta: &DatpMeta, ckpt: &Checkpoint) -> Result<Self> {
        let mut models = BTreeMap::new();
        for &k in &meta.clusters {
            let mut m = DatpModel::new(k, &meta.config, meta.normalizer, 0);
            ckpt.restore_params(&format!("cluster{k}"), &mut m.params)?;
            models.insert(k, m);
        }
        Ok(Self {
            models,
            norm: meta.normalizer,
            future_len: meta.future_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DatpMeta {
    pub clusters: Vec<usize>,
    pub normalizer: Normalizer,
    pub future_len: usize,
    pub config: DatpConfig,
}
