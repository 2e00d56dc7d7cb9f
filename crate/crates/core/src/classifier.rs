//! Intended-destination classifier: a stacked LSTM encoder, a preliminary
//! dense + batch-norm + softmax head, a gated multimodal unit fusing the
//! preliminary probabilities with the weather-time embedding, and a final
//! dense + batch-norm + softmax head. Both heads are trained jointly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::cluster::LabeledDataset;
use crate::data::{ConditionCode, ConditionSpace, Normalizer, Point2};
use crate::error::{Error, Result};
use crate::kernels::layers::{
    sigmoid, sigmoid_backward, softmax, softmax_backward, tanh, tanh_backward, BnCache, BN_EPS,
    BN_MOMENTUM,
};
use crate::kernels::lstm::SeqCache;
use crate::kernels::{
    focal_loss, Adam, BatchNorm, BnStats, Checkpoint, Dense, Embedding, LossConfig, Lstm,
    ParamSet, Tensor,
};

/// What the fusion gate looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// `[h_v; h_e]`, width `2M`.
    #[default]
    Hidden,
    /// `[p_pre; e_wt]`, width `K + E`.
    Literal,
}

/// Whether the weather-time branch is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Gate forced to one: the fused vector is `h_v` and conditions are ignored.
    Bypass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub fusion_dim: usize,
    pub dropout: f64,
    pub gate_input: GateInput,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            embed_dim: 128,
            fusion_dim: 128,
            dropout: 0.5,
            gate_input: GateInput::Hidden,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.embed_dim == 0 || self.fusion_dim == 0 {
            return Err(Error::Config("classifier dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Gated multimodal unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmu {
    pub w_v: Dense,
    pub w_e: Dense,
    pub w_3: Dense,
    pub gate_input: GateInput,
}

#[derive(Debug, Clone)]
pub struct GmuCache {
    pub p: Tensor,
    pub e: Option<Tensor>,
    pub h_v: Tensor,
    pub h_e: Tensor,
    pub gate_in: Option<Tensor>,
    pub z: Tensor,
    pub f_fuse: Tensor,
}

impl Gmu {
    pub fn new(k: usize, e: usize, m: usize, gate_input: GateInput, rng: &mut ChaCha8Rng) -> Self {
        let gate_dim = match gate_input {
            GateInput::Hidden => 2 * m,
            GateInput::Literal => k + e,
        };
        Self {
            w_v: Dense::new(k, m, false, rng),
            w_e: Dense::new(e, m, false, rng),
            w_3: Dense::new(gate_dim, m, false, rng),
            gate_input,
        }
    }

    /// `e = None` runs the bypass: `z = 1`, `f_fuse = h_v`.
    pub fn forward(&self, p: &Tensor, e: Option<&Tensor>) -> Result<GmuCache> {
        let h_v = tanh(&self.w_v.forward(p)?);
        let Some(e) = e else {
            return Ok(GmuCache {
                p: p.clone(),
                e: None,
                h_e: h_v.zeros_like(),
                gate_in: None,
                z: Tensor::filled(h_v.shape(), 1.0),
                f_fuse: h_v.clone(),
                h_v,
            });
        };
        if e.rows() != p.rows() {
            return Err(Error::Shape(format!("gmu: {} vs {} rows", p.rows(), e.rows())));
        }
        let h_e = tanh(&self.w_e.forward(e)?);
        let gate_in = match self.gate_input {
            GateInput::Hidden => Tensor::concat_cols(&h_v, &h_e)?,
            GateInput::Literal => Tensor::concat_cols(p, e)?,
        };
        let z = sigmoid(&self.w_3.forward(&gate_in)?);
        let mut f_fuse = h_v.zeros_like();
        for ((f, &zz), (&a, &b)) in f_fuse
            .data_mut()
            .iter_mut()
            .zip(z.data())
            .zip(h_v.data().iter().zip(h_e.data()))
        {
            *f = zz * a + (1.0 - zz) * b;
        }
        Ok(GmuCache {
            p: p.clone(),
            e: Some(e.clone()),
            h_v,
            h_e,
            gate_in: Some(gate_in),
            z,
            f_fuse,
        })
    }

    /// Returns gradients w.r.t. `p` and `e` (the latter zero under bypass).
    pub fn backward(&self, c: &GmuCache, d_fuse: &Tensor, grad: &mut Gmu) -> Result<(Tensor, Tensor)> {
        let mut dh_v = d_fuse.zip_map(&c.z, |d, z| d * z);
        let mut dp = c.p.zeros_like();
        let Some(e) = &c.e else {
            let du_v = tanh_backward(&c.h_v, &dh_v);
            dp.add_assign(&self.w_v.backward(&c.p, &du_v, &mut grad.w_v)?);
            return Ok((dp, Tensor::zeros(&[c.p.rows(), self.w_e.in_dim()])));
        };
        let mut dh_e = d_fuse.zip_map(&c.z, |d, z| d * (1.0 - z));
        let mut dz = d_fuse.clone();
        for ((g, &a), &b) in dz.data_mut().iter_mut().zip(c.h_v.data()).zip(c.h_e.data()) {
            *g *= a - b;
        }
        let du3 = sigmoid_backward(&c.z, &dz);
        let gate_in = c.gate_in.as_ref().expect("gate input cached when e is present");
        let dgate = self.w_3.backward(gate_in, &du3, &mut grad.w_3)?;
        let mut de = e.zeros_like();
        match self.gate_input {
            GateInput::Hidden => {
                let (a, b) = dgate.split_cols(c.h_v.cols());
                dh_v.add_assign(&a);
                dh_e.add_assign(&b);
            }
            GateInput::Literal => {
                let (a, b) = dgate.split_cols(c.p.cols());
                dp.add_assign(&a);
                de.add_assign(&b);
            }
        }
        let du_v = tanh_backward(&c.h_v, &dh_v);
        dp.add_assign(&self.w_v.backward(&c.p, &du_v, &mut grad.w_v)?);
        let du_e = tanh_backward(&c.h_e, &dh_e);
        de.add_assign(&self.w_e.backward(e, &du_e, &mut grad.w_e)?);
        Ok((dp, de))
    }
}

impl ParamSet for Gmu {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.w_v.visit(&format!("{prefix}.w_v"), f);
        self.w_e.visit(&format!("{prefix}.w_e"), f);
        self.w_3.visit(&format!("{prefix}.w_3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.w_v.visit_mut(&format!("{prefix}.w_v"), f);
        self.w_e.visit_mut(&format!("{prefix}.w_e"), f);
        self.w_3.visit_mut(&format!("{prefix}.w_3"), f);
    }
}

/// Trainable parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct WttfParams {
    pub encoder: Lstm,
    pub pre_fc: Dense,
    pub pre_bn: BatchNorm,
    pub embed: Embedding,
    pub gmu: Gmu,
    pub final_fc: Dense,
    pub final_bn: BatchNorm,
}

impl WttfParams {
    pub fn new(k: usize, space: ConditionSpace, cfg: &ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Lstm::new(2, cfg.hidden, cfg.layers, &mut rng);
        let pre_fc = Dense::new(cfg.hidden, k, false, &mut rng);
        let embed = Embedding::new(space, cfg.embed_dim, &mut rng);
        let gmu = Gmu::new(k, cfg.embed_dim, cfg.fusion_dim, cfg.gate_input, &mut rng);
        let final_fc = Dense::new(cfg.fusion_dim, k, false, &mut rng);
        Self {
            encoder,
            pre_fc,
            pre_bn: BatchNorm::new(k),
            embed,
            gmu,
            final_fc,
            final_bn: BatchNorm::new(k),
        }
    }

    pub fn k(&self) -> usize {
        self.pre_fc.out_dim()
    }
}

impl ParamSet for WttfParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&format!("{prefix}encoder"), f);
        self.pre_fc.visit(&format!("{prefix}pre_fc"), f);
        self.pre_bn.visit(&format!("{prefix}pre_bn"), f);
        self.embed.visit(&format!("{prefix}embed"), f);
        self.gmu.visit(&format!("{prefix}gmu"), f);
        self.final_fc.visit(&format!("{prefix}final_fc"), f);
        self.final_bn.visit(&format!("{prefix}final_bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(&format!("{prefix}encoder"), f);
        self.pre_fc.visit_mut(&format!("{prefix}pre_fc"), f);
        self.pre_bn.visit_mut(&format!("{prefix}pre_bn"), f);
        self.embed.visit_mut(&format!("{prefix}embed"), f);
        self.gmu.visit_mut(&format!("{prefix}gmu"), f);
        self.final_fc.visit_mut(&format!("{prefix}final_fc"), f);
        self.final_bn.visit_mut(&format!("{prefix}final_bn"), f);
    }
}

/// Running batch-norm statistics of both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct WttfStats {
    pub pre: BnStats,
    pub fin: BnStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub f_base: Tensor,
    /// Preliminary logits (batch-normalized).
    pub f_c: Tensor,
    pub p_pre: Tensor,
    pub e_wt: Option<Tensor>,
    pub gmu: GmuCache,
    /// Final logits (batch-normalized).
    pub f_final: Tensor,
    pub p_final: Tensor,
    codes: Vec<ConditionCode>,
    seq: SeqCache,
    steps: usize,
    pre_bn: BnCache,
    final_bn: BnCache,
}

impl ForwardCache {
    pub fn f_fuse(&self) -> &Tensor {
        &self.gmu.f_fuse
    }

    pub fn z(&self) -> &Tensor {
        &self.gmu.z
    }
}

/// Parameters, running statistics and the input normalization of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub params: WttfParams,
    pub stats: WttfStats,
    pub variant: Variant,
    pub norm: Normalizer,
    pub cfg: ClassifierConfig,
    pub space: ConditionSpace,
    pub seed: u64,
}

/// Serialized alongside the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ClassifierMeta {
    pub k: usize,
    pub weather_count: usize,
    pub daypart_count: usize,
    pub config: ClassifierConfig,
    pub variant: Variant,
    pub normalizer: Normalizer,
    pub seed: u64,
}

impl Classifier {
    pub fn new(k: usize, space: ConditionSpace, cfg: &ClassifierConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if k < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        Ok(Self {
            params: WttfParams::new(k, space, cfg, seed),
            stats: WttfStats {
                pre: BnStats::new(k),
                fin: BnStats::new(k),
            },
            variant: Variant::Full,
            norm,
            cfg: cfg.clone(),
            space,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.params.k()
    }

    /// Same parameters with the weather-time branch switched off.
    pub fn bypass_wt(&self) -> Self {
        Self {
            variant: Variant::Bypass,
            ..self.clone()
        }
    }

    /// Normalized `(x, y)` step inputs, one `N x 2` tensor per time step.
    pub fn encode_inputs(&self, observed: &[&[Point2]]) -> Result<Vec<Tensor>> {
        encode_inputs(&self.norm, observed)
    }

    pub fn forward(&self, inputs: &[Tensor], codes: &[ConditionCode], mode: Mode) -> Result<ForwardCache> {
        forward_with(&self.params, &self.stats, self.variant, self.cfg.dropout, inputs, codes, mode)
    }

    /// Gradients of `dp_pre . p_pre + dp_final . p_final` w.r.t. the parameters.
    pub fn backward(&self, cache: &ForwardCache, dp_pre: &Tensor, dp_final: &Tensor) -> Result<WttfParams> {
        backward_with(&self.params, cache, dp_pre, dp_final)
    }

    /// Eval-mode final probabilities, batched in chunks.
    pub fn predict_proba(&self, observed: &[&[Point2]], codes: &[ConditionCode]) -> Result<Tensor> {
        const CHUNK: usize = 512;
        let k = self.k();
        let mut out = Vec::with_capacity(observed.len() * k);
        for (obs, cds) in observed.chunks(CHUNK).zip(codes.chunks(CHUNK)) {
            let inputs = self.encode_inputs(obs)?;
            let cache = self.forward(&inputs, cds, Mode::Eval)?;
            out.extend_from_slice(cache.p_final.data());
        }
        Tensor::matrix(observed.len(), k, out)
    }

    pub fn predict(&self, observed: &[&[Point2]], codes: &[ConditionCode]) -> Result<Vec<usize>> {
        let p = self.predict_proba(observed, codes)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    pub fn predict_destination(&self, observed: &[Point2], code: ConditionCode) -> Result<usize> {
        Ok(self.predict(&[observed], &[code])?[0])
    }

    pub fn meta(&self) -> ClassifierMeta {
        ClassifierMeta {
            k: self.k(),
            weather_count: self.space.weather,
            daypart_count: self.space.daypart,
            config: self.cfg.clone(),
            variant: self.variant,
            normalizer: self.norm,
            seed: self.seed,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.add_params("", &self.params);
        for (name, s) in [("stats.pre", &self.stats.pre), ("stats.final", &self.stats.fin)] {
            s.visit(name, &mut |n, t| c.insert(n, t.clone()));
        }
        c
    }

    pub fn from_checkpoint(meta: &ClassifierMeta, ckpt: &Checkpoint) -> Result<Self> {
        let space = ConditionSpace::new(meta.weather_count, meta.daypart_count)?;
        let mut m = Self::new(meta.k, space, &meta.config, meta.normalizer, meta.seed)?;
        m.variant = meta.variant;
        ckpt.restore_params("", &mut m.params)?;
        for (name, s) in [("stats.pre", &mut m.stats.pre), ("stats.final", &mut m.stats.fin)] {
            let mut err = None;
            s.visit_mut(name, &mut |n, t| match ckpt.get(&n) {
                Ok(src) if src.shape() == t.shape() => *t = src.clone(),
                Ok(_) => err = Some(Error::Checkpoint(format!("{n}: shape mismatch"))),
                Err(e) => err = Some(e),
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(m)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn encode_inputs(norm: &Normalizer, observed: &[&[Point2]]) -> Result<Vec<Tensor>> {
    let n = observed.len();
    let steps = observed.first().map_or(0, |o| o.len());
    if steps == 0 {
        return Err(Error::InvalidInput("empty observed sequence".into()));
    }
    if observed.iter().any(|o| o.len() != steps) {
        return Err(Error::Shape("observed sequences differ in length".into()));
    }
    (0..steps)
        .map(|t| {
            let mut d = Vec::with_capacity(2 * n);
            for o in observed {
                let p = norm.apply(o[t]);
                d.push(p.x);
                d.push(p.y);
            }
            Tensor::matrix(n, 2, d)
        })
        .collect()
}

pub fn forward_with(
    params: &WttfParams,
    stats: &WttfStats,
    variant: Variant,
    dropout: f64,
    inputs: &[Tensor],
    codes: &[ConditionCode],
    mode: Mode,
) -> Result<ForwardCache> {
    let n = inputs.first().map_or(0, Tensor::rows);
    if inputs.is_empty() || n == 0 {
        return Err(Error::InvalidInput("empty classifier batch".into()));
    }
    if codes.len() != n {
        return Err(Error::Shape(format!("{} conditions for {n} samples", codes.len())));
    }
    let (train, mut rng) = match mode {
        Mode::Train { dropout_seed } => (true, Some(ChaCha8Rng::seed_from_u64(dropout_seed))),
        Mode::Eval => (false, None),
    };
    let seq = params.encoder.forward_seq(inputs, None, dropout, rng.as_mut())?;
    let f_base = seq.outputs.last().expect("non-empty sequence").clone();
    let (f_c, pre_bn) = params.pre_bn.forward(&params.pre_fc.forward(&f_base)?, &stats.pre, train, BN_EPS)?;
    let p_pre = softmax(&f_c);
    let e_wt = match variant {
        Variant::Full => Some(params.embed.forward(codes)?),
        Variant::Bypass => None,
    };
    let gmu = params.gmu.forward(&p_pre, e_wt.as_ref())?;
    let (f_final, final_bn) = params
        .final_bn
        .forward(&params.final_fc.forward(&gmu.f_fuse)?, &stats.fin, train, BN_EPS)?;
    let p_final = softmax(&f_final);
    Ok(ForwardCache {
        f_base,
        f_c,
        p_pre,
        e_wt,
        gmu,
        f_final,
        p_final,
        codes: codes.to_vec(),
        steps: inputs.len(),
        seq: seq.cache,
        pre_bn,
        final_bn,
    })
}

pub fn backward_with(params: &WttfParams, c: &ForwardCache, dp_pre: &Tensor, dp_final: &Tensor) -> Result<WttfParams> {
    let mut g = params.zeroed();
    let d_final_logits = softmax_backward(&c.p_final, dp_final);
    let d_final_lin = params.final_bn.backward(&c.final_bn, &d_final_logits, &mut g.final_bn);
    let d_fuse = params.final_fc.backward(&c.gmu.f_fuse, &d_final_lin, &mut g.final_fc)?;
    let (dp_gmu, de) = params.gmu.backward(&c.gmu, &d_fuse, &mut g.gmu)?;
    if c.e_wt.is_some() {
        params.embed.backward(&c.codes, &de, &mut g.embed)?;
    }
    let mut dp = dp_pre.clone();
    dp.add_assign(&dp_gmu);
    let d_pre_logits = softmax_backward(&c.p_pre, &dp);
    let d_pre_lin = params.pre_bn.backward(&c.pre_bn, &d_pre_logits, &mut g.pre_bn);
    let d_base = params.pre_fc.backward(&c.f_base, &d_pre_lin, &mut g.pre_fc)?;
    let mut d_outputs = vec![None; c.steps];
    d_outputs[c.steps - 1] = Some(d_base);
    params.encoder.backward_seq(&c.seq, &d_outputs, None, &mut g.encoder)?;
    Ok(g)
}

/// Value and probability gradients of the joint objective.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: f64,
    pub pre: f64,
    pub fin: f64,
    pub dp_pre: Tensor,
    pub dp_final: Tensor,
}

/// `(1 - lambda_p) * L(p_final) + lambda_p * L(p_pre)`.
pub fn joint_loss(cache: &ForwardCache, labels: &[usize], cfg: &LossConfig) -> Result<JointLoss> {
    let (pre, mut dp_pre) = focal_loss(&cache.p_pre, labels, cfg)?;
    let (fin, mut dp_final) = focal_loss(&cache.p_final, labels, cfg)?;
    let lp = cfg.lambda_p;
    dp_pre.scale(lp);
    dp_final.scale(1.0 - lp);
    let total = if lp == 0.0 {
        fin
    } else if lp == 1.0 {
        pre
    } else {
        (1.0 - lp) * fin + lp * pre
    };
    Ok(JointLoss {
        total,
        pre,
        fin,
        dp_pre,
        dp_final,
    })
}

/// Observed halves, conditions and labels of a labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub observed: Vec<Vec<Point2>>,
    pub future: Vec<Vec<Point2>>,
    pub codes: Vec<ConditionCode>,
    pub labels: Vec<usize>,
}

impl ExampleSet {
    pub fn from_labeled(ds: &LabeledDataset, obs_len: usize) -> Result<Self> {
        let mut s = Self {
            observed: Vec::with_capacity(ds.len()),
            future: Vec::with_capacity(ds.len()),
            codes: Vec::with_capacity(ds.len()),
            labels: Vec::with_capacity(ds.len()),
        };
        for item in &ds.items {
            let (o, f) = crate::data::split_observed_future(&item.traj, obs_len)?;
            s.observed.push(o.to_vec());
            s.future.push(f.to_vec());
            s.codes.push(item.traj.condition);
            s.labels.push(item.label);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn observed_refs(&self, idx: &[usize]) -> Vec<&[Point2]> {
        idx.iter().map(|&i| self.observed[i].as_slice()).collect()
    }

    pub fn codes_of(&self, idx: &[usize]) -> Vec<ConditionCode> {
        idx.iter().map(|&i| self.codes[i]).collect()
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Normalizer fitted on the observed and future points of `idx`.
    pub fn fit_normalizer(&self, idx: &[usize]) -> Normalizer {
        Normalizer::fit(
            idx.iter()
                .flat_map(|&i| self.observed[i].iter().chain(self.future[i].iter())),
        )
    }
}

/// Shuffled mini-batches of `idx`. A trailing batch of one sample is folded
/// into the previous batch since train-mode batch norm needs two.
pub fn minibatches(idx: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch.max(2)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// One pass over `idx` in seeded mini-batches. Returns the sample-weighted
/// mean joint loss.
pub fn train_epoch(
    model: &mut Classifier,
    opt: &mut Adam,
    data: &ExampleSet,
    idx: &[usize],
    batch: usize,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    if idx.len() < 2 {
        return Err(Error::InvalidInput("training needs at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = minibatches(idx, batch, &mut rng);
    let mut total = 0.0;
    for (b, bi) in batches.iter().enumerate() {
        let inputs = model.encode_inputs(&data.observed_refs(bi))?;
        let codes = data.codes_of(bi);
        let labels = data.labels_of(bi);
        let mode = Mode::Train {
            dropout_seed: seed ^ (b as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        };
        let cache = model.forward(&inputs, &codes, mode)?;
        let jl = joint_loss(&cache, &labels, loss_cfg)?;
        let grads = model.backward(&cache, &jl.dp_pre, &jl.dp_final)?;
        opt.step(&mut model.params, &grads);
        model.stats.pre.update(&cache.pre_bn, BN_MOMENTUM);
        model.stats.fin.update(&cache.final_bn, BN_MOMENTUM);
        total += jl.total * bi.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}
