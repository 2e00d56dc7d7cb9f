//! Dense, batch-norm, elementwise activations, softmax and the weather-time
//! embedding, each with an analytic backward pass.

use rand::Rng;

use super::tensor::{gemm, matmul, Op, Tensor};
use super::ParamSet;
use crate::data::{ConditionCode, ConditionSpace};
use crate::error::{Error, Result};

/// Fully connected layer `y = x W^T (+ b)`, `W` stored as (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Dense {
    /// Uniform init in `±1/sqrt(fan_in)`.
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self {
            w: Tensor::uniform(&[out_dim, in_dim], bound, rng),
            b: bias.then(|| Tensor::uniform(&[out_dim], bound, rng)),
        }
    }

    pub fn from_weights(w: Tensor, b: Option<Tensor>) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::Shape("dense weights must be a matrix".into()));
        }
        if let Some(b) = &b {
            if b.len() != w.rows() {
                return Err(Error::Shape(format!("bias of {} for {} outputs", b.len(), w.rows())));
            }
        }
        Ok(Self { w, b })
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut y = matmul(x, Op::N, &self.w, Op::T)?;
        if let Some(b) = &self.b {
            for i in 0..y.rows() {
                for (v, bb) in y.row_mut(i).iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Dense) -> Result<Tensor> {
        gemm(1.0, dy, Op::T, x, Op::N, 1.0, &mut grad.w)?;
        if let (Some(gb), Some(_)) = (grad.b.as_mut(), self.b.as_ref()) {
            gb.add_assign(&dy.sum_rows());
        }
        matmul(dy, Op::N, &self.w, Op::N)
    }
}

impl ParamSet for Dense {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(format!("{prefix}.b"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(format!("{prefix}.b"), b);
        }
    }
}

/// Learnable per-feature scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Running statistics used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BnStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[features]),
            var: Tensor::filled(&[features], 1.0),
        }
    }

    /// Exponential update from a train-mode batch, unbiased variance.
    pub fn update(&mut self, cache: &BnCache, momentum: f64) {
        let n = cache.xhat.rows() as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (j, (m, v)) in self
            .mean
            .data_mut()
            .iter_mut()
            .zip(self.var.data_mut().iter_mut())
            .enumerate()
        {
            *m = (1.0 - momentum) * *m + momentum * cache.mean[j];
            *v = (1.0 - momentum) * *v + momentum * cache.var[j] * unbias;
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.running_mean"), &self.mean);
        f(format!("{prefix}.running_var"), &self.var);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.running_mean"), &mut self.mean);
        f(format!("{prefix}.running_var"), &mut self.var);
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub train: bool,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode normalizes by batch statistics (biased variance); eval mode
    /// uses the running statistics.
    pub fn forward(&self, x: &Tensor, stats: &BnStats, train: bool, eps: f64) -> Result<(Tensor, BnCache)> {
        let (n, k) = (x.rows(), x.cols());
        if k != self.features() {
            return Err(Error::Shape(format!("batch norm over {} features, got {k}", self.features())));
        }
        if train && n < 2 {
            return Err(Error::InvalidInput("batch norm in train mode needs a batch of at least 2".into()));
        }
        let (mean, var) = if train {
            let mut mean = vec![0.0; k];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(x.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; k];
            for i in 0..n {
                for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (mean, var)
        } else {
            (stats.mean.data().to_vec(), stats.var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&[n, k]);
        let mut y = Tensor::zeros(&[n, k]);
        for i in 0..n {
            for j in 0..k {
                let h = (x.at(i, j) - mean[j]) * inv_std[j];
                xhat.set(i, j, h);
                y.set(i, j, h * self.gamma.data()[j] + self.beta.data()[j]);
            }
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
                train,
            },
        ))
    }

    pub fn backward(&self, cache: &BnCache, dy: &Tensor, grad: &mut BatchNorm) -> Tensor {
        let (n, k) = (dy.rows(), dy.cols());
        let mut sum_dy = vec![0.0; k];
        let mut sum_dy_xhat = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                sum_dy[j] += dy.at(i, j);
                sum_dy_xhat[j] += dy.at(i, j) * cache.xhat.at(i, j);
            }
        }
        for j in 0..k {
            grad.gamma.data_mut()[j] += sum_dy_xhat[j];
            grad.beta.data_mut()[j] += sum_dy[j];
        }
        let mut dx = Tensor::zeros(&[n, k]);
        let nf = n as f64;
        for i in 0..n {
            for j in 0..k {
                let g = self.gamma.data()[j] * cache.inv_std[j];
                let v = if cache.train {
                    g * (dy.at(i, j) - sum_dy[j] / nf - cache.xhat.at(i, j) * sum_dy_xhat[j] / nf)
                } else {
                    g * dy.at(i, j)
                };
                dx.set(i, j, v);
            }
        }
        dx
    }
}

impl ParamSet for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    y
}

/// Gradient w.r.t. logits given softmax output `p` and `dL/dp`.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let mut dz = Tensor::zeros(p.shape());
    for i in 0..p.rows() {
        let (pr, dr) = (p.row(i), dp.row(i));
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (z, (a, b)) in dz.row_mut(i).iter_mut().zip(pr.iter().zip(dr)) {
            *z = a * (b - dot);
        }
    }
    dz
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Backward of tanh given its output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    y.zip_map(dy, |y, d| d * (1.0 - y * y))
}

pub fn sigmoid_scalar(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of the logistic sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    y.zip_map(dy, |y, d| d * y * (1.0 - y))
}

/// Weather-time embedding: the concatenated one-hot pair times a
/// `(C_w + C_d) x D` table, i.e. the sum of one weather row and one time row.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: Tensor,
    pub space: ConditionSpace,
}

impl Embedding {
    pub fn new(space: ConditionSpace, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: Tensor::uniform(&[space.embedding_rows(), dim], 1.0, rng),
            space,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    fn rows_for(&self, c: ConditionCode) -> Result<(usize, usize)> {
        if c.weather >= self.space.weather || c.daypart >= self.space.daypart {
            return Err(Error::InvalidInput(format!("condition {c:?} outside embedding table")));
        }
        Ok((c.weather, self.space.weather + c.daypart))
    }

    pub fn forward(&self, codes: &[ConditionCode]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Tensor::zeros(&[codes.len(), d]);
        for (i, &c) in codes.iter().enumerate() {
            let (w, t) = self.rows_for(c)?;
            let (rw, rt) = (self.table.row(w).to_vec(), self.table.row(t));
            for ((o, a), b) in out.row_mut(i).iter_mut().zip(&rw).zip(rt) {
                *o = a + b;
            }
        }
        Ok(out)
    }

    /// Decodes rows of concatenated one-hot vectors, rejecting anything that is
    /// not exactly one hot per sub-vector.
    pub fn decode_one_hot(&self, onehot: &Tensor) -> Result<Vec<ConditionCode>> {
        let (cw, cd) = (self.space.weather, self.space.daypart);
        if onehot.cols() != cw + cd {
            return Err(Error::Shape(format!("one-hot width {} != {}", onehot.cols(), cw + cd)));
        }
        let pick = |s: &[f64]| -> Option<usize> {
            let mut hot = None;
            for (i, &v) in s.iter().enumerate() {
                if v == 1.0 {
                    if hot.is_some() {
                        return None;
                    }
                    hot = Some(i);
                } else if v != 0.0 {
                    return None;
                }
            }
            hot
        };
        (0..onehot.rows())
            .map(|i| {
                let r = onehot.row(i);
                match (pick(&r[..cw]), pick(&r[cw..])) {
                    (Some(weather), Some(daypart)) => Ok(ConditionCode { weather, daypart }),
                    _ => Err(Error::InvalidInput(format!("row {i} is not a valid one-hot pair"))),
                }
            })
            .collect()
    }

    pub fn forward_one_hot(&self, onehot: &Tensor) -> Result<Tensor> {
        self.forward(&self.decode_one_hot(onehot)?)
    }

    pub fn backward(&self, codes: &[ConditionCode], dy: &Tensor, grad: &mut Embedding) -> Result<()> {
        for (i, &c) in codes.iter().enumerate() {
            let (w, t) = self.rows_for(c)?;
            for r in [w, t] {
                for (g, d) in grad.table.row_mut(r).iter_mut().zip(dy.row(i)) {
                    *g += d;
                }
            }
        }
        Ok(())
    }
}

impl ParamSet for Embedding {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.table"), &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.table"), &mut self.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_and_hand_case() {
        let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let id = Dense::from_weights(Tensor::identity(3), None).unwrap();
        assert_eq!(id.forward(&x).unwrap(), x);
        let d = Dense::from_weights(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap(), None).unwrap();
        let y = d.forward(&Tensor::matrix(1, 2, vec![1., 1.]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3., 7.]);
        assert!(d.forward(&x).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax(&Tensor::matrix(1, 4, vec![0.3; 4]).unwrap());
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = softmax(&Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let z = Tensor::matrix(1, 3, vec![0.1, -2.0, 1.3]).unwrap();
        let shifted = softmax(&z.map(|v| v + 1000.0));
        for (a, b) in softmax(&z).data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_basic() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let x = Tensor::matrix(1, 3, vec![-1.5, 0.0, 2.0]).unwrap();
        let t = tanh(&x);
        let tn = tanh(&x.map(|v| -v));
        assert_eq!(t.data()[1], 0.0);
        for (a, b) in t.data().iter().zip(tn.data()) {
            assert_eq!(*a, -*b);
        }
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn batch_norm_standardized_input_passes_through() {
        let x = Tensor::matrix(4, 1, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let bn = BatchNorm::new(1);
        let (y, _) = bn.forward(&x, &BnStats::new(1), true, BN_EPS).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_constant_column_gives_shift() {
        let x = Tensor::matrix(3, 2, vec![4.0, 1.0, 4.0, 2.0, 4.0, 3.0]).unwrap();
        let mut bn = BatchNorm::new(2);
        bn.beta = Tensor::from_vec(&[2], vec![0.7, 0.0]).unwrap();
        let (y, _) = bn.forward(&x, &BnStats::new(2), true, BN_EPS).unwrap();
        for i in 0..3 {
            assert!((y.at(i, 0) - 0.7).abs() < 1e-12);
        }
        let single = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(bn.forward(&single, &BnStats::new(2), true, BN_EPS).is_err());
        assert!(bn.forward(&single, &BnStats::new(2), false, BN_EPS).is_ok());
    }

    #[test]
    fn embedding_selects_rows() {
        let space = ConditionSpace::new(2, 2).unwrap();
        let table = Tensor::matrix(4, 2, vec![1., 2., 10., 20., 100., 200., 1000., 2000.]).unwrap();
        let e = Embedding { table, space };
        let out = e.forward(&[ConditionCode { weather: 0, daypart: 1 }]).unwrap();
        assert_eq!(out.data(), &[1001., 2002.]);
        let zero = Embedding {
            table: Tensor::zeros(&[4, 3]),
            space,
        };
        assert!(zero.forward(&[ConditionCode { weather: 1, daypart: 0 }]).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = Tensor::matrix(1, 4, vec![1., 1., 0., 1.]).unwrap();
        assert!(e.forward_one_hot(&bad).is_err());
        let bad = Tensor::matrix(1, 4, vec![1., 0., 0., 0.]).unwrap();
        assert!(e.forward_one_hot(&bad).is_err());
        let good = Tensor::matrix(1, 4, vec![0., 1., 1., 0.]).unwrap();
        assert_eq!(e.forward_one_hot(&good).unwrap().data(), &[110., 220.]);
    }
}
