//! Forget-gate LSTM cell, stacked sequence unrolling with inter-layer
//! dropout, and backpropagation through time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::sigmoid_scalar;
use super::tensor::{gemm, matmul, Op, Tensor};
use super::ParamSet;
use crate::error::{Error, Result};

/// One LSTM layer. Gate blocks in `w_ih`, `w_hh` and `b` are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct CellCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    i: Tensor,
    f: Tensor,
    g: Tensor,
    o: Tensor,
    tanh_c: Tensor,
}

impl LstmLayer {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Tensor::uniform(&[4 * hidden, in_dim], bound, rng),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], bound, rng),
            b: Tensor::uniform(&[4 * hidden], bound, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn cell_forward(&self, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor, CellCache)> {
        let hd = self.hidden();
        let n = x.rows();
        if x.cols() != self.in_dim() || h_prev.cols() != hd || c_prev.cols() != hd || h_prev.rows() != n || c_prev.rows() != n {
            return Err(Error::Shape(format!(
                "lstm cell expects x (N,{}) and state (N,{hd}), got x {:?}, h {:?}, c {:?}",
                self.in_dim(),
                x.shape(),
                h_prev.shape(),
                c_prev.shape()
            )));
        }
        let mut gates = matmul(x, Op::N, &self.w_ih, Op::T)?;
        gemm(1.0, h_prev, Op::N, &self.w_hh, Op::T, 1.0, &mut gates)?;
        let mut i = Tensor::zeros(&[n, hd]);
        let mut f = Tensor::zeros(&[n, hd]);
        let mut g = Tensor::zeros(&[n, hd]);
        let mut o = Tensor::zeros(&[n, hd]);
        let mut c = Tensor::zeros(&[n, hd]);
        let mut h = Tensor::zeros(&[n, hd]);
        let mut tanh_c = Tensor::zeros(&[n, hd]);
        let b = self.b.data();
        for r in 0..n {
            let gr = gates.row(r);
            for j in 0..hd {
                let iv = sigmoid_scalar(gr[j] + b[j]);
                let fv = sigmoid_scalar(gr[hd + j] + b[hd + j]);
                let gv = (gr[2 * hd + j] + b[2 * hd + j]).tanh();
                let ov = sigmoid_scalar(gr[3 * hd + j] + b[3 * hd + j]);
                let cv = fv * c_prev.at(r, j) + iv * gv;
                let tc = cv.tanh();
                i.set(r, j, iv);
                f.set(r, j, fv);
                g.set(r, j, gv);
                o.set(r, j, ov);
                c.set(r, j, cv);
                tanh_c.set(r, j, tc);
                h.set(r, j, ov * tc);
            }
        }
        let cache = CellCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            i,
            f,
            g,
            o,
            tanh_c,
        };
        Ok((h, c, cache))
    }

    /// Returns `(dx, dh_prev, dc_prev)` and accumulates weight gradients.
    pub fn cell_backward(&self, cache: &CellCache, dh: &Tensor, dc: &Tensor, grad: &mut LstmLayer) -> Result<(Tensor, Tensor, Tensor)> {
        let hd = self.hidden();
        let n = dh.rows();
        let mut dgates = Tensor::zeros(&[n, 4 * hd]);
        let mut dc_prev = Tensor::zeros(&[n, hd]);
        for r in 0..n {
            for j in 0..hd {
                let (iv, fv, gv, ov, tc) = (
                    cache.i.at(r, j),
                    cache.f.at(r, j),
                    cache.g.at(r, j),
                    cache.o.at(r, j),
                    cache.tanh_c.at(r, j),
                );
                let dhv = dh.at(r, j);
                let dct = dc.at(r, j) + dhv * ov * (1.0 - tc * tc);
                let row = dgates.row_mut(r);
                row[j] = dct * gv * iv * (1.0 - iv);
                row[hd + j] = dct * cache.c_prev.at(r, j) * fv * (1.0 - fv);
                row[2 * hd + j] = dct * iv * (1.0 - gv * gv);
                row[3 * hd + j] = dhv * tc * ov * (1.0 - ov);
                dc_prev.set(r, j, dct * fv);
            }
        }
        gemm(1.0, &dgates, Op::T, &cache.x, Op::N, 1.0, &mut grad.w_ih)?;
        gemm(1.0, &dgates, Op::T, &cache.h_prev, Op::N, 1.0, &mut grad.w_hh)?;
        grad.b.add_assign(&dgates.sum_rows());
        let dx = matmul(&dgates, Op::N, &self.w_ih, Op::N)?;
        let dh_prev = matmul(&dgates, Op::N, &self.w_hh, Op::N)?;
        Ok((dx, dh_prev, dc_prev))
    }
}

impl ParamSet for LstmLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w_ih"), &self.w_ih);
        f(format!("{prefix}.w_hh"), &self.w_hh);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_ih"), &mut self.w_ih);
        f(format!("{prefix}.w_hh"), &mut self.w_hh);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Per-layer hidden and cell states.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl LstmState {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        Self {
            h: vec![Tensor::zeros(&[batch, hidden]); layers],
            c: vec![Tensor::zeros(&[batch, hidden]); layers],
        }
    }
}

/// Stacked LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

#[derive(Debug, Clone)]
pub struct SeqCache {
    /// `cells[t][layer]`
    cells: Vec<Vec<CellCache>>,
    /// `masks[t][layer]` applied to the output of `layer` before `layer + 1`.
    masks: Vec<Vec<Option<Tensor>>>,
}

pub struct SeqOutput {
    /// Top-layer hidden state at every step.
    pub outputs: Vec<Tensor>,
    pub state: LstmState,
    pub cache: SeqCache,
}

impl Lstm {
    pub fn new(in_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..layers)
            .map(|l| LstmLayer::new(if l == 0 { in_dim } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Unrolls over `xs`. Dropout with probability `dropout` is applied between
    /// stacked layers only when `rng` is given (train mode).
    pub fn forward_seq(&self, xs: &[Tensor], init: Option<&LstmState>, dropout: f64, mut rng: Option<&mut ChaCha8Rng>) -> Result<SeqOutput> {
        let n = xs.first().map_or(0, Tensor::rows);
        let hd = self.hidden();
        let mut state = match init {
            Some(s) => s.clone(),
            None => LstmState::zeros(self.depth(), n, hd),
        };
        if state.h.len() != self.depth() {
            return Err(Error::Shape("initial state depth mismatch".into()));
        }
        let mut outputs = Vec::with_capacity(xs.len());
        let mut cells = Vec::with_capacity(xs.len());
        let mut masks = Vec::with_capacity(xs.len());
        for x in xs {
            let mut input = x.clone();
            let mut step_cells = Vec::with_capacity(self.depth());
            let mut step_masks = Vec::with_capacity(self.depth());
            for (l, layer) in self.layers.iter().enumerate() {
                let (h, c, cache) = layer.cell_forward(&input, &state.h[l], &state.c[l])?;
                step_cells.push(cache);
                input = h.clone();
                let mask = match rng.as_deref_mut() {
                    Some(r) if dropout > 0.0 && l + 1 < self.depth() => {
                        let keep = 1.0 - dropout;
                        let m = Tensor::from_vec(
                            h.shape(),
                            (0..h.len())
                                .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                                .collect(),
                        )?;
                        input = input.zip_map(&m, |a, b| a * b);
                        Some(m)
                    }
                    _ => None,
                };
                step_masks.push(mask);
                state.h[l] = h;
                state.c[l] = c;
            }
            outputs.push(input);
            cells.push(step_cells);
            masks.push(step_masks);
        }
        Ok(SeqOutput {
            outputs,
            state,
            cache: SeqCache { cells, masks },
        })
    }

    /// Single eval-mode step.
    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<(Tensor, LstmState)> {
        let mut next = state.clone();
        let mut input = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (h, c, _) = layer.cell_forward(&input, &state.h[l], &state.c[l])?;
            input = h.clone();
            next.h[l] = h;
            next.c[l] = c;
        }
        Ok((input, next))
    }

    /// Backpropagation through time. `d_outputs[t]` is the gradient w.r.t. the
    /// top-layer output at step `t` (None for no gradient); `d_final` is the
    /// gradient w.r.t. the final state. Returns input gradients per step and
    /// the gradient w.r.t. the initial state.
    pub fn backward_seq(&self, cache: &SeqCache, d_outputs: &[Option<Tensor>], d_final: Option<&LstmState>, grad: &mut Lstm) -> Result<(Vec<Tensor>, LstmState)> {
        let steps = cache.cells.len();
        if d_outputs.len() != steps {
            return Err(Error::Shape(format!("{} output grads for {steps} steps", d_outputs.len())));
        }
        let n = cache.cells.first().map_or(0, |c| c[0].x.rows());
        let hd = self.hidden();
        let mut carry = match d_final {
            Some(s) => s.clone(),
            None => LstmState::zeros(self.depth(), n, hd),
        };
        let mut dxs = vec![Tensor::zeros(&[0]); steps];
        let top = self.depth() - 1;
        for t in (0..steps).rev() {
            let mut from_above: Option<Tensor> = d_outputs[t].clone();
            for l in (0..=top).rev() {
                let mut dh = carry.h[l].clone();
                if let Some(a) = &from_above {
                    let a = match (&cache.masks[t][l], l == top) {
                        // the top layer's output mask is never set
                        (Some(m), false) => a.zip_map(m, |g, k| g * k),
                        _ => a.clone(),
                    };
                    dh.add_assign(&a);
                }
                let (dx, dh_prev, dc_prev) = self.layers[l].cell_backward(&cache.cells[t][l], &dh, &carry.c[l], &mut grad.layers[l])?;
                carry.h[l] = dh_prev;
                carry.c[l] = dc_prev;
                if l == 0 {
                    dxs[t] = dx;
                } else {
                    from_above = Some(dx);
                }
            }
        }
        Ok((dxs, carry))
    }
}

impl ParamSet for Lstm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.l{l}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.l{l}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_give_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lstm = Lstm::new(2, 3, 2, &mut rng);
        for l in &mut lstm.layers {
            l.w_ih.fill(0.0);
            l.w_hh.fill(0.0);
            l.b.fill(0.0);
        }
        let xs: Vec<Tensor> = (0..5).map(|t| Tensor::filled(&[2, 2], t as f64)).collect();
        let out = lstm.forward_seq(&xs, None, 0.0, None).unwrap();
        for h in &out.outputs {
            assert!(h.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalar_cell_matches_hand_evaluation() {
        let layer = LstmLayer {
            w_ih: Tensor::matrix(4, 1, vec![0.5, -0.3, 0.8, 0.1]).unwrap(),
            w_hh: Tensor::matrix(4, 1, vec![0.2, 0.4, -0.6, 0.7]).unwrap(),
            b: Tensor::from_vec(&[4], vec![0.1, 0.2, 0.0, -0.1]).unwrap(),
        };
        let (x, h0, c0) = (1.5, -0.4, 0.3);
        let s = |u: f64| 1.0 / (1.0 + (-u).exp());
        let i = s(0.5 * x + 0.2 * h0 + 0.1);
        let f = s(-0.3 * x + 0.4 * h0 + 0.2);
        let g = (0.8 * x - 0.6 * h0).tanh();
        let o = s(0.1 * x + 0.7 * h0 - 0.1);
        let c = f * c0 + i * g;
        let h = o * c.tanh();
        let t = |v: f64| Tensor::matrix(1, 1, vec![v]).unwrap();
        let (hh, cc, _) = layer.cell_forward(&t(x), &t(h0), &t(c0)).unwrap();
        assert!((hh.data()[0] - h).abs() < 1e-15);
        assert!((cc.data()[0] - c).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = LstmLayer::new(2, 3, &mut rng);
        let bad = layer.cell_forward(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3]));
        assert!(bad.is_err());
    }

    #[test]
    fn step_matches_unrolled_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lstm = Lstm::new(2, 4, 2, &mut rng);
        let xs: Vec<Tensor> = (0..6).map(|_| Tensor::uniform(&[3, 2], 1.0, &mut rng)).collect();
        let seq = lstm.forward_seq(&xs, None, 0.5, None).unwrap();
        let mut state = LstmState::zeros(2, 3, 4);
        for (x, want) in xs.iter().zip(&seq.outputs) {
            let (h, s) = lstm.step(x, &state).unwrap();
            assert_eq!(&h, want);
            state = s;
        }
    }
}
