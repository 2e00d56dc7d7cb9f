//! Central finite-difference gradient checking.

use super::ParamSet;

pub const FD_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xv = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xv[i];
            xv[i] = orig + FD_STEP;
            let fp = f(&xv);
            xv[i] = orig - FD_STEP;
            let fm = f(&xv);
            xv[i] = orig;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn grad_check(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let numeric = numeric_grad(f, x);
    max_rel_error(analytic, &numeric)
}

/// Perturbs every trainable element of `params` and compares the resulting
/// central differences of `loss` with `analytic` (same layout as `params`).
pub fn check_params<P: ParamSet + Clone>(params: &P, loss: &dyn Fn(&P) -> f64, analytic: &P) -> f64 {
    let mut grads: Vec<f64> = Vec::new();
    analytic.visit("", &mut |_, t| grads.extend_from_slice(t.data()));
    let mut work = params.clone();
    let mut numeric = Vec::with_capacity(grads.len());
    let count = {
        let mut c = Vec::new();
        params.visit("", &mut |_, t| c.push(t.len()));
        c
    };
    for (ti, &len) in count.iter().enumerate() {
        for j in 0..len {
            let mut orig = 0.0;
            nudge(&mut work, ti, j, |v| {
                orig = *v;
                *v += FD_STEP;
            });
            let fp = loss(&work);
            nudge(&mut work, ti, j, |v| *v = orig - FD_STEP);
            let fm = loss(&work);
            nudge(&mut work, ti, j, |v| *v = orig);
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    max_rel_error(&grads, &numeric)
}

fn nudge<P: ParamSet>(p: &mut P, tensor: usize, elem: usize, mut f: impl FnMut(&mut f64)) {
    let mut i = 0;
    p.visit_mut("", &mut |_, t| {
        if i == tensor {
            f(&mut t.data_mut()[elem]);
        }
        i += 1;
    });
}
