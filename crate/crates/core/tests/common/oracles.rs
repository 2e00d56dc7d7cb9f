//! Independent reference implementations for the statistical tests.

/// ln Γ(k/2) for integer k from exact factorial products.
fn ln_gamma_half_int(k: usize) -> f64 {
    if k % 2 == 0 {
        (1..k / 2).map(|i| (i as f64).ln()).sum()
    } else {
        // Γ(1/2) = sqrt(pi), Γ(n + 1/2) = Γ(n - 1/2) (n - 1/2)
        let mut acc = 0.5 * std::f64::consts::PI.ln();
        let mut a = 0.5;
        while a < k as f64 / 2.0 - 0.25 {
            acc += a.ln();
            a += 1.0;
        }
        acc
    }
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// log10 of the chi-square upper tail by adaptive quadrature of the density
/// rescaled by its value at `x`.
pub fn quadrature_log10_sf(x: f64, k: usize) -> f64 {
    let kh = k as f64 / 2.0;
    let ln_pdf = |t: f64| (kh - 1.0) * t.ln() - t / 2.0 - kh * std::f64::consts::LN_2 - ln_gamma_half_int(k);
    let base = ln_pdf(x);
    let g = move |s: f64| ((kh - 1.0) * (1.0 + s / x).ln() - s / 2.0).exp();
    let mut total = 0.0;
    let mut a = 0.0;
    let mut width = (x / 8.0).min(0.5);
    while a < 4000.0 {
        let b = a + width;
        let (fa, fm, fb) = (g(a), g(0.5 * (a + b)), g(b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        let piece = simpson(&g, a, b, fa, fm, fb, whole, 1e-15 * whole.abs().max(1e-300), 40);
        total += piece;
        if piece < 1e-22 * total {
            break;
        }
        a = b;
        width = (width * 1.5).min(2.0);
    }
    (base + total.ln()) / std::f64::consts::LN_10
}

/// Two-sided exact binomial p for `b` vs `c` discordant pairs.
pub fn exact_two_sided(b: u64, c: u64) -> f64 {
    let n = b + c;
    let k = b.min(c);
    // Pascal row in f64, exact for n < 60
    let mut row = vec![1.0f64];
    for _ in 0..n {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let tail: f64 = row[..=k as usize].iter().sum::<f64>() / 2f64.powi(n as i32);
    (2.0 * tail).min(1.0)
}

/// One-sided p of U(x) <= observed over every relabelling of the pooled sample.
pub fn permutation_p(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).cloned().collect();
    let n = pooled.len();
    let m = x.len();
    let u_of = |sel: &[usize]| -> f64 {
        let mut u = 0.0;
        for &i in sel {
            for j in 0..n {
                if sel.contains(&j) {
                    continue;
                }
                if pooled[i] > pooled[j] {
                    u += 1.0;
                } else if pooled[i] == pooled[j] {
                    u += 0.5;
                }
            }
        }
        u
    };
    let obs = u_of(&(0..m).collect::<Vec<_>>());
    let mut le = 0u64;
    let mut total = 0u64;
    let mut sel: Vec<usize> = (0..m).collect();
    loop {
        total += 1;
        if u_of(&sel) <= obs + 1e-9 {
            le += 1;
        }
        // next combination
        let mut i = m;
        loop {
            if i == 0 {
                return le as f64 / total as f64;
            }
            i -= 1;
            if sel[i] < n - m + i {
                break;
            }
        }
        sel[i] += 1;
        for j in i + 1..m {
            sel[j] = sel[j - 1] + 1;
        }
    }
}

