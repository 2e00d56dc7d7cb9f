//! Finite-difference cases for every kernel. Each returns the worst relative
//! error over its checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wttf_core::classifier::{
    backward_with, encode_inputs, forward_with, joint_loss, ClassifierConfig, GateInput, Gmu, Mode, Variant,
    WttfParams, WttfStats,
};
use wttf_core::data::{ConditionCode, ConditionSpace, Normalizer, Point2};
use wttf_core::kernels::gradcheck::{check_params, grad_check};
use wttf_core::kernels::layers::{sigmoid, sigmoid_backward, softmax, tanh, tanh_backward, BN_EPS};
use wttf_core::kernels::{
    focal_loss_logits, BatchNorm, BnStats, Dense, Embedding, LossConfig, Lstm, LstmState, ParamSet, Tensor,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// `sum(y * r)`; its gradient w.r.t. `y` is `r`.
pub fn dot(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn with_data(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

pub fn dense() -> f64 {
    let layer = Dense::new(5, 8, true, &mut rng(1));
    let x = rand_t(&[4, 5], 2);
    let r = rand_t(&[4, 8], 3);
    let mut g = layer.zeroed();
    let dx = layer.backward(&x, &r, &mut g).unwrap();
    let ep = check_params(&layer, &|p: &Dense| dot(&p.forward(&x).unwrap(), &r), &g);
    let ex = grad_check(&mut |v| dot(&layer.forward(&with_data(&[4, 5], v)).unwrap(), &r), x.data(), dx.data());
    ep.max(ex)
}

/// Training and inference modes.
pub fn batch_norm() -> f64 {
    let mut bn = BatchNorm::new(9);
    bn.gamma = rand_t(&[9], 4).map(|v| v + 1.5);
    bn.beta = rand_t(&[9], 5);
    let stats = BnStats::new(9);
    let x = rand_t(&[16, 9], 6).map(|v| 3.0 * v + 0.5);
    let r = rand_t(&[16, 9], 7);
    let mut worst: f64 = 0.0;
    for train in [true, false] {
        let (_, cache) = bn.forward(&x, &stats, train, BN_EPS).unwrap();
        let mut g = bn.zeroed();
        let dx = bn.backward(&cache, &r, &mut g);
        let ep = check_params(&bn, &|p: &BatchNorm| dot(&p.forward(&x, &stats, train, BN_EPS).unwrap().0, &r), &g);
        let ex = grad_check(
            &mut |v| dot(&bn.forward(&with_data(&[16, 9], v), &stats, train, BN_EPS).unwrap().0, &r),
            x.data(),
            dx.data(),
        );
        worst = worst.max(ep).max(ex);
    }
    worst
}

pub fn tanh_act() -> f64 {
    let x = rand_t(&[3, 7], 8).map(|v| 2.0 * v);
    let r = rand_t(&[3, 7], 9);
    let dt = tanh_backward(&tanh(&x), &r);
    grad_check(&mut |v| dot(&tanh(&with_data(&[3, 7], v)), &r), x.data(), dt.data())
}

pub fn sigmoid_act() -> f64 {
    let x = rand_t(&[3, 7], 8).map(|v| 2.0 * v);
    let r = rand_t(&[3, 7], 9);
    let ds = sigmoid_backward(&sigmoid(&x), &r);
    grad_check(&mut |v| dot(&sigmoid(&with_data(&[3, 7], v)), &r), x.data(), ds.data())
}

/// Softmax followed by focal loss, for several focusing factors.
pub fn softmax_focal() -> f64 {
    let logits = rand_t(&[5, 4], 10).map(|v| 3.0 * v);
    let labels = [0, 3, 1, 1, 2];
    let mut worst: f64 = 0.0;
    for gamma in [0.0, 0.5, 2.0] {
        let cfg = LossConfig {
            gamma,
            beta: vec![0.1, 0.4, 0.3, 0.2],
            lambda_p: 0.5,
        };
        // scaled so the relative check is not dominated by the max(1, .) floor
        let s = 100.0;
        let (_, dz, _) = focal_loss_logits(&logits, &labels, &cfg).unwrap();
        let analytic: Vec<f64> = dz.data().iter().map(|v| v * s).collect();
        let e = grad_check(
            &mut |v| s * focal_loss_logits(&with_data(&[5, 4], v), &labels, &cfg).unwrap().0,
            logits.data(),
            &analytic,
        );
        worst = worst.max(e);
    }
    worst
}

pub fn embedding() -> f64 {
    let space = ConditionSpace::new(3, 2).unwrap();
    let emb = Embedding::new(space, 4, &mut rng(11));
    let codes = [
        ConditionCode { weather: 0, daypart: 1 },
        ConditionCode { weather: 0, daypart: 1 },
        ConditionCode { weather: 2, daypart: 1 },
    ];
    let r = rand_t(&[3, 4], 12);
    let mut g = emb.zeroed();
    emb.backward(&codes, &r, &mut g).unwrap();
    // weather row 1 and daypart row 0 (table row 3) are never selected
    for row in [1, 3] {
        assert!(g.table.row(row).iter().all(|&v| v == 0.0));
    }
    assert!(g.table.row(4).iter().any(|&v| v != 0.0));
    check_params(&emb, &|p: &Embedding| dot(&p.forward(&codes).unwrap(), &r), &g)
}

/// Two layers over twenty steps, with and without dropout; checks weights,
/// inputs at several steps and the initial state.
pub fn lstm() -> f64 {
    let lstm = Lstm::new(2, 5, 2, &mut rng(13));
    let xs: Vec<Tensor> = (0..20).map(|t| rand_t(&[3, 2], 100 + t)).collect();
    let rs: Vec<Tensor> = (0..20).map(|t| rand_t(&[3, 5], 200 + t)).collect();
    let rc = rand_t(&[3, 5], 300);
    let init = LstmState {
        h: vec![rand_t(&[3, 5], 301), rand_t(&[3, 5], 302)],
        c: vec![rand_t(&[3, 5], 303), rand_t(&[3, 5], 304)],
    };
    let mut worst: f64 = 0.0;
    for dropout in [0.0, 0.5] {
        let loss = |p: &Lstm, xs: &[Tensor], init: &LstmState| {
            let mut r = rng(14);
            let out = p.forward_seq(xs, Some(init), dropout, Some(&mut r)).unwrap();
            out.outputs.iter().zip(&rs).map(|(o, r)| dot(o, r)).sum::<f64>() + dot(&out.state.c[1], &rc)
        };
        let mut r = rng(14);
        let out = lstm.forward_seq(&xs, Some(&init), dropout, Some(&mut r)).unwrap();
        let d_out: Vec<Option<Tensor>> = rs.iter().cloned().map(Some).collect();
        let mut d_final = LstmState::zeros(2, 3, 5);
        d_final.c[1] = rc.clone();
        let mut g = lstm.zeroed();
        let (dxs, dinit) = lstm.backward_seq(&out.cache, &d_out, Some(&d_final), &mut g).unwrap();
        worst = worst.max(check_params(&lstm, &|p: &Lstm| loss(p, &xs, &init), &g));
        for t in [0, 7, 19] {
            let e = grad_check(
                &mut |v| {
                    let mut xs2 = xs.clone();
                    xs2[t] = with_data(&[3, 2], v);
                    loss(&lstm, &xs2, &init)
                },
                xs[t].data(),
                dxs[t].data(),
            );
            worst = worst.max(e);
        }
        for l in 0..2 {
            let eh = grad_check(
                &mut |v| {
                    let mut s = init.clone();
                    s.h[l] = with_data(&[3, 5], v);
                    loss(&lstm, &xs, &s)
                },
                init.h[l].data(),
                dinit.h[l].data(),
            );
            let ec = grad_check(
                &mut |v| {
                    let mut s = init.clone();
                    s.c[l] = with_data(&[3, 5], v);
                    loss(&lstm, &xs, &s)
                },
                init.c[l].data(),
                dinit.c[l].data(),
            );
            worst = worst.max(eh).max(ec);
        }
    }
    worst
}

pub fn gmu(gate: GateInput) -> f64 {
    let mut r = rng(15);
    let gmu = Gmu::new(3, 4, 5, gate, &mut r);
    let p = softmax(&rand_t(&[4, 3], 16));
    let e = rand_t(&[4, 4], 17);
    let rf = rand_t(&[4, 5], 18);
    let c = gmu.forward(&p, Some(&e)).unwrap();
    let mut g = gmu.zeroed();
    let (dp, de) = gmu.backward(&c, &rf, &mut g).unwrap();
    let ew = check_params(&gmu, &|m: &Gmu| dot(&m.forward(&p, Some(&e)).unwrap().f_fuse, &rf), &g);
    let ep = grad_check(
        &mut |v| dot(&gmu.forward(&with_data(&[4, 3], v), Some(&e)).unwrap().f_fuse, &rf),
        p.data(),
        dp.data(),
    );
    let ee = grad_check(
        &mut |v| dot(&gmu.forward(&p, Some(&with_data(&[4, 4], v))).unwrap().f_fuse, &rf),
        e.data(),
        de.data(),
    );
    ew.max(ep).max(ee)
}

/// Whole classifier under the joint focal loss, dropout active.
pub fn micro_model(gate: GateInput, variant: Variant) -> f64 {
    let cfg = ClassifierConfig {
        hidden: 6,
        layers: 2,
        embed_dim: 5,
        fusion_dim: 4,
        dropout: 0.5,
        gate_input: gate,
    };
    let space = ConditionSpace::new(2, 2).unwrap();
    let k = 3;
    let mut params = WttfParams::new(k, space, &cfg, 19);
    // non-trivial batch-norm affine parameters
    params.pre_bn.gamma = rand_t(&[k], 20).map(|v| v + 1.5);
    params.final_bn.beta = rand_t(&[k], 21);
    let stats = WttfStats {
        pre: BnStats::new(k),
        fin: BnStats::new(k),
    };
    let obs: Vec<Vec<Point2>> = (0..3)
        .map(|i| {
            (0..8)
                .map(|t| Point2::new((t as f64 * 0.3 + i as f64).sin(), (t as f64 * 0.2 - i as f64).cos()))
                .collect()
        })
        .collect();
    let refs: Vec<&[Point2]> = obs.iter().map(Vec::as_slice).collect();
    let inputs = encode_inputs(&Normalizer::default(), &refs).unwrap();
    let codes = [
        ConditionCode { weather: 0, daypart: 1 },
        ConditionCode { weather: 1, daypart: 1 },
        ConditionCode { weather: 1, daypart: 0 },
    ];
    let labels = [2, 0, 1];
    let loss_cfg = LossConfig {
        gamma: 2.0,
        beta: vec![0.5, 0.3, 0.2],
        lambda_p: 0.5,
    };
    let mode = Mode::Train { dropout_seed: 22 };
    let scale = 100.0;
    let loss = |p: &WttfParams| {
        let c = forward_with(p, &stats, variant, cfg.dropout, &inputs, &codes, mode).unwrap();
        scale * joint_loss(&c, &labels, &loss_cfg).unwrap().total
    };
    let cache = forward_with(&params, &stats, variant, cfg.dropout, &inputs, &codes, mode).unwrap();
    let jl = joint_loss(&cache, &labels, &loss_cfg).unwrap();
    let mut g = backward_with(&params, &cache, &jl.dp_pre, &jl.dp_final).unwrap();
    g.visit_mut("", &mut |_, t| t.scale(scale));
    let largest = g.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(largest > 1e-3, "gradient is degenerate");
    check_params(&params, &loss, &g)
}

/// Every kernel, named.
pub fn suite() -> Vec<(&'static str, f64)> {
    vec![
        ("dense", dense()),
        ("batch norm", batch_norm()),
        ("tanh", tanh_act()),
        ("sigmoid", sigmoid_act()),
        ("softmax + focal", softmax_focal()),
        ("embedding", embedding()),
        ("2-layer LSTM, 20 steps", lstm()),
        ("GMU, hidden gate", gmu(GateInput::Hidden)),
        ("GMU, literal gate", gmu(GateInput::Literal)),
        ("micro model, hidden gate", micro_model(GateInput::Hidden, Variant::Full)),
        ("micro model, literal gate", micro_model(GateInput::Literal, Variant::Full)),
        ("micro model, bypass", micro_model(GateInput::Hidden, Variant::Bypass)),
    ]
}
