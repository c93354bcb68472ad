use rand::Rng;

use super::{build, max_diff, randomize, rng, rows, run, uniform, zero};
use crate::error::Result;
use crate::graph::{Graph, Routing};
use crate::params::ParamStore;
use crate::ssm::{discretize, permute_tokens, selective_scan, SelectiveSsm, SemanticRouter, SpatialBranch, SsmConfig, TokenPermutation};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::verify::objectives::{add_input, widen_routers, BlockObjective, Subject};
use crate::verify::oracles;
use crate::verify::{grad_measure, Measure, Recorder, MIN_BLOCK_COORDS};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Splits `[1,L,K]` data into `[L][K]` rows.
fn seq(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let k = *t.shape().last().expect("rank >= 1");
    t.data().chunks(k).map(<[f64]>::to_vec).collect()
}

/// Runs the scan core on explicit tensors in `f64`.
fn scan_core(
    x: &Tensor<f64>,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    c: &Tensor<f64>,
    delta: &Tensor<f64>,
    d: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let mut t = Tape::<f64>::without_grad();
    let vs = [x, a, b, c, delta, d].map(|v| t.constant(v.clone()));
    let y = selective_scan(&mut t, vs[0], vs[1], vs[2], vs[3], vs[4], vs[5])?;
    Ok(t.value(y).clone())
}

/// The full layer recomputed token by token: projections, scan and the
/// softmax prompt readout.
fn ssm_oracle(store: &ParamStore, x: &Tensor<f64>, cfg: SsmConfig) -> Result<Vec<Vec<f64>>> {
    let p = |n: &str| -> Result<Tensor<f64>> { Ok(store.get(&format!("ssm.{n}"))?.cast()) };
    let xs = seq(x);
    let (wd, bd, wb, wc) = (rows(&p("w_delta")?), p("b_delta")?, rows(&p("w_b")?), rows(&p("w_c")?));
    let proj = |row: &[f64], w: &[Vec<f64>], k: usize| -> f64 { row.iter().enumerate().map(|(i, v)| v * w[i][k]).sum() };
    let delta: Vec<Vec<f64>> = xs
        .iter()
        .map(|row| (0..cfg.channels).map(|k| softplus(proj(row, &wd, k) + bd.data()[k])).collect())
        .collect();
    let bm: Vec<Vec<f64>> = xs.iter().map(|row| (0..cfg.state).map(|k| proj(row, &wb, k)).collect()).collect();
    let cm: Vec<Vec<f64>> = xs.iter().map(|row| (0..cfg.state).map(|k| proj(row, &wc, k)).collect()).collect();
    let a: Vec<Vec<f64>> = rows(&p("a_log")?).iter().map(|r| r.iter().map(|v| -v.exp()).collect()).collect();
    let mut ys = oracles::scan(&xs, &a, &bm, &cm, &delta, p("d")?.data());
    let (sim, pool) = (rows(&p("prompt_sim")?), rows(&p("prompt_pool")?));
    for (row, y) in xs.iter().zip(ys.iter_mut()) {
        let logits: Vec<f64> = (0..cfg.prompts).map(|m| proj(row, &sim, m)).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for (k, yk) in y.iter_mut().enumerate() {
            *yk += (0..cfg.prompts).map(|m| e[m] / z * pool[m][k]).sum::<f64>();
        }
    }
    Ok(ys)
}

fn random_classes(len: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut g = rng(seed);
    (0..len).map(|_| g.gen_range(0..k)).collect()
}

pub(crate) fn ssm(r: &mut Recorder) {
    let cfg = SsmConfig {
        channels: 4,
        state: 3,
        prompts: 2,
    };

    r.check("ssm.abar_in_unit_interval", || {
        let (c, n, l) = (3, 4, 6);
        let mut a: Tensor<f64> = Tensor::<f64>::rand_uniform(&[c, n], 0.0, 3.0, &mut rng(1)).map(|v| -v.exp() + 1.0);
        a.data_mut()[0] = 0.0;
        let a = a.map(|v| v.min(0.0));
        let delta = uniform::<f64>(&[1, l, c], 2).map(|v| softplus(3.0 * v));
        let b = uniform::<f64>(&[1, l, n], 3);
        let mut t = Tape::<f64>::without_grad();
        let (av, bv, dv) = (t.constant(a), t.constant(b), t.constant(delta));
        let (abar, _) = discretize(&mut t, av, bv, dv)?;
        let ok = t.value(abar).data().iter().all(|&v| v > 0.0 && v <= 1.0);
        Ok(Measure::truth(ok).note("A <= 0, delta = softplus(.) > 0"))
    });
    r.check("ssm.delta_softplus_positive", || {
        let mut t = Tape::<f32>::without_grad();
        let x = t.constant(Tensor::from_fn(&[61], |i| i as f32 - 30.0));
        let y = t.softplus(x);
        let positive = t.value(y).data().iter().all(|&v| v > 0.0);
        let mut t = Tape::<f64>::without_grad();
        let a = t.constant(Tensor::zeros(&[1, 1]));
        let b = t.constant(Tensor::ones(&[1, 1, 1]));
        let d = t.constant(Tensor::zeros(&[1, 1, 1]));
        let rejects = discretize(&mut t, a, b, d).is_err();
        Ok(Measure::truth(positive && rejects).note("softplus > 0 on [-30, 30]; zero step rejected"))
    });
    r.check("ssm.router_needs_class", || {
        Ok(Measure::rejects(build(1, |pb| SemanticRouter::build(pb, "router", 4, 0))))
    });
    r.check("ssm.router_tau_positive", || {
        let (router, store) = build(1, |pb| SemanticRouter::build(pb, "router", 4, 2))?;
        let values = store.values::<f64>();
        let mut g = Graph::inference(
            &values,
            Routing {
                tau: 0.0,
                ..Routing::eval()
            },
        );
        let x = g.constant(uniform(&[1, 3, 4], 2));
        Ok(Measure::rejects(router.forward(&mut g, x).map(|r| r.tokens)))
    });
    r.check("ssm.permutation_bijection", || {
        let mut ok = true;
        for trial in 0..100 {
            let len = 1 + trial % 17;
            let p = TokenPermutation::sort_by_class(&random_classes(len, 4, trial as u64));
            let mut seen = vec![false; len];
            for &i in p.forward() {
                seen[i] = true;
            }
            ok &= seen.iter().all(|&s| s);
            ok &= (0..len).all(|j| p.inverse()[p.forward()[j]] == j && p.forward()[p.inverse()[j]] == j);
        }
        Ok(Measure::truth(ok).note("100 random class assignments"))
    });

    r.check("ssm.discretize_zero_a", || {
        let b = uniform::<f64>(&[1, 2, 3], 4);
        let delta = uniform::<f64>(&[1, 2, 2], 5).map(|v| v.abs() + 0.1);
        let mut t = Tape::<f64>::without_grad();
        let (av, bv, dv) = (t.constant(Tensor::zeros(&[2, 3])), t.constant(b.clone()), t.constant(delta.clone()));
        let (abar, bbar) = discretize(&mut t, av, bv, dv)?;
        let want_b = Tensor::from_fn(&[1, 2, 2, 3], |i| {
            let (l, c, n) = (i / 6, (i / 3) % 2, i % 3);
            delta.data()[l * 2 + c] * b.data()[l * 3 + n]
        });
        let err = max_diff(t.value(abar), &Tensor::ones(&[1, 2, 2, 3]))?.max(max_diff(t.value(bbar), &want_b)?);
        Ok(Measure::within(err, 0.0).note("A_bar = 1, B_bar = delta B"))
    });
    r.check("ssm.discretize_half", || {
        let mut t = Tape::<f64>::without_grad();
        let a = t.constant(Tensor::full(&[1, 1], -1.0));
        let b = t.constant(Tensor::ones(&[1, 1, 1]));
        let d = t.constant(Tensor::full(&[1, 1, 1], std::f64::consts::LN_2));
        let (abar, _) = discretize(&mut t, a, b, d)?;
        Ok(Measure::within((t.value(abar).data()[0] - 0.5).abs(), 1e-15))
    });
    r.check("ssm.discretize_scalar_oracle", || {
        let (c, n, l) = (3, 2, 4);
        let a = uniform::<f64>(&[c, n], 6).map(|v| -v.abs());
        let b = uniform::<f64>(&[1, l, n], 7);
        let delta = uniform::<f64>(&[1, l, c], 8).map(|v| v.abs() + 0.05);
        let mut t = Tape::<f64>::without_grad();
        let (av, bv, dv) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(delta.clone()));
        let (abar, bbar) = discretize(&mut t, av, bv, dv)?;
        let mut worst: f64 = 0.0;
        for i in 0..l {
            for k in 0..c {
                for s in 0..n {
                    let idx = (i * c + k) * n + s;
                    let d = delta.data()[i * c + k];
                    worst = worst
                        .max((t.value(abar).data()[idx] - (d * a.data()[k * n + s]).exp()).abs())
                        .max((t.value(bbar).data()[idx] - d * b.data()[i * n + s]).abs());
                }
            }
        }
        Ok(Measure::within(worst, 1e-15))
    });
    r.check("ssm.scan_prefix_sum", || {
        let y = scan_core(
            &Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0])?,
            &Tensor::zeros(&[1, 1]),
            &Tensor::ones(&[1, 3, 1]),
            &Tensor::ones(&[1, 3, 1]),
            &Tensor::ones(&[1, 3, 1]),
            &Tensor::zeros(&[1]),
        )?;
        Ok(Measure::within(super::max_diff_slices(y.data(), &[1.0, 3.0, 6.0]), 1e-12).note(format!("{:?}", y.data())))
    });
    r.check("ssm.scan_hand_recurrence", || {
        let ln2 = std::f64::consts::LN_2;
        let y = scan_core(
            &Tensor::new(&[1, 2, 1], vec![1.0, 0.0])?,
            &Tensor::full(&[1, 1], -1.0),
            &Tensor::ones(&[1, 2, 1]),
            &Tensor::ones(&[1, 2, 1]),
            &Tensor::full(&[1, 2, 1], ln2),
            &Tensor::zeros(&[1]),
        )?;
        let err = super::max_diff_slices(y.data(), &[ln2, ln2 / 2.0]);
        Ok(Measure::within(err, 1e-12).note(format!("{:?}", y.data())))
    });
    r.check("ssm.scan_naive_oracle", || {
        let (c, n) = (3, 4);
        let mut worst: f64 = 0.0;
        for (i, &l) in [1usize, 7, 64, 256].iter().enumerate() {
            let s = 100 + 10 * i as u64;
            let x = uniform::<f64>(&[1, l, c], s);
            let a = uniform::<f64>(&[c, n], s + 1).map(|v| -v.abs() * 2.0);
            let b = uniform::<f64>(&[1, l, n], s + 2);
            let cc = uniform::<f64>(&[1, l, n], s + 3);
            let delta = uniform::<f64>(&[1, l, c], s + 4).map(|v| softplus(2.0 * v));
            let d = uniform::<f64>(&[c], s + 5);
            let y = scan_core(&x, &a, &b, &cc, &delta, &d)?;
            let want = oracles::scan(&seq(&x), &rows(&a), &seq(&b), &seq(&cc), &seq(&delta), d.data());
            let flat: Vec<f64> = want.into_iter().flatten().collect();
            worst = worst.max(super::max_diff_slices(y.data(), &flat));
        }
        Ok(Measure::within(worst, 1e-6).note("lengths 1, 7, 64, 256"))
    });
    r.check("ssm.layer_oracle", || {
        let (ssm, mut store) = build(9, |pb| SelectiveSsm::build(pb, "ssm", cfg))?;
        randomize(&mut store, 10, 0.5)?;
        let x = uniform::<f64>(&[1, 9, cfg.channels], 11);
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            ssm.forward(g, xv)
        })?;
        let want: Vec<f64> = ssm_oracle(&store, &x, cfg)?.into_iter().flatten().collect();
        Ok(Measure::within(super::max_diff_slices(got.data(), &want), 1e-6).note("projections, scan and prompt readout"))
    });

    r.check("ssm.reorder_single_class_identity", || {
        let (router, mut store) = build(12, |pb| SemanticRouter::build(pb, "router", 4, 1))?;
        randomize(&mut store, 13, 1.0)?;
        let values = store.values::<f64>();
        let mut g = Graph::inference(&values, Routing::train(3));
        let x = g.constant(uniform(&[2, 9, 4], 14));
        let routed = router.forward(&mut g, x)?;
        Ok(Measure::truth(routed.perms.iter().all(TokenPermutation::is_identity)))
    });
    r.check("ssm.reorder_zero_noise_argmax", || {
        let (router, mut store) = build(15, |pb| SemanticRouter::build(pb, "router", 4, 4))?;
        zero(&mut store, "router.w")?;
        store.set("router.b", Tensor::new(&[4], vec![10.0, 0.0, 0.0, 0.0])?)?;
        let values = store.values::<f64>();
        let mut g = Graph::inference(&values, Routing::eval());
        let x = g.constant(uniform(&[1, 8, 4], 16));
        let routed = router.forward(&mut g, x)?;
        let ok = routed.classes.iter().flatten().all(|&k| k == 0) && routed.perms.iter().all(TokenPermutation::is_identity);
        Ok(Measure::truth(ok).note("all class 0, identity order"))
    });
    r.check("ssm.reorder_roundtrip", || {
        let mut worst: f64 = 0.0;
        for trial in 0..100u64 {
            let (bs, l, c) = (1 + (trial % 3) as usize, 1 + (trial % 13) as usize, 3);
            let perms: Vec<TokenPermutation> = (0..bs)
                .map(|b| TokenPermutation::sort_by_class(&random_classes(l, 1 + (trial % 5) as usize, trial * 7 + b as u64)))
                .collect();
            let x = uniform::<f64>(&[bs, l, c], trial);
            let mut t = Tape::<f64>::without_grad();
            let xv = t.constant(x.clone());
            let fwd = permute_tokens(&mut t, xv, &perms, false)?;
            let back = permute_tokens(&mut t, fwd, &perms, true)?;
            worst = worst.max(max_diff(t.value(back), &x)?);
        }
        Ok(Measure::within(worst, 0.0).note("100 random routings"))
    });
    r.check("ssm.hard_routing_one_hot", || {
        let (router, mut store) = build(17, |pb| SemanticRouter::build(pb, "router", 4, 4))?;
        randomize(&mut store, 18, 1.0)?;
        let values = store.values::<f32>();
        let mut ok = true;
        for seed in 0..20 {
            let mut g = Graph::new(&values, Routing::train(seed));
            let x = g.constant(uniform(&[2, 16, 4], 100 + seed));
            let routed = router.forward(&mut g, x)?;
            for row in g.value(routed.weights).data().chunks(4) {
                ok &= row.iter().filter(|&&v| v == 1.0).count() == 1 && row.iter().filter(|&&v| v == 0.0).count() == 3;
            }
        }
        Ok(Measure::truth(ok).note("20 noisy draws, every row exactly one-hot"))
    });
    r.check("ssm.spatial_skip_identity", || {
        let (branch, mut store) = build(19, |pb| SpatialBranch::build(pb, "spatial", cfg, 1))?;
        randomize(&mut store, 20, 0.5)?;
        zero(&mut store, "spatial.ssm.w_c")?;
        zero(&mut store, "spatial.ssm.prompt_pool")?;
        store.set("spatial.ssm.d", Tensor::ones(&[cfg.channels]))?;
        store.set("spatial.ssm.a_log", Tensor::full(&[cfg.channels, cfg.state], -200.0))?;
        let x = uniform::<f64>(&[1, cfg.channels, 4, 4], 21);
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            branch.forward(g, xv)
        })?;
        Ok(Measure::within(max_diff(&got, &x)?, 1e-12).note("K = 1, A = 0, C = 0, D = 1, no prompts"))
    });

    r.check("grad.selective_ssm", || {
        let (ssm, mut store) = build(22, |pb| SelectiveSsm::build(pb, "ssm", cfg))?;
        randomize(&mut store, 23, 0.5)?;
        add_input(&mut store, &[1, 6, cfg.channels], 24)?;
        grad_measure(&BlockObjective::new(Subject::Ssm(ssm)), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("grad.spatial_branch", || {
        let (branch, mut store) = build(25, |pb| SpatialBranch::build(pb, "spatial", cfg, 4))?;
        widen_routers(&mut store, 26)?;
        add_input(&mut store, &[1, cfg.channels, 4, 4], 27)?;
        grad_measure(&BlockObjective::new(Subject::Spatial(branch)), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("ssm.soft_routing_simplex", || {
        let (router, mut store) = build(30, |pb| SemanticRouter::build(pb, "router", 4, 5))?;
        randomize(&mut store, 31, 1.0)?;
        let values = store.values::<f64>();
        let mut worst: f64 = 0.0;
        let mut nonneg = true;
        for routing in [
            Routing::soft(),
            Routing {
                noise_seed: Some(9),
                tau: 0.5,
                ..Routing::soft()
            },
        ] {
            let mut g = Graph::inference(&values, routing);
            let x = g.constant(uniform(&[2, 12, 4], 32));
            let routed = router.forward(&mut g, x)?;
            for row in g.value(routed.weights).data().chunks(5) {
                nonneg &= row.iter().all(|&v| v >= 0.0);
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok(Measure::within(if nonneg { worst } else { f64::INFINITY }, 1e-6).note("noise-free and noisy relaxed routing"))
    });
    r.check("ssm.state_bounded", || {
        let (bs, l, c, n) = (2, 40, 3, 4);
        let mut t = Tape::<f64>::without_grad();
        let a = t.constant(Tensor::rand_uniform(&[c, n], -2.0, 0.0, &mut rng(33)));
        let b = t.constant(uniform(&[bs, l, n], 34));
        let delta = t.constant(uniform::<f64>(&[bs, l, c], 35).map(|v| softplus(2.0 * v)));
        let x = uniform::<f64>(&[bs, l, c], 36);
        let (abar, bbar) = discretize(&mut t, a, b, delta)?;
        let xs = t.constant(Tensor::from_fn(&[bs, l, c, n], |i| x.data()[i / n]));
        let u = t.mul(bbar, xs)?;
        let h = crate::ssm::linear_recurrence(&mut t, abar, u)?;
        let (uv, hv) = (t.value(u).data(), t.value(h).data());
        let inner = c * n;
        let mut ok = true;
        for batch in 0..bs {
            let mut peak: f64 = 0.0;
            for i in 0..l {
                let base = (batch * l + i) * inner;
                peak = peak.max(uv[base..base + inner].iter().map(|v| v.abs()).fold(0.0, f64::max));
                ok &= hv[base..base + inner].iter().all(|v| v.abs() <= peak * (i + 1) as f64 + 1e-12);
            }
        }
        Ok(Measure::truth(ok).note("|h_i| <= max_j |Bbar_j x_j| * i"))
    });
    r.check("ssm.scan_causal", || {
        let (ssm, mut store) = build(37, |pb| SelectiveSsm::build(pb, "ssm", cfg))?;
        randomize(&mut store, 38, 0.5)?;
        zero(&mut store, "ssm.d")?;
        zero(&mut store, "ssm.prompt_pool")?;
        let (l, cut) = (12, 5);
        let x = uniform::<f64>(&[1, l, cfg.channels], 39);
        let full = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            ssm.forward(g, xv)
        })?;
        let head = Tensor::new(&[1, cut, cfg.channels], x.data()[..cut * cfg.channels].to_vec())?;
        let short = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(head.clone());
            ssm.forward(g, xv)
        })?;
        let err = super::max_diff_slices(&full.data()[..cut * cfg.channels], short.data());
        Ok(Measure::within(err, 1e-12).note(format!("first {cut} of {l} outputs after truncation")))
    });
    r.check("ssm.spatial_shape", || {
        let (branch, store) = build(40, |pb| SpatialBranch::build(pb, "spatial", cfg, 3))?;
        let mut ok = true;
        for (h, w) in [(1, 1), (3, 5), (7, 2)] {
            let y = run::<f32>(&store, Routing::eval(), |g| {
                let xv = g.constant(uniform(&[2, cfg.channels, h, w], 41));
                branch.forward(g, xv)
            })?;
            ok &= y.shape() == [2, cfg.channels, h, w];
        }
        Ok(Measure::truth(ok))
    });
}
