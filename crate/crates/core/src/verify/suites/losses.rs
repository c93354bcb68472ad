use super::{rng, uniform};
use crate::error::Result;
use crate::losses::{charbonnier, edge_loss, global_loss, wavelet_loss, LossConfig, LAPLACIAN};
use crate::metrics::{psnr_from_mse, psnr_y, ssim_y, SSIM_SIGMA, SSIM_WINDOW};
use crate::params::ParamStore;
use crate::pipeline::{PipelineConfig, Prism, StageOutputs};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::verify::objectives::{add_input, widen_routers, BlockObjective, Subject};
use crate::verify::{grad_measure, oracles, Measure, Recorder, MIN_BLOCK_COORDS};

type PairLoss = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;

fn pair_loss(x: &Tensor<f64>, y: &Tensor<f64>, f: impl FnOnce(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut t = Tape::without_grad();
    let xv = t.constant(x.clone());
    let yv = t.constant(y.clone());
    let l = f(&mut t, xv, yv)?;
    t.value(l).item()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn edge_oracle(x: &Tensor<f64>, y: &Tensor<f64>, eps: f64) -> f64 {
    let (b, c, h, w) = x.dims4().expect("rank 4");
    let d: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
    let mut total = 0.0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut lap = 0.0;
                for ki in 0..3 {
                    for kj in 0..3 {
                        let yy = reflect(i as isize + ki as isize - 1, h);
                        let xx = reflect(j as isize + kj as isize - 1, w);
                        lap += LAPLACIAN[ki * 3 + kj] * d[base + yy * w + xx];
                    }
                }
                total += (lap * lap + eps * eps).sqrt();
            }
        }
    }
    total / d.len() as f64
}

fn mean_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v.abs()).sum::<f64>() / t.numel() as f64
}

/// Pyramid of `x - y` by the separable-filter transform; dims must divide `2^levels`.
fn wavelet_oracle(x: &Tensor<f64>, y: &Tensor<f64>, levels: usize) -> Result<f64> {
    let mut cur = x.zip_map(y, |p, q| p - q)?;
    let mut total = 0.0;
    for _ in 0..levels {
        let [ll, lh, hl, hh] = oracles::haar_separable(&cur);
        total += mean_abs(&lh) + mean_abs(&hl) + mean_abs(&hh);
        cur = ll;
    }
    Ok(total + mean_abs(&cur))
}

fn luma_oracle(img: &Tensor) -> Vec<f64> {
    let n = img.numel() / 3;
    let d = img.data();
    (0..n)
        .map(|i| 255.0 * (0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64))
        .collect()
}

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng(seed))
}

pub(crate) fn losses(r: &mut Recorder) {
    let cfg = LossConfig::default();
    let x = uniform::<f64>(&[2, 3, 8, 12], 80);
    let y = uniform::<f64>(&[2, 3, 8, 12], 81);

    r.check("losses.config_validated", || {
        let bad = [
            LossConfig { lambda: -0.1, ..cfg },
            LossConfig {
                mu: [0.0, -1.0, 0.0],
                ..cfg
            },
            LossConfig { eps: 0.0, ..cfg },
            LossConfig { levels: 0, ..cfg },
        ];
        let defaults = cfg.lambda == 0.05 && cfg.mu == [0.0, 0.05, 0.0] && cfg.eps == 1e-3 && cfg.levels == 2;
        Ok(Measure::truth(
            defaults && cfg.validate().is_ok() && bad.iter().all(|c| c.validate().is_err()),
        ))
    });
    r.check("losses.charbonnier_equal_is_eps", || {
        let v = pair_loss(&x, &x, |t, a, b| charbonnier(t, a, b, 1e-3))?;
        Ok(Measure::within((v - 1e-3).abs(), 1e-12))
    });
    r.check("losses.charbonnier_single_element", || {
        let a = Tensor::new(&[1], vec![3.0])?;
        let b = Tensor::new(&[1], vec![0.0])?;
        let v = pair_loss(&a, &b, |t, p, q| charbonnier(t, p, q, 1e-3))?;
        Ok(Measure::within((v - (9.0f64 + 1e-6).sqrt()).abs(), 1e-12).note(format!("{v:.10}")))
    });
    r.check("losses.charbonnier_scalar_oracle", || {
        let v = pair_loss(&x, &y, |t, a, b| charbonnier(t, a, b, 1e-3))?;
        let want = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| ((p - q).powi(2) + 1e-6).sqrt())
            .sum::<f64>()
            / x.numel() as f64;
        Ok(Measure::within((v - want).abs(), 1e-7))
    });
    r.check("losses.charbonnier_at_least_eps", || {
        let mut g = rng(82);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..50 {
            let a = Tensor::<f64>::randn(&[1, 1, 3, 3], 1.0, &mut g);
            let b = Tensor::<f64>::randn(&[1, 1, 3, 3], 1.0, &mut g);
            worst = worst.max(1e-3 - pair_loss(&a, &b, |t, p, q| charbonnier(t, p, q, 1e-3))?);
        }
        Ok(Measure::within(worst.max(0.0), 0.0).note("max shortfall below eps over 50 random pairs"))
    });
    r.check("losses.shape_mismatch_rejected", || {
        let other = uniform::<f64>(&[2, 3, 8, 10], 83);
        let fs: [PairLoss; 3] = [
            |t, a, b| charbonnier(t, a, b, 1e-3),
            |t, a, b| edge_loss(t, a, b, 1e-3),
            |t, a, b| wavelet_loss(t, a, b, 2),
        ];
        Ok(Measure::truth(fs.iter().all(|f| pair_loss(&x, &other, f).is_err())))
    });
    r.check("losses.edge_equal_is_eps", || {
        let v = pair_loss(&x, &x, |t, a, b| edge_loss(t, a, b, 1e-3))?;
        Ok(Measure::within((v - 1e-3).abs(), 1e-12))
    });
    r.check("losses.edge_shift_invariant", || {
        let base = pair_loss(&x, &y, |t, a, b| edge_loss(t, a, b, 1e-3))?;
        let shifted = pair_loss(&x.map(|v| v + 0.7), &y.map(|v| v + 0.7), |t, a, b| edge_loss(t, a, b, 1e-3))?;
        let const_diff = pair_loss(&x.map(|v| v + 0.3), &x, |t, a, b| edge_loss(t, a, b, 1e-3))?;
        Ok(Measure::within((base - shifted).abs().max((const_diff - 1e-3).abs()), 1e-9)
            .note("shared shift leaves the loss unchanged; a constant difference gives eps"))
    });
    r.check("losses.edge_laplacian_oracle", || {
        let v = pair_loss(&x, &y, |t, a, b| edge_loss(t, a, b, 1e-3))?;
        Ok(Measure::within((v - edge_oracle(&x, &y, 1e-3)).abs(), 1e-6))
    });
    r.check("losses.wavelet_equal_is_zero", || {
        Ok(Measure::within(pair_loss(&x, &x, |t, a, b| wavelet_loss(t, a, b, 2))?.abs(), 0.0))
    });
    r.check("losses.wavelet_constant_shift", || {
        let c = 0.25;
        let one = pair_loss(&x.map(|v| v + c), &x, |t, a, b| wavelet_loss(t, a, b, 1))?;
        let two = pair_loss(&x.map(|v| v + c), &x, |t, a, b| wavelet_loss(t, a, b, 2))?;
        Ok(Measure::within((one - 2.0 * c).abs().max((two - 4.0 * c).abs()), 1e-12).note("2c at one level, 4c at two"))
    });
    r.check("losses.wavelet_separable_oracle", || {
        let mut worst: f64 = 0.0;
        for levels in [1, 2] {
            let v = pair_loss(&x, &y, |t, a, b| wavelet_loss(t, a, b, levels))?;
            worst = worst.max((v - wavelet_oracle(&x, &y, levels)?).abs());
        }
        Ok(Measure::within(worst, 1e-6))
    });
    r.check("losses.wavelet_zero_levels_rejected", || {
        Ok(Measure::rejects(pair_loss(&x, &y, |t, a, b| wavelet_loss(t, a, b, 0))))
    });
    r.check("losses.wavelet_odd_size_padded", || {
        let a = uniform::<f64>(&[1, 3, 9, 11], 84);
        let v = pair_loss(&a, &a.map(|v| v + 0.1), |t, p, q| wavelet_loss(t, p, q, 2))?;
        Ok(Measure::within((v - 0.4).abs(), 1e-12).note("odd sizes reflect-padded; constant shift still gives 4c"))
    });

    let global = |cfg: &LossConfig, xs: [&Tensor<f64>; 3]| -> Result<crate::losses::LossBreakdown> {
        let mut t = Tape::without_grad();
        let yv = t.constant(y.clone());
        let mut outs = StageOutputs { stages: [None; 3] };
        for (slot, v) in outs.stages.iter_mut().zip(xs) {
            *slot = Some(t.constant(v.clone()));
        }
        Ok(global_loss(&mut t, &outs, yv, cfg)?.1)
    };
    r.check("losses.global_identity_total", || {
        let b = global(&cfg, [&y, &y, &y])?;
        Ok(Measure::within((b.total - 0.00315).abs(), 1e-6).note(format!("total {:.8}", b.total)))
    });
    r.check("losses.breakdown_composes", || {
        let x2 = uniform::<f64>(&[2, 3, 8, 12], 85);
        let x3 = uniform::<f64>(&[2, 3, 8, 12], 86);
        let b = global(&cfg, [&x, &x2, &x3])?;
        let mut sum = 0.0;
        let mut nonneg = true;
        for s in 0..3 {
            let (ch, ed) = (b.char[s].unwrap_or(f64::NAN), b.edge[s].unwrap_or(f64::NAN));
            let wv = b.wav[s].unwrap_or(0.0);
            nonneg &= ch >= 0.0 && ed >= 0.0 && wv >= 0.0;
            sum += ch + cfg.lambda * ed + cfg.mu[s] * wv;
        }
        let wav_only_stage2 = b.wav[0].is_none() && b.wav[1].is_some() && b.wav[2].is_none();
        let err = if nonneg && wav_only_stage2 {
            (b.total - sum).abs()
        } else {
            f64::INFINITY
        };
        Ok(Measure::within(err, 1e-12).note("total equals the weighted sum of the reported terms"))
    });
    r.check("losses.zero_mu_reduces", || {
        let plain = LossConfig { mu: [0.0; 3], ..cfg };
        let b = global(&plain, [&x, &x, &x])?;
        let mut t = Tape::without_grad();
        let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
        let ch = charbonnier(&mut t, xv, yv, cfg.eps)?;
        let ed = edge_loss(&mut t, xv, yv, cfg.eps)?;
        let want = 3.0 * (t.value(ch).item()? + cfg.lambda * t.value(ed).item()?);
        let err = if b.wav.iter().all(Option::is_none) {
            (b.total - want).abs()
        } else {
            f64::INFINITY
        };
        Ok(Measure::within(err, 1e-12).note("char + lambda edge only"))
    });
    r.check("losses.wavelet_gradient_stage2_only", || {
        // Gradient of the wavelet term alone: difference of the full objective
        // with and without it.
        let mut store = ParamStore::new();
        for (i, seed) in [87, 88, 89].into_iter().enumerate() {
            store.insert(format!("x{}", i + 1), uniform(&[1, 3, 8, 8], seed))?;
        }
        let target = uniform::<f64>(&[1, 3, 8, 8], 90);
        let grads = |c: LossConfig| -> Result<Vec<Tensor<f64>>> {
            let values = store.values::<f64>();
            let mut g = crate::graph::Graph::new(&values, crate::graph::Routing::soft());
            let mut outs = StageOutputs { stages: [None; 3] };
            for (s, slot) in outs.stages.iter_mut().enumerate() {
                *slot = Some(g.p(&format!("x{}", s + 1))?);
            }
            let yv = g.constant(target.clone());
            let (l, _) = global_loss(&mut g, &outs, yv, &c)?;
            let pg = g.param_grads(l)?;
            Ok((1..=3).map(|s| pg[&format!("x{s}")].clone()).collect())
        };
        let with = grads(cfg)?;
        let without = grads(LossConfig { mu: [0.0; 3], ..cfg })?;
        let delta: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a.max_abs_diff(b)).collect::<Result<_>>()?;
        let ok = delta[0] == 0.0 && delta[2] == 0.0 && delta[1] > 1e-6;
        let fd = grad_measure(&BlockObjective::new(Subject::StageLoss(cfg, target.clone())), &store, "x2", 1)?;
        Ok(if ok { fd } else { Measure::truth(false) }.note(format!("wavelet gradient magnitude per stage {delta:?}")))
    });
    r.check("grad.global_loss", || {
        let tiny = PipelineConfig::tiny();
        let (model, mut store) = Prism::build(tiny, 91)?;
        widen_routers(&mut store, 92)?;
        add_input(&mut store, &[1, 3, 16, 16], 93)?;
        let target = uniform::<f64>(&[1, 3, 16, 16], 94);
        grad_measure(
            &BlockObjective::new(Subject::Pipeline(model, cfg, target)),
            &store,
            "",
            MIN_BLOCK_COORDS,
        )
    });

    r.check("metrics.psnr_identical_capped", || {
        let a = image(16, 16, 95);
        Ok(Measure::within((psnr_y(&a, &a)? - 100.0).abs(), 0.0))
    });
    r.check("metrics.psnr_unit_mse", || {
        let v = psnr_from_mse(1.0);
        Ok(Measure::within((v - 48.1308).abs(), 1e-4).note(format!("{v:.6} dB")))
    });
    r.check("metrics.psnr_white_black", || {
        let white = Tensor::ones(&[3, 1, 1]);
        let black = Tensor::zeros(&[3, 1, 1]);
        Ok(Measure::within(psnr_y(&white, &black)?.abs(), 1e-9))
    });
    r.check("metrics.psnr_decreases_with_noise", || {
        let clean = image(24, 24, 96);
        let noise = Tensor::<f32>::randn(&[3, 24, 24], 1.0, &mut rng(97));
        let mut vals = Vec::new();
        for amp in [0.02f32, 0.05, 0.1] {
            let noisy = clean.zip_map(&noise, |c, n| (c + amp * n).clamp(0.0, 1.0))?;
            vals.push(psnr_y(&noisy, &clean)?);
        }
        Ok(Measure::truth(vals[0] > vals[1] && vals[1] > vals[2]).note(format!("{vals:.2?} dB")))
    });
    r.check("metrics.ssim_identical", || {
        let a = image(16, 20, 98);
        Ok(Measure::within((ssim_y(&a, &a)? - 1.0).abs(), 1e-12))
    });
    r.check("metrics.ssim_anticorrelated", || {
        let mut g = rng(99);
        let bits = Tensor::<f32>::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut g).map(|v| if v < 0.5 { 0.0 } else { 1.0 });
        let gray = |t: &Tensor| Tensor::from_fn(&[3, 16, 16], |i| t.data()[i % 256]);
        let a = gray(&bits);
        let b = gray(&bits.map(|v| 1.0 - v));
        let s = ssim_y(&a, &b)?;
        Ok(Measure::truth(s < 0.0).note(format!("ssim {s:.4}")))
    });
    r.check("metrics.ssim_sliding_oracle", || {
        let (h, w) = (19, 23);
        let a = image(h, w, 100);
        let b = a.zip_map(&image(h, w, 101), |p, q| 0.7 * p + 0.3 * q)?;
        let got = ssim_y(&a, &b)?;
        let want = oracles::ssim_sliding(&luma_oracle(&a), &luma_oracle(&b), h, w, SSIM_WINDOW, SSIM_SIGMA);
        Ok(Measure::within((got - want).abs(), 1e-5).note(format!("ssim {got:.6}")))
    });
    r.check("metrics.ssim_undersized_rejected", || {
        let a = image(10, 30, 102);
        Ok(Measure::rejects(ssim_y(&a, &a)))
    });
    r.check("losses.wavelet_positive_when_different", || {
        let mut smallest = f64::INFINITY;
        for (i, at) in [0usize, 17, 95, 287].into_iter().enumerate() {
            let mut p = x.clone();
            p.data_mut()[at] += 1e-3 * (i + 1) as f64;
            smallest = smallest.min(pair_loss(&p, &x, |t, a, b| wavelet_loss(t, a, b, 2))?);
        }
        Ok(Measure::truth(smallest > 0.0).note(format!("smallest loss for a single perturbed pixel {smallest:.3e}")))
    });
}
