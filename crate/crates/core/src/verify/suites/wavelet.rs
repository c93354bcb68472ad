use super::{build, max_diff, randomize, run, uniform, zero};
use crate::graph::Routing;
use crate::ssm::SsmConfig;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::verify::objectives::{add_input, BlockObjective, Subject};
use crate::verify::oracles;
use crate::verify::{grad_measure, Measure, Recorder, MIN_BLOCK_COORDS};
use crate::wavelet::{dwt2, dwt_multi, idwt2, idwt_multi, pack_quad, unpack_quad, Subbands, WaveletBranch};

fn bands(s: &Subbands<f64>) -> [&Tensor<f64>; 4] {
    [&s.ll, &s.lh, &s.hl, &s.hh]
}

pub(crate) fn wavelet(r: &mut Recorder) {
    r.check("wavelet.dwt_constant", || {
        let v = 0.37;
        let s = dwt2(&Tensor::<f64>::full(&[1, 2, 4, 6], v))?;
        let err = (s.ll.data().iter().map(|x| (x - 2.0 * v).abs()))
            .chain([&s.lh, &s.hl, &s.hh].iter().flat_map(|t| t.data().iter().map(|x| x.abs())))
            .fold(0.0, f64::max);
        Ok(Measure::within(err, 1e-15).note("LL = 2v, details 0"))
    });
    r.check("wavelet.dwt_block", || {
        let s = dwt2(&Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?)?;
        let got = [s.ll.data()[0], s.lh.data()[0], s.hl.data()[0], s.hh.data()[0]];
        Ok(Measure::within(super::max_diff_slices(&got, &[5.0, -1.0, -2.0, 0.0]), 1e-15).note(format!("{got:?}")))
    });
    r.check("wavelet.dwt_separable_oracle", || {
        let mut worst: f64 = 0.0;
        for (i, shape) in [[1, 1, 8, 8], [2, 3, 4, 6]].iter().enumerate() {
            let x = uniform::<f64>(shape, 40 + i as u64);
            let s = dwt2(&x)?;
            for (got, want) in bands(&s).iter().zip(oracles::haar_separable(&x).iter()) {
                worst = worst.max(max_diff(got, want)?);
            }
        }
        Ok(Measure::within(worst, 1e-6))
    });
    r.check("wavelet.dwt_odd_rejected", || {
        Ok(Measure::rejects(dwt2(&Tensor::<f64>::zeros(&[1, 1, 3, 4]))))
    });
    r.check("wavelet.idwt_constant", || {
        let ll = Tensor::<f64>::full(&[1, 1, 3, 2], 0.8);
        let z = Tensor::zeros(&[1, 1, 3, 2]);
        let x = idwt2(&Subbands {
            ll,
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        })?;
        Ok(Measure::within(max_diff(&x, &Tensor::full(&[1, 1, 6, 4], 0.4))?, 1e-15))
    });
    r.check("wavelet.idwt_block", || {
        let one = |v: f64| Tensor::<f64>::full(&[1, 1, 1, 1], v);
        let x = idwt2(&Subbands {
            ll: one(5.0),
            lh: one(-1.0),
            hl: one(-2.0),
            hh: one(0.0),
        })?;
        Ok(Measure::within(super::max_diff_slices(x.data(), &[1.0, 2.0, 3.0, 4.0]), 1e-15))
    });
    r.check("wavelet.idwt_shape_mismatch", || {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        Ok(Measure::rejects(idwt2(&Subbands {
            ll: a.clone(),
            lh: a.clone(),
            hl: Tensor::zeros(&[1, 1, 2, 3]),
            hh: a,
        })))
    });
    r.check("wavelet.perfect_reconstruction", || {
        let x = uniform::<f32>(&[2, 3, 16, 12], 41);
        let back = idwt2(&dwt2(&x)?)?;
        Ok(Measure::within(max_diff(&back, &x)?, 1e-5).note("f32"))
    });
    r.check("wavelet.energy_preserved", || {
        let x = uniform::<f32>(&[2, 3, 16, 12], 42);
        let e_in: f64 = x.data().iter().map(|v| (*v as f64).powi(2)).sum();
        let e_out = dwt2(&x)?.energy();
        Ok(Measure::within((e_out - e_in).abs() / e_in, 1e-4).note("relative"))
    });
    r.check("wavelet.multi_one_level_is_dwt2", || {
        let x = uniform::<f64>(&[1, 2, 8, 8], 43);
        let p = dwt_multi(&x, 1)?;
        let s = dwt2(&x)?;
        let err = max_diff(&p.ll, &s.ll)?
            .max(max_diff(&p.details[0][0], &s.lh)?)
            .max(max_diff(&p.details[0][1], &s.hl)?)
            .max(max_diff(&p.details[0][2], &s.hh)?);
        Ok(Measure::within(err, 0.0))
    });
    r.check("wavelet.multi_constant", || {
        let v = -0.6;
        let p = dwt_multi(&Tensor::<f64>::full(&[1, 1, 8, 8], v), 2)?;
        let err =
            p.ll.data()
                .iter()
                .map(|x| (x - 4.0 * v).abs())
                .chain(p.details.iter().flatten().flat_map(|t| t.data().iter().map(|x| x.abs())))
                .fold(0.0, f64::max);
        Ok(Measure::within(err, 1e-14).note("deepest LL = 4v, details 0"))
    });
    r.check("wavelet.multi_zero_levels_rejected", || {
        Ok(Measure::rejects(dwt_multi(&Tensor::<f64>::zeros(&[1, 1, 4, 4]), 0)))
    });
    r.check("wavelet.pyramid_halves_and_reconstructs", || {
        let x = uniform::<f32>(&[1, 2, 16, 8], 44);
        let p = dwt_multi(&x, 3)?;
        let mut ok = true;
        for (i, d) in p.details.iter().enumerate() {
            let want = [1, 2, 16 >> (i + 1), 8 >> (i + 1)];
            ok &= d.iter().all(|t| t.shape() == want);
        }
        ok &= p.ll.shape() == [1, 2, 2, 1];
        let err = max_diff(&idwt_multi(&p)?, &x)?;
        Ok(Measure::within(if ok { err } else { f64::INFINITY }, 1e-5).note("dims halve per level; reconstruction error"))
    });
    r.check("wavelet.quad_unpack_exact", || {
        let s = dwt2(&uniform::<f64>(&[2, 3, 6, 4], 45))?;
        let canvas = pack_quad(&s)?;
        let back = unpack_quad(&canvas)?;
        let mut t = Tape::<f64>::without_grad();
        let stacked = t.constant(s.stacked());
        let c2 = t.pack_quad(stacked)?;
        let b2 = t.unpack_quad(c2)?;
        let exact = back == s && t.value(b2) == &s.stacked() && t.value(c2) == &canvas;
        // LL must occupy the top-left quadrant.
        let tl = canvas.at4(1, 2, 2, 1) == s.ll.at4(1, 2, 2, 1);
        Ok(Measure::truth(exact && tl))
    });
    r.check("wavelet.tape_matches_transform", || {
        let x = uniform::<f64>(&[1, 2, 6, 8], 46);
        let mut t = Tape::<f64>::without_grad();
        let xv = t.constant(x.clone());
        let s = t.dwt2(xv)?;
        let y = t.idwt2(s)?;
        let err = max_diff(t.value(s), &dwt2(&x)?.stacked())?.max(max_diff(t.value(y), &x)?);
        Ok(Measure::within(err, 1e-12))
    });
    r.check("wavelet.branch_identity_scan", || {
        let cfg = SsmConfig {
            channels: 3,
            state: 2,
            prompts: 2,
        };
        let (branch, mut store) = build(47, |pb| WaveletBranch::build(pb, "wavelet", cfg))?;
        randomize(&mut store, 48, 0.5)?;
        zero(&mut store, "wavelet.ssm.w_c")?;
        zero(&mut store, "wavelet.ssm.prompt_pool")?;
        store.set("wavelet.ssm.d", Tensor::ones(&[3]))?;
        let mut worst: f64 = 0.0;
        for (i, shape) in [[1, 3, 8, 8], [2, 3, 5, 7]].iter().enumerate() {
            let x = uniform::<f32>(shape, 49 + i as u64);
            let got = run::<f32>(&store, Routing::eval(), |g| {
                let xv = g.constant(x.clone());
                branch.forward(g, xv)
            })?;
            worst = worst.max(max_diff(&got, &x)?);
        }
        Ok(Measure::within(worst, 1e-5).note("f32, even and odd sizes"))
    });
    r.check("grad.wavelet_branch", || {
        let cfg = SsmConfig {
            channels: 2,
            state: 3,
            prompts: 2,
        };
        let (branch, mut store) = build(50, |pb| WaveletBranch::build(pb, "wavelet", cfg))?;
        randomize(&mut store, 51, 0.5)?;
        add_input(&mut store, &[1, 2, 4, 4], 52)?;
        grad_measure(&BlockObjective::new(Subject::Wavelet(branch)), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("wavelet.multi_impulse_oracle", || {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        x.data_mut()[3 * 8 + 5] = 1.0;
        let p = dwt_multi(&x, 2)?;
        let [ll1, lh1, hl1, hh1] = oracles::haar_separable(&x);
        let [ll2, lh2, hl2, hh2] = oracles::haar_separable(&ll1);
        let pairs = [
            (&p.details[0][0], &lh1),
            (&p.details[0][1], &hl1),
            (&p.details[0][2], &hh1),
            (&p.details[1][0], &lh2),
            (&p.details[1][1], &hl2),
            (&p.details[1][2], &hh2),
            (&p.ll, &ll2),
        ];
        let mut worst: f64 = 0.0;
        for (got, want) in pairs {
            worst = worst.max(max_diff(got, want)?);
        }
        Ok(Measure::within(worst, 1e-12).note("impulse at (3, 5), two levels"))
    });
}
