use rand::Rng;

use super::{build, max_diff, rng, run, uniform, zero};
use crate::error::Result;
use crate::graph::Routing;
use crate::hdmamba::{gated_fuse_trace, HdMambaBlock, HdMambaConfig};
use crate::params::ParamStore;
use crate::ssm::SsmConfig;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::verify::objectives::{add_input, widen_routers, BlockObjective, Subject};
use crate::verify::{grad_measure, Measure, Recorder, MIN_BLOCK_COORDS};

fn fuse(xs: &Tensor<f64>, xw: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut t = Tape::<f64>::without_grad();
    let vars = [xs, xw, w, b].map(|v| t.constant(v.clone()));
    let (out, gate) = gated_fuse_trace(&mut t, vars[0], vars[1], vars[2], vars[3])?;
    Ok((t.value(out).clone(), t.value(gate).clone()))
}

/// A `[1,C,H,W]` input whose channel vector has zero mean and unit variance
/// at every position, so layer normalization leaves it (almost) unchanged.
fn normalized_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut x = uniform::<f64>(&[1, c, h, w], seed);
    let hw = h * w;
    let d = x.data_mut();
    for p in 0..hw {
        let mean = (0..c).map(|ch| d[ch * hw + p]).sum::<f64>() / c as f64;
        let var = (0..c).map(|ch| (d[ch * hw + p] - mean).powi(2)).sum::<f64>() / c as f64;
        for ch in 0..c {
            d[ch * hw + p] = (d[ch * hw + p] - mean) / var.sqrt();
        }
    }
    x
}

fn identity_scan(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    zero(store, &format!("{prefix}.w_c"))?;
    zero(store, &format!("{prefix}.prompt_pool"))?;
    store.set(&format!("{prefix}.d"), Tensor::ones(&[channels]))
}

pub(crate) fn hdmamba(r: &mut Recorder) {
    let (c, h, w) = (3, 4, 5);
    let xs = uniform::<f64>(&[2, c, h, w], 60);
    let xw = uniform::<f64>(&[2, c, h, w], 61);
    let gw = Tensor::<f64>::randn(&[2 * c, c], 1.0, &mut rng(62));
    let gb = Tensor::<f64>::randn(&[c], 1.0, &mut rng(63));

    r.check("hdmamba.gate_shape_rejected", || {
        let bad_w = fuse(&xs, &xw, &Tensor::zeros(&[c, c]), &gb);
        let bad_b = fuse(&xs, &xw, &gw, &Tensor::zeros(&[2 * c]));
        let ok = bad_w.is_err() && bad_b.is_err();
        Ok(Measure::truth(ok).note("w must be [2C, C] and b [C]"))
    });
    r.check("hdmamba.branch_shape_rejected", || {
        let other = uniform::<f64>(&[2, c, h, w + 1], 64);
        Ok(Measure::rejects(fuse(&xs, &other, &gw, &gb)))
    });
    r.check("hdmamba.gate_half_averages", || {
        let (out, gate) = fuse(&xs, &xw, &Tensor::zeros(&[2 * c, c]), &Tensor::zeros(&[c]))?;
        let want = xs.zip_map(&xw, |a, b| 0.5 * (a + b))?;
        let gate_err = gate.data().iter().map(|g| (g - 0.5).abs()).fold(0.0, f64::max);
        Ok(Measure::within(max_diff(&out, &want)?.max(gate_err), 1e-15).note("w = 0, b = 0"))
    });
    r.check("hdmamba.gate_saturates_to_spatial", || {
        let (out, _) = fuse(&xs, &xw, &Tensor::zeros(&[2 * c, c]), &Tensor::full(&[c], 20.0))?;
        Ok(Measure::within(max_diff(&out, &xs)?, 1e-6).note("b = 20"))
    });
    r.check("hdmamba.equal_branches_pass_through", || {
        let (out, _) = fuse(&xs, &xs, &gw, &gb)?;
        Ok(Measure::within(max_diff(&out, &xs)?, 1e-12))
    });
    r.check("hdmamba.fuse_convex", || {
        let mut g = rng(65);
        let mut worst: f64 = 0.0;
        let mut gate_ok = true;
        for trial in 0..1000 {
            let a = Tensor::<f64>::rand_uniform(&[1, 2, 2, 2], -3.0, 3.0, &mut g);
            let b = Tensor::<f64>::rand_uniform(&[1, 2, 2, 2], -3.0, 3.0, &mut g);
            let spread = g.gen_range(0.1..5.0);
            let w = Tensor::<f64>::randn(&[4, 2], spread, &mut g);
            let bias = Tensor::<f64>::randn(&[2], spread, &mut rng(66 + trial));
            let (out, gate) = fuse(&a, &b, &w, &bias)?;
            gate_ok &= gate.data().iter().all(|v| (0.0..=1.0).contains(v));
            for ((o, x), y) in out.data().iter().zip(a.data()).zip(b.data()) {
                let (lo, hi) = (x.min(*y), x.max(*y));
                worst = worst.max(lo - o).max(o - hi);
            }
        }
        let worst = if gate_ok { worst } else { f64::INFINITY };
        Ok(Measure::within(worst, 1e-12).note("max excursion outside [min, max] over 1000 triples"))
    });

    let ssm = SsmConfig {
        channels: 4,
        state: 3,
        prompts: 2,
    };
    r.check("hdmamba.identity_branches_double", || {
        let cfg = HdMambaConfig { ssm, classes: 1 };
        let (block, mut store) = build(67, |pb| HdMambaBlock::build(pb, "hd", cfg))?;
        super::randomize(&mut store, 68, 0.5)?;
        identity_scan(&mut store, "hd.spatial.ssm", ssm.channels)?;
        identity_scan(&mut store, "hd.wavelet.ssm", ssm.channels)?;
        store.set("hd.norm.g", Tensor::ones(&[ssm.channels]))?;
        zero(&mut store, "hd.norm.b")?;
        zero(&mut store, "hd.gate.w")?;
        zero(&mut store, "hd.gate.b")?;
        let x = normalized_input(ssm.channels, 6, 6, 69);
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            block.forward(g, xv)
        })?;
        let want = x.map(|v| 2.0 * v);
        Ok(Measure::within(max_diff(&got, &want)?, 1e-4).note("G = 0.5, both branches identity, normalized input"))
    });
    r.check("grad.gated_fuse", || {
        let mut store = ParamStore::new();
        store.insert("xs", uniform(&[1, c, h, w], 70))?;
        store.insert("xw", uniform(&[1, c, h, w], 71))?;
        store.insert("gate.w", Tensor::randn(&[2 * c, c], 0.7, &mut rng(72)))?;
        store.insert("gate.b", Tensor::randn(&[c], 0.7, &mut rng(73)))?;
        grad_measure(&BlockObjective::new(Subject::GatedFuse), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("grad.hdmamba_block", || {
        let cfg = HdMambaConfig { ssm, classes: 4 };
        let (block, mut store) = build(74, |pb| HdMambaBlock::build(pb, "hd", cfg))?;
        widen_routers(&mut store, 75)?;
        add_input(&mut store, &[1, ssm.channels, 4, 4], 76)?;
        grad_measure(&BlockObjective::new(Subject::HdMamba(block)), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("hdmamba.gate_strictly_inside", || {
        let mut open = true;
        for seed in 0..50 {
            let a = uniform::<f64>(&[2, c, h, w], 200 + seed);
            let b = uniform::<f64>(&[2, c, h, w], 300 + seed);
            let wt = Tensor::<f64>::randn(&[2 * c, c], 2.0, &mut rng(400 + seed));
            let (_, gate) = fuse(&a, &b, &wt, &gb)?;
            open &= gate.data().iter().all(|&v| v > 0.0 && v < 1.0);
        }
        Ok(Measure::truth(open).note("G in (0, 1) on 50 random inputs"))
    });
    r.check("hdmamba.swap_complements_gate", || {
        // Swapping the branches and negating the gate logits (rows of w
        // swapped to follow the concatenation) turns G into 1 - G.
        let swapped_w = Tensor::from_fn(&[2 * c, c], |i| {
            let (row, col) = (i / c, i % c);
            -gw.data()[((row + c) % (2 * c)) * c + col]
        });
        let (a, ga) = fuse(&xs, &xw, &gw, &gb)?;
        let (b, gb2) = fuse(&xw, &xs, &swapped_w, &gb.map(|v| -v))?;
        let gate_err = ga
            .data()
            .iter()
            .zip(gb2.data())
            .map(|(p, q)| (p + q - 1.0).abs())
            .fold(0.0, f64::max);
        Ok(Measure::within(max_diff(&a, &b)?.max(gate_err), 1e-12))
    });
    r.check("hdmamba.block_shape", || {
        let cfg = HdMambaConfig { ssm, classes: 3 };
        let (block, store) = build(77, |pb| HdMambaBlock::build(pb, "hd", cfg))?;
        let mut ok = true;
        for (hh, ww) in [(4, 4), (5, 7), (1, 3)] {
            let y = run::<f32>(&store, Routing::eval(), |g| {
                let xv = g.constant(uniform(&[2, ssm.channels, hh, ww], 78));
                block.forward(g, xv)
            })?;
            ok &= y.shape() == [2, ssm.channels, hh, ww];
        }
        Ok(Measure::truth(ok))
    });
}
