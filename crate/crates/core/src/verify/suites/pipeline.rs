use super::{max_diff, uniform, zero};
use crate::attention::HaUnetConfig;
use crate::error::Result;
use crate::params::ParamStore;
use crate::pipeline::{PipelineConfig, Prism, Variant};
use crate::tensor::Tensor;
use crate::verify::objectives::{add_input, widen_routers, BlockObjective, Subject};
use crate::verify::{grad_measure, Measure, Recorder, MIN_BLOCK_COORDS};

fn zero_heads(model: &Prism, store: &mut ParamStore, which: &[usize]) -> Result<()> {
    let prefixes = model.head_prefixes();
    let names: Vec<String> = store
        .names()
        .filter(|n| which.iter().any(|&s| prefixes.get(s).is_some_and(|p| n.starts_with(p))))
        .map(str::to_string)
        .collect();
    for n in names {
        zero(store, &n)?;
    }
    Ok(())
}

/// Images in `[0, 1]`.
fn image(shape: &[usize], seed: u64) -> Tensor {
    uniform::<f32>(shape, seed).map(|v| 0.5 * (v + 1.0))
}

pub(crate) fn pipeline(r: &mut Recorder) {
    let tiny = PipelineConfig::tiny();

    r.check("pipeline.stage_shapes", || {
        let (model, store) = Prism::build(tiny, 1)?;
        let mut ok = true;
        for shape in [[2, 3, 16, 24], [1, 3, 33, 47]] {
            let x = image(&shape, 2);
            let outs = model.infer(&store.values(), &x)?;
            ok &= outs.iter().all(|o| o.as_ref().is_some_and(|t| t.shape() == shape));
        }
        Ok(Measure::truth(ok).note("X1, X2, X3 match the input dims, including 33x47"))
    });
    r.check("pipeline.width_mismatch_rejected", || {
        let cfg = PipelineConfig {
            cenet: HaUnetConfig {
                channels: 16,
                ..tiny.cenet
            },
            ..tiny
        };
        Ok(Measure::rejects(Prism::build(cfg, 1)))
    });
    r.check("pipeline.undersized_rejected", || {
        let (model, store) = Prism::build(tiny, 1)?;
        let m = tiny.min_size();
        Ok(Measure::rejects(model.infer(&store.values(), &image(&[1, 3, m - 1, m], 3))))
    });
    r.check("pipeline.non_rgb_rejected", || {
        let (model, store) = Prism::build(tiny, 1)?;
        Ok(Measure::rejects(model.infer(&store.values(), &image(&[1, 4, 16, 16], 3))))
    });
    r.check("pipeline.zero_head_identity", || {
        let (model, base) = Prism::build(tiny, 4)?;
        let x = image(&[1, 3, 33, 47], 5);
        let mut worst: f64 = 0.0;
        for s in 0..3 {
            let mut store = base.clone();
            zero_heads(&model, &mut store, &[s])?;
            let outs = model.infer(&store.values(), &x)?;
            let out = outs[s].as_ref().expect("full pipeline has every stage");
            worst = worst.max(out.max_abs_diff(&x)? as f64);
        }
        Ok(Measure::within(worst, 0.0).note("each stage with its head zeroed returns the rainy input exactly"))
    });
    r.check("pipeline.all_heads_zero_identity", || {
        let (model, mut store) = Prism::build(tiny, 6)?;
        zero_heads(&model, &mut store, &[0, 1, 2])?;
        let x = image(&[2, 3, 16, 16], 7);
        let mut worst: f64 = 0.0;
        for out in model.infer(&store.values(), &x)?.iter().flatten() {
            worst = worst.max(out.max_abs_diff(&x)? as f64);
        }
        Ok(Measure::within(worst, 0.0))
    });
    r.check("pipeline.deterministic", || {
        let (m1, s1) = Prism::build(tiny, 8)?;
        let (_, s2) = Prism::build(tiny, 8)?;
        let (_, s3) = Prism::build(tiny, 9)?;
        let x = image(&[1, 3, 16, 16], 10);
        let a = m1.infer(&s1.values(), &x)?;
        let b = m1.infer(&s2.values(), &x)?;
        let same = a == b && s1.iter().zip(s2.iter()).all(|((_, e1), (_, e2))| e1.value == e2.value);
        let differs = s1.iter().zip(s3.iter()).any(|((_, e1), (_, e3))| e1.value != e3.value);
        Ok(Measure::truth(same && differs).note("same seed gives identical weights and outputs"))
    });
    r.check("pipeline.variants_run_their_stages", || {
        let x = image(&[1, 3, 16, 16], 11);
        let mut ok = true;
        for v in Variant::ALL {
            let (model, store) = Prism::build(tiny.with_variant(v), 12)?;
            let outs = model.infer(&store.values(), &x)?;
            ok &= outs.iter().map(Option::is_some).collect::<Vec<_>>() == v.stages();
        }
        Ok(Measure::truth(ok))
    });
    r.check("pipeline.single_image_matches_batch", || {
        let (model, store) = Prism::build(tiny, 13)?;
        let x = image(&[1, 3, 16, 16], 14);
        let single = x.clone().reshape(&[3, 16, 16])?;
        let a = model.infer(&store.values(), &x)?;
        let b = model.infer(&store.values(), &single)?;
        let mut worst: f64 = 0.0;
        for (p, q) in a.iter().flatten().zip(b.iter().flatten()) {
            worst = worst.max(p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs() as f64).fold(0.0, f64::max));
        }
        Ok(Measure::within(worst, 0.0))
    });

    for (s, name) in ["cenet", "sfnet", "rnet"].iter().enumerate() {
        r.check(format!("grad.{name}"), || {
            let (model, mut store) = Prism::build(tiny, 15)?;
            widen_routers(&mut store, 16)?;
            add_input(&mut store, &[1, 3, 16, 16], 17)?;
            let prefix = format!("stage{}.", s + 1);
            grad_measure(&BlockObjective::new(Subject::Stage(model, s)), &store, &prefix, MIN_BLOCK_COORDS)
        });
    }
    r.check("pipeline.feature_handoff", || {
        let (model, store) = Prism::build(tiny, 18)?;
        let values = store.values::<f64>();
        let mut g = crate::graph::Graph::inference(&values, crate::graph::Routing::eval());
        let x = g.constant(image(&[1, 3, 16, 16], 19).cast());
        let cenet = model.cenet.as_ref().expect("full model");
        let sfnet = model.sfnet.as_ref().expect("full model");
        let rnet = model.rnet.as_ref().expect("full model");
        let (_, f1) = cenet.forward(&mut g, x)?;
        let z1 = Tensor::zeros(g.shape(f1));
        let z1 = g.constant(z1);
        let (x2, f2) = sfnet.forward(&mut g, x, Some(f1))?;
        let (x2_cut, _) = sfnet.forward(&mut g, x, Some(z1))?;
        let z2 = Tensor::zeros(g.shape(f2));
        let z2 = g.constant(z2);
        let x3 = rnet.forward(&mut g, x, Some(f2))?;
        let x3_cut = rnet.forward(&mut g, x, Some(z2))?;
        let d2 = max_diff(g.value(x2), g.value(x2_cut))?;
        let d3 = max_diff(g.value(x3), g.value(x3_cut))?;
        Ok(Measure::truth(d2 > 1e-6 && d3 > 1e-6).note(format!("zeroed features change X2 by {d2:.2e}, X3 by {d3:.2e}")))
    });
    r.check("pipeline.rnet_full_resolution", || {
        let (model, store) = Prism::build(tiny, 20)?;
        let values = store.values::<f32>();
        let mut g = crate::graph::Graph::inference(&values, crate::graph::Routing::eval());
        let (h, w) = (12, 20);
        let x = g.constant(image(&[2, 3, h, w], 21));
        let guide = g.constant(Tensor::zeros(&[2, tiny.channels, h, w]));
        let start = g.len();
        model.rnet.as_ref().expect("full model").forward(&mut g, x, Some(guide))?;
        let off: Vec<String> = g.nodes()[start..]
            .iter()
            // Batch-2 spatial maps; per-channel [B,C,1,1] gates are not feature maps.
            .filter(|n| n.value.rank() == 4 && n.value.shape()[0] == 2 && n.value.shape()[2..] != [1, 1])
            .filter(|n| n.value.shape()[2..] != [h, w])
            .map(|n| format!("{} {:?}", n.op, n.value.shape()))
            .collect();
        Ok(Measure::truth(off.is_empty()).note(if off.is_empty() {
            "every feature map is HxW".to_string()
        } else {
            off.join(", ")
        }))
    });
}
