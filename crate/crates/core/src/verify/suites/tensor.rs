use super::{max_diff, rng, uniform};
use crate::checkpoint::{decode, encode};
use crate::error::Result;
use crate::gradcheck::{project, Objective, GRAD_TOL};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::verify::oracles;
use crate::verify::prims::{Prim, PrimObjective};
use crate::verify::{grad_measure, Measure, Options, Recorder};

/// A primitive followed by an identity op whose backward rule scales the
/// incoming gradient, so analytic and numeric gradients disagree.
struct Corrupted(Prim);

impl Objective for Corrupted {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let out = self.0.apply(g)?;
        let v = g.value(out).clone();
        let bad = g.push_op("corrupted", &[out], v, |a| vec![Some(a.grad.map(|d| d * T::of(1.5)))]);
        project(g, bad, 7)
    }
}

/// `sum(x^2)` with the backward rule `x` instead of `2x`.
struct NegativeControl;

impl Objective for NegativeControl {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let a = g.p("a")?;
        let v = g.value(a).map(|x| x * x);
        let sq = g.push_op("square_wrong", &[a], v, |args| {
            vec![Some(args.inputs[0].zip_map(args.grad, |x, d| x * d).expect("shape"))]
        });
        Ok(g.sum(sq))
    }
}

fn grads_of(t: &Tape<f64>, loss: Var, x: Var) -> Result<Vec<f64>> {
    let g = t.backward(loss)?;
    Ok(g.get(x).map(|t| t.data().to_vec()).unwrap_or_default())
}

pub(crate) fn tensor(r: &mut Recorder, opts: &Options) {
    r.check("tensor.shape_matches_data", || {
        let bad = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]);
        let good = Tensor::<f32>::new(&[2, 3], vec![0.0; 6])?;
        let ok = bad.is_err() && good.numel() == good.data().len();
        Ok(Measure::truth(ok).note("product(shape) == len(data) enforced at construction"))
    });
    r.check("tensor.non_finite_detected", || {
        let nan = Tensor::<f32>::new(&[2], vec![1.0, f32::NAN])?;
        let inf = Tensor::<f32>::new(&[2], vec![f32::INFINITY, 0.0])?;
        let fine = Tensor::<f32>::new(&[2], vec![1.0, 2.0])?;
        Ok(Measure::truth(
            nan.check_finite("t").is_err() && inf.check_finite("t").is_err() && fine.check_finite("t").is_ok(),
        ))
    });
    r.check("tape.fanout_accumulates", || {
        // sum(x * x + x) at [1, 2] has gradient 2x + 1.
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2], vec![1.0, 2.0])?);
        let sq = t.mul(x, x)?;
        let y = t.add(sq, x)?;
        let loss = t.sum(y);
        let g = grads_of(&t, loss, x)?;
        Ok(Measure::within(oracles_diff(&g, &[3.0, 5.0]), 0.0))
    });
    r.check("tape.diamond_visits_once", || {
        // b = 2a, c = a + 1, loss = sum(b * c): gradient 4a + 2.
        let mut t = Tape::<f64>::new();
        let a = t.leaf(uniform(&[5], 1));
        let b = t.scale(a, 2.0);
        let c = t.add_scalar(a, 1.0);
        let d = t.mul(b, c)?;
        let loss = t.sum(d);
        let g = grads_of(&t, loss, a)?;
        let want: Vec<f64> = t.value(a).data().iter().map(|v| 4.0 * v + 2.0).collect();
        Ok(Measure::within(oracles_diff(&g, &want), 1e-12))
    });
    r.check("params.unique_names", || {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]))?;
        Ok(Measure::rejects(s.insert("w", Tensor::zeros(&[2]))))
    });
    r.check("params.grad_shape", || {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 3]))?;
        let same = s.iter().all(|(_, e)| e.grad.shape() == e.value.shape());
        let mut bad = indexmap::IndexMap::new();
        bad.insert("w".to_string(), Tensor::<f32>::zeros(&[3, 2]));
        let rejected = s.accumulate_grads(&bad).is_err();
        Ok(Measure::truth(same && rejected))
    });
    r.check("params.serialization_bit_exact", || {
        let mut s = ParamStore::new();
        let mut g = rng(3);
        s.insert("a.w", Tensor::randn(&[3, 4], 1.0, &mut g))?;
        s.insert("b", Tensor::new(&[3], vec![f32::MIN_POSITIVE, -0.0, 1e30])?)?;
        let (back, seed) = decode(&encode(&s, Some(0xdead_beef_cafe))?)?;
        let same = s.iter().zip(back.iter()).all(|((n1, e1), (n2, e2))| {
            n1 == n2
                && e1.value.shape() == e2.value.shape()
                && e1.value.data().iter().zip(e2.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        Ok(Measure::truth(same && back.len() == s.len() && seed == Some(0xdead_beef_cafe)))
    });

    r.check("conv2d.ones_counts_overlap", || {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = t.conv2d(x, k, 1, 1)?;
        let d = t.value(y).data();
        let err = [
            (d[4] - 9.0).abs(),
            (d[0] - 4.0).abs(),
            (d[2] - 4.0).abs(),
            (d[6] - 4.0).abs(),
            (d[8] - 4.0).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        Ok(Measure::within(err, 0.0).note("center 9, corners 4"))
    });
    r.check("conv2d.identity_kernel", || {
        let mut t = Tape::<f64>::new();
        let xv = uniform(&[1, 2, 4, 4], 5);
        let k = Tensor::from_fn(&[2, 2, 3, 3], |i| if i / 18 == (i / 9) % 2 && i % 9 == 4 { 1.0 } else { 0.0 });
        let x = t.constant(xv.clone());
        let k = t.constant(k);
        let y = t.conv2d(x, k, 1, 1)?;
        Ok(Measure::within(max_diff(t.value(y), &xv)?, 0.0))
    });
    r.check("conv2d.naive_oracle", || {
        let mut worst: f64 = 0.0;
        for (groups, kshape) in [(1, [3, 2, 3, 3]), (2, [2, 1, 3, 3]), (1, [2, 2, 1, 1])] {
            let xv = uniform::<f64>(&[1, 2, 4, 4], 7);
            let kv = uniform::<f64>(&kshape, 8);
            let pad = kshape[2] / 2;
            let mut t = Tape::<f64>::new();
            let x = t.constant(xv.clone());
            let k = t.constant(kv.clone());
            let y = t.conv2d(x, k, pad, groups)?;
            worst = worst.max(max_diff(t.value(y), &oracles::conv2d(&xv, &kv, pad, groups))?);
        }
        Ok(Measure::within(worst, 1e-6).note("dense, depthwise and 1x1 kernels"))
    });
    r.check("conv2d.shape_error", || {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
        Ok(Measure::rejects(t.conv2d(x, k, 1, 1)))
    });
    r.check("primitive.global_avg_pool_constant", || {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| if i < 9 { 0.7 } else { -2.5 }));
        let z = t.global_avg_pool(x)?;
        let d = t.value(z).data();
        Ok(Measure::within((d[0] - 0.7).abs().max((d[1] + 2.5).abs()), 1e-15))
    });
    r.check("primitive.sigmoid_zero", || {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1]));
        let y = t.sigmoid(x);
        Ok(Measure::within((t.value(y).data()[0] - 0.5).abs(), 0.0))
    });
    r.check("primitive.layer_norm_moments", || {
        let (b, c, h, w) = (2, 8, 3, 3);
        let xv: Tensor<f64> = Tensor::rand_uniform(&[b, c, h, w], -4.0, 4.0, &mut rng(9));
        let mut t = Tape::<f64>::new();
        let xs = xv.data().to_vec();
        let x = t.constant(xv);
        let gm = t.constant(Tensor::ones(&[c]));
        let bt = t.constant(Tensor::zeros(&[c]));
        let y = t.layer_norm(x, gm, bt, 1)?;
        let d = t.value(y).data();
        let mut worst: f64 = 0.0;
        for bi in 0..b {
            for p in 0..h * w {
                let vals: Vec<f64> = (0..c).map(|ch| d[(bi * c + ch) * h * w + p]).collect();
                let mean = vals.iter().sum::<f64>() / c as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                // The stabilizing epsilon scales the variance by s / (s + eps).
                let raw: Vec<f64> = (0..c).map(|ch| xs[(bi * c + ch) * h * w + p]).collect();
                let rm = raw.iter().sum::<f64>() / c as f64;
                let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / c as f64;
                let expected = rv / (rv + crate::ops::LAYER_NORM_EPS);
                worst = worst.max(mean.abs()).max((var - expected).abs());
                if rv >= 1.0 {
                    worst = worst.max((var - 1.0).abs());
                }
            }
        }
        Ok(Measure::within(worst, 1e-5).note("|mean|, variance against s / (s + eps), and |var - 1| where s >= 1"))
    });
    r.check("backward.sum_gives_ones", || {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(uniform(&[2, 3], 11));
        let loss = t.sum(x);
        let g = grads_of(&t, loss, x)?;
        Ok(Measure::within(oracles_diff(&g, &[1.0; 6]), 0.0))
    });
    r.check("backward.square_gives_2x", || {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2], vec![1.0, 2.0])?);
        let sq = t.mul(x, x)?;
        let loss = t.sum(sq);
        let g = grads_of(&t, loss, x)?;
        Ok(Measure::within(oracles_diff(&g, &[2.0, 4.0]), 0.0))
    });
    r.check("backward.non_scalar_loss_rejected", || {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        Ok(Measure::rejects(t.backward(x)))
    });

    for prim in Prim::ALL {
        let name = format!("grad.{}", prim.name());
        let store = prim.store(0x1000 + prim as u64);
        if opts.corrupt_backward.as_deref() == Some(prim.name().as_str()) {
            r.grad(name, &Corrupted(prim), &store, "", 1);
        } else {
            r.grad(name, &PrimObjective { prim, seed: 7 }, &store, "", 1);
        }
    }
    r.check("grad.negative_control", || {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::rand_uniform(&[3, 3], 0.5, 1.5, &mut rng(13)))?;
        let m = grad_measure(&NegativeControl, &s, "", 1)?;
        // The harness must flag the wrong rule: pass when the check fails.
        Ok(Measure::truth(m.value > GRAD_TOL).note(format!("corrupted rule measured {:.3e}", m.value)))
    });
    r.check("tensor.repeat_bit_identical", || {
        let once = || -> Result<Vec<u32>> {
            let mut g = rng(21);
            let mut t = Tape::<f32>::new();
            let x = t.leaf(Tensor::randn(&[2, 3, 6, 6], 1.0, &mut g));
            let k = t.leaf(Tensor::randn(&[4, 3, 3, 3], 0.5, &mut g));
            let y = t.conv2d(x, k, 1, 1)?;
            let s = t.softmax(y, 1)?;
            let m = t.mul(s, y)?;
            let loss = t.mean(m);
            let grads = t.backward(loss)?;
            let mut bits: Vec<u32> = t.value(m).data().iter().map(|v| v.to_bits()).collect();
            for v in [x, k] {
                bits.extend(
                    grads
                        .get(v)
                        .map(|g| g.data().to_vec())
                        .unwrap_or_default()
                        .iter()
                        .map(|v| v.to_bits()),
                );
            }
            Ok(bits)
        };
        Ok(Measure::truth(once()? == once()?).note("forward values and gradients"))
    });
}

fn oracles_diff(a: &[f64], b: &[f64]) -> f64 {
    super::max_diff_slices(a, b)
}
