use super::{build, delta_kernel, max_diff, randomize, rows, run, uniform, zero};
use crate::attention::{ChannelAttention, ConvFfn, HaBlock, HaUnet, HaUnetConfig, UnetKind, WindowAttention};
use crate::error::{Error, Result};
use crate::graph::{Graph, Routing};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::verify::objectives::{add_input, BlockObjective, Subject};
use crate::verify::oracles;
use crate::verify::{Measure, Recorder, MIN_BLOCK_COORDS};

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Per-position layer norm over channels followed by a channel affine map.
fn layer_norm_pixels(x: &Tensor<f64>, g: &[f64], b: &[f64]) -> Tensor<f64> {
    let (bs, c, h, w) = x.dims4().expect("rank 4");
    let mut out = Tensor::zeros(&[bs, c, h, w]);
    for n in 0..bs {
        for p in 0..h * w {
            let v: Vec<f64> = (0..c).map(|ch| x.data()[(n * c + ch) * h * w + p]).collect();
            let mean = v.iter().sum::<f64>() / c as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + crate::ops::LAYER_NORM_EPS).sqrt();
            for ch in 0..c {
                out.data_mut()[(n * c + ch) * h * w + p] = (v[ch] - mean) * inv * g[ch] + b[ch];
            }
        }
    }
    out
}

/// `y[o] = b[o] + sum_i x[i] w[i][o]` at every position of `[B,C,H,W]`.
fn pixel_linear(x: &Tensor<f64>, w: &[Vec<f64>], b: &[f64]) -> Tensor<f64> {
    let (bs, c, h, wd) = x.dims4().expect("rank 4");
    let d = b.len();
    let mut out = Tensor::zeros(&[bs, d, h, wd]);
    for n in 0..bs {
        for p in 0..h * wd {
            for o in 0..d {
                let acc: f64 = (0..c).map(|i| x.data()[(n * c + i) * h * wd + p] * w[i][o]).sum();
                out.data_mut()[(n * d + o) * h * wd + p] = acc + b[o];
            }
        }
    }
    out
}

fn p64(store: &ParamStore, name: &str) -> Result<Tensor<f64>> {
    Ok(store.get(name)?.cast())
}

fn ca_oracle(store: &ParamStore, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (_, c, h, w) = x.dims4()?;
    let y = oracles::conv2d(x, &p64(store, "ca.conv1.w")?, 1, 1);
    let alpha = p64(store, "ca.prelu")?;
    let y = Tensor::from_fn(y.shape(), |i| {
        let v = y.data()[i];
        if v >= 0.0 {
            v
        } else {
            alpha.data()[(i / (h * w)) % c] * v
        }
    });
    let y = oracles::conv2d(&y, &p64(store, "ca.conv2.w")?, 1, 1);
    let z: Vec<f64> = (0..c)
        .map(|ch| y.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    let w1 = rows(&p64(store, "ca.w1")?);
    let w2 = rows(&p64(store, "ca.w2")?);
    let hidden: Vec<f64> = w1
        .iter()
        .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().max(0.0))
        .collect();
    let s: Vec<f64> = w2
        .iter()
        .map(|row| 1.0 / (1.0 + (-row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()).exp()))
        .collect();
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i] * s[(i / (h * w)) % c]))
}

fn ffn_oracle(store: &ParamStore, x: &Tensor<f64>, hidden: usize) -> Result<Tensor<f64>> {
    let n = layer_norm_pixels(x, p64(store, "ffn.ln.g")?.data(), p64(store, "ffn.ln.b")?.data());
    let u = pixel_linear(&n, &rows(&p64(store, "ffn.w1")?), p64(store, "ffn.b1")?.data());
    let u = u.map(gelu);
    let u = oracles::conv2d(&u, &p64(store, "ffn.dw")?, 1, hidden);
    Ok(pixel_linear(&u, &rows(&p64(store, "ffn.w2")?), p64(store, "ffn.b2")?.data()))
}

fn tiny_unet() -> HaUnetConfig {
    HaUnetConfig {
        channels: 8,
        levels: 2,
        blocks: 2,
        window: 4,
        heads: 2,
        reduction: 4,
        ffn_expansion: 2,
    }
}

pub(crate) fn attention(r: &mut Recorder) {
    r.check("attention.ca_reduction_divides", || {
        Ok(Measure::rejects(build(1, |pb| ChannelAttention::build(pb, "ca", 6, 4))))
    });
    r.check("attention.ca_identity_kernels", || {
        let (ca, mut store) = build(2, |pb| ChannelAttention::build(pb, "ca", 4, 2))?;
        delta_kernel(&mut store, "ca.conv1.w")?;
        delta_kernel(&mut store, "ca.conv2.w")?;
        let x: Tensor<f64> = Tensor::rand_uniform(&[1, 4, 4, 4], 0.0, 1.0, &mut super::rng(3));
        let values = store.values::<f64>();
        let mut g = Graph::inference(&values, Routing::eval());
        let xv = g.constant(x.clone());
        let tr = ca.trace(&mut g, xv)?;
        let gate = g.value(tr.gate).clone();
        let want = Tensor::from_fn(x.shape(), |i| x.data()[i] * (1.0 + gate.data()[(i / 16) % 4]));
        let err = max_diff(g.value(tr.y), &x)?.max(max_diff(g.value(tr.out), &want)?);
        Ok(Measure::within(err, 1e-12).note("y = x and output = x (1 + s)"))
    });
    r.check("attention.ca_scalar_oracle", || {
        let (ca, mut store) = build(4, |pb| ChannelAttention::build(pb, "ca", 4, 2))?;
        randomize(&mut store, 5, 0.5)?;
        let x = uniform::<f64>(&[1, 4, 4, 4], 6);
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            ca.forward(g, xv)
        })?;
        Ok(Measure::within(max_diff(&got, &ca_oracle(&store, &x)?)?, 1e-5))
    });

    r.check("attention.wattn_heads_divide", || {
        Ok(Measure::rejects(build(1, |pb| WindowAttention::build(pb, "wa", 6, 4, 4))))
    });
    r.check("attention.wattn_bias_offsets", || {
        // Every row of the (2w-1)^2 table is some relative offset of a pair
        // inside one window, so each must receive gradient.
        let w = 3;
        let (wa, mut store) = build(2, |pb| WindowAttention::build(pb, "wa", 4, w, 2))?;
        randomize(&mut store, 3, 0.5)?;
        let shape_ok = store.get("wa.rel_bias")?.shape() == [(2 * w - 1) * (2 * w - 1), 2];
        let values = store.values::<f64>();
        let mut g = Graph::new(&values, Routing::eval());
        let x = g.constant(uniform(&[1, 4, w, w], 4));
        let y = wa.forward(&mut g, x, false)?;
        let loss = crate::gradcheck::project(&mut g, y, 1)?;
        let grads = g.param_grads(loss)?;
        let gb = &grads["wa.rel_bias"];
        let reached = gb.data().chunks(2).filter(|row| row.iter().any(|v| v.abs() > 0.0)).count();
        Ok(Measure::truth(shape_ok && reached == (2 * w - 1) * (2 * w - 1))
            .note(format!("{reached} of {} offsets reached", (2 * w - 1) * (2 * w - 1))))
    });
    r.check("attention.wattn_window_too_large", || {
        let (wa, store) = build(1, |pb| WindowAttention::build(pb, "wa", 4, 4, 2))?;
        Ok(Measure::rejects(run::<f64>(&store, Routing::eval(), |g| {
            let x = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
            wa.forward(g, x, false)
        })))
    });
    r.check("attention.wattn_single_token", || {
        let (wa, mut store) = build(3, |pb| WindowAttention::build(pb, "wa", 4, 1, 2))?;
        randomize(&mut store, 4, 0.5)?;
        let x = uniform::<f64>(&[1, 4, 3, 3], 5);
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            wa.forward(g, xv, false)
        })?;
        let v = pixel_linear(&x, &rows(&p64(&store, "wa.wv")?), p64(&store, "wa.bv")?.data());
        let want = pixel_linear(&v, &rows(&p64(&store, "wa.wproj")?), p64(&store, "wa.bproj")?.data());
        Ok(Measure::within(max_diff(&got, &want)?, 1e-12).note("output = proj(value(x))"))
    });
    r.check("attention.wattn_dense_oracle", || {
        let (c, w, heads) = (4, 4, 2);
        let (wa, mut store) = build(5, |pb| WindowAttention::build(pb, "wa", c, w, heads))?;
        randomize(&mut store, 6, 0.5)?;
        let x = uniform::<f64>(&[1, c, w, w], 7);
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            wa.forward(g, xv, false)
        })?;
        let t = w * w;
        let tokens: Vec<Vec<f64>> = (0..t).map(|p| (0..c).map(|ch| x.data()[ch * t + p]).collect()).collect();
        let table = p64(&store, "wa.rel_bias")?;
        let span = 2 * w - 1;
        let bias: Vec<Vec<Vec<f64>>> = (0..heads)
            .map(|hd| {
                (0..t)
                    .map(|i| {
                        (0..t)
                            .map(|j| {
                                let dy = (i / w) as isize - (j / w) as isize + w as isize - 1;
                                let dx = (i % w) as isize - (j % w) as isize + w as isize - 1;
                                table.data()[(dy as usize * span + dx as usize) * heads + hd]
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let m = |n: &str| -> Result<Vec<Vec<f64>>> { Ok(rows(&p64(&store, n)?)) };
        let b = |n: &str| -> Result<Vec<f64>> { Ok(p64(&store, n)?.data().to_vec()) };
        let out = oracles::dense_attention(
            &tokens,
            &m("wa.wq")?,
            &b("wa.bq")?,
            &m("wa.wk")?,
            &b("wa.bk")?,
            &m("wa.wv")?,
            &b("wa.bv")?,
            &m("wa.wproj")?,
            &b("wa.bproj")?,
            heads,
            &bias,
        );
        let want = Tensor::from_fn(&[1, c, w, w], |i| out[i % t][i / t]);
        Ok(Measure::within(max_diff(&got, &want)?, 1e-5))
    });
    r.check("attention.wattn_shift_constant", || {
        let (wa, mut store) = build(8, |pb| WindowAttention::build(pb, "wa", 4, 4, 2))?;
        randomize(&mut store, 9, 0.5)?;
        let x = Tensor::<f64>::full(&[1, 4, 8, 8], 0.3);
        let values = store.values::<f64>();
        let mut g = Graph::inference(&values, Routing::eval());
        let xv = g.constant(x);
        let plain = wa.trace(&mut g, xv, false)?;
        let shifted = wa.trace(&mut g, xv, true)?;
        let err = max_diff(g.value(plain.out), g.value(shifted.out))?;
        Ok(Measure::within(err, 1e-6).note(format!("shift {}", shifted.shift)))
    });

    r.check("attention.ffn_expansion_positive", || {
        Ok(Measure::rejects(build(1, |pb| ConvFfn::build(pb, "ffn", 4, 0))))
    });
    r.check("attention.ffn_zero_output", || {
        let (ffn, mut store) = build(2, |pb| ConvFfn::build(pb, "ffn", 4, 2))?;
        randomize(&mut store, 3, 0.5)?;
        zero(&mut store, "ffn.w2")?;
        zero(&mut store, "ffn.b2")?;
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let x = g.constant(uniform(&[1, 4, 4, 4], 4));
            ffn.forward(g, x)
        })?;
        Ok(Measure::within(got.max_abs(), 0.0))
    });
    r.check("attention.ffn_delta_kernel", || {
        let (ffn, mut store) = build(3, |pb| ConvFfn::build(pb, "ffn", 4, 2))?;
        randomize(&mut store, 4, 0.5)?;
        delta_kernel(&mut store, "ffn.dw")?;
        let x = uniform::<f64>(&[1, 4, 4, 4], 5);
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            ffn.forward(g, xv)
        })?;
        let n = layer_norm_pixels(&x, p64(&store, "ffn.ln.g")?.data(), p64(&store, "ffn.ln.b")?.data());
        let u = pixel_linear(&n, &rows(&p64(&store, "ffn.w1")?), p64(&store, "ffn.b1")?.data()).map(gelu);
        let want = pixel_linear(&u, &rows(&p64(&store, "ffn.w2")?), p64(&store, "ffn.b2")?.data());
        Ok(Measure::within(max_diff(&got, &want)?, 1e-12).note("position-wise MLP with GELU"))
    });
    r.check("attention.ffn_scalar_oracle", || {
        let (ffn, mut store) = build(6, |pb| ConvFfn::build(pb, "ffn", 4, 2))?;
        randomize(&mut store, 7, 0.5)?;
        let x = uniform::<f64>(&[1, 4, 5, 5], 8);
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            ffn.forward(g, xv)
        })?;
        Ok(Measure::within(max_diff(&got, &ffn_oracle(&store, &x, 8)?)?, 1e-5))
    });

    r.check("attention.ha_block_zero_weights", || {
        let cfg = tiny_unet();
        let (blk, mut store) = build(9, |pb| HaBlock::build(pb, "blk", &cfg, 8, 1))?;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in &names {
            zero(&mut store, n)?;
        }
        let bproj = uniform::<f32>(&[8], 10);
        let b2 = uniform::<f32>(&[8], 11);
        store.set("blk.wattn.bproj", bproj.clone())?;
        store.set("blk.ffn.b2", b2.clone())?;
        let got = run::<f64>(&store, Routing::eval(), |g| {
            let x = g.constant(uniform(&[1, 8, 8, 8], 12));
            blk.forward(g, x)
        })?;
        let want = Tensor::from_fn(&[1, 8, 8, 8], |i| (bproj.data()[i / 64] + b2.data()[i / 64]) as f64);
        Ok(Measure::within(max_diff(&got, &want)?, 1e-6).note("output = b_proj + b2 per channel"))
    });
    r.check("attention.ha_block_shape", || {
        let cfg = tiny_unet();
        let (blk, store) = build(10, |pb| HaBlock::build(pb, "blk", &cfg, 8, 1))?;
        let mut ok = true;
        for shape in [[1, 8, 8, 8], [2, 8, 5, 7], [1, 8, 4, 12]] {
            let y = run::<f32>(&store, Routing::eval(), |g| {
                let x = g.constant(uniform(&shape, 13));
                blk.forward(g, x)
            })?;
            ok &= y.shape() == shape;
        }
        Ok(Measure::truth(ok))
    });
    r.check("attention.unet_min_size", || {
        let (net, store) = build(11, |pb| HaUnet::build(pb, "u", tiny_unet(), UnetKind::Hybrid))?;
        Ok(Measure::rejects(run::<f32>(&store, Routing::eval(), |g| {
            let x = g.constant(Tensor::zeros(&[1, 8, 4, 12]));
            net.forward(g, x)
        })))
    });
    r.check("attention.unet_padding_roundtrip", || {
        let (net, store) = build(12, |pb| HaUnet::build(pb, "u", tiny_unet(), UnetKind::Hybrid))?;
        let y = run::<f32>(&store, Routing::eval(), |g| {
            let x = g.constant(uniform(&[1, 8, 9, 11], 14));
            net.forward(g, x)
        })?;
        Ok(Measure::truth(y.shape() == [1, 8, 9, 11]).note(format!("{:?}", y.shape())))
    });

    r.check("grad.channel_attention", || {
        let (ca, mut store) = build(50, |pb| ChannelAttention::build(pb, "ca", 4, 2))?;
        randomize(&mut store, 61, 0.5)?;
        add_input(&mut store, &[1, 4, 4, 4], 22)?;
        crate::verify::grad_measure(&BlockObjective::new(Subject::ChannelAttention(ca)), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("grad.window_attention", || {
        let (wa, mut store) = build(23, |pb| WindowAttention::build(pb, "wa", 4, 4, 2))?;
        randomize(&mut store, 24, 0.5)?;
        add_input(&mut store, &[1, 4, 8, 8], 25)?;
        crate::verify::grad_measure(
            &BlockObjective::new(Subject::WindowAttention(wa, true)),
            &store,
            "",
            MIN_BLOCK_COORDS,
        )
    });
    r.check("grad.conv_ffn", || {
        let (ffn, mut store) = build(26, |pb| ConvFfn::build(pb, "ffn", 4, 2))?;
        randomize(&mut store, 27, 0.5)?;
        add_input(&mut store, &[1, 4, 4, 4], 28)?;
        crate::verify::grad_measure(&BlockObjective::new(Subject::ConvFfn(ffn)), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("grad.ha_block", || {
        let cfg = tiny_unet();
        let (blk, mut store) = build(29, |pb| HaBlock::build(pb, "blk", &cfg, 8, 1))?;
        add_input(&mut store, &[1, 8, 8, 8], 30)?;
        crate::verify::grad_measure(&BlockObjective::new(Subject::HaBlock(blk)), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("grad.ha_unet", || {
        let (net, mut store) = build(31, |pb| HaUnet::build(pb, "u", tiny_unet(), UnetKind::Hybrid))?;
        add_input(&mut store, &[1, 8, 16, 16], 32)?;
        crate::verify::grad_measure(&BlockObjective::new(Subject::HaUnet(net)), &store, "", MIN_BLOCK_COORDS)
    });
    r.check("attention.ca_residual_gate", || {
        let (ca, mut store) = build(40, |pb| ChannelAttention::build(pb, "ca", 8, 4))?;
        randomize(&mut store, 41, 0.7)?;
        let values = store.values::<f64>();
        let mut g = Graph::inference(&values, Routing::eval());
        let xv = g.constant(uniform(&[2, 8, 5, 5], 42));
        let tr = ca.trace(&mut g, xv)?;
        let (x, y, s, out) = (g.value(xv), g.value(tr.y), g.value(tr.gate), g.value(tr.out));
        let hw = 25;
        let mut worst: f64 = 0.0;
        for i in 0..out.numel() {
            let gate = s.data()[i / hw];
            worst = worst.max((out.data()[i] - x.data()[i] - y.data()[i] * gate).abs());
        }
        let open = s.data().iter().all(|&v| v > 0.0 && v < 1.0);
        Ok(Measure::within(if open { worst } else { f64::INFINITY }, 1e-12).note("out - x = y * s, s in (0, 1)"))
    });
    r.check("attention.wattn_block_diagonal", || {
        let (wa, mut store) = build(43, |pb| WindowAttention::build(pb, "wa", 4, 4, 2))?;
        randomize(&mut store, 44, 0.5)?;
        let x = uniform::<f64>(&[1, 4, 8, 8], 45);
        let masked = Tensor::from_fn(x.shape(), |i| {
            let (yy, xx) = ((i / 8) % 8, i % 8);
            if yy < 4 && xx < 4 {
                x.data()[i]
            } else {
                0.0
            }
        });
        let outs = [&x, &masked].map(|inp| {
            run::<f64>(&store, Routing::eval(), |g| {
                let xv = g.constant(inp.clone());
                wa.forward(g, xv, false)
            })
        });
        let (a, b) = (
            outs[0].as_ref().map_err(|e| Error::Config(e.to_string()))?,
            outs[1].as_ref().map_err(|e| Error::Config(e.to_string()))?,
        );
        let mut worst: f64 = 0.0;
        for i in 0..a.numel() {
            if (i / 8) % 8 < 4 && i % 8 < 4 {
                worst = worst.max((a.data()[i] - b.data()[i]).abs());
            }
        }
        Ok(Measure::within(worst, 1e-12).note("top-left window unchanged when other windows are zeroed"))
    });
    r.check("attention.wattn_weights_normalized", || {
        let (wa, mut store) = build(46, |pb| WindowAttention::build(pb, "wa", 4, 4, 2))?;
        randomize(&mut store, 47, 0.5)?;
        let values = store.values::<f64>();
        let mut g = Graph::inference(&values, Routing::eval());
        let xv = g.constant(uniform(&[2, 4, 8, 12], 48));
        let mut worst: f64 = 0.0;
        for shifted in [false, true] {
            let tr = wa.trace(&mut g, xv, shifted)?;
            let wts = g.value(tr.weights);
            let t = *wts.shape().last().expect("rank 5");
            for row in wts.data().chunks(t) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok(Measure::within(worst, 1e-6).note("plain and shifted windows"))
    });
    r.check("attention.ca_zero_excitation", || {
        let (ca, mut store) = build(49, |pb| ChannelAttention::build(pb, "ca", 4, 2))?;
        randomize(&mut store, 50, 0.5)?;
        zero(&mut store, "ca.w2")?;
        let values = store.values::<f64>();
        let mut g = Graph::inference(&values, Routing::eval());
        let xv = g.constant(uniform(&[1, 4, 4, 4], 51));
        let tr = ca.trace(&mut g, xv)?;
        let want = g.value(xv).zip_map(g.value(tr.y), |x, y| x + 0.5 * y)?;
        Ok(Measure::within(max_diff(g.value(tr.out), &want)?, 1e-12).note("w2 = 0 gives s = 0.5"))
    });
    r.check("attention.unet_shapes", || {
        let cfg = HaUnetConfig { levels: 3, ..tiny_unet() };
        let (net, store) = build(52, |pb| HaUnet::build(pb, "u", cfg, UnetKind::Hybrid))?;
        let mut ok = true;
        for (h, w) in [(32, 32), (48, 48), (40, 40), (32, 40)] {
            let y = run::<f32>(&store, Routing::eval(), |g| {
                let x = g.constant(uniform(&[1, 8, h, w], 53));
                net.forward(g, x)
            })?;
            ok &= y.shape() == [1, 8, h, w];
        }
        Ok(Measure::truth(ok).note("H, W in {32, 48, 40} with a 16-pixel multiple"))
    });
    r.check("attention.unet_single_level_is_block_stack", || {
        let cfg = HaUnetConfig { levels: 1, ..tiny_unet() };
        let (net, mut store) = build(54, |pb| HaUnet::build(pb, "u", cfg, UnetKind::Hybrid))?;
        randomize(&mut store, 55, 0.3)?;
        // Rebuilding the blocks under the same names yields views onto the
        // UNet's own parameters.
        let (blocks, _) = build(56, |pb| {
            (0..cfg.blocks)
                .map(|i| HaBlock::build(pb, &format!("u.level0.block{i}"), &cfg, cfg.channels, i))
                .collect::<Result<Vec<_>>>()
        })?;
        let x = uniform::<f64>(&[1, 8, 8, 8], 57);
        let whole = run::<f64>(&store, Routing::eval(), |g| {
            let xv = g.constant(x.clone());
            net.forward(g, xv)
        })?;
        let stacked = run::<f64>(&store, Routing::eval(), |g| {
            let mut cur = g.constant(x.clone());
            for b in &blocks {
                cur = b.forward(g, cur)?;
            }
            Ok(cur)
        })?;
        Ok(Measure::within(max_diff(&whole, &stacked)?, 1e-12))
    });
}
