use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    /// Output columns `ox` whose input column `ox + kx - pad` is in range.
    fn cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }
    fn rows(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.h + self.pad).saturating_sub(ky).min(self.ho);
        (lo, hi.max(lo))
    }
}

/// Visits every (input plane, output plane, kernel tap) triple of the convolution.
fn for_each_tap(g: ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    for b in 0..g.b {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g();
            for icl in 0..g.cin_g() {
                let ic = grp * g.cin_g() + icl;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        f(b, oc, ic, icl, ky, kx);
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(g: ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.b * g.cout * g.ho * g.wo];
    for_each_tap(g, |b, oc, ic, icl, ky, kx| {
        let wv = k[((oc * g.cin_g() + icl) * g.kh + ky) * g.kw + kx];
        if wv == T::zero() {
            return;
        }
        let (r0, r1) = g.rows(ky);
        let (c0, c1) = g.cols(kx);
        for oy in r0..r1 {
            let iy = oy + ky - g.pad;
            let xrow = ((b * g.cin + ic) * g.h + iy) * g.w;
            let orow = ((b * g.cout + oc) * g.ho + oy) * g.wo;
            for ox in c0..c1 {
                out[orow + ox] += wv * x[xrow + (ox + kx - g.pad)];
            }
        }
    });
    out
}

impl<T: Real> Tape<T> {
    /// Stride-1 cross-correlation with zero padding.
    /// `x: [B,C,H,W]`, `kernel: [Cout, C/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: usize, groups: usize) -> Result<Var> {
        let (b, cin, h, w) = self.value(x).dims4()?;
        let (cout, cin_g, kh, kw) = self
            .value(kernel)
            .dims4()
            .map_err(|_| Error::shape("conv2d", format!("kernel must be rank 4, got {:?}", self.shape(kernel))))?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin}, kernel {:?}, groups {groups}", self.shape(kernel)),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{w}")));
        }
        let g = ConvGeom {
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad: padding,
            groups,
            ho: h + 2 * padding - kh + 1,
            wo: w + 2 * padding - kw + 1,
        };
        let out = conv_forward(g, self.value(x).data(), self.value(kernel).data());
        let y = Tensor::new(&[b, cout, g.ho, g.wo], out)?;
        Ok(self.push_op("conv2d", &[x, kernel], y, move |a| {
            let gr = a.grad.data();
            let xv = a.inputs[0].data();
            let kv = a.inputs[1].data();
            let mut dx = a.needs[0].then(|| vec![T::zero(); xv.len()]);
            let mut dk = a.needs[1].then(|| vec![T::zero(); kv.len()]);
            for_each_tap(g, |b, oc, ic, icl, ky, kx| {
                let kidx = ((oc * g.cin_g() + icl) * g.kh + ky) * g.kw + kx;
                let wv = kv[kidx];
                let (r0, r1) = g.rows(ky);
                let (c0, c1) = g.cols(kx);
                let mut acc = T::zero();
                for oy in r0..r1 {
                    let iy = oy + ky - g.pad;
                    let xrow = ((b * g.cin + ic) * g.h + iy) * g.w;
                    let orow = ((b * g.cout + oc) * g.ho + oy) * g.wo;
                    if let Some(dx) = dx.as_mut() {
                        for ox in c0..c1 {
                            dx[xrow + (ox + kx - g.pad)] += wv * gr[orow + ox];
                        }
                    }
                    if dk.is_some() {
                        for ox in c0..c1 {
                            acc += gr[orow + ox] * xv[xrow + (ox + kx - g.pad)];
                        }
                    }
                }
                if let Some(dk) = dk.as_mut() {
                    dk[kidx] += acc;
                }
            });
            vec![
                dx.map(|d| Tensor::new(a.inputs[0].shape(), d).expect("shape")),
                dk.map(|d| Tensor::new(a.inputs[1].shape(), d).expect("shape")),
            ]
        }))
    }

    /// Adds `bias: [C]` to every position of `x: [B,C,H,W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let shape = self.shape(x).to_vec();
        let b4 = self.reshape(bias, &[1, c, 1, 1])?;
        let be = self.expand(b4, &shape)?;
        self.add(x, be)
    }

    /// Multiplies `x: [B,C,H,W]` by a per-(batch, channel) signal `s: [B,C]`
    /// broadcast over the spatial axes.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, c, _, _) = self.value(x).dims4()?;
        if self.shape(s) != [b, c] {
            return Err(Error::shape(
                "scale_channels",
                format!("signal {:?} for input {:?}", self.shape(s), self.shape(x)),
            ));
        }
        let shape = self.shape(x).to_vec();
        let s4 = self.reshape(s, &[b, c, 1, 1])?;
        let se = self.expand(s4, &shape)?;
        self.mul(x, se)
    }

    /// Convolution followed by a per-channel bias.
    pub fn conv2d_bias(&mut self, x: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let y = self.conv2d(x, kernel, padding, 1)?;
        self.add_channel_bias(y, bias)
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = T::of(0.25);
        let y = Tensor::from_fn(&[b, c, ho, wo], |i| {
            let p = i / (ho * wo);
            let (oy, ox) = ((i / wo) % ho, i % wo);
            let base = p * h * w + 2 * oy * w + 2 * ox;
            (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * q
        });
        Ok(self.push_op("avg_pool2", &[x], y, move |a| {
            let g = a.grad.data();
            let dx = Tensor::from_fn(&[b, c, h, w], |i| {
                let p = i / (h * w);
                let (iy, ix) = ((i / w) % h, i % w);
                g[(p * ho + iy / 2) * wo + ix / 2] * q
            });
            vec![Some(dx)]
        }))
    }

    /// Bilinear 2x upsampling with half-pixel centers and edge clamping.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let ry = bilinear_taps(h);
        let rx = bilinear_taps(w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            for oy in 0..ho {
                let (y0, y1, wy) = ry[oy];
                for ox in 0..wo {
                    let (x0, x1, wx) = rx[ox];
                    let at = |yy: usize, xx: usize| src[p * h * w + yy * w + xx];
                    let (wy, wx) = (T::of(wy), T::of(wx));
                    let top = at(y0, x0) * (T::one() - wx) + at(y0, x1) * wx;
                    let bot = at(y1, x0) * (T::one() - wx) + at(y1, x1) * wx;
                    out[(p * ho + oy) * wo + ox] = top * (T::one() - wy) + bot * wy;
                }
            }
        }
        let y = Tensor::new(&[b, c, ho, wo], out)?;
        Ok(self.push_op("upsample2", &[x], y, move |a| {
            let g = a.grad.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for oy in 0..ho {
                    let (y0, y1, wy) = ry[oy];
                    let (wy0, wy1) = (T::of(1.0 - wy), T::of(wy));
                    for ox in 0..wo {
                        let (x0, x1, wx) = rx[ox];
                        let (wx0, wx1) = (T::of(1.0 - wx), T::of(wx));
                        let gv = g[(p * ho + oy) * wo + ox];
                        let base = p * h * w;
                        dx[base + y0 * w + x0] += gv * wy0 * wx0;
                        dx[base + y0 * w + x1] += gv * wy0 * wx1;
                        dx[base + y1 * w + x0] += gv * wy1 * wx0;
                        dx[base + y1 * w + x1] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).expect("shape"))]
        }))
    }
}

/// Per output index: (lower source, upper source, weight of upper).
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = t.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn group_mismatch_is_a_shape_error() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::ones(&[1, 3, 4, 4]));
        let k = t.constant(Tensor::ones(&[2, 2, 3, 3]));
        assert!(t.conv2d(x, k, 1, 1).is_err());
    }

    #[test]
    fn pool_then_upsample_keeps_constants() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[1, 2, 4, 6], 0.75));
        let p = t.avg_pool2(x).unwrap();
        assert_eq!(t.shape(p), &[1, 2, 2, 3]);
        let u = t.upsample2(p).unwrap();
        assert_eq!(t.shape(u), &[1, 2, 4, 6]);
        assert!(t.value(u).data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn delta_kernel_is_identity(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..100) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let xv = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut rng);
            let mut t = Tape::<f64>::new();
            let x = t.constant(xv.clone());
            let k = t.constant(Tensor::from_fn(&[c, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }));
            let y = t.conv2d(x, k, 1, c).unwrap();
            prop_assert_eq!(t.value(y), &xv);
        }
    }
}
