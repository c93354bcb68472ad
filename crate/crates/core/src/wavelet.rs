//! Orthonormal 2D Haar transform, quad-canvas packing and the wavelet branch.
//!
//! For every 2x2 block `[a b; c d]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! The analysis matrix is symmetric and orthogonal, so synthesis uses the same
//! coefficients and each transform is the other's adjoint.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamBuilder;
use crate::real::Real;
use crate::ssm::{from_tokens, to_tokens, SelectiveSsm, SsmConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Band order used by every stacked layout in this module.
pub const BANDS: [&str; 4] = ["LL", "LH", "HL", "HH"];

#[derive(Clone, Debug, PartialEq)]
pub struct Subbands<T: Real = f32> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Real> Subbands<T> {
    /// `[4,B,C,h,w]` in [`BANDS`] order.
    pub fn stacked(&self) -> Tensor<T> {
        let mut shape = vec![4];
        shape.extend_from_slice(self.ll.shape());
        let mut data = Vec::with_capacity(4 * self.ll.numel());
        for t in [&self.ll, &self.lh, &self.hl, &self.hh] {
            data.extend_from_slice(t.data());
        }
        Tensor::new(&shape, data).expect("four equal subbands")
    }

    pub fn from_stacked(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 5 || t.shape()[0] != 4 {
            return Err(Error::shape("subbands", format!("expected [4,B,C,h,w], got {:?}", t.shape())));
        }
        let shape = &t.shape()[1..];
        let n = t.numel() / 4;
        let part = |k: usize| Tensor::new(shape, t.data()[k * n..(k + 1) * n].to_vec()).expect("shape");
        Ok(Subbands {
            ll: part(0),
            lh: part(1),
            hl: part(2),
            hh: part(3),
        })
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v.f64() * v.f64())
            .sum()
    }
}

fn analysis<T: Real>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let band = b * c * ho * wo;
    let half = T::of(0.5);
    let mut out = vec![T::zero(); 4 * band];
    for p in 0..b * c {
        for i in 0..ho {
            for j in 0..wo {
                let at = |di: usize, dj: usize| x[p * h * w + (2 * i + di) * w + 2 * j + dj];
                let (a, bb, cc, d) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
                let o = (p * ho + i) * wo + j;
                out[o] = (a + bb + cc + d) * half;
                out[band + o] = (a - bb + cc - d) * half;
                out[2 * band + o] = (a + bb - cc - d) * half;
                out[3 * band + o] = (a - bb - cc + d) * half;
            }
        }
    }
    out
}

fn synthesis<T: Real>(s: &[T], b: usize, c: usize, ho: usize, wo: usize) -> Vec<T> {
    let (h, w) = (2 * ho, 2 * wo);
    let band = b * c * ho * wo;
    let half = T::of(0.5);
    let mut out = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        for i in 0..ho {
            for j in 0..wo {
                let o = (p * ho + i) * wo + j;
                let (ll, lh, hl, hh) = (s[o], s[band + o], s[2 * band + o], s[3 * band + o]);
                let base = p * h * w + 2 * i * w + 2 * j;
                out[base] = (ll + lh + hl + hh) * half;
                out[base + 1] = (ll - lh + hl - hh) * half;
                out[base + w] = (ll + lh - hl - hh) * half;
                out[base + w + 1] = (ll - lh - hl + hh) * half;
            }
        }
    }
    out
}

/// One analysis level. `x: [B,C,H,W]` with even `H`, `W`.
pub fn dwt2<T: Real>(x: &Tensor<T>) -> Result<Subbands<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("dwt2", format!("spatial size {h}x{w} must be even")));
    }
    let data = analysis(x.data(), b, c, h, w);
    Subbands::from_stacked(&Tensor::new(&[4, b, c, h / 2, w / 2], data)?)
}

/// Exact inverse of [`dwt2`].
pub fn idwt2<T: Real>(s: &Subbands<T>) -> Result<Tensor<T>> {
    let shape = s.ll.shape();
    for t in [&s.lh, &s.hl, &s.hh] {
        if t.shape() != shape {
            return Err(Error::shape("idwt2", format!("subband shapes {:?} vs {:?}", shape, t.shape())));
        }
    }
    let (b, c, ho, wo) = s.ll.dims4()?;
    let data = synthesis(s.stacked().data(), b, c, ho, wo);
    Tensor::new(&[b, c, 2 * ho, 2 * wo], data)
}

/// Multi-level decomposition: details of every level plus the deepest `LL`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<T: Real = f32> {
    /// `details[i]` holds `(LH, HL, HH)` of level `i + 1`.
    pub details: Vec<[Tensor<T>; 3]>,
    pub ll: Tensor<T>,
}

impl<T: Real> WaveletPyramid<T> {
    pub fn levels(&self) -> usize {
        self.details.len()
    }
}

pub fn dwt_multi<T: Real>(x: &Tensor<T>, levels: usize) -> Result<WaveletPyramid<T>> {
    if levels < 1 {
        return Err(Error::Invalid("wavelet decomposition needs at least one level".into()));
    }
    let mut details = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for _ in 0..levels {
        let s = dwt2(&cur)?;
        details.push([s.lh, s.hl, s.hh]);
        cur = s.ll;
    }
    Ok(WaveletPyramid { details, ll: cur })
}

pub fn idwt_multi<T: Real>(p: &WaveletPyramid<T>) -> Result<Tensor<T>> {
    let mut cur = p.ll.clone();
    for [lh, hl, hh] in p.details.iter().rev() {
        cur = idwt2(&Subbands {
            ll: cur,
            lh: lh.clone(),
            hl: hl.clone(),
            hh: hh.clone(),
        })?;
    }
    Ok(cur)
}

/// Tiles `[4,B,C,h,w]` into `[B,C,2h,2w]`: LL top-left, LH top-right,
/// HL bottom-left, HH bottom-right.
pub fn quad_index(b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (hh, ww) = (2 * h, 2 * w);
    let band = b * c * h * w;
    let mut index = Vec::with_capacity(4 * band);
    for p in 0..b * c {
        for i in 0..hh {
            for j in 0..ww {
                let k = 2 * (i / h) + j / w;
                index.push(k * band + (p * h + i % h) * w + j % w);
            }
        }
    }
    index
}

fn inverse_index(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (dst, &src) in index.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

pub fn pack_quad<T: Real>(s: &Subbands<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = s.ll.dims4()?;
    let st = s.stacked();
    let src = st.data();
    let data = quad_index(b, c, h, w).into_iter().map(|i| src[i]).collect();
    Tensor::new(&[b, c, 2 * h, 2 * w], data)
}

pub fn unpack_quad<T: Real>(canvas: &Tensor<T>) -> Result<Subbands<T>> {
    let (b, c, hh, ww) = canvas.dims4()?;
    if hh % 2 != 0 || ww % 2 != 0 {
        return Err(Error::shape("unpack_quad", format!("canvas {hh}x{ww} must be even")));
    }
    let inv = inverse_index(&quad_index(b, c, hh / 2, ww / 2));
    let src = canvas.data();
    let data = inv.into_iter().map(|i| src[i]).collect();
    Subbands::from_stacked(&Tensor::new(&[4, b, c, hh / 2, ww / 2], data)?)
}

impl<T: Real> Tape<T> {
    /// Differentiable [`dwt2`]; returns subbands stacked as `[4,B,C,H/2,W/2]`.
    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("dwt2", format!("spatial size {h}x{w} must be even")));
        }
        let y = Tensor::new(&[4, b, c, h / 2, w / 2], analysis(self.value(x).data(), b, c, h, w))?;
        Ok(self.push_op("dwt2", &[x], y, move |a| {
            let d = synthesis(a.grad.data(), b, c, h / 2, w / 2);
            vec![Some(Tensor::new(&[b, c, h, w], d).expect("shape"))]
        }))
    }

    /// Differentiable [`idwt2`] of a stacked `[4,B,C,h,w]` tensor.
    pub fn idwt2(&mut self, s: Var) -> Result<Var> {
        let (b, c, h, w) = match self.shape(s) {
            &[4, b, c, h, w] => (b, c, h, w),
            sh => return Err(Error::shape("idwt2", format!("expected [4,B,C,h,w], got {sh:?}"))),
        };
        let y = Tensor::new(&[b, c, 2 * h, 2 * w], synthesis(self.value(s).data(), b, c, h, w))?;
        Ok(self.push_op("idwt2", &[s], y, move |a| {
            let d = analysis(a.grad.data(), b, c, 2 * h, 2 * w);
            vec![Some(Tensor::new(&[4, b, c, h, w], d).expect("shape"))]
        }))
    }

    /// One band `[B,C,h,w]` of a stacked subband tensor.
    pub fn band(&mut self, s: Var, k: usize) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        let b = self.slice(s, 0, k, 1)?;
        self.reshape(b, &shape[1..])
    }

    pub fn pack_quad(&mut self, s: Var) -> Result<Var> {
        let (b, c, h, w) = match self.shape(s) {
            &[4, b, c, h, w] => (b, c, h, w),
            sh => return Err(Error::shape("pack_quad", format!("expected [4,B,C,h,w], got {sh:?}"))),
        };
        self.gather(s, &[b, c, 2 * h, 2 * w], Rc::new(quad_index(b, c, h, w)))
    }

    pub fn unpack_quad(&mut self, canvas: Var) -> Result<Var> {
        let (b, c, hh, ww) = self.value(canvas).dims4()?;
        if hh % 2 != 0 || ww % 2 != 0 {
            return Err(Error::shape("unpack_quad", format!("canvas {hh}x{ww} must be even")));
        }
        let inv = inverse_index(&quad_index(b, c, hh / 2, ww / 2));
        self.gather(canvas, &[4, b, c, hh / 2, ww / 2], Rc::new(inv))
    }
}

/// Wavelet-domain branch: level-1 Haar analysis, quad canvas, one row-major
/// scan over the canvas, then synthesis.
#[derive(Clone, Debug)]
pub struct WaveletBranch {
    pub ssm: SelectiveSsm,
}

impl WaveletBranch {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: SsmConfig) -> Result<Self> {
        Ok(Self {
            ssm: SelectiveSsm::build(pb, &format!("{prefix}.ssm"), cfg)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let xp = g.pad_reflect(x, 0, h % 2, 0, w % 2)?;
        let (hp, wp) = (h + h % 2, w + w % 2);
        let bands = g.dwt2(xp)?;
        let canvas = g.pack_quad(bands)?;
        let tokens = to_tokens(g, canvas)?;
        let scanned = self.ssm.forward(g, tokens)?;
        let canvas = from_tokens(g, scanned, hp, wp)?;
        let bands = g.unpack_quad(canvas)?;
        let y = g.idwt2(bands)?;
        g.crop(y, 0, 0, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn haar_block_example() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2(&x).unwrap();
        assert_eq!(
            [s.ll.data()[0], s.lh.data()[0], s.hl.data()[0], s.hh.data()[0]],
            [5.0, -1.0, -2.0, 0.0]
        );
    }

    #[test]
    fn odd_sizes_are_rejected() {
        assert!(dwt2(&Tensor::<f64>::zeros(&[1, 1, 3, 4])).is_err());
    }

    proptest! {
        #[test]
        fn perfect_reconstruction(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let x = random(&[1, 2, 2 * h, 2 * w], seed);
            let back = idwt2(&dwt2(&x).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
        }

        #[test]
        fn energy_is_preserved(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let x = random(&[2, 1, 2 * h, 2 * w], seed);
            let e: f64 = x.data().iter().map(|v| v * v).sum();
            prop_assert!((dwt2(&x).unwrap().energy() - e).abs() <= 1e-12 * e.max(1.0));
        }

        #[test]
        fn quad_pack_is_a_bijection(h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let s = dwt2(&random(&[1, 3, 2 * h, 2 * w], seed)).unwrap();
            let canvas = pack_quad(&s).unwrap();
            prop_assert_eq!(canvas.shape(), &[1, 3, 2 * h, 2 * w]);
            prop_assert_eq!(unpack_quad(&canvas).unwrap(), s);
        }

        #[test]
        fn pyramid_halves_per_level(levels in 1usize..4, seed in 0u64..100) {
            let side = 1 << (levels + 1);
            let x = random(&[1, 1, side, side], seed);
            let p = dwt_multi(&x, levels).unwrap();
            prop_assert_eq!(p.levels(), levels);
            prop_assert!(idwt_multi(&p).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        }
    }
}
