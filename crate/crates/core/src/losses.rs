//! Charbonnier, Laplacian edge and wavelet losses and the global objective.

use crate::error::{Error, Result};
use crate::pipeline::StageOutputs;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// 3x3 discrete Laplacian.
pub const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Edge loss weight.
    pub lambda: f64,
    /// Per-stage wavelet loss weights.
    pub mu: [f64; 3],
    pub eps: f64,
    /// Decomposition depth of the wavelet loss.
    pub levels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            mu: [0.0, 0.05, 0.0],
            eps: 1e-3,
            levels: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.mu.iter().all(|&m| m >= 0.0) && self.eps > 0.0 && self.levels >= 1) {
            return Err(Error::Invalid(format!("invalid loss configuration {self:?}")));
        }
        Ok(())
    }
}

/// Per-stage loss terms; stages that did not run are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub char: [Option<f64>; 3],
    pub edge: [Option<f64>; 3],
    pub wav: [Option<f64>; 3],
    pub total: f64,
}

fn same_shape<T: Real>(t: &Tape<T>, op: &'static str, x: Var, y: Var) -> Result<()> {
    if t.shape(x) != t.shape(y) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", t.shape(x), t.shape(y))));
    }
    Ok(())
}

fn charbonnier_of<T: Real>(t: &mut Tape<T>, d: Var, eps: f64) -> Var {
    let sq = t.square(d);
    let sq = t.add_scalar(sq, eps * eps);
    let r = t.sqrt(sq);
    t.mean(r)
}

/// `mean(sqrt((x - y)^2 + eps^2))`
pub fn charbonnier<T: Real>(t: &mut Tape<T>, x: Var, y: Var, eps: f64) -> Result<Var> {
    same_shape(t, "charbonnier", x, y)?;
    let d = t.sub(x, y)?;
    Ok(charbonnier_of(t, d, eps))
}

/// Per-channel Laplacian with reflect padding; shape preserving on `[B,C,H,W]`.
pub fn laplacian<T: Real>(t: &mut Tape<T>, x: Var) -> Result<Var> {
    let (_, c, _, _) = t.value(x).dims4()?;
    let kernel = Tensor::from_fn(&[c, 1, 3, 3], |i| T::of(LAPLACIAN[i % 9]));
    let k = t.constant(kernel);
    let p = t.pad_reflect(x, 1, 1, 1, 1)?;
    t.conv2d(p, k, 0, c)
}

/// Charbonnier aggregate of the Laplacian difference.
pub fn edge_loss<T: Real>(t: &mut Tape<T>, x: Var, y: Var, eps: f64) -> Result<Var> {
    same_shape(t, "edge_loss", x, y)?;
    let d = t.sub(x, y)?;
    let ld = laplacian(t, d)?;
    Ok(charbonnier_of(t, ld, eps))
}

fn l1<T: Real>(t: &mut Tape<T>, d: Var) -> Var {
    let a = t.abs(d);
    t.mean(a)
}

/// `L1(LL_J) + sum_{i<=J} sum_{LH,HL,HH} L1(band_i)` of the Haar pyramid of
/// `x - y`. Odd sizes are reflect-padded up to a multiple of `2^levels`.
pub fn wavelet_loss<T: Real>(t: &mut Tape<T>, x: Var, y: Var, levels: usize) -> Result<Var> {
    same_shape(t, "wavelet_loss", x, y)?;
    if levels == 0 {
        return Err(Error::Invalid("wavelet loss needs at least one level".into()));
    }
    let (_, _, h, w) = t.value(x).dims4()?;
    let m = 1usize << levels;
    // The transform is linear, so the pyramid of the difference is the
    // difference of the pyramids.
    let d = t.sub(x, y)?;
    let mut cur = t.pad_reflect(d, 0, (m - h % m) % m, 0, (m - w % m) % m)?;
    let mut terms = Vec::with_capacity(3 * levels + 1);
    for _ in 0..levels {
        let bands = t.dwt2(cur)?;
        for k in 1..4 {
            let b = t.band(bands, k)?;
            terms.push(l1(t, b));
        }
        cur = t.band(bands, 0)?;
    }
    terms.push(l1(t, cur));
    let mut total = terms[0];
    for &v in &terms[1..] {
        total = t.add(total, v)?;
    }
    Ok(total)
}

/// `sum_s char_s + lambda edge_s + mu_s wav_s` over the stages present.
pub fn global_loss<T: Real>(t: &mut Tape<T>, outs: &StageOutputs, target: Var, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let mut parts = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for (s, out) in outs.stages.iter().enumerate() {
        let Some(x) = *out else { continue };
        let ch = charbonnier(t, x, target, cfg.eps)?;
        let ed = edge_loss(t, x, target, cfg.eps)?;
        parts.char[s] = Some(t.value(ch).item()?.f64());
        parts.edge[s] = Some(t.value(ed).item()?.f64());
        let ed_w = t.scale(ed, cfg.lambda);
        let mut stage = t.add(ch, ed_w)?;
        if cfg.mu[s] > 0.0 {
            let wv = wavelet_loss(t, x, target, cfg.levels)?;
            parts.wav[s] = Some(t.value(wv).item()?.f64());
            let wv_w = t.scale(wv, cfg.mu[s]);
            stage = t.add(stage, wv_w)?;
        }
        total = Some(match total {
            None => stage,
            Some(acc) => t.add(acc, stage)?,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("no stage outputs to score".into()))?;
    parts.total = t.value(total).item()?.f64();
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval(f: impl FnOnce(&mut Tape<f64>, Var, Var) -> Result<Var>, x: Vec<f64>, y: Vec<f64>, shape: &[usize]) -> f64 {
        let mut t = Tape::<f64>::without_grad();
        let xv = t.constant(Tensor::new(shape, x).unwrap());
        let yv = t.constant(Tensor::new(shape, y).unwrap());
        let l = f(&mut t, xv, yv).unwrap();
        t.value(l).data()[0]
    }

    #[test]
    fn charbonnier_of_equal_inputs_is_eps() {
        let v = eval(|t, x, y| charbonnier(t, x, y, 1e-3), vec![0.3; 12], vec![0.3; 12], &[1, 3, 2, 2]);
        assert!((v - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_negative_weights() {
        assert!(LossConfig {
            lambda: -0.1,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            eps: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn charbonnier_at_least_eps(x in prop::collection::vec(-1.0f64..1.0, 16), y in prop::collection::vec(-1.0f64..1.0, 16)) {
            let v = eval(|t, a, b| charbonnier(t, a, b, 1e-3), x, y, &[1, 1, 4, 4]);
            prop_assert!(v >= 1e-3);
        }

        #[test]
        fn edge_loss_ignores_shared_shift(x in prop::collection::vec(0.0f64..1.0, 16), c in -2.0f64..2.0) {
            let y: Vec<f64> = x.iter().map(|v| v + c).collect();
            let v = eval(|t, a, b| edge_loss(t, a, b, 1e-3), x, y, &[1, 1, 4, 4]);
            prop_assert!((v - 1e-3).abs() < 1e-9);
        }

        #[test]
        fn wavelet_loss_zero_only_on_equal(x in prop::collection::vec(0.0f64..1.0, 16), k in 0usize..16) {
            let same = eval(|t, a, b| wavelet_loss(t, a, b, 2), x.clone(), x.clone(), &[1, 1, 4, 4]);
            prop_assert!(same.abs() < 1e-15);
            let mut y = x.clone();
            y[k] += 0.5;
            let diff = eval(|t, a, b| wavelet_loss(t, a, b, 2), x, y, &[1, 1, 4, 4]);
            prop_assert!(diff > 0.0);
        }
    }
}
