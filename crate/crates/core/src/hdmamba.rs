//! Hybrid-domain block: spatial and wavelet branches merged by a per-channel gate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{ChannelNorm, PROJ_INIT};
use crate::params::{Init, ParamBuilder};
use crate::real::Real;
use crate::ssm::{SpatialBranch, SsmConfig};
use crate::tape::{Tape, Var};
use crate::wavelet::WaveletBranch;

/// Gate `G = sigmoid(gap([xs; xw]) w + b)` with `w: [2C, C]`, `b: [C]`, then
/// `G * xs + (1 - G) * xw` broadcast over space.
pub fn gated_fuse<T: Real>(t: &mut Tape<T>, xs: Var, xw: Var, w: Var, b: Var) -> Result<Var> {
    Ok(gated_fuse_trace(t, xs, xw, w, b)?.0)
}

/// Same as [`gated_fuse`], also returning the gate `[B, C]`.
pub fn gated_fuse_trace<T: Real>(t: &mut Tape<T>, xs: Var, xw: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    if t.shape(xs) != t.shape(xw) {
        return Err(Error::shape(
            "gated_fuse",
            format!("branch shapes {:?} and {:?} differ", t.shape(xs), t.shape(xw)),
        ));
    }
    let (_, c, _, _) = t.value(xs).dims4()?;
    if t.shape(w) != [2 * c, c] || t.shape(b) != [c] {
        return Err(Error::shape(
            "gated_fuse",
            format!("gate params {:?}/{:?} for {c} channels", t.shape(w), t.shape(b)),
        ));
    }
    let cat = t.concat(&[xs, xw], 1)?;
    let pooled = t.global_avg_pool(cat)?;
    let pre = t.linear(pooled, w, Some(b))?;
    let gate = t.sigmoid(pre);
    let a = t.scale_channels(xs, gate)?;
    let rest = t.one_minus(gate);
    let bpart = t.scale_channels(xw, rest)?;
    Ok((t.add(a, bpart)?, gate))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HdMambaConfig {
    pub ssm: SsmConfig,
    /// Number of router classes in the spatial branch.
    pub classes: usize,
}

/// `x + gated_fuse(spatial(LN x), wavelet(LN x))`.
#[derive(Clone, Debug)]
pub struct HdMambaBlock {
    prefix: String,
    norm: ChannelNorm,
    pub spatial: SpatialBranch,
    pub wavelet: WaveletBranch,
}

impl HdMambaBlock {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: HdMambaConfig) -> Result<Self> {
        let c = cfg.ssm.channels;
        let block = Self {
            prefix: prefix.to_string(),
            norm: ChannelNorm::build(pb, &format!("{prefix}.norm"), c)?,
            spatial: SpatialBranch::build(pb, &format!("{prefix}.spatial"), cfg.ssm, cfg.classes)?,
            wavelet: WaveletBranch::build(pb, &format!("{prefix}.wavelet"), cfg.ssm)?,
        };
        pb.add(&format!("{prefix}.gate.w"), &[2 * c, c], PROJ_INIT)?;
        pb.add(&format!("{prefix}.gate.b"), &[c], Init::Zeros)?;
        Ok(block)
    }

    pub fn gate_names(&self) -> (String, String) {
        (format!("{}.gate.w", self.prefix), format!("{}.gate.b", self.prefix))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, x)?;
        let xs = self.spatial.forward(g, n)?;
        let xw = self.wavelet.forward(g, n)?;
        let (wn, bn) = self.gate_names();
        let w = g.p(&wn)?;
        let b = g.p(&bn)?;
        let fused = gated_fuse(g, xs, xw, w, b)?;
        g.add(x, fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn fused(xs: Vec<f64>, xw: Vec<f64>, w: Vec<f64>, b: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut t = Tape::<f64>::without_grad();
        let xs = t.constant(Tensor::new(&[1, 2, 2, 2], xs).unwrap());
        let xw = t.constant(Tensor::new(&[1, 2, 2, 2], xw).unwrap());
        let w = t.constant(Tensor::new(&[4, 2], w).unwrap());
        let b = t.constant(Tensor::new(&[2], b).unwrap());
        let (out, gate) = gated_fuse_trace(&mut t, xs, xw, w, b).unwrap();
        (t.value(out).data().to_vec(), t.value(gate).data().to_vec())
    }

    proptest! {
        #[test]
        fn fused_output_is_between_branches(
            xs in prop::collection::vec(-5.0f64..5.0, 8),
            xw in prop::collection::vec(-5.0f64..5.0, 8),
            w in prop::collection::vec(-3.0f64..3.0, 8),
            b in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let (out, gate) = fused(xs.clone(), xw.clone(), w, b);
            prop_assert!(gate.iter().all(|&g| g > 0.0 && g < 1.0));
            for i in 0..8 {
                prop_assert!(out[i] >= xs[i].min(xw[i]) - 1e-12 && out[i] <= xs[i].max(xw[i]) + 1e-12);
            }
        }
    }

    #[test]
    fn gate_shape_is_checked() {
        let mut t = Tape::<f64>::without_grad();
        let x = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let w = t.constant(Tensor::zeros(&[2, 2]));
        let b = t.constant(Tensor::zeros(&[2]));
        assert!(gated_fuse(&mut t, x, x, w, b).is_err());
    }
}
