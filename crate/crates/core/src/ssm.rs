//! Selective state-space scan, prompt readout and semantic token reordering.
//!
//! The state matrix is diagonal per channel: `A: [C, N]`. Per token, the
//! input projections give `B_i, C_i: [N]` and a step size `delta_i: [C]`, and
//!
//! ```text
//! A_bar = exp(delta * A),  B_bar = delta * B
//! h_i   = A_bar_i * h_{i-1} + B_bar_i * x_i
//! y_i   = C_i . h_i + D * x_i + prompt(x_i)
//! ```

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Init, ParamBuilder};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmConfig {
    pub channels: usize,
    pub state: usize,
    pub prompts: usize,
}

/// Zero-order-hold discretization of a diagonal system.
///
/// `a: [C,N]`, `b: [B,L,N]`, `delta: [B,L,C]`; both results are `[B,L,C,N]`.
pub fn discretize<T: Real>(t: &mut Tape<T>, a: Var, b: Var, delta: Var) -> Result<(Var, Var)> {
    let (c, n) = match t.shape(a) {
        &[c, n] => (c, n),
        s => return Err(Error::shape("discretize", format!("A must be [C,N], got {s:?}"))),
    };
    let (bs, l) = match t.shape(delta) {
        &[bs, l, c2] if c2 == c => (bs, l),
        s => return Err(Error::shape("discretize", format!("delta must be [B,L,{c}], got {s:?}"))),
    };
    if t.shape(b) != [bs, l, n] {
        return Err(Error::shape(
            "discretize",
            format!("B must be [{bs},{l},{n}], got {:?}", t.shape(b)),
        ));
    }
    if t.value(delta).data().iter().any(|&d| d <= T::zero()) {
        return Err(Error::Invalid("discretize: step size must be positive".into()));
    }
    let full = [bs, l, c, n];
    let d4 = t.reshape(delta, &[bs, l, c, 1])?;
    let d4 = t.expand(d4, &full)?;
    let a4 = t.reshape(a, &[1, 1, c, n])?;
    let a4 = t.expand(a4, &full)?;
    let da = t.mul(d4, a4)?;
    let abar = t.exp(da);
    let b4 = t.reshape(b, &[bs, l, 1, n])?;
    let b4 = t.expand(b4, &full)?;
    let bbar = t.mul(d4, b4)?;
    Ok((abar, bbar))
}

/// `h_i = a_i * h_{i-1} + u_i` along axis 1 of `[B,L,...]`, with `h_{-1} = 0`.
pub fn linear_recurrence<T: Real>(t: &mut Tape<T>, a: Var, u: Var) -> Result<Var> {
    let shape = t.shape(a).to_vec();
    if shape.len() < 2 || t.shape(u) != shape.as_slice() {
        return Err(Error::shape("linear_recurrence", format!("{shape:?} vs {:?}", t.shape(u))));
    }
    let (bs, l) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let av = t.value(a).data();
    let uv = t.value(u).data();
    let mut h = vec![T::zero(); av.len()];
    for b in 0..bs {
        let base = b * l * inner;
        h[base..base + inner].copy_from_slice(&uv[base..base + inner]);
        for i in 1..l {
            let cur = base + i * inner;
            let prev = cur - inner;
            for j in 0..inner {
                h[cur + j] = av[cur + j] * h[prev + j] + uv[cur + j];
            }
        }
    }
    let y = Tensor::new(&shape, h)?;
    Ok(t.push_op("linear_recurrence", &[a, u], y, move |args| {
        let g = args.grad.data();
        let av = args.inputs[0].data();
        let h = args.output.data();
        let mut dh = vec![T::zero(); g.len()];
        for b in 0..bs {
            let base = b * l * inner;
            for i in (0..l).rev() {
                let cur = base + i * inner;
                for j in 0..inner {
                    let carry = if i + 1 < l {
                        av[cur + inner + j] * dh[cur + inner + j]
                    } else {
                        T::zero()
                    };
                    dh[cur + j] = g[cur + j] + carry;
                }
            }
        }
        let da = args.needs[0].then(|| {
            Tensor::from_fn(&shape, |k| {
                let i = (k / inner) % l;
                if i == 0 {
                    T::zero()
                } else {
                    dh[k] * h[k - inner]
                }
            })
        });
        let du = args.needs[1].then(|| Tensor::new(&shape, dh.clone()).expect("shape"));
        vec![da, du]
    }))
}

/// The scan core without prompt readout.
///
/// `x, delta: [B,L,C]`, `a: [C,N]`, `b, c: [B,L,N]`, `d: [C]` -> `y: [B,L,C]`.
pub fn selective_scan<T: Real>(t: &mut Tape<T>, x: Var, a: Var, b: Var, c: Var, delta: Var, d: Var) -> Result<Var> {
    let (bs, l, ch) = match t.shape(x) {
        &[bs, l, ch] => (bs, l, ch),
        s => return Err(Error::shape("selective_scan", format!("x must be [B,L,C], got {s:?}"))),
    };
    if t.shape(delta) != [bs, l, ch] || t.shape(d) != [ch] {
        return Err(Error::shape(
            "selective_scan",
            format!("delta {:?} / D {:?} for x {:?}", t.shape(delta), t.shape(d), [bs, l, ch]),
        ));
    }
    let n = t.shape(a)[1];
    if t.shape(c) != [bs, l, n] {
        return Err(Error::shape(
            "selective_scan",
            format!("C must be [{bs},{l},{n}], got {:?}", t.shape(c)),
        ));
    }
    let full = [bs, l, ch, n];
    let (abar, bbar) = discretize(t, a, b, delta)?;
    let x4 = t.reshape(x, &[bs, l, ch, 1])?;
    let x4 = t.expand(x4, &full)?;
    let u = t.mul(bbar, x4)?;
    let h = linear_recurrence(t, abar, u)?;
    let c4 = t.reshape(c, &[bs, l, 1, n])?;
    let c4 = t.expand(c4, &full)?;
    let hc = t.mul(h, c4)?;
    let y = t.sum_axis(hc, 3)?;
    let d3 = t.reshape(d, &[1, 1, ch])?;
    let d3 = t.expand(d3, &[bs, l, ch])?;
    let skip = t.mul(x, d3)?;
    t.add(y, skip)
}

/// Learnable selective SSM with input-dependent `B`, `C`, `delta` and a pooled
/// prompt readout.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    prefix: String,
    pub cfg: SsmConfig,
}

impl SelectiveSsm {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: SsmConfig) -> Result<Self> {
        let SsmConfig {
            channels: c,
            state: n,
            prompts: m,
        } = cfg;
        if c == 0 || n == 0 || m == 0 {
            return Err(Error::Invalid(format!("ssm sizes must be positive: {cfg:?}")));
        }
        // A = -exp(a_log) = -(1..=N) per channel.
        let a_log = Tensor::from_fn(&[c, n], |i| ((i % n) as f32 + 1.0).ln());
        let s = Self {
            prefix: prefix.to_string(),
            cfg,
        };
        pb.add_tensor(&s.name("a_log"), a_log)?;
        pb.add(&s.name("w_delta"), &[c, c], Init::TruncNormal(0.02))?;
        // softplus^-1 of step sizes spread geometrically over [1e-3, 1e-1]
        let b_delta = Tensor::from_fn(&[c], |i| {
            let f = if c > 1 { i as f64 / (c - 1) as f64 } else { 0.5 };
            let dt = (1e-3f64.ln() + f * (1e-1f64.ln() - 1e-3f64.ln())).exp();
            (dt + (-(-dt).exp_m1()).ln()) as f32
        });
        pb.add_tensor(&s.name("b_delta"), b_delta)?;
        pb.add(&s.name("w_b"), &[c, n], Init::TruncNormal(0.02))?;
        pb.add(&s.name("w_c"), &[c, n], Init::TruncNormal(0.02))?;
        pb.add(&s.name("d"), &[c], Init::Const(1.0))?;
        pb.add(&s.name("prompt_sim"), &[c, m], Init::TruncNormal(0.02))?;
        pb.add(&s.name("prompt_pool"), &[m, c], Init::TruncNormal(0.02))?;
        Ok(s)
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// `x: [B,L,C] -> [B,L,C]`
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (bs, l, c) = match g.shape(x) {
            &[bs, l, c] if c == self.cfg.channels => (bs, l, c),
            s => return Err(Error::shape("ssm", format!("expected [B,L,{}], got {s:?}", self.cfg.channels))),
        };
        let n = self.cfg.state;
        let flat = g.reshape(x, &[bs * l, c])?;

        let w_delta = g.p(&self.name("w_delta"))?;
        let b_delta = g.p(&self.name("b_delta"))?;
        let pre = g.linear(flat, w_delta, Some(b_delta))?;
        let delta = g.softplus(pre);
        let delta = g.reshape(delta, &[bs, l, c])?;

        let w_b = g.p(&self.name("w_b"))?;
        let bm = g.linear(flat, w_b, None)?;
        let bm = g.reshape(bm, &[bs, l, n])?;
        let w_c = g.p(&self.name("w_c"))?;
        let cm = g.linear(flat, w_c, None)?;
        let cm = g.reshape(cm, &[bs, l, n])?;

        let a_log = g.p(&self.name("a_log"))?;
        let a = g.exp(a_log);
        let a = g.neg(a);
        let d = g.p(&self.name("d"))?;
        let y = selective_scan(g, x, a, bm, cm, delta, d)?;

        let prompt = self.prompt_readout(g, flat)?;
        let prompt = g.reshape(prompt, &[bs, l, c])?;
        g.add(y, prompt)
    }

    /// Softmax similarity of each token to the prompt pool, then the weighted
    /// pool vector. `flat: [T,C] -> [T,C]`.
    fn prompt_readout<T: Real>(&self, g: &mut Graph<'_, T>, flat: Var) -> Result<Var> {
        let w_sim = g.p(&self.name("prompt_sim"))?;
        let pool = g.p(&self.name("prompt_pool"))?;
        let logits = g.linear(flat, w_sim, None)?;
        let sim = g.softmax(logits, 1)?;
        g.linear(sim, pool, None)
    }
}

/// Bijection on token positions: `sorted[j] = tokens[forward[j]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPermutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl TokenPermutation {
    pub fn identity(len: usize) -> Self {
        let v: Vec<usize> = (0..len).collect();
        TokenPermutation {
            forward: v.clone(),
            inverse: v,
        }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; forward.len()];
        for (j, &i) in forward.iter().enumerate() {
            if i >= forward.len() || inverse[i] != usize::MAX {
                return Err(Error::Invalid(format!("not a permutation: {forward:?}")));
            }
            inverse[i] = j;
        }
        Ok(TokenPermutation { forward, inverse })
    }

    /// Stable sort of positions by class id; ties keep the original order.
    pub fn sort_by_class(classes: &[usize]) -> Self {
        let mut forward: Vec<usize> = (0..classes.len()).collect();
        forward.sort_by_key(|&i| classes[i]);
        Self::from_forward(forward).expect("sorted indices form a permutation")
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(j, &i)| i == j)
    }
}

/// Reorders rows of `x: [B,L,C]`, one permutation per batch element.
/// `use_inverse` undoes a previous reorder.
pub fn permute_tokens<T: Real>(t: &mut Tape<T>, x: Var, perms: &[TokenPermutation], use_inverse: bool) -> Result<Var> {
    let (bs, l, c) = match t.shape(x) {
        &[bs, l, c] => (bs, l, c),
        s => return Err(Error::shape("permute_tokens", format!("expected [B,L,C], got {s:?}"))),
    };
    if perms.len() != bs || perms.iter().any(|p| p.len() != l) {
        return Err(Error::shape(
            "permute_tokens",
            format!("{} permutations for batch {bs} x {l}", perms.len()),
        ));
    }
    let mut index = Vec::with_capacity(bs * l * c);
    for (b, p) in perms.iter().enumerate() {
        let order = if use_inverse { p.inverse() } else { p.forward() };
        for &src in order {
            let base = (b * l + src) * c;
            index.extend(base..base + c);
        }
    }
    t.gather(x, &[bs, l, c], Rc::new(index))
}

/// Forward value `hard`, gradient passed unchanged to `soft`.
pub fn straight_through<T: Real>(t: &mut Tape<T>, soft: Var, hard: Tensor<T>) -> Result<Var> {
    if t.shape(soft) != hard.shape() {
        return Err(Error::shape(
            "straight_through",
            format!("{:?} vs {:?}", t.shape(soft), hard.shape()),
        ));
    }
    Ok(t.push_op("straight_through", &[soft], hard, |a| vec![Some(a.grad.clone())]))
}

/// Per-token class prediction with Gumbel-Softmax.
#[derive(Clone, Debug)]
pub struct SemanticRouter {
    prefix: String,
    pub channels: usize,
    pub classes: usize,
}

/// Result of routing `[B,L,C]` tokens.
pub struct Routed {
    /// Tokens in sorted order, scaled by their selected routing weight.
    pub tokens: Var,
    pub perms: Vec<TokenPermutation>,
    pub classes: Vec<Vec<usize>>,
    /// Routing vectors `[B*L, K]` (one-hot in hard mode).
    pub weights: Var,
}

impl SemanticRouter {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, channels: usize, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Invalid("router needs at least one class".into()));
        }
        pb.add(&format!("{prefix}.w"), &[channels, classes], Init::TruncNormal(0.02))?;
        pb.add(&format!("{prefix}.b"), &[classes], Init::Zeros)?;
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            classes,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Routed> {
        let (bs, l, c) = match g.shape(tokens) {
            &[bs, l, c] if c == self.channels => (bs, l, c),
            s => return Err(Error::shape("router", format!("expected [B,L,{}], got {s:?}", self.channels))),
        };
        let k = self.classes;
        let routing = g.routing();
        if routing.tau <= 0.0 {
            return Err(Error::Invalid(format!("Gumbel temperature must be positive, got {}", routing.tau)));
        }
        let flat = g.reshape(tokens, &[bs * l, c])?;
        let w = g.p(&format!("{}.w", self.prefix))?;
        let b = g.p(&format!("{}.b", self.prefix))?;
        let logits = g.linear(flat, w, Some(b))?;
        let noise = g.gumbel(&[bs * l, k]);
        let noise = g.constant(noise);
        let z = g.add(logits, noise)?;
        let z = g.scale(z, 1.0 / routing.tau);
        let soft = g.softmax(z, 1)?;

        let probs = g.value(soft).data();
        let class_of: Vec<usize> = (0..bs * l)
            .map(|r| {
                let row = &probs[r * k..(r + 1) * k];
                (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect();
        let weights = if routing.hard {
            let onehot = Tensor::from_fn(&[bs * l, k], |i| if class_of[i / k] == i % k { T::one() } else { T::zero() });
            straight_through(g, soft, onehot)?
        } else {
            soft
        };
        let pick: Vec<usize> = class_of.iter().enumerate().map(|(r, &j)| r * k + j).collect();
        let sel = g.gather(weights, &[bs * l, 1], Rc::new(pick))?;
        let sel = g.expand(sel, &[bs * l, c])?;
        let scaled = g.mul(flat, sel)?;
        let scaled = g.reshape(scaled, &[bs, l, c])?;

        let classes: Vec<Vec<usize>> = class_of.chunks(l).map(|c| c.to_vec()).collect();
        let perms: Vec<TokenPermutation> = classes.iter().map(|c| TokenPermutation::sort_by_class(c)).collect();
        let sorted = permute_tokens(g, scaled, &perms, false)?;
        Ok(Routed {
            tokens: sorted,
            perms,
            classes,
            weights,
        })
    }
}

/// `[B,C,H,W] -> [B,H*W,C]`, row-major over positions.
pub fn to_tokens<T: Real>(t: &mut Tape<T>, x: Var) -> Result<Var> {
    let (b, c, h, w) = t.value(x).dims4()?;
    let p = t.permute(x, &[0, 2, 3, 1])?;
    t.reshape(p, &[b, h * w, c])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Real>(t: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let (b, _, c) = match t.shape(x) {
        &[b, l, c] if l == h * w => (b, l, c),
        s => return Err(Error::shape("from_tokens", format!("{s:?} is not [B,{},C]", h * w))),
    };
    let r = t.reshape(x, &[b, h, w, c])?;
    t.permute(r, &[0, 3, 1, 2])
}

/// Spatial branch: route, reorder, scan once, restore order.
#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub router: SemanticRouter,
    pub ssm: SelectiveSsm,
}

impl SpatialBranch {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: SsmConfig, classes: usize) -> Result<Self> {
        Ok(Self {
            router: SemanticRouter::build(pb, &format!("{prefix}.router"), cfg.channels, classes)?,
            ssm: SelectiveSsm::build(pb, &format!("{prefix}.ssm"), cfg)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let tokens = to_tokens(g, x)?;
        let routed = self.router.forward(g, tokens)?;
        let scanned = self.ssm.forward(g, routed.tokens)?;
        let restored = permute_tokens(g, scanned, &routed.perms, true)?;
        from_tokens(g, restored, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn discretize_half() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::full(&[1, 1], -1.0));
        let b = t.constant(Tensor::full(&[1, 1, 1], 1.0));
        let d = t.constant(Tensor::full(&[1, 1, 1], std::f64::consts::LN_2));
        let (abar, bbar) = discretize(&mut t, a, b, d).unwrap();
        assert!((t.value(abar).data()[0] - 0.5).abs() < 1e-15);
        assert!((t.value(bbar).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn discretize_rejects_non_positive_delta() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::full(&[1, 1], -1.0));
        let b = t.constant(Tensor::full(&[1, 1, 1], 1.0));
        let d = t.constant(Tensor::full(&[1, 1, 1], 0.0));
        assert!(discretize(&mut t, a, b, d).is_err());
    }

    #[test]
    fn from_forward_rejects_repeats() {
        assert!(TokenPermutation::from_forward(vec![0, 0, 1]).is_err());
        assert!(TokenPermutation::from_forward(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn sort_by_class_is_stable() {
        let p = TokenPermutation::sort_by_class(&[1, 0, 1, 0]);
        assert_eq!(p.forward(), &[1, 3, 0, 2]);
        assert!(TokenPermutation::sort_by_class(&[2, 2, 2]).is_identity());
    }

    proptest! {
        #[test]
        fn inverse_undoes_forward(classes in prop::collection::vec(0usize..4, 1..40)) {
            let p = TokenPermutation::sort_by_class(&classes);
            for (j, &i) in p.forward().iter().enumerate() {
                prop_assert_eq!(p.inverse()[i], j);
            }
            let l = classes.len();
            let mut t = Tape::<f64>::new();
            let xv = Tensor::from_fn(&[1, l, 2], |i| i as f64);
            let x = t.constant(xv.clone());
            let sorted = permute_tokens(&mut t, x, std::slice::from_ref(&p), false).unwrap();
            let back = permute_tokens(&mut t, sorted, &[p], true).unwrap();
            prop_assert_eq!(t.value(back), &xv);
        }

        #[test]
        fn abar_in_unit_interval(a in -10.0f64..0.0, delta in 1e-4f64..10.0) {
            let mut t = Tape::<f64>::new();
            let av = t.constant(Tensor::full(&[1, 1], a));
            let bv = t.constant(Tensor::full(&[1, 1, 1], 1.0));
            let dv = t.constant(Tensor::full(&[1, 1, 1], delta));
            let (abar, _) = discretize(&mut t, av, bv, dv).unwrap();
            let v = t.value(abar).data()[0];
            prop_assert!(v > 0.0 && v <= 1.0);
        }

        #[test]
        fn unit_decay_recurrence_is_prefix_sum(u in prop::collection::vec(-2.0f64..2.0, 1..30)) {
            let l = u.len();
            let mut t = Tape::<f64>::new();
            let a = t.constant(Tensor::ones(&[1, l, 1]));
            let uv = t.constant(Tensor::new(&[1, l, 1], u.clone()).unwrap());
            let h = linear_recurrence(&mut t, a, uv).unwrap();
            let mut acc = 0.0;
            for (i, x) in u.iter().enumerate() {
                acc += x;
                prop_assert!((t.value(h).data()[i] - acc).abs() < 1e-12);
            }
        }
    }
}
