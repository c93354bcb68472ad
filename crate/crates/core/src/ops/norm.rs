use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

impl<T: Real> Tape<T> {
    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).fold(T::neg_infinity(), |m, k| m.max(src[at(k)]));
                let mut s = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[at(k)] /= s;
                }
            }
        }
        let y = Tensor::new(&shape, out)?;
        Ok(self.push_op("softmax", &[x], y, move |a| {
            let g = a.grad.data();
            let y = a.output.data();
            let mut d = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        d[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(a.grad.shape(), d).expect("shape"))]
        }))
    }

    /// Normalizes along `axis` to zero mean and unit variance, then applies the
    /// per-feature affine `gamma`, `beta` (both of length `shape[axis]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} for axis of size {n}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let src = self.value(x).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let eps = T::of(LAYER_NORM_EPS);
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| src[at(k)]).sum::<T>() / nf;
                let var = (0..n).map(|k| (src[at(k)] - mean).powi(2)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for k in 0..n {
                    let h = (src[at(k)] - mean) * is;
                    xhat[at(k)] = h;
                    out[at(k)] = h * gm[k] + bt[k];
                }
            }
        }
        let y = Tensor::new(&shape, out)?;
        Ok(self.push_op("layer_norm", &[x, gamma, beta], y, move |a| {
            let g = a.grad.data();
            let gm = a.inputs[1].data();
            let mut dx = vec![T::zero(); g.len()];
            let mut dg = vec![T::zero(); n];
            let mut db = vec![T::zero(); n];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for k in 0..n {
                        let d = g[at(k)] * gm[k];
                        sum_d += d;
                        sum_dh += d * xhat[at(k)];
                        dg[k] += g[at(k)] * xhat[at(k)];
                        db[k] += g[at(k)];
                    }
                    let is = inv_std[o * inner + i];
                    for k in 0..n {
                        let d = g[at(k)] * gm[k];
                        dx[at(k)] = is / nf * (nf * d - sum_d - xhat[at(k)] * sum_dh);
                    }
                }
            }
            vec![
                a.needs[0].then(|| Tensor::new(a.grad.shape(), dx).expect("shape")),
                a.needs[1].then(|| Tensor::new(&[n], dg.clone()).expect("shape")),
                a.needs[2].then(|| Tensor::new(&[n], db.clone()).expect("shape")),
            ]
        }))
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let src = self.value(x).data();
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = (0..b * c)
            .map(|p| src[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::new(&[b, c], out)?;
        Ok(self.push_op("global_avg_pool", &[x], y, move |a| {
            let g = a.grad.data();
            vec![Some(Tensor::from_fn(&[b, c, h, w], |i| g[i / hw] * inv))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 12)) {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::new(&[3, 4], v).unwrap());
            let y = t.softmax(x, 1).unwrap();
            for row in t.value(y).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn global_avg_pool_of_constant(c in -5.0f64..5.0) {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::full(&[2, 3, 4, 5], c));
            let z = t.global_avg_pool(x).unwrap();
            prop_assert_eq!(t.shape(z), &[2, 3]);
            prop_assert!(t.value(z).data().iter().all(|&v| (v - c).abs() < 1e-12));
        }
    }

    #[test]
    fn axis_out_of_range() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(t.softmax(x, 2), Err(crate::Error::Axis { .. })));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }
}
