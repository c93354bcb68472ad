use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{numel, strides, Tensor};

/// Reflect index into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub(crate) fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.push_op("reshape", &[x], y, move |a| {
            vec![Some(a.grad.clone().reshape(&in_shape).expect("shape"))]
        }))
    }

    /// `out[i] = x[index[i]]`; repeated indices accumulate in backward.
    pub fn gather(&mut self, x: Var, out_shape: &[usize], index: Rc<Vec<usize>>) -> Result<Var> {
        let n = self.value(x).numel();
        if index.len() != numel(out_shape) {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output shape {out_shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of range {n}")));
        }
        let src = self.value(x).data();
        let y = Tensor::new(out_shape, index.iter().map(|&i| src[i]).collect())?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.push_op("gather", &[x], y, move |a| {
            let mut g = Tensor::zeros(&in_shape);
            let gd = g.data_mut();
            for (&i, &v) in index.iter().zip(a.grad.data()) {
                gd[i] += v;
            }
            vec![Some(g)]
        }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let index = strided_index(&out_shape, &src_strides, 0);
        self.gather(x, &out_shape, Rc::new(index))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Explicit broadcast: every axis of `x` must equal the target or be 1.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        if in_shape.len() != shape.len() || in_shape.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::shape("expand", format!("cannot expand {in_shape:?} to {shape:?}")));
        }
        let st = strides(&in_shape);
        let src_strides: Vec<usize> = in_shape.iter().zip(&st).map(|(&d, &s)| if d == 1 { 0 } else { s }).collect();
        let index = strided_index(shape, &src_strides, 0);
        self.gather(x, shape, Rc::new(index))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let in_shape = self.shape(x).to_vec();
        self.push_op("sum", &[x], Tensor::scalar(s), move |a| {
            vec![Some(Tensor::full(&in_shape, a.grad.data()[0]))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.value(x).sum() / T::of(n as f64);
        let in_shape = self.shape(x).to_vec();
        self.push_op("mean", &[x], Tensor::scalar(s), move |a| {
            vec![Some(Tensor::full(&in_shape, a.grad.data()[0] / T::of(n as f64)))]
        })
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let in_shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = in_shape.clone();
        out_shape.remove(axis);
        let y = Tensor::new(&out_shape, out)?;
        Ok(self.push_op("sum_axis", &[x], y, move |a| {
            let g = a.grad.data();
            let gx = Tensor::from_fn(&in_shape, |idx| {
                let o = idx / (n * inner);
                let i = idx % inner;
                g[o * inner + i]
            });
            vec![Some(gx)]
        }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
        }
        let sizes: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (&v, &n) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let y = Tensor::new(&out_shape, out)?;
        Ok(self.push_op("concat", xs, y, move |a| {
            let g = a.grad.data();
            let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| Vec::with_capacity(outer * n * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (k, &n) in sizes.iter().enumerate() {
                    grads[k].extend_from_slice(&g[off..off + n * inner]);
                    off += n * inner;
                }
            }
            grads
                .into_iter()
                .zip(&a.inputs)
                .map(|(d, x)| Some(Tensor::new(x.shape(), d).expect("shape")))
                .collect()
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) outside axis {axis} of {shape:?}", start + len),
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let st = strides(&shape);
        let index = strided_index(&out_shape, &st, start * st[axis]);
        self.gather(x, &out_shape, Rc::new(index))
    }

    /// Reflect-pads the two trailing (spatial) axes.
    pub fn pad_reflect(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("pad_reflect", "rank < 2"));
        }
        if top == 0 && bottom == 0 && left == 0 && right == 0 {
            return Ok(x);
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if top >= h.max(2) || bottom >= h.max(2) || left >= w.max(2) || right >= w.max(2) {
            return Err(Error::shape(
                "pad_reflect",
                format!("padding ({top},{bottom},{left},{right}) too large for {h}x{w}"),
            ));
        }
        let (ho, wo) = (h + top + bottom, w + left + right);
        let lead: usize = shape[..r - 2].iter().product();
        let mut index = Vec::with_capacity(lead * ho * wo);
        for p in 0..lead {
            for i in 0..ho {
                let si = reflect(i as isize - top as isize, h);
                for j in 0..wo {
                    let sj = reflect(j as isize - left as isize, w);
                    index.push((p * h + si) * w + sj);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        self.gather(x, &out_shape, Rc::new(index))
    }

    /// Crops the two trailing axes to `h x w` starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("crop", "rank < 2"));
        }
        let (hi, wi) = (self.shape(x)[r - 2], self.shape(x)[r - 1]);
        if top == 0 && left == 0 && h == hi && w == wi {
            return Ok(x);
        }
        let y = self.slice(x, r - 2, top, h)?;
        self.slice(y, r - 1, left, w)
    }
}

/// Flat source indices for iterating `out_shape` with the given source strides.
pub(crate) fn strided_index(out_shape: &[usize], src_strides: &[usize], offset: usize) -> Vec<usize> {
    let n = numel(out_shape);
    let r = out_shape.len();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    let mut pos = offset;
    for _ in 0..n {
        index.push(pos);
        for ax in (0..r).rev() {
            counter[ax] += 1;
            pos += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            pos -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    index
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn concat_then_slice_roundtrips(a in 1usize..4, b in 1usize..4, h in 1usize..4) {
            let mut t = Tape::<f64>::new();
            let xa = Tensor::from_fn(&[1, a, h, 2], |i| i as f64);
            let xb = Tensor::from_fn(&[1, b, h, 2], |i| -(i as f64));
            let va = t.constant(xa.clone());
            let vb = t.constant(xb.clone());
            let cat = t.concat(&[va, vb], 1).unwrap();
            let sa = t.slice(cat, 1, 0, a).unwrap();
            let sb = t.slice(cat, 1, a, b).unwrap();
            prop_assert_eq!(t.value(sa), &xa);
            prop_assert_eq!(t.value(sb), &xb);
        }

        #[test]
        fn reflect_pad_then_crop_is_identity(h in 2usize..6, w in 2usize..6, top in 0usize..2, left in 0usize..2) {
            let mut t = Tape::<f64>::new();
            let xv = Tensor::from_fn(&[1, 2, h, w], |i| (i * 7 % 11) as f64);
            let x = t.constant(xv.clone());
            let p = t.pad_reflect(x, top, 1, left, 1).unwrap();
            let c = t.crop(p, top, left, h, w).unwrap();
            prop_assert_eq!(t.value(c), &xv);
        }

        #[test]
        fn permute_twice_with_inverse(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4) {
            let mut t = Tape::<f64>::new();
            let xv = Tensor::from_fn(&[d0, d1, d2], |i| i as f64);
            let x = t.constant(xv.clone());
            let p = t.permute(x, &[2, 0, 1]).unwrap();
            prop_assert_eq!(t.shape(p), &[d2, d0, d1]);
            let back = t.permute(p, &[1, 2, 0]).unwrap();
            prop_assert_eq!(t.value(back), &xv);
        }
    }

    #[test]
    fn expand_requires_unit_dims() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::ones(&[2, 3]));
        assert!(t.expand(x, &[4, 3]).is_err());
    }
}
