use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `c[m,n] += a[m,k] * b[k,n]`, optionally transposing either operand.
fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == T::zero() {
                continue;
            }
            if tb {
                for j in 0..n {
                    crow[j] += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Batched matrix product `[b,m,k] x [b,k,n] -> [b,m,n]`; rank-2 inputs
    /// are treated as a batch of one.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let out_shape: Vec<usize> = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for s in 0..batch {
            gemm_acc(
                &av[s * m * k..(s + 1) * m * k],
                &bv[s * k * n..(s + 1) * k * n],
                &mut out[s * m * n..(s + 1) * m * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let y = Tensor::new(&out_shape, out)?;
        Ok(self.push_op("matmul", &[a, b], y, move |args| {
            let g = args.grad.data();
            let av = args.inputs[0].data();
            let bv = args.inputs[1].data();
            let ga = args.needs[0].then(|| {
                let mut d = vec![T::zero(); batch * m * k];
                for s in 0..batch {
                    // dA = G B^T
                    gemm_acc(
                        &g[s * m * n..(s + 1) * m * n],
                        &bv[s * k * n..(s + 1) * k * n],
                        &mut d[s * m * k..(s + 1) * m * k],
                        m,
                        n,
                        k,
                        false,
                        true,
                    );
                }
                Tensor::new(args.inputs[0].shape(), d).expect("shape")
            });
            let gb = args.needs[1].then(|| {
                let mut d = vec![T::zero(); batch * k * n];
                for s in 0..batch {
                    // dB = A^T G
                    gemm_acc(
                        &av[s * m * k..(s + 1) * m * k],
                        &g[s * m * n..(s + 1) * m * n],
                        &mut d[s * k * n..(s + 1) * k * n],
                        k,
                        m,
                        n,
                        true,
                        false,
                    );
                }
                Tensor::new(args.inputs[1].shape(), d).expect("shape")
            });
            vec![ga, gb]
        }))
    }

    /// `x w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let out = self.shape(y).to_vec();
                if out.len() != 2 || self.shape(b) != [out[1]] {
                    return Err(Error::shape("linear", format!("bias {:?} for output {out:?}", self.shape(b))));
                }
                let b2 = self.reshape(b, &[1, out[1]])?;
                let be = self.expand(b2, &out)?;
                self.add(y, be)
            }
        }
    }
}
