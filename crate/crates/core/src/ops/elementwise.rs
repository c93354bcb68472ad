use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Elementwise map with derivative `df(x, y)` of the output `y = f(x)`.
    fn unary<F, D>(&mut self, op: &'static str, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let y = self.value(x).map(f);
        self.push_op(op, &[x], y, move |a| {
            let g = a.grad.data();
            let xs = a.inputs[0].data();
            let ys = a.output.data();
            let data = (0..g.len()).map(|i| g[i] * df(xs[i], ys[i])).collect();
            vec![Some(Tensor::new(a.grad.shape(), data).expect("shape"))]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push_op("add", &[a, b], y, |a| vec![Some(a.grad.clone()), Some(a.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push_op("sub", &[a, b], y, |a| vec![Some(a.grad.clone()), Some(a.grad.map(|g| -g))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push_op("mul", &[a, b], y, |a| {
            let ga = a.needs[0].then(|| a.grad.zip_map(a.inputs[1], |g, q| g * q).expect("shape"));
            let gb = a.needs[1].then(|| a.grad.zip_map(a.inputs[0], |g, p| g * p).expect("shape"));
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary("scale", x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary("add_scalar", x, move |v| v + s, |_, _| T::one())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary("neg", x, |v| -v, |_, _| -T::one())
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary("one_minus", x, |v| T::one() - v, |_, _| -T::one())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary("square", x, |v| v * v, |x, _| x + x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary("sqrt", x, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            "abs",
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            "relu",
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary("gelu", x, |v| T::of(gelu_f64(v.f64())), |x, _| T::of(gelu_grad_f64(x.f64())))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary("softplus", x, softplus, |x, _| sigmoid(x))
    }

    /// PReLU with one slope per channel; the channel axis is 1.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(alpha) != [shape[1]] {
            return Err(Error::shape(
                "prelu",
                format!(
                    "input {shape:?} needs slope of shape [{}], got {:?}",
                    shape.get(1).copied().unwrap_or(0),
                    self.shape(alpha)
                ),
            ));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let xv = self.value(x);
        let av = self.value(alpha).data();
        let y = Tensor::from_fn(&shape, |i| {
            let v = xv.data()[i];
            if v > T::zero() {
                v
            } else {
                av[(i / inner) % c] * v
            }
        });
        Ok(self.push_op("prelu", &[x, alpha], y, move |a| {
            let g = a.grad.data();
            let xs = a.inputs[0].data();
            let al = a.inputs[1].data();
            let gx = a.needs[0].then(|| {
                Tensor::from_fn(
                    a.grad.shape(),
                    |i| {
                        if xs[i] > T::zero() {
                            g[i]
                        } else {
                            g[i] * al[(i / inner) % c]
                        }
                    },
                )
            });
            let ga = a.needs[1].then(|| {
                let mut acc = vec![T::zero(); c];
                for i in 0..g.len() {
                    if xs[i] <= T::zero() {
                        acc[(i / inner) % c] += g[i] * xs[i];
                    }
                }
                Tensor::new(&[c], acc).expect("shape")
            });
            vec![gx, ga]
        }))
    }
}
