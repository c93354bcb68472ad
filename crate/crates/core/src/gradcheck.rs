//! Analytic-versus-numeric gradient comparison.
//!
//! The analytic gradient comes from a backward sweep in `f32`. The numeric
//! reference replays the same objective in `f64` with central differences,
//! so cancellation error stays far below the tolerance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Routing};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

/// A scalar function of the parameters in a store, evaluable in any precision.
pub trait Objective {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var>;

    fn routing(&self) -> Routing {
        Routing::soft()
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub coords: usize,
    /// `max|a - n| / max(1e-6, max|a| + max|n|)` over the sampled coordinates.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Scalarizes `out` by a fixed pseudo-random projection so that gradients are
/// not degenerate (a plain sum is blind to shift-invariant outputs).
pub fn project<T: Real>(g: &mut Graph<'_, T>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r: Tensor<f64> = Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng);
    let rv = g.constant(r.cast());
    let prod = g.mul(out, rv)?;
    Ok(g.sum(prod))
}

/// Compares gradients on up to `coords` randomly chosen scalar coordinates
/// among the parameters whose name starts with `prefix`.
pub fn check<O: Objective>(obj: &O, params: &ParamStore, prefix: &str, coords: usize, seed: u64) -> Result<GradReport> {
    let v32 = params.values::<f32>();
    let mut g = Graph::new(&v32, obj.routing());
    let loss = obj.eval(&mut g)?;
    let analytic = g.param_grads(loss)?;

    let flat: Vec<(String, usize)> = params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(n, e)| (0..e.value.numel()).map(move |i| (n.to_string(), i)))
        .collect();
    if flat.is_empty() {
        return Err(Error::Invalid(format!("no parameters under `{prefix}`")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if flat.len() <= coords {
        (0..flat.len()).collect()
    } else {
        let mut p = sample(&mut rng, flat.len(), coords).into_vec();
        p.sort_unstable();
        p
    };

    let mut v64 = params.values::<f64>();
    let mut a_max = 0.0f64;
    let mut n_max = 0.0f64;
    let mut err_max = 0.0f64;
    let mut worst = None;
    for &k in &picks {
        let (name, idx) = &flat[k];
        let a = analytic.get(name).map(|t| t.data()[*idx] as f64).unwrap_or(0.0);
        let orig = v64.get(name)?.data()[*idx];
        v64.get_mut(name)?.data_mut()[*idx] = orig + FD_STEP;
        let fp = eval_f64(obj, &v64)?;
        v64.get_mut(name)?.data_mut()[*idx] = orig - FD_STEP;
        let fm = eval_f64(obj, &v64)?;
        v64.get_mut(name)?.data_mut()[*idx] = orig;
        let n = (fp - fm) / (2.0 * FD_STEP);
        a_max = a_max.max(a.abs());
        n_max = n_max.max(n.abs());
        let e = (a - n).abs();
        if e >= err_max {
            err_max = e;
            worst = Some((name.clone(), *idx, a, n));
        }
    }
    Ok(GradReport {
        coords: picks.len(),
        rel_err: err_max / (a_max + n_max).max(1e-6),
        max_abs_err: err_max,
        worst,
    })
}

fn eval_f64<O: Objective>(obj: &O, values: &crate::params::ParamValues<f64>) -> Result<f64> {
    let mut g = Graph::inference(values, obj.routing());
    let loss = obj.eval(&mut g)?;
    g.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    struct Cube;

    impl Objective for Cube {
        fn eval<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
            let x = g.p("x")?;
            let sq = g.square(x);
            let cube = g.mul(sq, x)?;
            Ok(g.sum(cube))
        }
    }

    #[test]
    fn smooth_objective_passes() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.1]).unwrap()).unwrap();
        let rep = check(&Cube, &store, "", 8, 1).unwrap();
        assert_eq!(rep.coords, 4);
        assert!(rep.passes(GRAD_TOL), "{rep:?}");
    }

    #[test]
    fn empty_prefix_match_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::ones(&[2])).unwrap();
        assert!(check(&Cube, &store, "nothing.", 8, 1).is_err());
    }
}
