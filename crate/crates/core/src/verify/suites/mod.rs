mod attention;
mod cli;
mod data;
mod hdmamba;
mod losses;
mod pipeline;
mod ssm;
mod tensor;
mod wavelet;

pub(crate) use attention::attention;
pub(crate) use cli::cli;
pub(crate) use data::data;
pub(crate) use hdmamba::hdmamba;
pub(crate) use losses::losses;
pub(crate) use pipeline::pipeline;
pub(crate) use ssm::ssm;
pub(crate) use tensor::tensor;
pub(crate) use wavelet::wavelet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Routing};
use crate::params::{ParamBuilder, ParamStore};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn uniform<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Registers a block into a fresh store.
pub(crate) fn build<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> Result<B>) -> Result<(B, ParamStore)> {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let block = f(&mut ParamBuilder::new(&mut store, &mut r))?;
    Ok((block, store))
}

/// Forward-only evaluation over the parameters in `store`.
pub(crate) fn run<T: Real>(store: &ParamStore, routing: Routing, f: impl FnOnce(&mut Graph<'_, T>) -> Result<Var>) -> Result<Tensor<T>> {
    let values = store.values::<T>();
    let mut g = Graph::inference(&values, routing);
    let out = f(&mut g)?;
    Ok(g.value(out).clone())
}

pub(crate) fn max_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(a.max_abs_diff(b)?.f64())
}

pub(crate) fn max_diff_slices(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sets a parameter to zeros of its shape.
pub(crate) fn zero(store: &mut ParamStore, name: &str) -> Result<()> {
    let shape = store.get(name)?.shape().to_vec();
    store.set(name, Tensor::zeros(&shape))
}

/// Sets a `[C,C/groups,k,k]` kernel to the identity delta.
pub(crate) fn delta_kernel(store: &mut ParamStore, name: &str) -> Result<()> {
    let shape = store.get(name)?.shape().to_vec();
    let (cout, cin, k) = (shape[0], shape[1], shape[2]);
    let mid = k / 2;
    let t = Tensor::from_fn(&shape, |i| {
        let (o, c, y, x) = (i / (cin * k * k), (i / (k * k)) % cin, (i / k) % k, i % k);
        let same = if cin == 1 { true } else { o == c };
        if same && y == mid && x == mid && o < cout {
            1.0
        } else {
            0.0
        }
    });
    store.set(name, t)
}

/// Redraws every parameter from a normal with the given spread, so that
/// oracle comparisons exercise non-degenerate weights.
pub(crate) fn randomize(store: &mut ParamStore, seed: u64, std: f64) -> Result<()> {
    let mut g = rng(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n)?.shape().to_vec();
        store.set(&n, Tensor::randn(&shape, std, &mut g))?;
    }
    Ok(())
}

/// A rank-2 tensor as nested rows.
pub(crate) fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}
