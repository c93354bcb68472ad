//! Minibatch training on the global objective and held-out evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{stack, PairedSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Routing};
use crate::losses::{global_loss, LossBreakdown, LossConfig};
use crate::metrics::{psnr_y, ssim_y};
use crate::params::ParamStore;
use crate::pipeline::Prism;
use crate::tensor::Tensor;

pub const LOSS_LOG_HEADER: &str = "step,stage1_char,stage1_edge,stage2_char,stage2_edge,stage2_wav,stage3_char,stage3_edge,total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Heavy-ball SGD: `v = momentum * v + g; p -= lr * v`.
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Rescales the full gradient to at most this L2 norm when set.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 2,
            lr: 1e-3,
            optimizer: Optimizer::sgd(),
            clip_norm: None,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

/// Per-parameter optimizer state.
struct OptState {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    t: i32,
}

impl OptState {
    fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, e)| vec![0.0f32; e.value.numel()]).collect();
        Self {
            first: zeros(),
            second: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, store: &mut ParamStore, opt: Optimizer, lr: f64, scale: f32) {
        self.t += 1;
        for (k, (_, e)) in store.iter_mut().enumerate() {
            let grad = e.grad.data();
            let value = e.value.data_mut();
            let m = &mut self.first[k];
            match opt {
                Optimizer::Sgd { momentum } => {
                    for i in 0..value.len() {
                        m[i] = momentum as f32 * m[i] + scale * grad[i];
                        value[i] -= lr as f32 * m[i];
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[k];
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for i in 0..value.len() {
                        let g = scale * grad[i];
                        m[i] = beta1 as f32 * m[i] + (1.0 - beta1 as f32) * g;
                        v[i] = beta2 as f32 * v[i] + (1.0 - beta2 as f32) * g * g;
                        let mh = m[i] as f64 / c1;
                        let vh = v[i] as f64 / c2;
                        value[i] -= (lr * mh / (vh.sqrt() + eps)) as f32;
                    }
                }
            }
        }
    }
}

/// Writes one loss-log row; stages that did not run leave empty fields.
pub fn write_log_row<W: Write>(out: &mut W, step: usize, b: &LossBreakdown) -> Result<()> {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(
        out,
        "{step},{},{},{},{},{},{},{},{}",
        f(b.char[0]),
        f(b.edge[0]),
        f(b.char[1]),
        f(b.edge[1]),
        f(b.wav[1]),
        f(b.char[2]),
        f(b.edge[2]),
        b.total
    )?;
    Ok(())
}

/// Seed for the routing noise of one step.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64)
}

/// One loss and gradient evaluation; gradients land in `store`.
pub fn loss_and_grads(
    model: &Prism,
    store: &mut ParamStore,
    rainy: &Tensor,
    clean: &Tensor,
    cfg: &LossConfig,
    routing: Routing,
) -> Result<LossBreakdown> {
    let values = store.values::<f32>();
    let mut g = Graph::new(&values, routing);
    let x = g.constant(rainy.clone());
    let y = g.constant(clean.clone());
    let outs = model.forward(&mut g, x)?;
    let (loss, parts) = global_loss(&mut g, &outs, y, cfg)?;
    if !parts.total.is_finite() {
        let culprit = g
            .first_non_finite()
            .map(|(id, op)| format!("first non-finite tensor is node {id} ({op})"))
            .unwrap_or_else(|| "no intermediate tensor is non-finite".into());
        return Err(Error::NonFinite(format!("loss is {}; {culprit}", parts.total)));
    }
    let grads = g.param_grads(loss)?;
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    store.zero_grads();
    store.accumulate_grads(&grads)?;
    Ok(parts)
}

/// Runs `cfg.steps` optimizer steps over shuffled minibatches. Each step's
/// losses (before the update) are returned and, if `log` is given, written
/// as CSV under [`LOSS_LOG_HEADER`].
pub fn train(
    model: &Prism,
    store: &mut ParamStore,
    data: &[PairedSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossBreakdown>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Invalid("training needs data and a positive batch size".into()));
    }
    if cfg.lr.is_nan() || cfg.lr < 0.0 {
        return Err(Error::Invalid(format!("learning rate {} must be non-negative", cfg.lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = OptState::new(store);
    let mut history = Vec::with_capacity(cfg.steps);
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOSS_LOG_HEADER}")?;
    }
    for step in 1..=cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..data.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch_size).collect();
        let rainy = stack(&idx.iter().map(|&i| &data[i].rainy).collect::<Vec<_>>())?;
        let clean = stack(&idx.iter().map(|&i| &data[i].clean).collect::<Vec<_>>())?;
        let routing = Routing::train(step_seed(cfg.seed, step));
        let parts = loss_and_grads(model, store, &rainy, &clean, &cfg.loss, routing).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        let scale = match cfg.clip_norm {
            Some(max) => {
                let norm = store
                    .iter()
                    .flat_map(|(_, e)| e.grad.data().iter().map(|&g| (g as f64) * (g as f64)))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    (max / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        opt.step(store, cfg.optimizer, cfg.lr, scale);
        if let Some(w) = log.as_mut() {
            write_log_row(w, step, &parts)?;
        }
        log::debug!("step {step}: total {:.6}", parts.total);
        history.push(parts);
    }
    Ok(history)
}

/// Mean luma metrics of the last stage against the clean images, and of the
/// rainy inputs as a baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr_rainy: f64,
    pub psnr_restored: f64,
    pub ssim_rainy: f64,
    pub ssim_restored: f64,
}

pub fn evaluate(model: &Prism, store: &ParamStore, data: &[PairedSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("no evaluation pairs".into()));
    }
    let values = store.values::<f32>();
    let mut acc = [0.0f64; 4];
    for s in data {
        let outs = model.infer(&values, &s.rainy)?;
        let restored = outs.iter().rev().flatten().next().expect("at least one stage").clamp(0.0, 1.0);
        acc[0] += psnr_y(&s.rainy, &s.clean)?;
        acc[1] += psnr_y(&restored, &s.clean)?;
        acc[2] += ssim_y(&s.rainy, &s.clean)?;
        acc[3] += ssim_y(&restored, &s.clean)?;
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        psnr_rainy: acc[0] / n,
        psnr_restored: acc[1] / n,
        ssim_rainy: acc[2] / n,
        ssim_restored: acc[3] / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{background, synthesize_rain, RainConfig};
    use crate::pipeline::PipelineConfig;

    fn pairs(n: usize) -> Vec<PairedSample> {
        (0..n as u64)
            .map(|s| {
                let clean = background(16, 16, s);
                let rainy = synthesize_rain(
                    &clean,
                    &RainConfig {
                        seed: s,
                        ..RainConfig::default()
                    },
                )
                .unwrap();
                PairedSample {
                    id: s.to_string(),
                    rainy,
                    clean,
                }
            })
            .collect()
    }

    #[test]
    fn rejects_empty_data_and_negative_lr() {
        let (model, mut store) = Prism::build(PipelineConfig::tiny(), 0).unwrap();
        assert!(train(&model, &mut store, &[], &TrainConfig::default(), None).is_err());
        let cfg = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(train(&model, &mut store, &pairs(1), &cfg, None).is_err());
    }

    #[test]
    fn log_has_header_and_one_row_per_step() {
        let (model, mut store) = Prism::build(PipelineConfig::tiny(), 0).unwrap();
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut buf = Vec::new();
        let hist = train(&model, &mut store, &pairs(2), &cfg, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOSS_LOG_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(hist.len(), 2);
        assert!(lines[1].starts_with("1,"));
    }
}
