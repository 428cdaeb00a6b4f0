//! Training loop: Adam with warmup + cosine decay over per-sample passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{OptimConfig, RunConfig};
use crate::data::{crop_unknown_centered, MattingSample};
use crate::error::{arg_err, Error, Result};
use crate::losses::{self, LossTargets};
use crate::model::{self, init_params};
use crate::params::{to_f32_grid, ParamStore};

/// Learning rate at 0-based `step` of a `total`-step run.
pub fn lr_at(o: &OptimConfig, step: usize, total: usize) -> f64 {
    let warmup = ((total as f64) * o.warmup_frac).ceil() as usize;
    if step < warmup {
        return o.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = o.lr * o.final_lr_frac;
    floor + (o.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let z: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.data.len()])
            .collect();
        Adam {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    pub fn step(&mut self, o: &OptimConfig, lr: f64, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - o.beta1.powi(self.t);
        let bc2 = 1.0 - o.beta2.powi(self.t);
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let e = store.get_mut(name).expect("own entry");
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..e.data.len() {
                m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
                v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + o.eps);
                e.data[j] = to_f32_grid(e.data[j] - update);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub alpha: f64,
    pub comp: f64,
    pub lap: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,total,alpha,comp,lap\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.lr, r.total, r.alpha, r.comp, r.lap
        ));
    }
    out
}

/// What the step callback wants next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub trace: Vec<TraceRow>,
    pub steps_run: usize,
}

/// Loss and gradients of one sample at the current parameters.
pub fn sample_pass(
    cfg: &RunConfig,
    store: &ParamStore,
    sample: &MattingSample,
) -> Result<(TraceRow, Vec<Vec<f64>>)> {
    let (fg, bg) = match (&sample.fg, &sample.bg) {
        (Some(f), Some(b)) => (f.to_tensor(), b.to_tensor()),
        _ => {
            return Err(arg_err!(
                "sample {} lacks foreground/background planes",
                sample.id
            ))
        }
    };
    let p = store.bind();
    let image = sample.image.to_tensor();
    let pred = model::forward(&cfg.model, &p, &image, &sample.trimap, None)?;
    let mask = sample.trimap.unknown_mask();
    let targets = LossTargets {
        alpha: &sample.alpha.to_tensor(),
        fg: &fg,
        bg: &bg,
        image: &image,
        unknown_mask: &mask,
    };
    let parts = losses::compute(&cfg.loss, &pred, &targets)?;
    parts.total.backward()?;
    let row = TraceRow {
        step: 0,
        lr: 0.0,
        total: parts.total.item(),
        alpha: parts.alpha.item(),
        comp: parts.comp.item(),
        lap: parts.lap.item(),
    };
    Ok((row, store.collect_grads(&p)))
}

fn check_samples(cfg: &RunConfig, samples: &[MattingSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(arg_err!("training corpus is empty"));
    }
    for s in samples {
        s.validate()?;
        if s.fg.is_none() || s.bg.is_none() {
            return Err(arg_err!(
                "sample {} lacks foreground/background planes",
                s.id
            ));
        }
        if s.height() < cfg.data.crop || s.width() < cfg.data.crop {
            return Err(Error::Config(format!(
                "sample {} ({}x{}) is smaller than crop {}",
                s.id,
                s.height(),
                s.width(),
                cfg.data.crop
            )));
        }
    }
    Ok(())
}

/// Runs `cfg.train.steps` optimizer steps from a seeded initialization.
///
/// `on_step(step, params, row)` runs after every update; returning
/// [`Control::Stop`] ends the run early.
pub fn train(
    cfg: &RunConfig,
    samples: &[MattingSample],
    init: Option<ParamStore>,
    mut on_step: impl FnMut(usize, &ParamStore, &TraceRow) -> Result<Control>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(cfg, samples)?;
    let mut store = match init {
        Some(s) => s,
        None => init_params(&cfg.model, cfg.train.seed)?,
    };
    let mut adam = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5EED_DA7A);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let total = cfg.train.steps;
    let mut trace = Vec::with_capacity(total);
    let mut steps_run = 0;
    for step in 0..total {
        let batch: Vec<MattingSample> = (0..cfg.train.batch)
            .map(|_| {
                let s = &samples[rng.random_range(0..samples.len())];
                crop_unknown_centered(s, cfg.data.crop, &mut rng)
            })
            .collect::<Result<_>>()?;
        let results: Vec<Result<(TraceRow, Vec<Vec<f64>>)>> = pool.install(|| {
            batch
                .par_iter()
                .map(|s| sample_pass(cfg, &store, s))
                .collect()
        });
        let n = batch.len() as f64;
        let mut row = TraceRow {
            step,
            lr: lr_at(&cfg.optim, step, total),
            total: 0.0,
            alpha: 0.0,
            comp: 0.0,
            lap: 0.0,
        };
        let mut grads: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.data.len()])
            .collect();
        for r in results {
            let (part, g) = r?;
            row.total += part.total / n;
            row.alpha += part.alpha / n;
            row.comp += part.comp / n;
            row.lap += part.lap / n;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += b / n;
                }
            }
        }
        if !row.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {step} (loss {})",
                row.total
            )));
        }
        adam.step(&cfg.optim, row.lr, &mut store, &grads);
        trace.push(row);
        steps_run = step + 1;
        if on_step(step, &store, &row)? == Control::Stop {
            break;
        }
    }
    Ok(TrainOutcome {
        params: store,
        trace,
        steps_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let o = OptimConfig::default();
        assert!((lr_at(&o, 0, 100) - 0.5e-4).abs() < 1e-18);
        assert!((lr_at(&o, 1, 100) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&o, 2, 100) - 1e-4).abs() < 1e-18);
        assert!(lr_at(&o, 99, 100) < 1e-6);
        let mid = lr_at(&o, 51, 100);
        assert!((mid - 0.5e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", &[2], vec![1.0, 1.0]).unwrap();
        let mut adam = Adam::new(&store);
        adam.step(
            &OptimConfig::default(),
            0.125,
            &mut store,
            &[vec![3.0, -3.0]],
        );
        let d = &store.get("w").unwrap().data;
        assert!((d[0] - 0.875).abs() < 1e-6 && (d[1] - 1.125).abs() < 1e-6);
    }
}
