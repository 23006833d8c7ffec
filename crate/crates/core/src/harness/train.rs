//! Adam over the trainable tensors with deterministic epoch shuffles.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_model, GroupedModel};
use crate::error::{Error, Result};
use crate::harness::config::{OptimConfig, RunConfig};
use crate::harness::data::Sample;
use crate::losses::LossConfig;
use crate::parallel::Exec;
use crate::params::{ParamId, ParamStore};
use crate::pipeline::{batch_gradients, LossTerms};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; if p.trainable { p.numel() } else { 0 }]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p.data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss terms of the batch seen at `step`, before that step's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub terms: LossTerms,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GroupedModel,
    pub trace: Vec<TraceRow>,
}

/// Fixed-seed stream of minibatch indices, reshuffled every epoch.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
            batch: batch.min(n),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains `model` in place for `optim.steps` steps.
pub fn train_model(
    model: &mut GroupedModel,
    samples: &[Sample],
    loss: &LossConfig,
    optim: &OptimConfig,
    shuffle_seed: u64,
    exec: Exec,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>> {
    if samples.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut adam = Adam::new(&model.store, optim.lr);
    let mut sampler = BatchSampler::new(samples.len(), optim.batch_size, shuffle_seed);
    let mut trace = Vec::with_capacity(optim.steps);
    for step in 0..optim.steps {
        let batch: Vec<&Sample> = sampler.next_batch().into_iter().map(|i| &samples[i]).collect();
        let (terms, grads) = batch_gradients(model, &batch, loss, exec)?;
        let finite = terms.total.is_finite() && grads.iter().all(|(_, g)| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss or gradient (loss {})", terms.total),
                snapshot: Some(Box::new(model.store.clone())),
            });
        }
        adam.step(&mut model.store, &grads);
        let row = TraceRow { step, terms };
        on_step(&row);
        trace.push(row);
    }
    Ok(trace)
}

/// Builds the configured model and trains it on `samples`.
pub fn train(config: &RunConfig, samples: &[Sample], exec: Exec, on_step: impl FnMut(&TraceRow)) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = build_model(&config.model, config.model_seed)?;
    let trace = train_model(
        &mut model,
        samples,
        &config.loss,
        &config.optim,
        config.data_seed ^ 0x5EED,
        exec,
        on_step,
    )?;
    Ok(TrainOutcome { model, trace })
}

/// CSV `step,total,seg,cls`, optionally followed by `# eval` summary lines.
pub fn write_trace(path: &Path, trace: &[TraceRow], eval: Option<&str>) -> Result<()> {
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(out, "step,total,seg,cls").map_err(io)?;
    for r in trace {
        writeln!(out, "{},{:.9},{:.9},{:.9}", r.step, r.terms.total, r.terms.seg, r.terms.cls).map_err(io)?;
    }
    if let Some(text) = eval {
        for line in text.lines() {
            writeln!(out, "# eval {line}").map_err(io)?;
        }
    }
    std::fs::write(path, out).map_err(io)
}
