//! Central finite-difference check of the analytic gradients.
//!
//! Perturbing one scalar only changes the computation downstream of the
//! component that owns it, so each evaluation resumes from cached values:
//! a vision adapter of group `g` restarts from the cached pre-adapter
//! sequence of group `g`, text LoRAs rerun only the text path, and gate
//! tensors rerun only the head.

use crate::autodiff::{Tape, Var};
use crate::backbone::GroupedModel;
use crate::error::Result;
use crate::harness::data::Sample;
use crate::losses::LossConfig;
use crate::parallel::Exec;
use crate::params::{Binder, Init, ParamId};
use crate::pipeline::{fusion_of, head_tape, loss_tape, sample_gradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Entries whose analytic magnitude is at or below this are skipped.
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            max_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradEntry>,
    pub failures: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Moves every trainable tensor to a random non-zero point so that no
/// gradient is trivially zero. Zero-initialised tensors get
/// `N(0, scale / fan_in)`; the rest are jittered by the same amount.
pub fn randomize_trainables(model: &mut GroupedModel, seed: u64, scale: f64) {
    let mut init = Init::new(seed);
    for id in model.store.trainable_ids() {
        let p = model.store.get_mut(id);
        let fan_in = p.shape[0].max(1) as f64;
        let noise = init.gaussian(p.numel(), scale / fan_in);
        p.data.iter_mut().zip(noise).for_each(|(d, n)| *d += n);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Vision(usize),
    Text,
    Head,
}

struct Cache {
    pre: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    cls: Vec<f64>,
    text: Vec<[Vec<f64>; 2]>,
}

fn build_cache(model: &GroupedModel, sample: &Sample) -> Result<Cache> {
    let tape = Tape::new();
    let b = Binder::new(&model.store, &tape, false);
    let vision = model.vision_tape(&b, &sample.image)?;
    let text = model.text_tape(&b)?;
    Ok(Cache {
        pre: vision.pre_adapter.iter().map(|&x| tape.value(x).to_vec()).collect(),
        v: vision.v.iter().map(|&x| tape.value(x).to_vec()).collect(),
        cls: tape.value(vision.cls).to_vec(),
        text: text.iter().map(|p| [tape.value(p[0]).to_vec(), tape.value(p[1]).to_vec()]).collect(),
    })
}

fn stage_of(model: &GroupedModel, id: ParamId) -> Stage {
    for (g, a) in model.vision_adapters.iter().enumerate() {
        if a.param_ids().contains(&id) {
            return Stage::Vision(g);
        }
    }
    if model.text_loras.iter().any(|l| l.param_ids().contains(&id)) {
        return Stage::Text;
    }
    Stage::Head
}

fn staged_loss(
    model: &GroupedModel,
    sample: &Sample,
    cache: &Cache,
    stage: Stage,
    cfg: &LossConfig,
    over: (ParamId, usize, f64),
) -> Result<f64> {
    let tape = Tape::new();
    let b = Binder::new(&model.store, &tape, false).with_override(over.0, over.1, over.2);
    let (l, c) = (model.config.patches(), model.config.channels);
    let constants = |vals: &[Vec<f64>]| -> Vec<Var> { vals.iter().map(|x| tape.constant(x.clone(), &[l, c])).collect() };
    let (v, cls) = match stage {
        Stage::Vision(g) => {
            let x = tape.constant(cache.pre[g].clone(), &[1 + l, c]);
            let out = model.vision_resume(&b, g, x, constants(&cache.v[..g]))?;
            (out.v, out.cls)
        }
        _ => (constants(&cache.v), tape.constant(cache.cls.clone(), &[1, c])),
    };
    let text = match stage {
        Stage::Text => model.text_tape(&b)?,
        _ => cache
            .text
            .iter()
            .map(|p| [tape.constant(p[0].clone(), &[1, c]), tape.constant(p[1].clone(), &[1, c])])
            .collect(),
    };
    let head = head_tape(&b, model, &fusion_of(model), &v, cls, &text)?;
    Ok(tape.scalar(loss_tape(&b, model, &head, sample, cfg).total))
}

/// Mean loss over `samples` at the stored parameters, evaluated through the
/// staged path. Equals the plain forward bit for bit.
pub fn staged_mean_loss(model: &GroupedModel, samples: &[&Sample], cfg: &LossConfig) -> Result<f64> {
    let id = model.store.trainable_ids()[0];
    let v0 = model.store.get(id).data[0];
    let mut sum = 0.0;
    for s in samples {
        let cache = build_cache(model, s)?;
        sum += staged_loss(model, s, &cache, Stage::Head, cfg, (id, 0, v0))?;
    }
    Ok(sum / samples.len() as f64)
}

/// Compares analytic gradients of the mean loss over `samples` with central
/// differences, entry by entry.
pub fn check_gradients(
    model: &GroupedModel,
    samples: &[&Sample],
    cfg: &LossConfig,
    opts: &GradCheckOptions,
    exec: Exec,
) -> Result<GradReport> {
    let n = samples.len() as f64;
    let mut analytic: Vec<(ParamId, Vec<f64>)> = Vec::new();
    for s in samples {
        let (_, g) = sample_gradients(model, s, cfg)?;
        if analytic.is_empty() {
            analytic = g;
        } else {
            for ((_, a), (_, b)) in analytic.iter_mut().zip(&g) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }
    analytic.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|x| *x /= n));

    let caches = samples.iter().map(|s| build_cache(model, s)).collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for (id, g) in &analytic {
        let stride = opts.max_per_tensor.map_or(1, |m| g.len().div_ceil(m.max(1)));
        for (i, &a) in g.iter().enumerate() {
            if i % stride != 0 {
                continue;
            }
            if a.abs() <= opts.floor {
                skipped += 1;
                continue;
            }
            jobs.push((*id, i, a));
        }
    }

    let entries = exec.map(&jobs, |&(id, i, a)| -> Result<GradEntry> {
        let stage = stage_of(model, id);
        let x0 = model.store.get(id).data[i];
        let mut diff = 0.0;
        for (s, cache) in samples.iter().zip(&caches) {
            let plus = staged_loss(model, s, cache, stage, cfg, (id, i, x0 + opts.step))?;
            let minus = staged_loss(model, s, cache, stage, cfg, (id, i, x0 - opts.step))?;
            diff += plus - minus;
        }
        let numeric = diff / n / (2.0 * opts.step);
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs());
        Ok(GradEntry {
            param: model.store.get(id).name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err,
        })
    });

    let mut report = GradReport {
        checked: 0,
        skipped,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for e in entries {
        let e = e?;
        report.checked += 1;
        if e.rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e.rel_err);
            report.worst = Some(e.clone());
        }
        if !(e.rel_err < opts.tolerance) {
            report.failures.push(e);
        }
    }
    Ok(report)
}
