//! One-sample forward pass from pixels to losses and scores, plus batched
//! gradients.
//!
//! Each sample gets its own tape. The batch loss is the mean of per-sample
//! losses, so per-sample gradients are summed in sample order and divided by
//! the batch size, independent of how the samples were scheduled.

use std::rc::Rc;

use crate::autodiff::{two_way_prob, Tape, Var};
use crate::backbone::GroupedModel;
use crate::dfg::{gateway_tape, AnomalyMap, Fusion};
use crate::error::{Error, Result};
use crate::harness::data::Sample;
use crate::losses::{self, LossConfig};
use crate::parallel::Exec;
use crate::params::{Binder, ParamId};

/// Scalar loss terms, in the same units as the batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub seg: f64,
    pub cls: f64,
}

pub struct LossVars {
    pub total: Var,
    pub seg: Var,
    pub cls: Var,
}

/// Tape-level outputs of the gateway and classification head.
pub struct HeadVars {
    pub levels: Vec<Var>,
    pub aggregated: Var,
    pub upsampled: Var,
    pub weights: Vec<[Var; 2]>,
    pub sim_normal: Var,
    pub sim_abnormal: Var,
}

pub fn fusion_of(model: &GroupedModel) -> Fusion<'_> {
    match &model.gate {
        Some(g) => Fusion::Gated(g),
        None => Fusion::Static,
    }
}

/// Gateway maps, upsampled `M_seg`, and the class-token similarities to the
/// unfused final-group anchors.
pub fn head_tape(b: &Binder, model: &GroupedModel, fusion: &Fusion, v: &[Var], cls: Var, text: &[[Var; 2]]) -> Result<HeadVars> {
    let t = b.tape();
    let tau = model.config.temperature;
    let gw = gateway_tape(b, fusion, v, text, tau)?;
    let (gh, gwid) = model.grid();
    let grid_map = t.reshape(gw.aggregated, &[gh, gwid]);
    let upsampled = t.upsample(grid_map, model.pixel_size());
    let anchor = text.last().ok_or_else(|| Error::shape("no text levels"))?;
    let sim_normal = t.reshape(t.cosine_rows(cls, anchor[0]), &[1]);
    let sim_abnormal = t.reshape(t.cosine_rows(cls, anchor[1]), &[1]);
    Ok(HeadVars {
        levels: gw.levels,
        aggregated: gw.aggregated,
        upsampled,
        weights: gw.weights,
        sim_normal,
        sim_abnormal,
    })
}

/// `L_seg + λ_cls·L_cls` for one sample.
pub fn loss_tape(b: &Binder, model: &GroupedModel, head: &HeadVars, sample: &Sample, cfg: &LossConfig) -> LossVars {
    let t = b.tape();
    let mask = Rc::new(sample.mask.clone());
    let focal = t.focal_loss(head.upsampled, Rc::clone(&mask), cfg.focal_gamma, cfg.focal_alpha);
    let dice = t.dice_loss(head.upsampled, mask, cfg.dice_smooth);
    let seg = t.weighted_sum(&[(focal, cfg.lambda_focal), (dice, cfg.lambda_dice)]);
    let cls = t.two_way_cross_entropy(head.sim_normal, head.sim_abnormal, model.config.temperature, sample.label);
    let total = t.weighted_sum(&[(seg, 1.0), (cls, cfg.lambda_cls)]);
    LossVars { total, seg, cls }
}

/// Full forward for one sample on `b`'s tape.
pub fn sample_loss_tape(b: &Binder, model: &GroupedModel, sample: &Sample, cfg: &LossConfig) -> Result<LossVars> {
    check_sample(model, sample)?;
    let vision = model.vision_tape(b, &sample.image)?;
    let text = model.text_tape(b)?;
    let head = head_tape(b, model, &fusion_of(model), &vision.v, vision.cls, &text)?;
    Ok(loss_tape(b, model, &head, sample, cfg))
}

fn check_sample(model: &GroupedModel, sample: &Sample) -> Result<()> {
    let (h, w) = model.pixel_size();
    if sample.height != h || sample.width != w || sample.image.len() != h * w || sample.mask.len() != h * w {
        return Err(Error::shape(format!(
            "sample {} is {}x{}, model expects {h}x{w}",
            sample.id, sample.height, sample.width
        )));
    }
    Ok(())
}

pub fn sample_loss(model: &GroupedModel, sample: &Sample, cfg: &LossConfig) -> Result<LossTerms> {
    let tape = Tape::new();
    let b = Binder::new(&model.store, &tape, false);
    let l = sample_loss_tape(&b, model, sample, cfg)?;
    Ok(LossTerms {
        total: tape.scalar(l.total),
        seg: tape.scalar(l.seg),
        cls: tape.scalar(l.cls),
    })
}

/// Loss and trainable-parameter gradients of one sample.
pub fn sample_gradients(model: &GroupedModel, sample: &Sample, cfg: &LossConfig) -> Result<(LossTerms, Vec<(ParamId, Vec<f64>)>)> {
    let tape = Tape::new();
    let b = Binder::new(&model.store, &tape, true);
    let l = sample_loss_tape(&b, model, sample, cfg)?;
    let terms = LossTerms {
        total: tape.scalar(l.total),
        seg: tape.scalar(l.seg),
        cls: tape.scalar(l.cls),
    };
    let grads = b.gradients(&tape.backward(l.total));
    Ok((terms, grads))
}

/// Mean loss over `batch` and the matching mean gradients, ordered by
/// parameter id.
pub fn batch_gradients(
    model: &GroupedModel,
    batch: &[&Sample],
    cfg: &LossConfig,
    exec: Exec,
) -> Result<(LossTerms, Vec<(ParamId, Vec<f64>)>)> {
    if batch.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let per_sample = exec.map(batch, |s| sample_gradients(model, s, cfg));
    let n = batch.len() as f64;
    let mut terms = LossTerms::default();
    let mut acc: Vec<(ParamId, Vec<f64>)> = Vec::new();
    for result in per_sample {
        let (t, grads) = result?;
        terms.total += t.total;
        terms.seg += t.seg;
        terms.cls += t.cls;
        if acc.is_empty() {
            acc = grads;
        } else {
            for ((id_a, a), (id_g, g)) in acc.iter_mut().zip(&grads) {
                debug_assert_eq!(id_a, id_g);
                a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
    }
    terms.total /= n;
    terms.seg /= n;
    terms.cls /= n;
    for (_, g) in &mut acc {
        g.iter_mut().for_each(|x| *x /= n);
    }
    acc.sort_by_key(|(id, _)| *id);
    Ok((terms, acc))
}

/// Inference result for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub map: AnomalyMap,
    pub p_abnormal: f64,
    pub score: f64,
    /// Fusion weights `[level][state]`; empty under static fusion.
    pub weights: Vec<[Vec<f64>; 2]>,
}

pub fn predict(model: &GroupedModel, pixels: &[f64]) -> Result<Prediction> {
    predict_with(model, &fusion_of(model), pixels)
}

pub fn predict_with(model: &GroupedModel, fusion: &Fusion, pixels: &[f64]) -> Result<Prediction> {
    let tape = Tape::new();
    let b = Binder::new(&model.store, &tape, false);
    let vision = model.vision_tape(&b, pixels)?;
    let text = model.text_tape(&b)?;
    let head = head_tape(&b, model, fusion, &vision.v, vision.cls, &text)?;
    let p_abnormal = two_way_prob(tape.scalar(head.sim_normal), tape.scalar(head.sim_abnormal), model.config.temperature);
    let upsampled = tape.value(head.upsampled).to_vec();
    let score = losses::image_score(p_abnormal, &upsampled);
    Ok(Prediction {
        map: AnomalyMap {
            grid: model.grid(),
            per_level: head.levels.iter().map(|&m| tape.value(m).to_vec()).collect(),
            aggregated: tape.value(head.aggregated).to_vec(),
            upsampled,
            pixel_size: model.pixel_size(),
        },
        p_abnormal,
        score,
        weights: head
            .weights
            .iter()
            .map(|pair| [tape.value(pair[0]).to_vec(), tape.value(pair[1]).to_vec()])
            .collect(),
    })
}
