//! Segmentation and classification objectives plus the inference-time image
//! score.

use crate::error::{Error, Result};
use crate::tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub lambda_cls: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_focal: 1.0,
            lambda_dice: 1.0,
            lambda_cls: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("lambda_focal", self.lambda_focal),
            ("lambda_dice", self.lambda_dice),
            ("lambda_cls", self.lambda_cls),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bad.push(name);
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            bad.push("focal_alpha");
        }
        if !(self.dice_smooth > 0.0) {
            bad.push("dice_smooth");
        }
        if self.lambda_focal + self.lambda_dice + self.lambda_cls <= 0.0 {
            bad.push("lambda_* (all zero)");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid loss settings: {}", bad.join(", "))))
        }
    }
}

/// Pixel mask plus image label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mask: Vec<f64>,
    pub image_label: bool,
}

fn check_sizes(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

fn focal_terms(p: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = p.clamp(EPS, 1.0 - EPS);
    let pos = -alpha * (1.0 - p).powf(gamma) * p.ln();
    let neg = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
    (pos, neg)
}

/// Mean focal loss over pixels.
pub fn focal_loss(pred: &[f64], target: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    check_sizes(pred, target)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (pos, neg) = focal_terms(p, gamma, alpha);
            t * pos + (1.0 - t) * neg
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Derivative of one pixel's focal term with respect to the prediction.
pub(crate) fn focal_grad(p: f64, t: f64, gamma: f64, alpha: f64) -> f64 {
    if !(EPS..=1.0 - EPS).contains(&p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let dpos = if gamma == 0.0 {
        -alpha / p
    } else {
        alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p)
    };
    let dneg = if gamma == 0.0 {
        (1.0 - alpha) / q
    } else {
        -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q)
    };
    t * dpos + (1.0 - t) * dneg
}

/// `1 - (2·Σpt + s) / (Σp + Σt + s)`.
pub fn dice_loss(pred: &[f64], target: &[f64], smooth: f64) -> Result<f64> {
    check_sizes(pred, target)?;
    let inter = tensor::dot(pred, target);
    let denom = pred.iter().sum::<f64>() + target.iter().sum::<f64>() + smooth;
    Ok(1.0 - (2.0 * inter + smooth) / denom)
}

/// `λ_focal·focal + λ_dice·dice` on a pixel-resolution map.
pub fn seg_loss(pred: &[f64], target: &[f64], cfg: &LossConfig) -> Result<f64> {
    let focal = focal_loss(pred, target, cfg.focal_gamma, cfg.focal_alpha)?;
    let dice = dice_loss(pred, target, cfg.dice_smooth)?;
    Ok(cfg.lambda_focal * focal + cfg.lambda_dice * dice)
}

/// Cross-entropy of the two-way softmax `(normal/τ, abnormal/τ)`.
pub fn two_way_cross_entropy(normal: f64, abnormal: f64, temperature: f64, label: bool) -> f64 {
    let (zn, za) = (normal / temperature, abnormal / temperature);
    let m = zn.max(za);
    let lse = m + ((zn - m).exp() + (za - m).exp()).ln();
    lse - if label { za } else { zn }
}

/// Image classification loss of the final class token against the unfused
/// final-group text anchor `(normal, abnormal)`.
pub fn cls_loss(v_cls: &[f64], anchor: (&[f64], &[f64]), temperature: f64, label: bool) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    if v_cls.len() != anchor.0.len() || v_cls.len() != anchor.1.len() {
        return Err(Error::shape("class token and anchors differ in width"));
    }
    let sn = tensor::cosine_sim(v_cls, anchor.0).value;
    let sa = tensor::cosine_sim(v_cls, anchor.1).value;
    Ok(two_way_cross_entropy(sn, sa, temperature, label))
}

pub fn total_loss(seg: f64, cls: f64, cfg: &LossConfig) -> Result<f64> {
    if !seg.is_finite() || !cls.is_finite() {
        return Err(Error::Training {
            step: 0,
            message: format!("non-finite loss components (seg {seg}, cls {cls})"),
            snapshot: None,
        });
    }
    Ok(seg + cfg.lambda_cls * cls)
}

/// Mean of the abnormal-class probability and the map's peak.
pub fn image_score(p_abnormal: f64, m_seg: &[f64]) -> f64 {
    let peak = m_seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (p_abnormal + peak)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_near_perfect() {
        let target = [1.0, 0.0, 1.0, 0.0];
        let pred = [0.9999, 0.0001, 0.9999, 0.0001];
        assert!(focal_loss(&pred, &target, 2.0, 0.25).unwrap() < 1e-3);
    }

    #[test]
    fn focal_single_pixel() {
        let l = focal_loss(&[0.5], &[1.0], 2.0, 0.25).unwrap();
        let want = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((l - want).abs() < 1e-15);
    }

    #[test]
    fn focal_clamps_extremes() {
        let l = focal_loss(&[0.0, 1.0], &[1.0, 0.0], 2.0, 0.25).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert_eq!(focal_grad(0.0, 1.0, 2.0, 0.25), 0.0);
    }

    #[test]
    fn dice_cases() {
        let t = [1.0, 0.0, 1.0, 1.0];
        assert!(dice_loss(&t, &t, 1e-9).unwrap().abs() < 1e-9);
        let l = dice_loss(&[0.0; 4], &[1.0; 4], 1e-12).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        let s = 1.0;
        let l = dice_loss(&[0.5, 0.5], &[1.0, 0.0], s).unwrap();
        assert!((l - (1.0 - (2.0 * 0.5 + s) / (1.0 + 1.0 + s))).abs() < 1e-15);
    }

    #[test]
    fn seg_switches() {
        let p = [0.2, 0.7, 0.4];
        let t = [0.0, 1.0, 1.0];
        let mut cfg = LossConfig {
            lambda_focal: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(seg_loss(&p, &t, &cfg).unwrap(), dice_loss(&p, &t, 1.0).unwrap());
        cfg.lambda_focal = 1.0;
        cfg.lambda_dice = 0.0;
        assert_eq!(seg_loss(&p, &t, &cfg).unwrap(), focal_loss(&p, &t, 2.0, 0.25).unwrap());
        assert!(seg_loss(&p, &t[..2], &cfg).is_err());
    }

    #[test]
    fn cls_cases() {
        let tn = [1.0, 0.0];
        let ta = [0.0, 1.0];
        let v = [1.0, 1.0];
        let l = cls_loss(&v, (&tn, &ta), 0.07, true).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        // mpmath: -ln(sigmoid(1))
        let l = cls_loss(&ta, (&tn, &ta), 1.0, true).unwrap();
        assert!((l - 0.313_261_687_518_222_834_05).abs() < 1e-15);

        let v = [0.3, -0.8];
        let a = cls_loss(&v, (&tn, &ta), 0.5, true).unwrap();
        let b = cls_loss(&v, (&ta, &tn), 0.5, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn total_cases() {
        let cfg = LossConfig {
            lambda_cls: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(total_loss(0.3, 0.7, &cfg).unwrap(), 0.3);
        assert_eq!(total_loss(0.3, 0.7, &LossConfig::default()).unwrap(), 1.0);
        assert!(matches!(
            total_loss(f64::NAN, 0.1, &cfg),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn score_cases() {
        assert_eq!(image_score(1.0, &[0.2, 1.0]), 1.0);
        assert!(image_score(0.0, &[1e-12]) < 1e-11);
        assert!((image_score(0.6, &[0.1, 0.8, 0.3]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            dice_smooth: 0.0,
            focal_alpha: 1.5,
            ..LossConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("dice_smooth") && msg.contains("focal_alpha"));
    }
}
