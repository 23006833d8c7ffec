//! Slow, independent reference implementations used by the self-test and the
//! test suites. None of these go through the tape.

use crate::conv_lora::ConvLoraAdapter;
use crate::dfg::GatingMlp;
use crate::losses::LossConfig;
use crate::params::ParamStore;

/// Zero-padded "same" convolution written as six nested loops.
/// `x` is `cin x h x w`, `kernel` is `cout x cin x k x k`.
pub fn conv2d_naive(x: &[f64], cin: usize, h: usize, w: usize, kernel: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for i in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            let sx = xx as isize + dx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += kernel[((o * cin + i) * k + dy) * k + dx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `ΔX` of one sample (`L x C`, row-major) through an adapter, by explicit
/// composition of matrix products, reshapes and naive convolutions.
pub fn conv_lora_delta(adapter: &ConvLoraAdapter, store: &ParamStore, x: &[f64], (h, w): (usize, usize)) -> Vec<f64> {
    let (c, r, l) = (adapter.channels, adapter.rank, h * w);
    let wd = &store.get(adapter.w_down).data;
    let wu = &store.get(adapter.w_up).data;
    let mut branch_outs = Vec::new();
    for br in &adapter.branches {
        let k = br.kernel;
        let low = transpose(&matmul(x, wd, l, c, r), l, r);
        let mid: Vec<f64> = conv2d_naive(&low, r, h, w, &store.get(br.conv_down).data, r, k)
            .iter()
            .map(|v| v / k as f64)
            .collect();
        let refined: Vec<f64> = conv2d_naive(&mid, r, h, w, &store.get(br.conv_up).data, r, k)
            .iter()
            .map(|v| v / k as f64)
            .collect();
        branch_outs.push(matmul(&transpose(&refined, r, l), wu, l, r, c));
    }
    let nb = branch_outs.len();
    // channel concatenation in branch order, then a 1x1 conv
    let mut cat = vec![0.0; nb * c * l];
    for (bi, out) in branch_outs.iter().enumerate() {
        for p in 0..l {
            for ch in 0..c {
                cat[(bi * c + ch) * l + p] = out[p * c + ch];
            }
        }
    }
    let fused = conv2d_naive(&cat, nb * c, h, w, &store.get(adapter.fuse).data, c, 1);
    transpose(&fused, c, l)
}

fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (d / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Gate softmax weights of one level and state.
pub fn gate_weights(gate: &GatingMlp, store: &ParamStore, state: usize, v: &[f64], channels: usize) -> Vec<f64> {
    let l = v.len() / channels;
    let global: Vec<f64> = (0..channels).map(|c| (0..l).map(|i| v[i * channels + c]).sum::<f64>() / l as f64).collect();
    let hid: Vec<f64> = matmul(&global, &store.get(gate.w1[state]).data, 1, channels, gate.hidden)
        .into_iter()
        .map(f64::tanh)
        .collect();
    softmax(&matmul(&hid, &store.get(gate.w2[state]).data, 1, gate.hidden, gate.levels), 1.0)
}

/// Aggregated grid map from visual levels and text features, with either the
/// gate (`Some`) or one-hot fusion (`None`).
pub fn gateway_map(
    gate: Option<&GatingMlp>,
    store: &ParamStore,
    v: &[Vec<f64>],
    text: &[[Vec<f64>; 2]],
    channels: usize,
    tau: f64,
) -> Vec<f64> {
    let n = v.len();
    let l = v[0].len() / channels;
    let mut agg = vec![0.0; l];
    for (i, vi) in v.iter().enumerate() {
        let desc: Vec<Vec<f64>> = (0..2)
            .map(|s| {
                let w: Vec<f64> = match gate {
                    Some(g) => gate_weights(g, store, s, vi, channels),
                    None => (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect(),
                };
                (0..channels).map(|c| (0..n).map(|j| w[j] * text[j][s][c]).sum()).collect()
            })
            .collect();
        for p in 0..l {
            let row = &vi[p * channels..(p + 1) * channels];
            let pr = softmax(&[cosine(row, &desc[0]), cosine(row, &desc[1])], tau);
            agg[p] += pr[1];
        }
    }
    agg.iter().map(|x| x / n as f64).collect()
}

/// `λ_f·focal + λ_d·dice` written directly from the definitions.
pub fn seg_loss(pred: &[f64], target: &[f64], cfg: &LossConfig) -> f64 {
    let eps = 1e-7;
    let (g, a) = (cfg.focal_gamma, cfg.focal_alpha);
    let mut focal = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let p = p.clamp(eps, 1.0 - eps);
        focal += -t * a * (1.0 - p).powf(g) * p.ln() - (1.0 - t) * (1.0 - a) * p.powf(g) * (1.0 - p).ln();
    }
    focal /= pred.len() as f64;
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: f64 = pred.iter().sum();
    let st: f64 = target.iter().sum();
    let dice = 1.0 - (2.0 * inter + cfg.dice_smooth) / (sp + st + cfg.dice_smooth);
    cfg.lambda_focal * focal + cfg.lambda_dice * dice
}

/// Mann-Whitney statistic over all positive/negative pairs.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut u = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
        }
        if !li {
            continue;
        }
        let mut wins = 0usize;
        let mut ties = 0usize;
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1;
            } else if scores[i] == scores[j] {
                ties += 1;
            }
        }
        u += wins as f64 + 0.5 * ties as f64;
    }
    u / (np as f64 * nn as f64)
}

/// Average precision by rescanning every sample at every distinct threshold.
pub fn average_precision_thresholds(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count();
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev = 0usize;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, &l)| **s >= t && l).count();
        let fp = scores.iter().zip(labels).filter(|(s, &l)| **s >= t && !l).count();
        if tp > prev {
            ap += (tp as f64 / (tp + fp) as f64) * ((tp - prev) as f64 / p as f64);
        }
        prev = tp;
    }
    ap
}
